use super::*;
use crate::autodiff::fd_check_many;
use crate::synthdata::{generate, AttributeSchema, GenConfig};
use proptest::prelude::*;

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

// independent re-statement of the hinge
fn hinge(f: &[f64], p: &[f64], n: &[f64], mu: f64) -> f64 {
    ((1.0 - cos(f, p)) - (1.0 - cos(f, n)) + mu).max(0.0)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn triplet_loss_examples() {
    let mu = 0.2;
    assert_eq!(triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], mu).unwrap(), 0.0);
    let same = triplet_loss(&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4], mu).unwrap();
    assert!((same - 0.2).abs() < 1e-12);
    let v = triplet_loss(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.1).unwrap();
    assert!((v - 1.1).abs() < 1e-9);
    assert!(triplet_loss(&[1.0], &[1.0, 0.0], &[1.0], mu).is_err());
}

proptest! {
    #[test]
    fn triplet_loss_is_nonnegative_and_scale_invariant(
        f in prop::collection::vec(-1.0f64..1.0, 4),
        p in prop::collection::vec(-1.0f64..1.0, 4),
        n in prop::collection::vec(-1.0f64..1.0, 4),
        s in 0.1f64..10.0,
        mu in 0.0f64..1.0,
    ) {
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assume!(norm(&f) > 1e-3 && norm(&p) > 1e-3 && norm(&n) > 1e-3);
        let base = triplet_loss(&f, &p, &n, mu).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - hinge(&f, &p, &n, mu)).abs() < 1e-9);
        let fs: Vec<f64> = f.iter().map(|v| v * s).collect();
        let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
        prop_assert!((triplet_loss(&fs, &p, &n, mu).unwrap() - base).abs() < 1e-9);
        prop_assert!((triplet_loss(&f, &ps, &n, mu).unwrap() - base).abs() < 1e-9);
        prop_assert!((triplet_loss(&f, &p, &n, mu).unwrap()
            - triplet_loss(&f, &p, &n.iter().map(|v| v * s).collect::<Vec<_>>(), mu).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn triplet_batch_validates_classes() {
    let x = Tensor::zeros(&[3, 2]);
    assert!(TripletBatch::new(x.clone(), vec![0, 0, 1], vec![(0, 1, 2)]).is_ok());
    assert!(TripletBatch::new(x.clone(), vec![0, 1, 1], vec![(0, 1, 2)]).is_err());
    assert!(TripletBatch::new(x.clone(), vec![0, 0, 0], vec![(0, 1, 2)]).is_err());
    assert!(TripletBatch::new(x, vec![0, 0, 1], vec![(0, 1, 5)]).is_err());
}

#[test]
fn unlabeled_record_in_batch_is_a_contract_error() {
    let ds = generate(&GenConfig { instances: 20, ..GenConfig::default() }, &AttributeSchema::default(), 0)
        .unwrap()
        .with_label_density(0.0, 1)
        .unwrap();
    let err = TripletBatch::from_records(&ds, 0, &[0, 1, 2], vec![]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

fn small_pair(dim: usize, k: usize, classes: usize, seed: u64) -> (Embedder, Dictionary) {
    let mut r = rng(seed);
    (Embedder::new("color", dim, k, &mut r), Dictionary::new("color", classes, k, &mut r))
}

#[test]
fn embed_is_unit_norm_and_deterministic() {
    let (e, _) = small_pair(6, 4, 3, 0);
    let x = [0.1, -0.3, 0.5, 0.2, 0.0, 0.9];
    let a = e.embed(&x).unwrap();
    assert_eq!(a.len(), 4);
    assert!((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    assert_eq!(a, e.embed(&x).unwrap());
    assert!(matches!(e.embed(&[1.0, 2.0]), Err(Error::Contract(_))));
}

#[test]
fn perfect_embeddings_give_zero_loss() {
    // dictionary rows orthogonal, each sample embedding equal to its row
    let mut g = Graph::new();
    let dict = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
    let emb = g.constant(
        Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
    );
    let l = dual_triplet_loss(&mut g, emb, dict, &[0, 0, 1], &[(0, 1, 2), (2, 2, 0)], 0.5).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

#[test]
fn single_triple_equals_two_hinges() {
    let (emb, dict) = small_pair(5, 3, 4, 7);
    let mut r = rng(8);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| Tensor::randn(&[1, 5], 1.0, &mut r).into_data())
        .collect();
    let batch = TripletBatch::from_lists(
        &[(rows[0].clone(), 2)],
        &[(rows[1].clone(), 2)],
        &[(rows[2].clone(), 0)],
    )
    .unwrap();
    let got = embedder_loss(&batch, &emb, &dict, 0.3).unwrap();
    let (e, ep, en) = (
        emb.embed(&rows[0]).unwrap(),
        emb.embed(&rows[1]).unwrap(),
        emb.embed(&rows[2]).unwrap(),
    );
    let (dp, dn) = (dict.lookup(2).unwrap(), dict.lookup(0).unwrap());
    let want = triplet_loss(dp, &ep, &en, 0.3).unwrap() + triplet_loss(&e, dp, dn, 0.3).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn random_batch_matches_termwise_oracle() {
    let (emb, dict) = small_pair(6, 4, 3, 11);
    let mut r = rng(12);
    let features = Tensor::randn(&[6, 6], 1.0, &mut r);
    let classes = vec![0, 0, 1, 1, 2, 2];
    let triples = vec![(0, 1, 2), (2, 3, 5), (4, 5, 0), (1, 0, 3)];
    let batch = TripletBatch::new(features.clone(), classes.clone(), triples.clone()).unwrap();
    let got = embedder_loss(&batch, &emb, &dict, 0.4).unwrap();
    let e: Vec<Vec<f64>> = (0..6).map(|i| emb.embed(features.row_slice(i)).unwrap()).collect();
    let d = |c: usize| dict.vectors.row_slice(c).to_vec();
    let want = triples
        .iter()
        .map(|&(a, p, n)| {
            hinge(&d(classes[a]), &e[p], &e[n], 0.4) + hinge(&e[a], &d(classes[a]), &d(classes[n]), 0.4)
        })
        .sum::<f64>()
        / triples.len() as f64;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn embedder_loss_gradient_matches_finite_differences() {
    let (emb, dict) = small_pair(4, 3, 3, 21);
    let mut r = rng(22);
    let features = Tensor::randn(&[4, 4], 1.0, &mut r);
    let classes = [0, 0, 1, 2];
    let triples = [(0, 1, 2), (1, 0, 3), (2, 2, 0)];
    let mut points: Vec<Tensor> = emb.mlp.params().into_iter().cloned().collect();
    points.push(dict.vectors.clone());
    let err = fd_check_many(
        |g, vars| {
            let layers = vars[..4]
                .chunks(2)
                .map(|c| crate::nn::LinearVars { weight: c[0], bias: c[1] })
                .collect();
            let mv = MlpVars { layers };
            let x = g.constant(features.clone());
            let e = Embedder::forward_bound(&mv, g, x)?;
            // large margin keeps every hinge away from its kink
            dual_triplet_loss(g, e, vars[4], &classes, &triples, 5.0)
        },
        &points,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn lookup_and_pseudo_label() {
    let (_, dict) = small_pair(4, 3, 5, 3);
    assert!(matches!(dict.lookup(5), Err(Error::Contract(_))));
    assert_eq!(dictionary_lookup(&dict, 0).unwrap(), dict.vectors.row_slice(0));
    let row3 = dict.lookup(3).unwrap().to_vec();
    assert_eq!(nearest_class(&dict, &row3), 3);
    let scaled: Vec<f64> = row3.iter().map(|v| v * 4.5).collect();
    assert_eq!(nearest_class(&dict, &scaled), 3);

    let tied = Dictionary {
        attr_type: "c".into(),
        vectors: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(),
    };
    assert_eq!(nearest_class(&tied, &[0.0, 1.0]), 1);
    assert_eq!(nearest_class(&tied, &[1.0, 1.0]), 0);
}

fn tiny_data(seed: u64) -> Dataset {
    let schema = AttributeSchema::new(
        vec!["shape".into(), "color".into()],
        vec![4, 4],
    )
    .unwrap();
    let cfg = GenConfig {
        dim: 16,
        instances: 200,
        signal: vec![1.0, 1.0],
        ..GenConfig::default()
    };
    generate(&cfg, &schema, seed).unwrap()
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = tiny_data(0);
    let cfg = EmbedderConfig { k: 4, epochs: 0, ..EmbedderConfig::default() };
    let t = train_embedder(&ds, "color", &cfg).unwrap();
    assert!(t.log.epoch_loss.is_empty());
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Embedder::new("color", 16, 4, &mut r);
    assert_eq!(t.embedder, init);
}

#[test]
fn short_training_separates_classes_deterministically() {
    let all = tiny_data(1);
    let half = all.len() / 2;
    let ds = all.subset(&(0..half).collect::<Vec<_>>());
    let held = all.subset(&(half..all.len()).collect::<Vec<_>>());
    let cfg = EmbedderConfig { k: 8, epochs: 8, batch_size: 64, lr: 5e-3, ..EmbedderConfig::default() };
    let a = train_embedder(&ds, "color", &cfg).unwrap();
    let b = train_embedder(&ds, "color", &cfg).unwrap();
    assert_eq!(a.embedder, b.embedder);
    assert_eq!(a.dictionary, b.dictionary);
    assert_eq!(a.log, b.log);
    for r in 0..a.dictionary.class_count() {
        let n: f64 = a.dictionary.vectors.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let first = a.log.epoch_loss[0];
    let last = *a.log.epoch_loss.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");

    let emb = a.embedder.embed_dataset(&held).unwrap();
    let pred = pseudo_label_embeddings(&a.dictionary, &emb);
    let correct = pred
        .iter()
        .zip(held.labels_of(1))
        .filter(|(p, l)| Some(**p) == *l)
        .count();
    assert!(correct as f64 / held.len() as f64 > 0.9, "accuracy {correct}/{}", held.len());
}

#[test]
fn too_few_labeled_classes_is_a_training_error() {
    let mut ds = tiny_data(3);
    for r in &mut ds.records {
        r.labels[1] = r.labels[1].filter(|c| *c == 0);
    }
    let err = train_embedder(&ds, "color", &EmbedderConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Training(_)));
}

#[test]
fn checkpoint_round_trips_through_f32() {
    let ds = tiny_data(4);
    let cfg = EmbedderConfig { k: 4, epochs: 1, ..EmbedderConfig::default() };
    let t = train_embedder(&ds, "shape", &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shape.flamemb");
    save_embedder(&t.embedder, &t.dictionary, Some(&t.log), &path).unwrap();
    let (e, d) = load_embedder(&path).unwrap();
    assert_eq!(e.attr_type, "shape");
    assert_eq!(e.mlp.layer_shapes(), t.embedder.mlp.layer_shapes());
    for (a, b) in e.mlp.params().iter().zip(t.embedder.mlp.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, f64::from(*y as f32));
        }
    }
    assert_eq!(d.vectors.shape(), t.dictionary.vectors.shape());
    let log: EmbedderLog = serde_json::from_slice(&std::fs::read(log_path(&path)).unwrap()).unwrap();
    assert_eq!(log, t.log);

    // resaving the loaded pair is byte-stable
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(write_embedder(&e, &d).unwrap(), bytes);
    assert_eq!(&bytes[..7], b"FLAMEMB");
    let mut bad = bytes.clone();
    bad[7] = 9;
    assert!(matches!(read_embedder(&bad), Err(Error::Format { offset: 7, .. })));
    assert!(matches!(read_embedder(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
}
