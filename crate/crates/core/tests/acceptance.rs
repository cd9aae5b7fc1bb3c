//! Acceptance run: ten criteria, one PASS/FAIL line each. Runs the full
//! default-config training sweep over three seeds, so it takes a while.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use flam_core::autodiff::{fd_check_many, Tensor, Var};
use flam_core::embedder::{dual_triplet_loss, pseudo_label_embeddings, triplet_hinge, Embedder, TrainedEmbedder};
use flam_core::manipulator::{
    cycle_term, d_adv_loss, g_adv_loss, load_manipulator, match_mask, matching_term, save_manipulator,
    DiscriminatorVars, Discriminator, FeatureGenerator, Generator, GeneratorVars, LabelMode, MatchMode,
    TrainedManipulator, VARIANTS,
};
use flam_core::nn::{LinearVars, MlpVars};
use flam_core::pipeline::{
    embedder_set, evaluate_generators, make_split, stage_evaluate, stage_gen_data, stage_train_embedders,
    stage_train_manipulator, train_embedders, train_manipulators, Manifest, MANIFEST_FILE,
};
use flam_core::retrieval::{
    build_index, draw_targets, intra_inter, manipulate_query, recall_at_k, top_k_accuracy, EvalReport,
    RetrievalIndex,
};
use flam_core::synthdata::{generate, split, Dataset, Split, SplitFractions};
use flam_core::{AttributeSchema, EmbedderSet, GenConfig, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const SLACK: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct VariantRun {
    variant: String,
    proxy: f64,
    t10: f64,
    report: EvalReport,
    trained: Vec<TrainedManipulator>,
    elapsed: Duration,
}

struct SeedRun {
    seed: u64,
    split: Split,
    embedders: Vec<TrainedEmbedder>,
    set: EmbedderSet,
    embed_time: Duration,
    variants: Vec<VariantRun>,
}

fn generators(trained: &[TrainedManipulator]) -> Vec<(String, Generator)> {
    trained
        .iter()
        .map(|t| (t.manipulator.target_attr.clone(), t.manipulator.generator.clone()))
        .collect()
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let split = make_split(&cfg).expect("split");
    let t = Instant::now();
    let embedders = train_embedders(&split.train, &cfg).expect("embedders");
    let embed_time = t.elapsed();
    let set = embedder_set(&embedders);
    let variants = VARIANTS
        .iter()
        .map(|v| {
            let t = Instant::now();
            let trained = train_manipulators(&split.train, &set, &cfg, Some(v)).expect("manipulators");
            let report =
                evaluate_generators(&split.train, &split.query, &split.gallery, &set, &generators(&trained), &cfg)
                    .expect("evaluate");
            let proxy = trained.iter().map(|m| m.log.final_proxy()).sum::<f64>() / trained.len() as f64;
            VariantRun {
                variant: v.to_string(),
                proxy,
                t10: report.t_at("All", 10).expect("T@10"),
                report,
                trained,
                elapsed: t.elapsed(),
            }
        })
        .collect();
    SeedRun {
        seed,
        split,
        embedders,
        set,
        embed_time,
        variants,
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[rows, cols], 1.0, r);
    t.normalize_rows();
    t
}

fn mlp_vars(vars: &[Var]) -> MlpVars {
    MlpVars {
        layers: vars
            .chunks(2)
            .map(|c| LinearVars {
                weight: c[0],
                bias: c[1],
            })
            .collect(),
    }
}

fn disc_vars(vars: &[Var]) -> DiscriminatorVars {
    let n = vars.len();
    DiscriminatorVars {
        trunk: mlp_vars(&vars[..n - 4]),
        rf: LinearVars {
            weight: vars[n - 4],
            bias: vars[n - 3],
        },
        fm: LinearVars {
            weight: vars[n - 2],
            bias: vars[n - 1],
        },
    }
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt())
}

/// Hinge argument of `(f, p, n)`; points within `1e-3` of zero count as kinks.
fn hinge_arg(f: &[f64], p: &[f64], n: &[f64], mu: f64) -> f64 {
    (1.0 - cos(f, p)) - (1.0 - cos(f, n)) + mu
}

const POINTS: u64 = 20;
const H: f64 = 1e-5;

fn gradient_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, errs: Vec<f64>| out.push((name, errs.into_iter().fold(0.0, f64::max)));

    // single triplet hinge, gradients w.r.t. all three vectors
    let mut errs = Vec::new();
    let mut s = 0;
    while errs.len() < POINTS as usize {
        let mut r = rng(1000 + s);
        s += 1;
        let v: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 6], 1.0, &mut r)).collect();
        let mu = r.random_range(0.0..1.0);
        if hinge_arg(v[0].data(), v[1].data(), v[2].data(), mu).abs() < 1e-3 {
            continue;
        }
        errs.push(fd_check_many(|g, x| triplet_hinge(g, x[0], x[1], x[2], mu), &v, H).unwrap());
    }
    worst("triplet", errs);

    // dual embedder loss, gradients w.r.t. embedder weights and dictionary
    let mut errs = Vec::new();
    let mut s = 0;
    while errs.len() < POINTS as usize {
        let mut r = rng(2000 + s);
        s += 1;
        let emb = Embedder::new("a", 5, 3, &mut r);
        let dict = flam_core::Dictionary::new("a", 4, 3, &mut r);
        let x = unit_rows(4, 5, &mut r);
        let classes = [0, 1, 2, 3];
        let triples = [(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)];
        let mu = r.random_range(0.0..1.5);
        let e = emb.embed_matrix(&x).unwrap();
        let kink = triples.iter().any(|&(a, p, n)| {
            let row = |i: usize| e.row_slice(i).to_vec();
            let d = |c: usize| dict.vectors.row_slice(classes[c]).to_vec();
            hinge_arg(&d(a), &row(p), &row(n), mu).abs() < 1e-3
                || hinge_arg(&row(a), &d(a), &d(n), mu).abs() < 1e-3
        });
        if kink {
            continue;
        }
        let mut points: Vec<Tensor> = emb.mlp.params().into_iter().cloned().collect();
        points.push(dict.vectors.clone());
        let err = fd_check_many(
            |g, vars| {
                let xv = g.constant(x.clone());
                let ev = Embedder::forward_bound(&mlp_vars(&vars[..4]), g, xv)?;
                dual_triplet_loss(g, ev, vars[4], &classes, &triples, mu)
            },
            &points,
            H,
        )
        .unwrap();
        errs.push(err);
    }
    worst("dual triplet", errs);

    let (dim, k, n, hidden) = (5, 2, 3, 6);
    let mut d_adv = Vec::new();
    let mut g_adv = Vec::new();
    let mut d_match = [Vec::new(), Vec::new()];
    let mut g_match = [Vec::new(), Vec::new()];
    let mut cycle = Vec::new();
    for s in 0..POINTS {
        let mut r = rng(3000 + s);
        let gen = Generator::init(dim, k, hidden, &mut r);
        let disc = Discriminator::init(dim, hidden, n * k, &mut r);
        let x = unit_rows(3, dim, &mut r);
        let fake = unit_rows(3, dim, &mut r);
        let e = unit_rows(3, k, &mut r);
        let em = unit_rows(3, k, &mut r);
        let target = unit_rows(3, n * k, &mut r);
        let dp: Vec<Tensor> = disc.params().into_iter().cloned().collect();
        let gp: Vec<Tensor> = gen.mlp.params().into_iter().cloned().collect();

        d_adv.push(
            fd_check_many(
                |g, v| {
                    let dv = disc_vars(v);
                    let (a, b) = (g.constant(x.clone()), g.constant(fake.clone()));
                    let (rl, _) = dv.forward(g, a)?;
                    let (fl, _) = dv.forward(g, b)?;
                    Ok(d_adv_loss(g, rl, fl))
                },
                &dp,
                H,
            )
            .unwrap(),
        );
        g_adv.push(
            fd_check_many(
                |g, v| {
                    let gv = GeneratorVars { mlp: mlp_vars(v) };
                    let dv = disc.bind(g, false);
                    let (xv, ev) = (g.constant(x.clone()), g.constant(em.clone()));
                    let xt = gv.forward(g, xv, ev)?;
                    let (fl, _) = dv.forward(g, xt)?;
                    Ok(g_adv_loss(g, fl))
                },
                &gp,
                H,
            )
            .unwrap(),
        );
        for (m, mode) in [MatchMode::M, MatchMode::S].into_iter().enumerate() {
            let mask = match_mask(mode, n, k);
            d_match[m].push(
                fd_check_many(
                    |g, v| {
                        let dv = disc_vars(v);
                        let a = g.constant(x.clone());
                        let (_, f) = dv.forward(g, a)?;
                        let t = g.constant(target.clone());
                        matching_term(g, f, t, &mask)
                    },
                    &dp,
                    H,
                )
                .unwrap(),
            );
            g_match[m].push(
                fd_check_many(
                    |g, v| {
                        let gv = GeneratorVars { mlp: mlp_vars(v) };
                        let dv = disc.bind(g, false);
                        let (xv, ev) = (g.constant(x.clone()), g.constant(em.clone()));
                        let xt = gv.forward(g, xv, ev)?;
                        let (_, f) = dv.forward(g, xt)?;
                        let t = g.constant(target.clone());
                        matching_term(g, f, t, &mask)
                    },
                    &gp,
                    H,
                )
                .unwrap(),
            );
        }
        cycle.push(
            fd_check_many(
                |g, v| {
                    let gv = GeneratorVars { mlp: mlp_vars(v) };
                    let (xv, ev, emv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(em.clone()));
                    let xt = gv.forward(g, xv, emv)?;
                    let xh = gv.forward(g, xt, ev)?;
                    cycle_term(g, xv, xh)
                },
                &gp,
                H,
            )
            .unwrap(),
        );
    }
    let [dm, ds] = d_match;
    let [gm, gs] = g_match;
    worst("adversarial (D)", d_adv);
    worst("adversarial (G)", g_adv);
    worst("matching M (D)", dm);
    worst("matching S (D)", ds);
    worst("matching M (G)", gm);
    worst("matching S (G)", gs);
    worst("cycle", cycle);
    out
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let checks = gradient_checks();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !(c.1 < 1e-4))
        .map(|c| format!("{} {:.2e}", c.0, c.1))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 60.0,
        format!(
            "{} losses x {POINTS} points, worst relative error {worst:.2e}{} in {secs:.1}s",
            checks.len(),
            if bad.is_empty() { String::new() } else { format!(" (failing: {})", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2-6, 9: training results

fn criterion_embedders(run: &SeedRun) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = run.embed_time < Duration::from_secs(300);
    for t in &run.embedders {
        let a = run.split.query.schema.index_of(&t.embedder.attr_type).unwrap();
        let emb = t.embedder.embed_dataset(&run.split.query).unwrap();
        let labels = run.split.query.labels_of(a);
        let pred = pseudo_label_embeddings(&t.dictionary, &emb);
        let acc = pred.iter().zip(&labels).filter(|(p, l)| Some(**p) == **l).count() as f64 / pred.len() as f64;
        let (intra, inter) = intra_inter(&emb, &labels);
        let gap = intra.unwrap_or(0.0) - inter.unwrap_or(0.0);
        pass &= acc >= 0.9 && gap >= 0.2;
        parts.push(format!("{} acc {acc:.3} gap {gap:.3}", t.embedder.attr_type));
    }
    outcome(pass, format!("{} in {:.1}s", parts.join(", "), run.embed_time.as_secs_f64()))
}

fn criterion_effectiveness(run: &SeedRun) -> Outcome {
    let v = &run.variants[0];
    let p = &v.report.probe_delta;
    let mut parts = Vec::new();
    let mut pass = p.average_delta > 0.0;
    for row in &p.rows {
        let a = p.attr_types.iter().position(|t| *t == row.manipulated_attr).unwrap();
        pass &= row.manipulated[a] > row.original[a];
        parts.push(format!("{} {:.3}->{:.3}", row.manipulated_attr, row.original[a], row.manipulated[a]));
    }
    let total = run.embed_time + v.elapsed;
    pass &= total < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "{}: target probe {}, avg diff {:+.3}, {:.1}s",
            v.variant,
            parts.join(", "),
            p.average_delta,
            total.as_secs_f64()
        ),
    )
}

fn criterion_preservation(run: &SeedRun) -> Outcome {
    let p = &run.variants[0].report.probe_delta;
    let mut worst: f64 = f64::NEG_INFINITY;
    for row in &p.rows {
        for (a, name) in p.attr_types.iter().enumerate() {
            if *name != row.manipulated_attr {
                worst = worst.max(row.original[a] - row.manipulated[a]);
            }
        }
    }
    outcome(worst <= 0.15, format!("largest remaining-attribute probe drop {worst:.3}"))
}

fn mean_t10(runs: &[SeedRun], variant: &str) -> f64 {
    runs.iter()
        .map(|r| r.variants.iter().find(|v| v.variant == variant).unwrap().t10)
        .sum::<f64>()
        / runs.len() as f64
}

fn criterion_ablation(runs: &[SeedRun], sweep_time: Duration) -> Outcome {
    let m: Vec<f64> = VARIANTS.iter().map(|v| mean_t10(runs, v)).collect();
    let (os_adv, adv, plain, s_adv) = (m[0], m[1], m[2], m[3]);
    let pass = os_adv >= adv - SLACK
        && adv >= plain - SLACK
        && os_adv >= s_adv - SLACK
        && sweep_time < Duration::from_secs(1800);
    let cells: Vec<String> = VARIANTS.iter().zip(&m).map(|(v, t)| format!("{v} {t:.3}")).collect();
    outcome(
        pass,
        format!("mean T@10 over {} seeds: {} ({:.0}s)", runs.len(), cells.join(", "), sweep_time.as_secs_f64()),
    )
}

fn criterion_proxy(runs: &[SeedRun]) -> Outcome {
    let argmax = |f: &dyn Fn(&VariantRun) -> f64, vs: &[VariantRun]| {
        vs.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if f(v) > best.1 { (i, f(v)) } else { best })
            .0
    };
    let mut agree = 0;
    let mut parts = Vec::new();
    for r in runs {
        let p = argmax(&|v| v.proxy, &r.variants);
        let t = argmax(&|v| v.t10, &r.variants);
        agree += usize::from(p == t);
        parts.push(format!(
            "seed {}: proxy {} / T@10 {}",
            r.seed, r.variants[p].variant, r.variants[t].variant
        ));
    }
    outcome(agree * 2 > runs.len(), format!("{agree}/{} agree; {}", runs.len(), parts.join("; ")))
}

fn criterion_semi_supervised(full: &SeedRun) -> Outcome {
    let cfg = RunConfig::default()
        .with_overrides(&["gen.label_density=0.1", "manipulator.label_mode=\"pseudo-labels\""])
        .unwrap();
    assert_eq!(cfg.manipulator.label_mode, LabelMode::PseudoLabels);
    let sp = make_split(&cfg).unwrap();
    let set = embedder_set(&train_embedders(&sp.train, &cfg).unwrap());
    let trained = train_manipulators(&sp.train, &set, &cfg, None).unwrap();
    let report = evaluate_generators(&sp.train, &sp.query, &sp.gallery, &set, &generators(&trained), &cfg).unwrap();
    let sparse = report.t_at("All", 10).unwrap();
    let dense = full.variants[0].t10;
    outcome(
        (dense - sparse).abs() <= 0.15,
        format!("T@10 fully labeled {dense:.3}, 10% labels + pseudo-labels {sparse:.3}"),
    )
}

// ---------------------------------------------------------------------------
// 7. instance retrieval untouched

fn recall_bits(index: &RetrievalIndex, queries: &Dataset) -> Vec<u64> {
    [1, 5, 10, 20, 50]
        .iter()
        .map(|&k| recall_at_k(index, queries, k).unwrap().recall.to_bits())
        .collect()
}

fn criterion_fir(run: &SeedRun) -> Outcome {
    let index = build_index(&run.split.gallery).unwrap();
    let before = recall_bits(&index, &run.split.query);
    let bytes = index.to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for t in &run.variants[0].trained {
        let path = dir.path().join(format!("{}.flamgan", t.manipulator.target_attr));
        save_manipulator(&t.manipulator, None, &path).unwrap();
        loaded.push(load_manipulator(&path).unwrap());
    }
    // exercise the loaded generators on the same queries
    let x = run.split.query.feature_matrix();
    for m in &loaded {
        let dict = run.set.dictionary(&m.target_attr).unwrap();
        let e = Tensor::from_rows(&vec![dict.lookup(0).unwrap().to_vec(); x.rows()]).unwrap();
        m.generator.generate_matrix(&x, &e).unwrap();
    }
    let after = recall_bits(&build_index(&run.split.gallery).unwrap(), &run.split.query);
    let same = before == after && bytes == index.to_bytes();

    let gen = GenConfig {
        noise: 0.0,
        ..GenConfig::default()
    };
    let data = generate(&gen, &AttributeSchema::default(), 0).unwrap();
    let sp = split(&data, SplitFractions::default(), 0).unwrap();
    let r1 = recall_at_k(&build_index(&sp.gallery).unwrap(), &sp.query, 1).unwrap().recall;
    outcome(
        same && r1 == 1.0,
        format!(
            "R@k bit-identical around checkpoint load: {same}; R@1 at zero noise {r1} (R@1 default {:.4})",
            f64::from_bits(before[0])
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. metric oracles

fn full_rank(index: &RetrievalIndex, q: &[f64]) -> Vec<usize> {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(f64, usize)> = (0..index.len())
        .map(|i| {
            let r: Vec<f64> = index.row(i).iter().map(|&v| f64::from(v)).collect();
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (qn * rn), i)
        })
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, i)| i).collect()
}

fn criterion_oracles() -> Outcome {
    let schema = AttributeSchema::default();
    let ks = [1, 5, 10, 50];
    let mut checked = (0, 0, 0);
    let mut mismatches = Vec::new();
    for seed in 0..4u64 {
        let gen = GenConfig {
            instances: 450,
            ..GenConfig::default()
        };
        let data = generate(&gen, &schema, seed).unwrap();
        let sp = split(
            &data,
            SplitFractions {
                train: 0.0,
                query: 0.25,
                gallery: 0.75,
            },
            seed,
        )
        .unwrap();
        assert!(sp.gallery.len() <= 1000);
        let index = build_index(&sp.gallery).unwrap();
        let ranks: Vec<Vec<usize>> = sp
            .query
            .records
            .iter()
            .map(|r| full_rank(&index, &r.feature.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .collect();

        for (r, rank) in sp.query.records.iter().zip(&ranks) {
            let q: Vec<f64> = r.feature.iter().map(|&v| f64::from(v)).collect();
            for &k in &ks {
                let got: Vec<usize> = index.search(&q, k).unwrap().hits.iter().map(|h| h.position).collect();
                checked.0 += 1;
                if got != rank[..k] {
                    mismatches.push(format!("search seed {seed} k {k}"));
                }
            }
        }

        let present: HashSet<u64> = index.instance_ids.iter().copied().collect();
        for &k in &ks {
            let (mut hits, mut n) = (0, 0);
            for (r, rank) in sp.query.records.iter().zip(&ranks) {
                if present.contains(&r.instance_id) {
                    n += 1;
                    hits += usize::from(rank[..k].iter().any(|&p| index.instance_ids[p] == r.instance_id));
                }
            }
            checked.1 += 1;
            if recall_at_k(&index, &sp.query, k).unwrap().recall != hits as f64 / n as f64 {
                mismatches.push(format!("R@{k} seed {seed}"));
            }
        }

        let mut r = rng(seed);
        let g = Generator::init(64, 8, 32, &mut r);
        for (a, name) in schema.types.iter().enumerate() {
            let dict = flam_core::Dictionary::new(name, schema.class_counts[a], 8, &mut r);
            let rep = top_k_accuracy(&index, &sp.query, &g, &dict, name, &ks, seed).unwrap();
            let draws = draw_targets(&index, &sp.query, a, seed).unwrap();
            let mut hits = vec![0usize; ks.len()];
            for (i, d) in draws.iter().enumerate() {
                let x: Vec<f64> = sp.query.records[i].feature.iter().map(|&v| f64::from(v)).collect();
                let rank = full_rank(&index, &manipulate_query(&g, &dict, &x, d.target).unwrap());
                let mut want = sp.query.records[i].labels.clone();
                want[a] = Some(d.target);
                let first = rank.iter().position(|&p| index.labels[p] == want);
                for (h, &k) in hits.iter_mut().zip(&ks) {
                    *h += usize::from(first.is_some_and(|f| f < k));
                }
            }
            checked.2 += 1;
            if rep.hits != hits {
                mismatches.push(format!("T@k {name} seed {seed}"));
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "{} searches, {} R@k and {} T@k tables against full sorts; mismatches: {}",
            checked.0,
            checked.1,
            checked.2,
            if mismatches.is_empty() { "none".into() } else { mismatches.join(", ") }
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. determinism

fn stage_hashes(cfg: &RunConfig) -> Vec<(String, Vec<(String, String)>)> {
    stage_gen_data(cfg).unwrap();
    stage_train_embedders(cfg).unwrap();
    stage_train_manipulator(cfg).unwrap();
    stage_evaluate(cfg).unwrap();
    let m = Manifest::load_or_new(&cfg.out.join(MANIFEST_FILE)).unwrap();
    m.stages
        .into_iter()
        .map(|(name, rec)| (name, rec.artifacts.into_iter().map(|a| (a.path, a.sha256)).collect()))
        .collect()
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = |dir: &std::path::Path| RunConfig {
        out: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let first = stage_hashes(&cfg(a.path()));
    let second = stage_hashes(&cfg(b.path()));
    let files: usize = first.iter().map(|s| s.1.len()).sum();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty() && first.len() == 4,
        format!(
            "{} stages, {files} artifacts rerun on the default config; differing stages: {}",
            first.len(),
            if differing.is_empty() { "none".into() } else { differing.join(", ") }
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", criterion_gradients()));
    results.push((8, "metric oracles", criterion_oracles()));

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let sweep_time = t.elapsed();
    for r in &runs {
        for v in &r.variants {
            println!(
                "     seed {} {:<9} T@10 {:.3} proxy {:.4} ({:.0}s)",
                r.seed,
                v.variant,
                v.t10,
                v.proxy,
                v.elapsed.as_secs_f64()
            );
        }
    }
    results.push((2, "embedder quality", criterion_embedders(&runs[0])));
    results.push((3, "manipulation effectiveness", criterion_effectiveness(&runs[0])));
    results.push((4, "preservation", criterion_preservation(&runs[0])));
    results.push((5, "ablation ordering", criterion_ablation(&runs, sweep_time)));
    results.push((6, "convergence proxy", criterion_proxy(&runs)));
    results.push((7, "instance retrieval untouched", criterion_fir(&runs[0])));
    results.push((9, "semi-supervision", criterion_semi_supervised(&runs[0])));
    results.push((10, "determinism", criterion_determinism()));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
