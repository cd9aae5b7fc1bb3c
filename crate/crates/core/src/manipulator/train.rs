use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    concat_cols, cycle_term, d_adv_loss, g_adv_loss, match_mask, matching_term, online_sample,
    proxy_with_embeddings, Discriminator, Generator, LabelMode, ManipConfig, Manipulator, Sampling,
};
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::embedder::{nearest_class, EmbedderSet};
use crate::error::{Error, Result};
use crate::nn::collect_grads;
use crate::synthdata::Dataset;

/// Batch-averaged, unweighted loss terms for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_adv: f64,
    pub d_match: f64,
    pub g_adv: f64,
    pub g_match: f64,
    pub cycle: f64,
    pub convergence_proxy: f64,
    /// Records left unpaired because their batch had no other class.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipLog {
    pub variant: String,
    pub config: ManipConfig,
    /// Proxy of the untrained generator.
    pub initial_proxy: f64,
    pub epochs: Vec<EpochLog>,
}

impl ManipLog {
    pub fn final_proxy(&self) -> f64 {
        self.epochs.last().map_or(self.initial_proxy, |e| e.convergence_proxy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedManipulator {
    pub manipulator: Manipulator,
    pub log: ManipLog,
}

/// Precomputed frozen-teacher state shared by every batch.
struct Teachers {
    features: Tensor,
    /// `[N, k]` per attribute, target first.
    embeddings: Vec<Tensor>,
}

impl Teachers {
    fn rows(&self, attr: usize, idx: &[usize]) -> Tensor {
        self.embeddings[attr].select_rows(idx)
    }

    /// Target block from `first`, remaining blocks from `rest`.
    fn target(&self, first: &[usize], rest: &[usize]) -> Result<Tensor> {
        let blocks: Vec<Tensor> = (0..self.embeddings.len())
            .map(|a| self.rows(a, if a == 0 { first } else { rest }))
            .collect();
        concat_cols(&blocks)
    }
}

fn partner<R: rand::Rng>(
    sampling: Sampling,
    remaining: &[&Tensor],
    classes: &[usize],
    i: usize,
    rng: &mut R,
) -> Option<usize> {
    match sampling {
        Sampling::Online => online_sample(remaining, classes, i),
        Sampling::Uniform => {
            let eligible: Vec<usize> = (0..classes.len()).filter(|&j| classes[j] != classes[i]).collect();
            eligible.choose(rng).copied()
        }
    }
}

struct StepTerms {
    d_adv: f64,
    d_match: f64,
    g_adv: f64,
    g_match: f64,
    cycle: f64,
}

fn add_weighted(g: &mut Graph, acc: Option<Var>, term: Var, w: f64) -> Result<Option<Var>> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = g.scale(term, w);
    Ok(Some(match acc {
        Some(a) => g.add(a, t)?,
        None => t,
    }))
}

/// Adversarial, feature-matching and cycle training of `G` and `D` with the
/// embedders in `embedders` frozen. One D step, then one G step, per batch.
pub fn train_manipulator(
    train: &Dataset,
    embedders: &EmbedderSet,
    config: &ManipConfig,
) -> Result<TrainedManipulator> {
    config.validate(&train.schema)?;
    let attrs = config.attr_order();
    let dim = train.dim();
    let k = embedders.embedder(attrs[0])?.k();
    for a in &attrs {
        let e = embedders.embedder(a)?;
        if e.k() != k || e.input_dim() != dim {
            return Err(Error::Config(format!(
                "{a} embedder has shape ({}, {}), expected ({dim}, {k})",
                e.input_dim(),
                e.k()
            )));
        }
    }
    let features = train.feature_matrix();
    let embeddings = attrs
        .iter()
        .map(|a| embedders.embedder(a)?.embed_matrix(&features))
        .collect::<Result<Vec<_>>>()?;
    let teachers = Teachers { features, embeddings };

    let target_idx = train.schema.index_of(&config.target_attr)?;
    let target_dict = embedders.dictionary(&config.target_attr)?;
    let mut usable = Vec::new();
    let mut class_of = vec![usize::MAX; train.len()];
    for (i, r) in train.records.iter().enumerate() {
        let c = match (r.labels[target_idx], config.label_mode) {
            (Some(c), _) => c,
            (None, LabelMode::PseudoLabels) => nearest_class(target_dict, teachers.embeddings[0].row_slice(i)),
            (None, LabelMode::TrueLabels) => continue,
        };
        class_of[i] = c;
        usable.push(i);
    }
    let distinct = {
        let mut cs: Vec<usize> = usable.iter().map(|&i| class_of[i]).collect();
        cs.sort_unstable();
        cs.dedup();
        cs.len()
    };
    if distinct < 2 {
        return Err(Error::Training(format!(
            "{}: need records of at least 2 target classes, found {distinct}",
            config.target_attr
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = Generator::init(dim, k, config.hidden, &mut rng);
    let mut disc = Discriminator::init(dim, config.hidden, attrs.len() * k, &mut rng);

    // fixed proxy sample with uniformly drawn conditioning partners
    let mut pool = usable.clone();
    pool.shuffle(&mut rng);
    pool.truncate(config.proxy_samples.max(1));
    let partners: Vec<usize> = pool
        .iter()
        .map(|&i| {
            let others: Vec<usize> = usable.iter().copied().filter(|&j| class_of[j] != class_of[i]).collect();
            *others.choose(&mut rng).expect("two classes exist")
        })
        .collect();
    let proxy_x = teachers.features.select_rows(&pool);
    let proxy_e = teachers.rows(0, &pool);
    let proxy_em = teachers.rows(0, &partners);
    let initial_proxy = proxy_with_embeddings(&gen, &proxy_x, &proxy_e, &proxy_em)?;

    let adam_cfg = AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        ..AdamConfig::default()
    };
    let mut adam_g = Adam::new(adam_cfg, &gen.mlp.params());
    let mut adam_d = Adam::new(adam_cfg, &disc.params());
    let mask = match_mask(config.matching, attrs.len(), k);
    let lambda_adv = if config.adversarial { config.lambda_adv } else { 0.0 };

    let mut log = ManipLog {
        variant: config.variant_name(),
        config: config.clone(),
        initial_proxy,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut order = usable.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let classes: Vec<usize> = chunk.iter().map(|&i| class_of[i]).collect();
            let remaining: Vec<Tensor> = (1..attrs.len()).map(|a| teachers.rows(a, chunk)).collect();
            let remaining_refs: Vec<&Tensor> = remaining.iter().collect();
            let mut xs = Vec::with_capacity(chunk.len());
            let mut minus = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                match partner(config.sampling, &remaining_refs, &classes, i, &mut rng) {
                    Some(j) => {
                        xs.push(chunk[i]);
                        minus.push(chunk[j]);
                    }
                    None => skipped += 1,
                }
            }
            if xs.is_empty() {
                continue;
            }
            let t = batch_step(
                &mut gen,
                &mut disc,
                &mut adam_g,
                &mut adam_d,
                &teachers,
                &xs,
                &minus,
                &mask,
                config,
                lambda_adv,
            )?;
            let vals = [t.d_adv, t.d_match, t.g_adv, t.g_match, t.cycle];
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "{} manipulator loss term became {bad} (d_adv {}, d_match {}, g_adv {}, g_match {}, cycle {})",
                        config.target_attr, vals[0], vals[1], vals[2], vals[3], vals[4]
                    ),
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            d_adv: sums[0] / b,
            d_match: sums[1] / b,
            g_adv: sums[2] / b,
            g_match: sums[3] / b,
            cycle: sums[4] / b,
            convergence_proxy: proxy_with_embeddings(&gen, &proxy_x, &proxy_e, &proxy_em)?,
            skipped,
        });
    }

    Ok(TrainedManipulator {
        manipulator: Manipulator {
            target_attr: config.target_attr.clone(),
            remaining_attrs: config.remaining_attrs.clone(),
            generator: gen,
            discriminator: disc,
        },
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_step(
    gen: &mut Generator,
    disc: &mut Discriminator,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    teachers: &Teachers,
    xs: &[usize],
    minus: &[usize],
    mask: &Tensor,
    config: &ManipConfig,
    lambda_adv: f64,
) -> Result<StepTerms> {
    let x = teachers.features.select_rows(xs);
    let e = teachers.rows(0, xs);
    let e_minus = teachers.rows(0, minus);
    let real_t = teachers.target(xs, xs)?;
    let fake_t = teachers.target(minus, xs)?;

    // discriminator step; the generator is bound as constants so x̃ is detached
    let mut g = Graph::new();
    let dv = disc.bind(&mut g, true);
    let gv = gen.bind(&mut g, false);
    let (xv, emv) = (g.constant(x.clone()), g.constant(e_minus.clone()));
    let x_tilde = gv.forward(&mut g, xv, emv)?;
    let (rl, f_real) = dv.forward(&mut g, xv)?;
    let (fl, f_fake) = dv.forward(&mut g, x_tilde)?;
    let d_adv = d_adv_loss(&mut g, rl, fl);
    let (rt, ft) = (g.constant(real_t), g.constant(fake_t.clone()));
    let d_match_real = matching_term(&mut g, f_real, rt, mask)?;
    let d_match_fake = matching_term(&mut g, f_fake, ft, mask)?;
    let d_match = if config.match_fake_in_d {
        g.add(d_match_real, d_match_fake)?
    } else {
        d_match_real
    };
    let mut loss = add_weighted(&mut g, None, d_adv, lambda_adv)?;
    loss = add_weighted(&mut g, loss, d_match, config.lambda_match)?;
    let d_adv_v = g.value(d_adv).item()?;
    let d_match_v = g.value(d_match).item()?;
    if let Some(l) = loss {
        if g.value(l).is_finite() {
            let grads = g.backward(l)?;
            let params = disc.params();
            let grad_list = collect_grads(&grads, &dv.vars(), &params);
            adam_d.step(&mut disc.params_mut(), &grad_list)?;
        }
    }

    // generator step against the updated, frozen discriminator
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, true);
    let dv = disc.bind(&mut g, false);
    let (xv, ev, emv) = (g.constant(x), g.constant(e), g.constant(e_minus));
    let x_tilde = gv.forward(&mut g, xv, emv)?;
    let (fl, f_fake) = dv.forward(&mut g, x_tilde)?;
    let g_adv = g_adv_loss(&mut g, fl);
    let ft = g.constant(fake_t);
    let g_match = matching_term(&mut g, f_fake, ft, mask)?;
    let x_hat = gv.forward(&mut g, x_tilde, ev)?;
    let cycle = cycle_term(&mut g, xv, x_hat)?;
    let mut loss = add_weighted(&mut g, None, g_adv, lambda_adv)?;
    loss = add_weighted(&mut g, loss, g_match, config.lambda_match)?;
    loss = add_weighted(&mut g, loss, cycle, config.lambda_cycle)?;
    let terms = StepTerms {
        d_adv: d_adv_v,
        d_match: d_match_v,
        g_adv: g.value(g_adv).item()?,
        g_match: g.value(g_match).item()?,
        cycle: g.value(cycle).item()?,
    };
    if let Some(l) = loss {
        if g.value(l).is_finite() {
            let grads = g.backward(l)?;
            let params = gen.mlp.params();
            let grad_list = collect_grads(&grads, &gv.mlp.vars(), &params);
            adam_g.step(&mut gen.mlp.params_mut(), &grad_list)?;
        }
    }
    Ok(terms)
}
