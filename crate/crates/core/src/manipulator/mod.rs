//! The query feature manipulator: a conditional generator `G(x ⊕ e) → x̃`
//! and a two-headed discriminator (realness logit plus a matching head that
//! mimics the frozen attribute embedders).

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::embedder::{Embedder, EmbedderSet};
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars, Mlp, MlpVars, LEAKY_SLOPE};
use crate::synthdata::AttributeSchema;

pub use checkpoint::{
    load_manipulator, log_path, read_manipulator, save_manipulator, write_manipulator,
    MANIPULATOR_MAGIC,
};
pub use train::{train_manipulator, EpochLog, ManipLog, TrainedManipulator};

/// Which sub-blocks of the matching target the discriminator head must hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMode {
    /// Target and remaining attributes.
    M,
    /// Target attribute only.
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Uniform,
    /// Nearest in the remaining-attribute embeddings.
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Records without a target label are left out of pairing.
    TrueLabels,
    /// Absent target labels are filled by the target embedder.
    PseudoLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipConfig {
    pub target_attr: String,
    pub remaining_attrs: Vec<String>,
    pub lambda_adv: f64,
    pub lambda_match: f64,
    pub lambda_cycle: f64,
    pub adversarial: bool,
    pub matching: MatchMode,
    pub sampling: Sampling,
    pub label_mode: LabelMode,
    /// Whether the discriminator step also fits its matching head on
    /// generated features.
    pub match_fake_in_d: bool,
    pub hidden: usize,
    pub lr: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Size of the fixed sample the convergence proxy is measured on.
    pub proxy_samples: usize,
}

impl Default for ManipConfig {
    fn default() -> Self {
        Self {
            target_attr: "color".into(),
            remaining_attrs: vec!["shape".into(), "pattern".into()],
            lambda_adv: 1.0,
            lambda_match: 10.0,
            lambda_cycle: 10.0,
            adversarial: true,
            matching: MatchMode::M,
            sampling: Sampling::Online,
            label_mode: LabelMode::TrueLabels,
            match_fake_in_d: true,
            hidden: 128,
            lr: 5e-4,
            beta1: 0.9,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            proxy_samples: 256,
        }
    }
}

/// Ablation variant names, e.g. `M/OS/Adv` or `S/-/Adv`.
pub const VARIANTS: [&str; 4] = ["M/OS/Adv", "M/-/Adv", "M/-/-", "S/-/Adv"];

impl ManipConfig {
    /// Defaults with `target` as the target and every other schema type,
    /// in schema order, as remaining.
    pub fn for_target(schema: &AttributeSchema, target: &str) -> Result<Self> {
        schema.index_of(target)?;
        Ok(Self {
            target_attr: target.to_owned(),
            remaining_attrs: schema.types.iter().filter(|t| *t != target).cloned().collect(),
            ..Self::default()
        })
    }

    /// Target first, then the remaining attributes.
    pub fn attr_order(&self) -> Vec<&str> {
        std::iter::once(self.target_attr.as_str())
            .chain(self.remaining_attrs.iter().map(String::as_str))
            .collect()
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.remaining_attrs.contains(&self.target_attr) {
            return Err(Error::Config(format!(
                "target {:?} is also listed as remaining",
                self.target_attr
            )));
        }
        let order = self.attr_order();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let mut types: Vec<&str> = schema.types.iter().map(String::as_str).collect();
        types.sort_unstable();
        if sorted.len() != order.len() || sorted != types {
            return Err(Error::Config(format!(
                "target + remaining {order:?} must cover the schema types {:?} exactly once",
                schema.types
            )));
        }
        for (name, l) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_match", self.lambda_match),
            ("lambda_cycle", self.lambda_cycle),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {l}")));
            }
        }
        if self.hidden == 0 || self.batch_size < 2 {
            return Err(Error::Config("hidden must be positive and batch_size at least 2".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!("invalid optimizer settings lr={} beta1={}", self.lr, self.beta1)));
        }
        Ok(())
    }

    pub fn variant_name(&self) -> String {
        format!(
            "{}/{}/{}",
            match self.matching {
                MatchMode::M => "M",
                MatchMode::S => "S",
            },
            match self.sampling {
                Sampling::Online => "OS",
                Sampling::Uniform => "-",
            },
            if self.adversarial { "Adv" } else { "-" }
        )
    }

    /// Sets the matching, sampling and adversarial flags from a variant name.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        let parts: Vec<&str> = name.split('/').collect();
        let bad = || Error::Config(format!("unknown variant {name:?}; expected e.g. M/OS/Adv"));
        let [m, s, a] = parts[..] else { return Err(bad()) };
        self.matching = match m {
            "M" => MatchMode::M,
            "S" => MatchMode::S,
            _ => return Err(bad()),
        };
        self.sampling = match s {
            "OS" => Sampling::Online,
            "-" => Sampling::Uniform,
            _ => return Err(bad()),
        };
        self.adversarial = match a {
            "Adv" => true,
            "-" => false,
            _ => return Err(bad()),
        };
        Ok(())
    }
}

/// `G: R^(D+k) → R^D`, three affine layers, output L2-normalized. The input
/// is `x ⊕ e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub mlp: MlpVars,
}

impl GeneratorVars {
    pub fn forward(&self, g: &mut Graph, x: Var, e: Var) -> Result<Var> {
        let h = g.concat(&[x, e])?;
        let y = self.mlp.forward(g, h)?;
        Ok(g.normalize(y))
    }
}

impl Generator {
    pub fn init<R: Rng + ?Sized>(dim: usize, k: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init(&[dim + k, hidden, hidden, dim], rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn k(&self) -> usize {
        self.mlp.input_dim() - self.mlp.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            mlp: self.mlp.bind(g, trainable),
        }
    }

    /// `x̃ = G(x, e)` for a single feature.
    pub fn generate(&self, x: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .generate_matrix(&Tensor::row(x), &Tensor::row(e))?
            .into_data())
    }
}

/// Anything that rewrites features given conditioning embeddings.
pub trait FeatureGenerator {
    fn feature_dim(&self) -> usize;
    fn generate_matrix(&self, x: &Tensor, e: &Tensor) -> Result<Tensor>;
}

fn check_inputs(dim: usize, k: Option<usize>, x: &Tensor, e: &Tensor) -> Result<()> {
    let ok = x.cols() == dim && k.is_none_or(|k| e.cols() == k) && x.rows() == e.rows();
    if !ok {
        return Err(Error::contract(format!(
            "generator expects [n, {dim}] features and [n, {}] embeddings, got {:?} and {:?}",
            k.map_or("k".to_string(), |k| k.to_string()),
            x.shape(),
            e.shape()
        )));
    }
    Ok(())
}

impl FeatureGenerator for Generator {
    fn feature_dim(&self) -> usize {
        self.dim()
    }

    fn generate_matrix(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        check_inputs(self.dim(), Some(self.k()), x, e)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (xv, ev) = (g.constant(x.clone()), g.constant(e.clone()));
        let y = vars.forward(&mut g, xv, ev)?;
        Ok(g.value(y).clone())
    }
}

/// Returns the (normalized) input and ignores the conditioning.
#[derive(Clone, Copy, Debug)]
pub struct IdentityGenerator {
    pub dim: usize,
}

impl FeatureGenerator for IdentityGenerator {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn generate_matrix(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        check_inputs(self.dim, None, x, e)?;
        let mut out = x.clone();
        out.normalize_rows();
        Ok(out)
    }
}

/// Trunk `D → hidden → hidden`, then leaky_relu and two affine heads:
/// realness logit and the `n·k` matching output `f(·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub trunk: Mlp,
    pub head_rf: Linear,
    pub head_fm: Linear,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub trunk: MlpVars,
    pub rf: LinearVars,
    pub fm: LinearVars,
}

impl DiscriminatorVars {
    /// `(realness logits [b,1], matching output [b, n·k])`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        Ok((self.rf.forward(g, h)?, self.fm.forward(g, h)?))
    }

    /// Same order as [`Discriminator::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.trunk.vars();
        v.extend([self.rf.weight, self.rf.bias, self.fm.weight, self.fm.bias]);
        v
    }
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, match_dim: usize, rng: &mut R) -> Self {
        Self {
            trunk: Mlp::init(&[dim, hidden, hidden], rng),
            head_rf: Linear::init(hidden, 1, rng),
            head_fm: Linear::init(hidden, match_dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn match_dim(&self) -> usize {
        self.head_fm.output_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend([
            &self.head_rf.weight,
            &self.head_rf.bias,
            &self.head_fm.weight,
            &self.head_fm.bias,
        ]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend([
            &mut self.head_rf.weight,
            &mut self.head_rf.bias,
            &mut self.head_fm.weight,
            &mut self.head_fm.bias,
        ]);
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            trunk: self.trunk.bind(g, trainable),
            rf: self.head_rf.bind(g, trainable),
            fm: self.head_fm.bind(g, trainable),
        }
    }

    /// Value-level outputs for a batch.
    pub fn outputs(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.dim() {
            return Err(Error::contract(format!(
                "discriminator expects dim {}, got {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (rf, fm) = vars.forward(&mut g, xv)?;
        Ok((g.value(rf).clone(), g.value(fm).clone()))
    }
}

/// A trained generator/discriminator pair for one target attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct Manipulator {
    pub target_attr: String,
    pub remaining_attrs: Vec<String>,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Manipulator {
    pub fn attr_order(&self) -> Vec<&str> {
        std::iter::once(self.target_attr.as_str())
            .chain(self.remaining_attrs.iter().map(String::as_str))
            .collect()
    }
}

/// `−[log σ(r) + log(1 − σ(f))]`, batch-averaged, from realness logits.
pub fn d_adv_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let neg_real = g.scale(real_logits, -1.0);
    let a = g.softplus(neg_real);
    let b = g.softplus(fake_logits);
    let (ma, mb) = (g.mean(a), g.mean(b));
    g.add(ma, mb).expect("scalars")
}

/// Non-saturating `−log σ(f)`, batch-averaged.
pub fn g_adv_loss(g: &mut Graph, fake_logits: Var) -> Var {
    let neg = g.scale(fake_logits, -1.0);
    let s = g.softplus(neg);
    g.mean(s)
}

/// `(d_loss, g_loss)` of the discriminator on a real and a fake batch.
pub fn adv_losses(disc: &Discriminator, x_real: &Tensor, x_fake: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let vars = disc.bind(&mut g, false);
    let (r, f) = (g.constant(x_real.clone()), g.constant(x_fake.clone()));
    let (rl, _) = vars.forward(&mut g, r)?;
    let (fl, _) = vars.forward(&mut g, f)?;
    let d = d_adv_loss(&mut g, rl, fl);
    let gl = g_adv_loss(&mut g, fl);
    Ok((g.value(d).item()?, g.value(gl).item()?))
}

/// `[1, n·k]` mask: all ones for mode M, ones on the first (target) block
/// only for mode S.
pub fn match_mask(mode: MatchMode, n: usize, k: usize) -> Tensor {
    let mut m = Tensor::zeros(&[1, n * k]);
    let keep = match mode {
        MatchMode::M => n * k,
        MatchMode::S => k,
    };
    m.data_mut()[..keep].iter_mut().for_each(|v| *v = 1.0);
    m
}

/// Batch mean of the masked squared L2 distance between `f` and `target`.
pub fn matching_term(g: &mut Graph, f: Var, target: Var, mask: &Tensor) -> Result<Var> {
    let sq = g.squared_diff(f, target)?;
    let m = g.constant(mask.clone());
    let masked = g.mul(sq, m)?;
    let per_row = g.sum_rows(masked);
    Ok(g.mean(per_row))
}

/// Batch mean of `‖x − x̂‖²`.
pub fn cycle_term(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let sq = g.squared_diff(x, x_hat)?;
    let per_row = g.sum_rows(sq);
    Ok(g.mean(per_row))
}

/// Concatenated embeddings, one `[b, k]` block per attribute in `attrs`
/// order; `first` replaces the inputs of the first block when given.
pub fn matching_target(
    embedders: &EmbedderSet,
    attrs: &[&str],
    x: &Tensor,
    first: Option<&Tensor>,
) -> Result<Tensor> {
    let mut blocks = Vec::with_capacity(attrs.len());
    for (i, a) in attrs.iter().enumerate() {
        let src = if i == 0 { first.unwrap_or(x) } else { x };
        blocks.push(embedders.embedder(a)?.embed_matrix(src)?);
    }
    concat_cols(&blocks)
}

pub(crate) fn concat_cols(blocks: &[Tensor]) -> Result<Tensor> {
    let rows = blocks.first().map_or(0, Tensor::rows);
    let cols = blocks.iter().map(Tensor::cols).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for b in blocks {
            if b.rows() != rows {
                return Err(Error::dim("concat", "blocks differ in row count"));
            }
            out.extend_from_slice(b.row_slice(r));
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// `‖f(x) − t(x)‖² + ‖f(x̃) − t⁻(x)‖²`, each batch-averaged, where `t`
/// concatenates the frozen embeddings of `x` (target first) and `t⁻` swaps
/// the target block for `φ_a(x⁻)`.
pub fn feature_matching_loss(
    disc: &Discriminator,
    embedders: &EmbedderSet,
    attrs: &[&str],
    x: &Tensor,
    x_minus: &Tensor,
    x_tilde: &Tensor,
    mode: MatchMode,
) -> Result<f64> {
    let k = embedders.embedder(attrs[0])?.k();
    let real_t = matching_target(embedders, attrs, x, None)?;
    let fake_t = matching_target(embedders, attrs, x, Some(x_minus))?;
    if real_t.cols() != disc.match_dim() {
        return Err(Error::contract(format!(
            "matching head has {} outputs but the target has {}",
            disc.match_dim(),
            real_t.cols()
        )));
    }
    let mask = match_mask(mode, attrs.len(), k);
    let mut g = Graph::new();
    let vars = disc.bind(&mut g, false);
    let (xv, xt) = (g.constant(x.clone()), g.constant(x_tilde.clone()));
    let (_, f_real) = vars.forward(&mut g, xv)?;
    let (_, f_fake) = vars.forward(&mut g, xt)?;
    let (rt, ft) = (g.constant(real_t), g.constant(fake_t));
    let a = matching_term(&mut g, f_real, rt, &mask)?;
    let b = matching_term(&mut g, f_fake, ft, &mask)?;
    let l = g.add(a, b)?;
    g.value(l).item()
}

/// `‖x − G(G(x, e⁻), φ_a(x))‖²`, batch-averaged.
pub fn cycle_loss(
    gen: &dyn FeatureGenerator,
    embedder: &Embedder,
    x: &Tensor,
    e_minus: &Tensor,
) -> Result<f64> {
    let e = embedder.embed_matrix(x)?;
    let x_tilde = gen.generate_matrix(x, e_minus)?;
    let x_hat = gen.generate_matrix(&x_tilde, &e)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(x_hat));
    let l = cycle_term(&mut g, a, b)?;
    g.value(l).item()
}

/// Mean `cos(x, G(G(x, e⁻), φ_a(x)))` over the sample.
pub fn convergence_proxy(
    gen: &dyn FeatureGenerator,
    embedder: &Embedder,
    x: &Tensor,
    e_minus: &Tensor,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::contract("convergence proxy needs a nonempty sample"));
    }
    let e = embedder.embed_matrix(x)?;
    proxy_with_embeddings(gen, x, &e, e_minus)
}

pub(crate) fn proxy_with_embeddings(
    gen: &dyn FeatureGenerator,
    x: &Tensor,
    e: &Tensor,
    e_minus: &Tensor,
) -> Result<f64> {
    let x_tilde = gen.generate_matrix(x, e_minus)?;
    let x_hat = gen.generate_matrix(&x_tilde, e)?;
    let total: f64 = (0..x.rows())
        .map(|r| cosine(x.row_slice(r), x_hat.row_slice(r)))
        .sum();
    Ok(total / x.rows() as f64)
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / ((nu + crate::autodiff::NORM_EPS) * (nv + crate::autodiff::NORM_EPS))
}

/// Among batch members whose class differs from `classes[i]`, the one with
/// the smallest `Σ (1 − cos)` over the remaining-attribute embeddings
/// (`remaining[r]` is `[b, k]`). Ties go to the earlier position; `None`
/// when no member is eligible.
pub fn online_sample(remaining: &[&Tensor], classes: &[usize], i: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..classes.len() {
        if classes[j] == classes[i] {
            continue;
        }
        let d: f64 = remaining
            .iter()
            .map(|e| 1.0 - cosine(e.row_slice(i), e.row_slice(j)))
            .sum();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}
