//! Affine layers and multi-layer perceptrons on top of [`crate::autodiff`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::codec::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

/// Negative slope used by every leaky_relu in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = x · W + b`, with `W` stored `[in, out]` and `b` as `[1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let (w, b) = (self.weight.clone(), self.bias.clone());
        if trainable {
            LinearVars {
                weight: g.param(w),
                bias: g.param(b),
            }
        } else {
            LinearVars {
                weight: g.constant(w),
                bias: g.constant(b),
            }
        }
    }
}

/// Graph handles for one bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add(y, self.bias)
    }
}

/// Stack of affine layers with leaky_relu between them (not after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(
                    "mlp",
                    format!(
                        "layer {i} outputs {} but layer {} takes {}",
                        w[0].output_dim(),
                        i + 1,
                        w[1].input_dim()
                    ),
                ));
            }
        }
        if layers.is_empty() {
            return Err(Error::dim("mlp", "no layers"));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    /// `(in, out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.input_dim(), l.output_dim()))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Places the weights on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect();
        MlpVars { layers }
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// Vars in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Collects gradients for `vars`, zero-filling any the loss did not reach.
pub fn collect_grads(
    grads: &crate::autodiff::Gradients,
    vars: &[Var],
    params: &[&Tensor],
) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect()
}

/// Layer count, `(in, out)` per layer, then f32 weights layer by layer
/// (`W` row-major, then `b`).
pub(crate) fn write_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    put_u32(out, mlp.layers.len() as u32);
    for (i, o) in mlp.layer_shapes() {
        put_u32(out, i as u32);
        put_u32(out, o as u32);
    }
    for p in mlp.params() {
        put_f32s(out, p.data().iter().copied());
    }
}

pub(crate) fn read_mlp(r: &mut Reader<'_>) -> Result<Mlp> {
    let at = r.pos() as u64;
    let n = r.u32("layer count")? as usize;
    if n == 0 || n > 64 {
        return Err(Error::format(at, format!("implausible layer count {n}")));
    }
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        shapes.push((r.u32("layer input")? as usize, r.u32("layer output")? as usize));
    }
    let mut layers = Vec::with_capacity(n);
    for (i, o) in shapes {
        let w = r.f32s(i * o, "layer weights")?;
        let b = r.f32s(o, "layer bias")?;
        layers.push(Linear {
            weight: Tensor::matrix(i, o, w.into_iter().map(f64::from).collect())?,
            bias: Tensor::matrix(1, o, b.into_iter().map(f64::from).collect())?,
        });
    }
    Mlp::from_layers(layers).map_err(|e| Error::format(at, e.to_string()))
}
