use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor in the relative-error formula.
const REL_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient of `f` at `point` against central
/// finite differences with step `h`. Returns the worst relative error
/// `|analytic - numeric| / (|analytic| + 1e-8)` over all coordinates.
///
/// `f` receives a fresh graph and the input variable and must return a
/// scalar node.
pub fn fd_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("fd_check step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(x, g.value(x));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let out = f(&mut g, x)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + REL_FLOOR));
    }
    Ok(worst)
}

/// Like [`fd_check`] but for several inputs at once; `f` receives one
/// variable per entry of `points`.
pub fn fd_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let sizes: Vec<(Vec<usize>, usize)> = points
        .iter()
        .map(|p| (p.shape().to_vec(), p.numel()))
        .collect();
    let flat: Vec<f64> = points.iter().flat_map(|p| p.data().to_vec()).collect();
    let total = flat.len();
    let packed = Tensor::new(vec![1, total], flat)?;
    fd_check(
        |g, x| {
            let mut vars = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (shape, n) in &sizes {
                let s = g.slice_cols(x, offset, offset + n)?;
                let (r, c) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (1, *n),
                    _ => (1, *n),
                };
                let v = g.reshape(s, r, c)?;
                vars.push(v);
                offset += n;
            }
            f(g, &vars)
        },
        &packed,
        h,
    )
}
