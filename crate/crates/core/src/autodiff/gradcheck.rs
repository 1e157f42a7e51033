use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar. It has to be deterministic (no active dropout).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = match g.grad(leaf) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
