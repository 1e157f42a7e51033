use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Supervised contrastive loss with hard negatives.
///
/// Row `i` of `premises` should be closest to row `i` of `positives`; every
/// other positive and every negative, including its own contradiction, acts
/// as a negative. Similarities are cosines divided by `temperature`; the
/// result is the mean cross-entropy over rows.
pub fn simcse_loss(g: &mut Graph, premises: Var, positives: Var, negatives: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(premises).to_vec();
    for other in [positives, negatives] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::shape("simcse_loss", &shape, g.shape(other)));
        }
    }
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("simcse_loss", &shape, &[0, 0]));
    }
    let p = g.l2_normalize(premises)?;
    let pos = g.l2_normalize(positives)?;
    let neg = g.l2_normalize(negatives)?;
    let candidates = g.concat(&[pos, neg], 0)?;
    let sims = g.matmul_t(p, candidates, false, true)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..shape[0]).collect();
    g.cross_entropy(logits, &targets)
}
