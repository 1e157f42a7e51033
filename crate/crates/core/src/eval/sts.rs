use super::report::{EvalReport, Task};
use super::similarity::paired_cosines;
use super::EmbeddingSet;
use crate::error::{Error, Result};

/// 1-based ranks with ties sharing the average of the positions they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman_rho(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!("{} predictions for {} gold scores", pred.len(), gold.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Contract("spearman needs at least two pairs".into()));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman_rho" });
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
}

/// Scores pair `i` as the cosine of `a[i]` and `b[i]` and correlates with
/// `gold[i]`.
pub fn sts_eval(a: &EmbeddingSet, b: &EmbeddingSet, gold: &[f64]) -> Result<EvalReport> {
    let sims = paired_cosines(a, b)?;
    let rho = spearman_rho(&sims, gold)?;
    Ok(EvalReport::new(Task::Sts, [("spearman_rho", rho)], gold.len()))
}
