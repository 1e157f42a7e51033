use super::EmbeddingSet;
use crate::error::{Error, Result};

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", &[u.len()], &[v.len()]));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Row-major `|a| x |b|` cosine matrix.
pub fn similarity_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Vec<f64>> {
    if a.dim() != b.dim() && !a.is_empty() && !b.is_empty() {
        return Err(Error::shape("similarity", &[a.len(), a.dim()], &[b.len(), b.dim()]));
    }
    let (ua, ub) = (a.unit_rows(), b.unit_rows());
    let d = a.dim();
    let mut out = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let x = &ua[i * d..(i + 1) * d];
        for j in 0..b.len() {
            let y = &ub[j * d..(j + 1) * d];
            let s: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.push(s.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Cosine of row `i` of `a` with row `i` of `b` for every `i`.
pub fn paired_cosines(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("paired sets differ in size: {} vs {}", a.len(), b.len())));
    }
    (0..a.len()).map(|i| cosine(a.row(i), b.row(i))).collect()
}
