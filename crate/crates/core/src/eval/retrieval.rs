use super::report::{EvalReport, Task};
use super::similarity::similarity_matrix;
use super::EmbeddingSet;
use crate::error::{Error, Result};

/// Nearest target row (by cosine) for each source row; ties go to the
/// lowest index.
pub fn nearest_neighbors(src: &EmbeddingSet, tgt: &EmbeddingSet) -> Result<Vec<usize>> {
    if tgt.is_empty() {
        return Err(Error::Contract("retrieval against an empty target set".into()));
    }
    let sims = similarity_matrix(src, tgt)?;
    let m = tgt.len();
    Ok(sims
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of source rows whose nearest target is the row with the same
/// index. Direction is `src -> tgt` only.
pub fn retrieval_accuracy(src: &EmbeddingSet, tgt: &EmbeddingSet) -> Result<EvalReport> {
    if src.len() != tgt.len() {
        return Err(Error::Contract(format!(
            "retrieval needs aligned sets, got {} and {} rows",
            src.len(),
            tgt.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::Contract("retrieval over zero pairs".into()));
    }
    let nn = nearest_neighbors(src, tgt)?;
    let hits = nn.iter().enumerate().filter(|(i, &j)| *i == j).count();
    Ok(EvalReport::new(Task::Retrieval, [("accuracy", hits as f64 / src.len() as f64)], src.len()))
}

/// Accuracy in both directions and their mean (`accuracy`).
pub fn retrieval_both(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EvalReport> {
    let fwd = retrieval_accuracy(a, b)?.metric("accuracy").unwrap_or(0.0);
    let bwd = retrieval_accuracy(b, a)?.metric("accuracy").unwrap_or(0.0);
    Ok(EvalReport::new(
        Task::Retrieval,
        [
            ("accuracy_forward", fwd),
            ("accuracy_backward", bwd),
            ("accuracy", (fwd + bwd) / 2.0),
        ],
        a.len(),
    ))
}
