use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::similarity::similarity_matrix;
use super::EmbeddingSet;
use crate::error::{Error, Result};

pub type Pair = (usize, usize);

/// How candidate pairs above the threshold are turned into predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matching {
    /// Greedy one-to-one matching in descending similarity.
    Greedy,
    /// Every pair above the threshold, indices may repeat.
    Strict,
}

/// All pairs sorted by descending similarity, ties by `(i, j)`.
fn ranked_pairs(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Vec<(f64, Pair)>> {
    let sims = similarity_matrix(a, b)?;
    let m = b.len();
    let mut pairs: Vec<(f64, Pair)> = sims.iter().enumerate().map(|(k, &s)| (s, (k / m.max(1), k % m.max(1)))).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Ok(pairs)
}

/// Runs greedy matching over a ranked list, calling `keep` for each
/// accepted pair. Accepted pairs of any prefix equal the greedy matching of
/// that prefix alone.
struct Matcher {
    used_a: HashSet<usize>,
    used_b: HashSet<usize>,
    matching: Matching,
}

impl Matcher {
    fn new(matching: Matching) -> Self {
        Self {
            used_a: HashSet::new(),
            used_b: HashSet::new(),
            matching,
        }
    }

    fn accept(&mut self, (i, j): Pair) -> bool {
        match self.matching {
            Matching::Strict => true,
            Matching::Greedy => {
                if self.used_a.contains(&i) || self.used_b.contains(&j) {
                    return false;
                }
                self.used_a.insert(i);
                self.used_b.insert(j);
                true
            }
        }
    }
}

/// Pairs with cosine strictly above `threshold`.
pub fn mine_bitext(a: &EmbeddingSet, b: &EmbeddingSet, threshold: f64, matching: Matching) -> Result<Vec<Pair>> {
    if !threshold.is_finite() {
        return Err(Error::Contract(format!("threshold must be finite, got {threshold}")));
    }
    let mut m = Matcher::new(matching);
    Ok(ranked_pairs(a, b)?
        .into_iter()
        .take_while(|(s, _)| *s > threshold)
        .filter_map(|(_, p)| m.accept(p).then_some(p))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(correct: usize, predicted: usize, gold: usize) -> Prf {
    let precision = if predicted == 0 {
        if gold == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        correct as f64 / predicted as f64
    };
    let recall = if gold == 0 { 1.0 } else { correct as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Set precision, recall and F1 of `pred` against `gold`. Duplicates are
/// ignored.
pub fn f1_score(pred: &[Pair], gold: &[Pair]) -> Prf {
    let pred: HashSet<Pair> = pred.iter().copied().collect();
    let gold: HashSet<Pair> = gold.iter().copied().collect();
    let correct = pred.intersection(&gold).count();
    prf(correct, pred.len(), gold.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub scores: Prf,
}

/// Picks the threshold maximising F1 on a dev pair of sets.
///
/// Candidates are the midpoints between consecutive distinct pairwise
/// similarities, plus one just below the smallest (everything predicted)
/// and the largest itself (nothing predicted). Ties go to the larger
/// threshold.
pub fn tune_threshold(a: &EmbeddingSet, b: &EmbeddingSet, gold: &[Pair], matching: Matching) -> Result<ThresholdChoice> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("threshold tuning needs non-empty dev sets".into()));
    }
    if gold.is_empty() {
        return Err(Error::Contract("threshold tuning needs at least one gold pair".into()));
    }
    let gold: HashSet<Pair> = gold.iter().copied().collect();
    let ranked = ranked_pairs(a, b)?;
    let top = ranked[0].0;
    let mut best = ThresholdChoice {
        threshold: top,
        scores: prf(0, 0, gold.len()),
    };
    let mut matcher = Matcher::new(matching);
    let (mut predicted, mut correct) = (0, 0);
    let mut k = 0;
    while k < ranked.len() {
        let value = ranked[k].0;
        while k < ranked.len() && ranked[k].0 == value {
            let p = ranked[k].1;
            if matcher.accept(p) {
                predicted += 1;
                correct += usize::from(gold.contains(&p));
            }
            k += 1;
        }
        let threshold = match ranked.get(k) {
            Some(&(next, _)) => 0.5 * (value + next),
            None => value - 1e-6,
        };
        let scores = prf(correct, predicted, gold.len());
        if scores.f1 > best.scores.f1 {
            best = ThresholdChoice { threshold, scores };
        }
    }
    Ok(best)
}

/// Gold pairs, one `i TAB j` per line.
pub fn load_gold_pairs(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("{s:?}: {e}"),
            })
        };
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        out.push((parse(cols[0])?, parse(cols[1])?));
    }
    Ok(out)
}

pub fn save_gold_pairs(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let text: String = pairs.iter().map(|(i, j)| format!("{i}\t{j}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}
