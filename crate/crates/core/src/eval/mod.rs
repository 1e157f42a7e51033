//! Retrieval accuracy, threshold bitext mining with F1, and Spearman STS,
//! all under cosine similarity.

mod embedding;
mod mining;
mod report;
mod retrieval;
mod similarity;
mod sts;

pub use embedding::{decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingSet, Precision};
pub use mining::{f1_score, load_gold_pairs, mine_bitext, save_gold_pairs, tune_threshold, Matching, Pair, Prf, ThresholdChoice};
pub use report::{EvalReport, Task};
pub use retrieval::{nearest_neighbors, retrieval_accuracy, retrieval_both};
pub use similarity::{cosine, paired_cosines, similarity_matrix};
pub use sts::{average_ranks, spearman_rho, sts_eval};

#[cfg(test)]
mod tests;
