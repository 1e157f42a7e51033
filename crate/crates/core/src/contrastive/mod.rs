//! Contrastive fine-tuning on NLI triplets.

mod loss;
mod optim;
mod sampling;
mod train;
mod triplet;

#[cfg(test)]
mod tests;

pub use loss::simcse_loss;
pub use optim::{adamw_step, AdamState, BETA1, BETA2, EPS};
pub use sampling::{build_batch, sample_triplet, Sampling, TripletBatch};
pub use train::{format_loss_csv, train, write_loss_csv, TrainConfig, TrainOutcome, LR_CANDIDATES};
pub use triplet::{Triplet, TripletCorpus, TripletGroup};
