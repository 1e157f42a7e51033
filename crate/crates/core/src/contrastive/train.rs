use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::simcse_loss;
use super::optim::{adamw_step, AdamState};
use super::sampling::{build_batch, Sampling};
use super::triplet::{TripletCorpus, TripletGroup};
use crate::autodiff::{Graph, Tensor};
use crate::encoder::{mean_pool, Binder, Encoder, ParamMode, Vocab};
use crate::error::{Error, Result};

/// Learning rates tried by a sweep.
pub const LR_CANDIDATES: [f64; 4] = [1e-5, 5e-5, 1e-4, 5e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_candidates: Vec<f64>,
    pub epochs: usize,
    pub temperature: f64,
    pub weight_decay: f64,
    pub sampling: Sampling,
    /// Force three different languages per cross-lingual triplet.
    pub distinct_langs: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-4,
            lr_candidates: LR_CANDIDATES.to_vec(),
            epochs: 1,
            temperature: 0.05,
            weight_decay: 0.01,
            sampling: Sampling::AsIs,
            distinct_langs: false,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_candidates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("lr_candidates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay must be in [0, 1), got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Loss before each optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Units a run iterates over: every variant separately for `AsIs`, whole
/// translation groups for `CrossLingual`.
fn training_items(corpus: &TripletCorpus, sampling: Sampling) -> Vec<TripletGroup> {
    match sampling {
        Sampling::AsIs => corpus.flatten().into_iter().map(TripletGroup::single).collect(),
        Sampling::CrossLingual => corpus.groups.clone(),
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Contrastive fine-tuning of the adapters attached to `model`.
///
/// Each epoch visits the data in one shuffled order; a trailing batch of a
/// single triplet is dropped. Base weights are never written.
pub fn train(model: &mut Encoder, vocab: &Vocab, corpus: &TripletCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if crate::lora::adapters(model).is_empty() {
        return Err(Error::Config("train: model has no adapters".into()));
    }
    if cfg.sampling == Sampling::CrossLingual && corpus.max_variants() < 2 {
        return Err(Error::Data("cross-lingual sampling needs translated triplets".into()));
    }
    let items = training_items(corpus, cfg.sampling);
    if items.is_empty() {
        return Err(Error::Data("no training triplets".into()));
    }
    if cfg.batch_size > items.len() {
        return Err(Error::Config(format!(
            "train: batch_size {} exceeds the {} available triplets",
            cfg.batch_size,
            items.len()
        )));
    }

    let mut order_rng = rng_stream(cfg.seed, 0);
    let mut lang_rng = rng_stream(cfg.seed, 1);
    let mut dropout_rng = rng_stream(cfg.seed, 2);
    let mut state = AdamState::new();
    let mut losses = Vec::new();
    let max_len = model.config().max_len;

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            if chunk.len() < 2 {
                continue;
            }
            let step = losses.len();
            let groups: Vec<&TripletGroup> = chunk.iter().map(|&i| &items[i]).collect();
            let batch = build_batch(&groups, cfg.sampling, cfg.distinct_langs, vocab, max_len, &mut lang_rng)?;
            let (loss, grads) = loss_and_grads(model, &batch.stacked(), batch.size(), cfg.temperature, &mut dropout_rng)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                    e => e,
                })?;
            losses.push(loss);
            apply_update(model, grads, &mut state, cfg)?;
        }
    }
    Ok(TrainOutcome {
        steps: losses.len(),
        losses,
    })
}

type NamedGrads = Vec<(String, Tensor)>;

fn loss_and_grads(
    model: &Encoder,
    stacked: &crate::encoder::TokenizedBatch,
    b: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, NamedGrads)> {
    let mut g = Graph::new();
    let mut binder = Binder::new(ParamMode::Adapters);
    let reps = model.encode_train(&mut g, stacked, &mut binder, rng)?;
    let pooled = mean_pool(&mut g, reps, &stacked.mask)?;
    let p = g.slice(pooled, 0, 0, b)?;
    let pos = g.slice(pooled, 0, b, 2 * b)?;
    let neg = g.slice(pooled, 0, 2 * b, 3 * b)?;
    let loss = simcse_loss(&mut g, p, pos, neg, temperature)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "simcse_loss" });
    }
    g.backward(loss)?;
    let grads = binder
        .bound()
        .iter()
        .map(|(name, v)| {
            let grad = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
            (name.clone(), grad)
        })
        .collect();
    Ok((value, grads))
}

fn apply_update(model: &mut Encoder, grads: NamedGrads, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let mut by_name: HashMap<String, Tensor> = grads.into_iter().collect();
    let mut params: Vec<&mut Tensor> = Vec::new();
    let mut ordered: Vec<Tensor> = Vec::new();
    for (i, block) in model.blocks.iter_mut().enumerate() {
        for (slot, proj) in block.projections_mut() {
            let Some(adapter) = proj.adapter_mut() else { continue };
            let (a, b) = adapter.factors_mut();
            for (factor, t) in [("lora_a", a), ("lora_b", b)] {
                let name = format!("blocks.{i}.{slot}.{factor}");
                let grad = by_name
                    .remove(&name)
                    .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
                ordered.push(grad);
                params.push(t);
            }
        }
    }
    let grads: Vec<&Tensor> = ordered.iter().collect();
    adamw_step(&mut params, &grads, state, cfg.lr, cfg.weight_decay)
}

/// `step,loss` lines, one per optimizer step.
pub fn format_loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    std::fs::write(path, format_loss_csv(losses))?;
    Ok(())
}
