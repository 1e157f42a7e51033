//! Train-and-evaluate runs on a synthetic corpus: single cells, learning
//! rate sweeps, and model-size sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contrastive::{train, Sampling, TrainConfig, TripletCorpus};
use crate::data::{CorpusSpec, StsPair, SyntheticCorpus};
use crate::encoder::{embed_corpus, Encoder, Preset, Vocab};
use crate::error::{Error, Result};
use crate::eval::{retrieval_both, sts_eval};
use crate::lora::{apply_lora, trainable_param_count, LoraConfig};


const EVAL_BATCH: usize = 64;

/// Everything a cell needs besides the preset and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    /// Encoder context length.
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            lora: LoraConfig::default(),
            train: TrainConfig {
                batch_size: 64,
                lr: 3e-3,
                sampling: Sampling::CrossLingual,
                epochs: 100,
                max_steps: Some(500),
                ..TrainConfig::default()
            },
            max_len: 16,
        }
    }
}

/// Mean-pooled embeddings of `texts` with their language tags.
fn embed(model: &Encoder, vocab: &Vocab, texts: &[String], lang: &str) -> Result<crate::eval::EmbeddingSet> {
    embed_corpus(texts, &vec![lang.to_string(); texts.len()], model, vocab, EVAL_BATCH)
}

/// Retrieval accuracy between language 0 and every other language of a
/// parallel split, averaged over both directions.
pub fn parallel_retrieval(model: &Encoder, vocab: &Vocab, split: &[Vec<String>], langs: &[String]) -> Result<BTreeMap<String, f64>> {
    let pivot = embed(model, vocab, &split[0], &langs[0])?;
    let mut out = BTreeMap::new();
    for (rows, lang) in split.iter().zip(langs).skip(1) {
        let other = embed(model, vocab, rows, lang)?;
        let report = retrieval_both(&pivot, &other)?;
        out.insert(lang.clone(), report.metric("accuracy").unwrap_or(0.0));
    }
    Ok(out)
}

/// Spearman correlation of cosine similarities with gold scores.
pub fn sts_spearman(model: &Encoder, vocab: &Vocab, pairs: &[StsPair]) -> Result<f64> {
    let a: Vec<&str> = pairs.iter().map(|p| p.a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.b.as_str()).collect();
    let la: Vec<String> = pairs.iter().map(|p| p.lang_a.clone()).collect();
    let lb: Vec<String> = pairs.iter().map(|p| p.lang_b.clone()).collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let ea = embed_corpus(&a, &la, model, vocab, EVAL_BATCH)?;
    let eb = embed_corpus(&b, &lb, model, vocab, EVAL_BATCH)?;
    let report = sts_eval(&ea, &eb, &gold)?;
    Ok(report.metric("spearman_rho").unwrap_or(0.0))
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub preset: Preset,
    pub seed: u64,
    pub target: crate::lora::LoraTarget,
    pub total_params: usize,
    pub trainable_params: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Test-split retrieval accuracy per non-pivot language.
    pub retrieval_by_lang: BTreeMap<String, f64>,
    pub retrieval: f64,
    pub sts_spearman: f64,
}

/// A base model for `preset` with fresh adapters, seeded by `seed`.
pub fn fresh_model(preset: Preset, vocab: &Vocab, cfg: &ExperimentConfig, seed: u64) -> Result<Encoder> {
    let mut model = Encoder::new(preset.config(vocab.size(), cfg.max_len, seed))?;
    apply_lora(&mut model, &LoraConfig { seed, ..cfg.lora.clone() })?;
    Ok(model)
}

/// Trains one (preset, seed) cell and evaluates it on the test splits.
pub fn run_cell(corpus: &SyntheticCorpus, cfg: &ExperimentConfig, preset: Preset, seed: u64) -> Result<(Encoder, CellResult)> {
    let vocab = corpus.vocab();
    let mut model = fresh_model(preset, &vocab, cfg, seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let out = train(&mut model, &vocab, &corpus.triplet_corpus(), &train_cfg)?;
    let by_lang = parallel_retrieval(&model, &vocab, &corpus.heldout_test, &corpus.langs)?;
    let retrieval = if by_lang.is_empty() {
        0.0
    } else {
        by_lang.values().sum::<f64>() / by_lang.len() as f64
    };
    let result = CellResult {
        preset,
        seed,
        target: cfg.lora.target,
        total_params: model.total_param_count(),
        trainable_params: trainable_param_count(&model),
        steps: out.steps,
        first_loss: out.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        retrieval_by_lang: by_lang,
        retrieval,
        sts_spearman: sts_spearman(&model, &vocab, &corpus.sts_test)?,
    };
    Ok((model, result))
}

/// One learning rate of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub lr: f64,
    /// `None` when the dev similarities were constant.
    pub dev_spearman: Option<f64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub trials: Vec<SweepTrial>,
    pub best_lr: f64,
    pub best_index: usize,
}

/// Trains a copy of `model` at every rate in `cfg.lr_candidates` and keeps
/// the one with the highest dev Spearman; the first candidate wins ties.
pub fn lr_sweep(model: &Encoder, vocab: &Vocab, corpus: &TripletCorpus, cfg: &TrainConfig, dev: &[StsPair]) -> Result<(Encoder, SweepReport)> {
    if cfg.lr_candidates.is_empty() {
        return Err(Error::Config("train: lr_candidates is empty".into()));
    }
    let mut trials = Vec::new();
    let mut best: Option<(usize, f64, Encoder)> = None;
    for (i, &lr) in cfg.lr_candidates.iter().enumerate() {
        let mut m = model.clone();
        let out = train(&mut m, vocab, corpus, &TrainConfig { lr, ..cfg.clone() })?;
        let rho = match sts_spearman(&m, vocab, dev) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation) => None,
            Err(e) => return Err(e),
        };
        let score = rho.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((i, score, m));
        }
        trials.push(SweepTrial {
            lr,
            dev_spearman: rho,
            losses: out.losses,
        });
    }
    let (best_index, _, best_model) = best.expect("at least one candidate");
    Ok((
        best_model,
        SweepReport {
            best_lr: cfg.lr_candidates[best_index],
            best_index,
            trials,
        },
    ))
}

/// One preset of a scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub preset: Preset,
    pub total_params: usize,
    pub trainable_params: usize,
    pub cells: Vec<CellResult>,
    pub mean_retrieval: f64,
    pub mean_sts_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<ScalingRow>,
}

/// Every (preset, seed) cell on one corpus generated from `cfg.corpus`.
pub fn run_scaling(cfg: &ExperimentConfig, presets: &[Preset], seeds: &[u64]) -> Result<ScalingReport> {
    if presets.len() < 2 {
        return Err(Error::Config("scaling needs at least two presets".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("scaling needs at least one seed".into()));
    }
    let corpus = crate::data::gen_synthetic_parallel(&cfg.corpus)?;
    let mut rows = Vec::new();
    for &preset in presets {
        let cells = seeds
            .iter()
            .map(|&seed| run_cell(&corpus, cfg, preset, seed).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let n = cells.len() as f64;
        rows.push(ScalingRow {
            preset,
            total_params: cells[0].total_params,
            trainable_params: cells[0].trainable_params,
            mean_retrieval: cells.iter().map(|c| c.retrieval).sum::<f64>() / n,
            mean_sts_spearman: cells.iter().map(|c| c.sts_spearman).sum::<f64>() / n,
            cells,
        });
    }
    Ok(ScalingReport {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        rows,
    })
}
