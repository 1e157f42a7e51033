//! Low-rank adapters over the encoder's linear maps.
//!
//! An adapted map computes `x W^T + b + (alpha / r) (x A^T) B^T` with the
//! base `W`, `b` frozen and only `A: [r, d_in]`, `B: [d_out, r]` trained.
//! `B` starts at zero so a fresh adapter leaves the model unchanged.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{Binder, Encoder, Linear, Projection};
use crate::error::{Error, Result};

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry};

/// Which linear maps receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// Attention query and value projections only.
    QueryValue,
    /// Every attention and feed-forward projection.
    AllLinear,
}

impl LoraTarget {
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            LoraTarget::QueryValue => &["attn.q", "attn.v"],
            LoraTarget::AllLinear => &crate::encoder::BLOCK_LINEARS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::QueryValue => "query_value",
            LoraTarget::AllLinear => "all_linear",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "query_value" | "qv" => Ok(LoraTarget::QueryValue),
            "all_linear" | "all" => Ok(LoraTarget::AllLinear),
            other => Err(Error::Config(format!(
                "unknown LoRA target {other:?} (query_value|all_linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target: LoraTarget,
    /// Standard deviation of `A` at initialisation; `1 / rank` when unset.
    pub init_std: Option<f64>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            target: LoraTarget::AllLinear,
            init_std: None,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn init_std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora.alpha must be positive, got {}", self.alpha)));
        }
        if !(self.init_std() > 0.0 && self.init_std().is_finite()) {
            return Err(Error::Config("lora.init_std must be positive".into()));
        }
        Ok(())
    }
}

/// A frozen linear map plus a trainable rank-`r` update.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    base: Linear,
    a: Arc<Tensor>,
    b: Arc<Tensor>,
    scale: f64,
    merged: bool,
}

impl LoraLinear {
    pub fn base(&self) -> &Linear {
        &self.base
    }

    pub fn a(&self) -> &Arc<Tensor> {
        &self.a
    }

    pub fn b(&self) -> &Arc<Tensor> {
        &self.b
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Replace the adapter factors, e.g. after an optimizer step or when
    /// loading a checkpoint. Shapes must match.
    pub fn set_factors(&mut self, a: Tensor, b: Tensor) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::shape("set_factors", a.shape(), self.a.shape()));
        }
        self.a = Arc::new(a);
        self.b = Arc::new(b);
        Ok(())
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (Arc::make_mut(&mut self.a), Arc::make_mut(&mut self.b))
    }

    pub fn trainable_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, binder: &mut Binder, name: &str) -> Result<Var> {
        let base = self.base.forward(g, x, binder, name)?;
        let a = binder.adapter(g, || format!("{name}.lora_a"), &self.a);
        let b = binder.adapter(g, || format!("{name}.lora_b"), &self.b);
        let down = g.matmul_t(x, a, false, true)?;
        let up = g.matmul_t(down, b, false, true)?;
        let delta = g.scale(up, self.scale)?;
        g.add(base, delta)
    }

    /// Fold the update into a plain map `W' = W + (alpha / r) B A`.
    ///
    /// An adapter can be merged once.
    pub fn merge(&mut self) -> Result<Linear> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let (d_out, d_in, r) = (self.base.d_out(), self.base.d_in(), self.rank());
        let (a, b) = (self.a.data(), self.b.data());
        let mut w = self.base.weight.data().to_vec();
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += b[i * r + k] * a[k * d_in + j];
                }
                w[i * d_in + j] += self.scale * acc;
            }
        }
        self.merged = true;
        Ok(Linear {
            weight: Arc::new(Tensor::new(vec![d_out, d_in], w)?),
            bias: Arc::clone(&self.base.bias),
        })
    }
}

/// Attach an adapter to `layer`. `A ~ N(0, init_std^2)`, `B = 0`.
pub fn wrap_linear(layer: Linear, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<LoraLinear> {
    cfg.validate()?;
    let (d_in, d_out) = (layer.d_in(), layer.d_out());
    if cfg.rank > d_in.min(d_out) {
        return Err(Error::Rank {
            rank: cfg.rank,
            d_in,
            d_out,
        });
    }
    Ok(LoraLinear {
        a: Arc::new(Tensor::randn(&[cfg.rank, d_in], cfg.init_std(), rng)),
        b: Arc::new(Tensor::zeros(&[d_out, cfg.rank])),
        scale: cfg.scale(),
        merged: false,
        base: layer,
    })
}

/// Sorted names of the linear maps `target` covers.
pub fn select_targets(model: &Encoder, target: LoraTarget) -> Vec<String> {
    let mut names: Vec<String> = model
        .linears()
        .map(|(n, _)| n)
        .filter(|n| target.slots().iter().any(|s| n.ends_with(s)))
        .collect();
    names.sort();
    names
}

/// Wrap every map selected by `cfg.target`, drawing `A` factors in name
/// order from `cfg.seed`. Returns the wrapped names.
pub fn apply_lora(model: &mut Encoder, cfg: &LoraConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let names = select_targets(model, cfg.target);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for name in &names {
        let slot = model.linear_mut(name).expect("selected from the model");
        let base = match slot {
            Projection::Plain(l) => l.clone(),
            Projection::Adapted(_) => return Err(Error::Config(format!("{name} already carries an adapter"))),
        };
        *slot = Projection::Adapted(wrap_linear(base, cfg, &mut rng)?);
    }
    Ok(names)
}

/// Adapters in the model, sorted by name.
pub fn adapters(model: &Encoder) -> Vec<(String, &LoraLinear)> {
    let mut out: Vec<(String, &LoraLinear)> = model
        .linears()
        .filter_map(|(n, p)| p.adapter().map(|a| (n, a)))
        .collect();
    out.sort_by(|x, y| x.0.cmp(&y.0));
    out
}

/// Element count of all `A` and `B` factors.
pub fn trainable_param_count(model: &Encoder) -> usize {
    adapters(model).iter().map(|(_, a)| a.trainable_params()).sum()
}
