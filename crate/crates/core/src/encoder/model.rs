use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use super::vocab::{tokenize, TokenizedBatch, Vocab};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::EmbeddingSet;
use crate::lora::LoraLinear;

const LN_EPS: f64 = 1e-5;

/// Which stored tensors become differentiable leaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Nothing is differentiable (inference).
    Frozen,
    /// Only LoRA factors are differentiable (fine-tuning).
    Adapters,
    /// Every tensor is differentiable (gradient checks).
    All,
}

/// Records the leaves created for named tensors during one forward pass.
#[derive(Debug)]
pub struct Binder {
    mode: ParamMode,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(mode: ParamMode) -> Self {
        Self { mode, bound: Vec::new() }
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    /// Differentiable leaves in creation order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub(crate) fn base(&mut self, g: &mut Graph, name: impl FnOnce() -> String, t: &Arc<Tensor>) -> Var {
        self.leaf(g, name, t, self.mode == ParamMode::All)
    }

    pub(crate) fn adapter(&mut self, g: &mut Graph, name: impl FnOnce() -> String, t: &Arc<Tensor>) -> Var {
        self.leaf(g, name, t, self.mode != ParamMode::Frozen)
    }

    fn leaf(&mut self, g: &mut Graph, name: impl FnOnce() -> String, t: &Arc<Tensor>, trainable: bool) -> Var {
        if trainable {
            let v = g.param(Arc::clone(t));
            self.bound.push((name(), v));
            v
        } else {
            g.constant(Arc::clone(t))
        }
    }
}

/// Affine map `y = x W^T + b` with `W: [d_out, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Arc::new(Tensor::randn(&[d_out, d_in], std, rng)),
            bias: Arc::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, binder: &mut Binder, name: &str) -> Result<Var> {
        let w = binder.base(g, || format!("{name}.weight"), &self.weight);
        let b = binder.base(g, || format!("{name}.bias"), &self.bias);
        let y = g.matmul_t(x, w, false, true)?;
        g.add(y, b)
    }
}

/// A linear slot in the encoder, optionally carrying a low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Plain(Linear),
    Adapted(LoraLinear),
}

impl Projection {
    pub fn base(&self) -> &Linear {
        match self {
            Projection::Plain(l) => l,
            Projection::Adapted(l) => l.base(),
        }
    }

    pub fn adapter(&self) -> Option<&LoraLinear> {
        match self {
            Projection::Plain(_) => None,
            Projection::Adapted(l) => Some(l),
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LoraLinear> {
        match self {
            Projection::Plain(_) => None,
            Projection::Adapted(l) => Some(l),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, binder: &mut Binder, name: &str) -> Result<Var> {
        match self {
            Projection::Plain(l) => l.forward(g, x, binder, name),
            Projection::Adapted(l) => l.forward(g, x, binder, name),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Arc<Tensor>,
    pub beta: Arc<Tensor>,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Arc::new(Tensor::full(&[d], 1.0)),
            beta: Arc::new(Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, binder: &mut Binder, name: &str) -> Result<Var> {
        let gamma = binder.base(g, || format!("{name}.gamma"), &self.gamma);
        let beta = binder.base(g, || format!("{name}.beta"), &self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Linear slots of one block, in a fixed order.
pub const BLOCK_LINEARS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"];

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln_attn: Norm,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub ln_ffn: Norm,
    pub up: Projection,
    pub down: Projection,
}

impl Block {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            ln_attn: Norm::new(d),
            q: Projection::Plain(Linear::init(d, d, rng)),
            k: Projection::Plain(Linear::init(d, d, rng)),
            v: Projection::Plain(Linear::init(d, d, rng)),
            o: Projection::Plain(Linear::init(d, d, rng)),
            ln_ffn: Norm::new(d),
            up: Projection::Plain(Linear::init(d, cfg.d_ff, rng)),
            down: Projection::Plain(Linear::init(cfg.d_ff, d, rng)),
        }
    }

    /// The slot named by one of [`BLOCK_LINEARS`].
    pub fn linear(&self, slot: &str) -> Option<&Projection> {
        Some(match slot {
            "attn.q" => &self.q,
            "attn.k" => &self.k,
            "attn.v" => &self.v,
            "attn.o" => &self.o,
            "ffn.up" => &self.up,
            "ffn.down" => &self.down,
            _ => return None,
        })
    }

    pub fn linear_mut(&mut self, slot: &str) -> Option<&mut Projection> {
        Some(match slot {
            "attn.q" => &mut self.q,
            "attn.k" => &mut self.k,
            "attn.v" => &mut self.v,
            "attn.o" => &mut self.o,
            "ffn.up" => &mut self.up,
            "ffn.down" => &mut self.down,
            _ => return None,
        })
    }

    /// Every slot with its name, in [`BLOCK_LINEARS`] order.
    pub fn projections_mut(&mut self) -> [(&'static str, &mut Projection); 6] {
        [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
            ("ffn.up", &mut self.up),
            ("ffn.down", &mut self.down),
        ]
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mask: &[f64],
        heads: usize,
        binder: &mut Binder,
        name: &str,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let dh = shape[2] / heads;
        let h = self.ln_attn.forward(g, x, binder, &format!("{name}.ln_attn"))?;
        let q = self.q.forward(g, h, binder, &format!("{name}.attn.q"))?;
        let k = self.k.forward(g, h, binder, &format!("{name}.attn.k"))?;
        let v = self.v.forward(g, h, binder, &format!("{name}.attn.v"))?;
        let (q, k, v) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(v, heads)?);
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.masked_softmax(scores, mask)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.merge_heads(ctx, heads)?;
        let mut out = self.o.forward(g, ctx, binder, &format!("{name}.attn.o"))?;
        let mut dropout = dropout;
        if let Some((p, rng)) = dropout.as_mut() {
            out = g.dropout(out, *p, *rng)?;
        }
        let x = g.add(x, out)?;

        let h = self.ln_ffn.forward(g, x, binder, &format!("{name}.ln_ffn"))?;
        let up = self.up.forward(g, h, binder, &format!("{name}.ffn.up"))?;
        let act = g.gelu(up)?;
        let mut down = self.down.forward(g, act, binder, &format!("{name}.ffn.down"))?;
        if let Some((p, rng)) = dropout.as_mut() {
            down = g.dropout(down, *p, *rng)?;
        }
        g.add(x, down)
    }
}

/// Transformer encoder producing token-wise representations.
///
/// Learned absolute positions, pre-norm blocks, and a final layer norm.
/// Base weights are drawn from `config.seed`, so a config fully determines
/// the un-adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub tokens: Arc<Tensor>,
    pub positions: Arc<Tensor>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let tokens = Arc::new(Tensor::randn(&[config.vocab_size, d], config.token_init_std, &mut rng));
        let positions = Arc::new(Tensor::randn(&[config.max_len, d], config.position_init_std, &mut rng));
        let blocks = (0..config.n_layers).map(|_| Block::init(&config, &mut rng)).collect();
        Ok(Self {
            final_norm: Norm::new(d),
            config,
            tokens,
            positions,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// `(qualified name, projection)` for every linear slot, block-major.
    pub fn linears(&self) -> impl Iterator<Item = (String, &Projection)> {
        self.blocks.iter().enumerate().flat_map(|(i, b)| {
            BLOCK_LINEARS
                .iter()
                .map(move |slot| (format!("blocks.{i}.{slot}"), b.linear(slot).expect("known slot")))
        })
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Projection> {
        let rest = name.strip_prefix("blocks.")?;
        let (idx, slot) = rest.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        self.blocks.get_mut(idx)?.linear_mut(slot)
    }

    /// Every frozen tensor with its name: embeddings, norms, base weights.
    pub fn base_tensors(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            ("embed.tokens".to_string(), &self.tokens),
            ("embed.positions".to_string(), &self.positions),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln_attn.gamma"), &b.ln_attn.gamma));
            out.push((format!("blocks.{i}.ln_attn.beta"), &b.ln_attn.beta));
            out.push((format!("blocks.{i}.ln_ffn.gamma"), &b.ln_ffn.gamma));
            out.push((format!("blocks.{i}.ln_ffn.beta"), &b.ln_ffn.beta));
            for slot in BLOCK_LINEARS {
                let base = b.linear(slot).expect("known slot").base();
                out.push((format!("blocks.{i}.{slot}.weight"), &base.weight));
                out.push((format!("blocks.{i}.{slot}.bias"), &base.bias));
            }
        }
        out.push(("final_norm.gamma".to_string(), &self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &self.final_norm.beta));
        out
    }

    /// Number of scalar parameters, base and adapters together.
    pub fn total_param_count(&self) -> usize {
        let base: usize = self.base_tensors().iter().map(|(_, t)| t.numel()).sum();
        base + crate::lora::trainable_param_count(self)
    }

    /// Token-wise representations `[batch, len, d_model]`.
    pub fn encode(&self, g: &mut Graph, batch: &TokenizedBatch, binder: &mut Binder) -> Result<Var> {
        let table = binder.base(g, || "embed.tokens".to_string(), &self.tokens);
        self.encode_with_table(g, batch, table, binder, None)
    }

    /// Like [`Encoder::encode`], with active dropout when the config sets a
    /// non-zero rate.
    pub fn encode_train(
        &self,
        g: &mut Graph,
        batch: &TokenizedBatch,
        binder: &mut Binder,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let table = binder.base(g, || "embed.tokens".to_string(), &self.tokens);
        self.encode_with_table(g, batch, table, binder, Some(rng))
    }

    /// Encodes with a caller-supplied token table leaf; used to differentiate
    /// with respect to the embeddings.
    pub fn encode_with_table(
        &self,
        g: &mut Graph,
        batch: &TokenizedBatch,
        table: Var,
        binder: &mut Binder,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (b, l, d) = (batch.batch, batch.len, self.config.d_model);
        if l > self.config.max_len {
            return Err(Error::Config(format!(
                "batch length {l} exceeds encoder max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::VocabRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let tok = g.gather(table, &batch.ids)?;
        let pos_table = binder.base(g, || "embed.positions".to_string(), &self.positions);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.gather(pos_table, &pos_ids)?;
        let x = g.add(tok, pos)?;
        let mut x = g.reshape(x, &[b, l, d])?;
        let p = self.config.dropout;
        for (i, block) in self.blocks.iter().enumerate() {
            let dropout = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some((p, r)),
                _ => None,
            };
            x = block.forward(g, x, &batch.mask, self.config.n_heads, binder, &format!("blocks.{i}"), dropout)?;
        }
        self.final_norm.forward(g, x, binder, "final_norm")
    }
}

/// Average of token representations over non-padding positions:
/// `[batch, len, d]` and a `batch x len` 0/1 mask give `[batch, d]`.
pub fn mean_pool(g: &mut Graph, reps: Var, mask: &[f64]) -> Result<Var> {
    g.masked_row_mean(reps, mask)
}

/// Sentence embeddings for a corpus, computed in chunks of `batch_size`.
///
/// Row `i` of the result belongs to `texts[i]` and carries id `i`. The
/// output does not depend on how the corpus is partitioned.
pub fn embed_corpus<S: AsRef<str>>(
    texts: &[S],
    langs: &[String],
    model: &Encoder,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if langs.len() != texts.len() {
        return Err(Error::Contract(format!(
            "{} language tags for {} sentences",
            langs.len(),
            texts.len()
        )));
    }
    let d = model.d_model();
    let mut vectors = Vec::with_capacity(texts.len() * d);
    for (c, chunk) in texts.chunks(batch_size).enumerate() {
        let offset = c * batch_size;
        let batch = tokenize(chunk, vocab, model.config().max_len).map_err(|e| match e {
            Error::EmptySentence { index } => Error::EmptySentence { index: offset + index },
            e => e,
        })?;
        let mut g = Graph::new();
        let mut binder = Binder::new(ParamMode::Frozen);
        let reps = model.encode(&mut g, &batch, &mut binder).map_err(|e| Error::AtSentence {
            index: offset,
            source: Box::new(e),
        })?;
        let pooled = mean_pool(&mut g, reps, &batch.mask)?;
        vectors.extend_from_slice(g.value(pooled).data());
    }
    let ids = (0..texts.len()).map(|i| i.to_string()).collect();
    EmbeddingSet::new(d, vectors, ids, langs.to_vec())
}
