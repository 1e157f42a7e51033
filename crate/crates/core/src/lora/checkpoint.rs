//! Adapter checkpoints.
//!
//! One JSON header line, then the factors as little-endian `f64` in header
//! order. Base weights are not stored: the encoder config, seed included,
//! regenerates them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{adapters, apply_lora, LoraConfig};
use crate::autodiff::Tensor;
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};

const FORMAT: &str = "xlembed-adapters/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub encoder: EncoderConfig,
    /// `None` for an unadapted model.
    pub lora: Option<LoraConfig>,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model`'s adapters with everything needed to rebuild it.
pub fn encode_checkpoint(model: &Encoder, lora: Option<&LoraConfig>, vocab: &Vocab) -> Result<Vec<u8>> {
    let ads = adapters(model);
    if lora.is_none() != ads.is_empty() {
        return Err(Error::Contract("LoRA config must be given exactly when the model has adapters".into()));
    }
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, ad) in &ads {
        for (suffix, t) in [("lora_a", ad.a()), ("lora_b", ad.b())] {
            tensors.push(TensorEntry {
                name: format!("{name}.{suffix}"),
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        encoder: model.config().clone(),
        lora: lora.cloned(),
        vocab: vocab.tokens().to_vec(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

/// Rebuilds the model and vocabulary. Any disagreement between header,
/// payload and the adapters the config implies is a config error.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Encoder, Option<LoraConfig>, Vocab)> {
    let bad = |m: String| Error::Config(format!("checkpoint: {m}"));
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", header.format)));
    }
    let vocab = Vocab::from_tokens(header.vocab.iter().map(String::as_str))?;
    if vocab.size() != header.encoder.vocab_size {
        return Err(bad(format!(
            "vocabulary has {} ids, encoder expects {}",
            vocab.size(),
            header.encoder.vocab_size
        )));
    }
    let mut model = Encoder::new(header.encoder.clone())?;
    if let Some(cfg) = &header.lora {
        apply_lora(&mut model, cfg)?;
    }

    let expected: Vec<TensorEntry> = adapters(&model)
        .iter()
        .flat_map(|(name, ad)| {
            [("lora_a", ad.a()), ("lora_b", ad.b())].map(|(s, t)| TensorEntry {
                name: format!("{name}.{s}"),
                shape: t.shape().to_vec(),
            })
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("stored tensors do not match the adapter config".into()));
    }
    let payload = &bytes[split + 1..];
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(bad(format!("payload holds {} bytes, expected {}", payload.len(), total * 8)));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |shape: &[usize]| Tensor::new(shape.to_vec(), values.by_ref().take(shape.iter().product()).collect());
    for pair in expected.chunks(2) {
        let a = take(&pair[0].shape)?;
        let b = take(&pair[1].shape)?;
        let layer = pair[0].name.trim_end_matches(".lora_a");
        model
            .linear_mut(layer)
            .and_then(|p| p.adapter_mut())
            .ok_or_else(|| bad(format!("no adapter at {layer}")))?
            .set_factors(a, b)?;
    }
    Ok((model, header.lora, vocab))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Encoder, lora: Option<&LoraConfig>, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, lora, vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Encoder, Option<LoraConfig>, Vocab)> {
    decode_checkpoint(&std::fs::read(path)?)
}
