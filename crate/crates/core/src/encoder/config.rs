use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Standard deviation of the token embedding table.
    #[serde(default = "default_token_std")]
    pub token_init_std: f64,
    /// Standard deviation of the learned absolute position table.
    #[serde(default = "default_position_std")]
    pub position_init_std: f64,
    /// Dropout rate applied in training mode only.
    #[serde(default)]
    pub dropout: f64,
}

fn default_token_std() -> f64 {
    1.0
}

fn default_position_std() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder.d_model={} is not divisible by encoder.n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder.dropout={} outside [0, 1)", self.dropout)));
        }
        if !(self.token_init_std > 0.0 && self.position_init_std >= 0.0) {
            return Err(Error::Config("encoder init scales must be positive".into()));
        }
        Ok(())
    }
}

/// Model-size presets for the scaling sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Medium,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Small, Preset::Medium, Preset::Large];

    /// `(d_model, n_layers, n_heads, d_ff)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Small => (32, 2, 2, 64),
            Preset::Medium => (64, 4, 4, 128),
            Preset::Large => (128, 6, 8, 256),
        }
    }

    pub fn config(self, vocab_size: usize, max_len: usize, seed: u64) -> EncoderConfig {
        let (d_model, n_layers, n_heads, d_ff) = self.dims();
        EncoderConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_len,
            seed,
            token_init_std: default_token_std(),
            position_init_std: default_position_std(),
            dropout: 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!("unknown preset {other:?} (small|medium|large)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            p.config(100, 16, 0).validate().unwrap();
        }
        assert!("huge".parse::<Preset>().is_err());
        assert_eq!("Large".parse::<Preset>().unwrap(), Preset::Large);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = Preset::Small.config(10, 4, 0);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 2;
        c.max_len = 0;
        assert!(c.validate().is_err());
    }
}
