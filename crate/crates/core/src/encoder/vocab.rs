use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: usize = 2;

/// Token to id mapping with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from distinct tokens; token `i` gets id `i + 2`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::default();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if v.index.contains_key(&tok) {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
            v.push(tok);
        }
        Ok(v)
    }

    /// Collects whitespace tokens in order of first occurrence.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut v = Vocab::default();
        for text in texts {
            for tok in text.split_whitespace() {
                if !v.index.contains_key(tok) {
                    v.push(tok.to_string());
                }
            }
        }
        v
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len() + RESERVED);
        self.tokens.push(tok);
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            _ => self.tokens.get(id - RESERVED).map(String::as_str),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `n` (0-based) is id `n + 2`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Vocab::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("invalid vocabulary token {line:?}"),
                });
            }
            if v.index.contains_key(line) {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            v.push(line.to_string());
        }
        Ok(v)
    }
}

/// Padded id matrix for a batch of sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    /// `batch x len` ids, row-major, `PAD`-padded.
    pub ids: Vec<usize>,
    /// 1.0 where `ids` holds a real token, 0.0 on padding.
    pub mask: Vec<f64>,
    pub batch: usize,
    pub len: usize,
    pub langs: Vec<String>,
}

impl TokenizedBatch {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn mask_row(&self, i: usize) -> &[f64] {
        &self.mask[i * self.len..(i + 1) * self.len]
    }

    pub fn with_langs(mut self, langs: Vec<String>) -> Result<Self> {
        if langs.len() != self.batch {
            return Err(Error::Contract(format!(
                "{} language tags for a batch of {}",
                langs.len(),
                self.batch
            )));
        }
        self.langs = langs;
        Ok(self)
    }
}

/// Whitespace tokenisation, truncation to `max_len`, and padding to the
/// longest sentence in the batch. Language tags default to `"und"`.
pub fn tokenize<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_len: usize) -> Result<TokenizedBatch> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let ids: Vec<usize> = text.as_ref().split_whitespace().take(max_len).map(|t| vocab.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::EmptySentence { index: i });
        }
        rows.push(ids);
    }
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![PAD; rows.len() * len];
    let mut mask = vec![0.0; rows.len() * len];
    for (i, row) in rows.iter().enumerate() {
        ids[i * len..i * len + row.len()].copy_from_slice(row);
        mask[i * len..i * len + row.len()].fill(1.0);
    }
    Ok(TokenizedBatch {
        ids,
        mask,
        batch: rows.len(),
        len,
        langs: vec!["und".to_string(); rows.len()],
    })
}
