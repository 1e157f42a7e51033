use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::triplet::{Triplet, TripletGroup};
use crate::encoder::{tokenize, TokenizedBatch, Vocab, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each triplet is used in the language it was stored in.
    AsIs,
    /// Each role of a triplet is drawn from a uniformly chosen translation.
    CrossLingual,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_is" | "asis" => Ok(Sampling::AsIs),
            "cross_lingual" | "crosslingual" => Ok(Sampling::CrossLingual),
            _ => Err(Error::Config(format!("unknown sampling {s:?} (expected as_is or cross_lingual)"))),
        }
    }
}

/// Draws one triplet from a group of translations.
///
/// `AsIs` returns the first variant. `CrossLingual` picks a variant for each
/// role independently and uniformly; with `distinct` the three roles get
/// three different languages. A one-language group always yields its only
/// variant.
pub fn sample_triplet<R: Rng + ?Sized>(group: &TripletGroup, sampling: Sampling, distinct: bool, rng: &mut R) -> Result<Triplet> {
    let n = group.variants.len();
    if n == 0 {
        return Err(Error::Data("triplet group without variants".into()));
    }
    if sampling == Sampling::AsIs || n == 1 {
        return Ok(group.variants[0].clone());
    }
    let picks: [usize; 3] = if distinct {
        if n < 3 {
            return Err(Error::Data(format!("distinct languages need 3 translations, group has {n}")));
        }
        let idx = sample(rng, n, 3);
        [idx.index(0), idx.index(1), idx.index(2)]
    } else {
        [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)]
    };
    let (p, e, c) = (&group.variants[picks[0]], &group.variants[picks[1]], &group.variants[picks[2]]);
    Ok(Triplet {
        premise: p.premise.clone(),
        entailment: e.entailment.clone(),
        contradiction: c.contradiction.clone(),
        lang_p: p.lang_p.clone(),
        lang_e: e.lang_e.clone(),
        lang_c: c.lang_c.clone(),
    })
}

/// Tokenized premises, positives and negatives of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub premises: TokenizedBatch,
    pub positives: TokenizedBatch,
    pub negatives: TokenizedBatch,
}

/// Samples and tokenizes one batch from `groups`.
pub fn build_batch<R: Rng + ?Sized>(
    groups: &[&TripletGroup],
    sampling: Sampling,
    distinct: bool,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    let triplets = groups
        .iter()
        .map(|g| sample_triplet(g, sampling, distinct, rng))
        .collect::<Result<Vec<_>>>()?;
    let side = |text: fn(&Triplet) -> &str, lang: fn(&Triplet) -> &str| -> Result<TokenizedBatch> {
        let texts: Vec<&str> = triplets.iter().map(text).collect();
        tokenize(&texts, vocab, max_len)?.with_langs(triplets.iter().map(|t| lang(t).to_string()).collect())
    };
    Ok(TripletBatch {
        premises: side(|t| &t.premise, |t| &t.lang_p)?,
        positives: side(|t| &t.entailment, |t| &t.lang_e)?,
        negatives: side(|t| &t.contradiction, |t| &t.lang_c)?,
    })
}

impl TripletBatch {
    pub fn size(&self) -> usize {
        self.premises.batch
    }

    /// Premises, positives and negatives as one `3B`-row batch padded to a
    /// common length, so a single forward pass encodes all of them.
    pub fn stacked(&self) -> TokenizedBatch {
        let parts = [&self.premises, &self.positives, &self.negatives];
        let len = parts.iter().map(|p| p.len).max().unwrap_or(0);
        let rows: usize = parts.iter().map(|p| p.batch).sum();
        let mut ids = vec![PAD; rows * len];
        let mut mask = vec![0.0; rows * len];
        let mut langs = Vec::with_capacity(rows);
        let mut r = 0;
        for p in parts {
            for i in 0..p.batch {
                ids[r * len..r * len + p.len].copy_from_slice(p.row(i));
                mask[r * len..r * len + p.len].copy_from_slice(p.mask_row(i));
                r += 1;
            }
            langs.extend(p.langs.iter().cloned());
        }
        TokenizedBatch {
            ids,
            mask,
            batch: rows,
            len,
            langs,
        }
    }
}
