use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Premise with an entailed and a contradicting hypothesis.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub premise: String,
    pub entailment: String,
    pub contradiction: String,
    pub lang_p: String,
    pub lang_e: String,
    pub lang_c: String,
}

impl Triplet {
    pub fn new(premise: impl Into<String>, entailment: impl Into<String>, contradiction: impl Into<String>, lang: &str) -> Result<Self> {
        let t = Self {
            premise: premise.into(),
            entailment: entailment.into(),
            contradiction: contradiction.into(),
            lang_p: lang.to_string(),
            lang_e: lang.to_string(),
            lang_c: lang.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, text) in [
            ("premise", &self.premise),
            ("entailment", &self.entailment),
            ("contradiction", &self.contradiction),
        ] {
            if text.trim().is_empty() {
                return Err(Error::Data(format!("empty {role} in triplet")));
            }
        }
        Ok(())
    }
}

/// Translations of the same triplet, one variant per language.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletGroup {
    pub variants: Vec<Triplet>,
}

impl TripletGroup {
    pub fn single(t: Triplet) -> Self {
        Self { variants: vec![t] }
    }
}

/// Training data: groups of parallel triplets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletCorpus {
    pub groups: Vec<TripletGroup>,
}

impl TripletCorpus {
    /// Each triplet forms its own single-language group.
    pub fn monolingual(triplets: Vec<Triplet>) -> Self {
        Self {
            groups: triplets.into_iter().map(TripletGroup::single).collect(),
        }
    }

    /// Line-aligned translations: `sets[l][i]` is triplet `i` in language `l`.
    pub fn parallel(sets: Vec<Vec<Triplet>>) -> Result<Self> {
        let n = sets.first().map_or(0, Vec::len);
        if sets.iter().any(|s| s.len() != n) {
            return Err(Error::Data("parallel triplet sets differ in length".into()));
        }
        let mut groups: Vec<TripletGroup> = (0..n).map(|_| TripletGroup { variants: Vec::new() }).collect();
        for set in sets {
            for (g, t) in groups.iter_mut().zip(set) {
                g.variants.push(t);
            }
        }
        Ok(Self { groups })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Largest number of language variants of any group.
    pub fn max_variants(&self) -> usize {
        self.groups.iter().map(|g| g.variants.len()).max().unwrap_or(0)
    }

    /// Every variant as a separate triplet.
    pub fn flatten(&self) -> Vec<Triplet> {
        self.groups.iter().flat_map(|g| g.variants.iter().cloned()).collect()
    }
}
