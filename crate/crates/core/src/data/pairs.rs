use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::Triplet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Accepts the names used by the common NLI releases, and the numeric
    /// codes 0/1/2 of the hub exports.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "entailment" | "0" => Ok(Label::Entailment),
            "neutral" | "1" => Ok(Label::Neutral),
            "contradiction" | "contradictory" | "2" => Ok(Label::Contradiction),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// One labeled premise/hypothesis pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
    pub lang: String,
}

impl PairRecord {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>, label: Label, lang: &str) -> Result<Self> {
        let p = Self {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            label,
            lang: lang.to_string(),
        };
        if p.premise.is_empty() || p.hypothesis.is_empty() {
            return Err(Error::Data("empty premise or hypothesis".into()));
        }
        Ok(p)
    }
}

/// Output of [`pairs_to_triplets`].
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    /// Premises dropped for lacking an entailment or a contradiction.
    pub skipped_premises: usize,
}

#[derive(Default)]
struct Group<'a> {
    entail: Vec<&'a str>,
    contra: Vec<&'a str>,
}

/// Groups pairs by exact premise text within a language and emits every
/// (entailment, contradiction) combination, in order of first appearance.
pub fn pairs_to_triplets(pairs: &[PairRecord]) -> TripletBuild {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut groups: Vec<((&str, &str), Group)> = Vec::new();
    for p in pairs {
        let key = (p.lang.as_str(), p.premise.as_str());
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push((key, Group::default()));
            groups.len() - 1
        });
        let g = &mut groups[slot].1;
        match p.label {
            Label::Entailment => g.entail.push(&p.hypothesis),
            Label::Contradiction => g.contra.push(&p.hypothesis),
            Label::Neutral => {}
        }
    }

    let mut triplets = Vec::new();
    let mut skipped = 0;
    for ((lang, premise), g) in groups {
        if g.entail.is_empty() || g.contra.is_empty() {
            skipped += 1;
            continue;
        }
        for e in &g.entail {
            for c in &g.contra {
                triplets.push(Triplet {
                    premise: premise.to_string(),
                    entailment: e.to_string(),
                    contradiction: c.to_string(),
                    lang_p: lang.to_string(),
                    lang_e: lang.to_string(),
                    lang_c: lang.to_string(),
                });
            }
        }
    }
    TripletBuild {
        triplets,
        skipped_premises: skipped,
    }
}

/// Parses `premise TAB hypothesis TAB label [TAB lang]`.
pub fn parse_pairs_tsv(text: &str) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 4 columns, found {}", cols.len()),
            });
        }
        let label = cols[2].parse::<Label>().map_err(|e| Error::Validation {
            line: line_no,
            message: e.to_string(),
        })?;
        let lang = cols.get(3).copied().unwrap_or("und");
        if cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Validation {
                line: line_no,
                message: "empty field".into(),
            });
        }
        out.push(PairRecord {
            premise: cols[0].to_string(),
            hypothesis: cols[1].to_string(),
            label,
            lang: lang.to_string(),
        });
    }
    Ok(out)
}

pub fn load_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    parse_pairs_tsv(&std::fs::read_to_string(path)?)
}

/// Pairs read from a headered NLI release, plus rows without a usable label.
#[derive(Clone, Debug, PartialEq)]
pub struct NliTable {
    pub pairs: Vec<PairRecord>,
    pub skipped_rows: usize,
}

fn find_column(header: &[&str], names: &[&str]) -> Option<usize> {
    header.iter().position(|h| names.contains(&h.trim()))
}

/// Reads the tab-separated layouts of SNLI (`snli_1.0_*.txt`), MultiNLI
/// (`*.tsv`), XNLI dev/test (`xnli.*.tsv`) and the XNLI machine-translated
/// training files (`premise hypo label`). Columns are located by header name.
/// Rows labeled `-` or missing text are counted and skipped. `default_lang`
/// applies when the file has no `language` column.
pub fn parse_nli_table(text: &str, default_lang: &str) -> Result<NliTable> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?
        .split('\t')
        .collect();
    let missing = |what: &str| Error::Parse {
        line: 1,
        message: format!("no {what} column in header"),
    };
    let premise = find_column(&header, &["sentence1", "premise"]).ok_or_else(|| missing("premise"))?;
    let hypothesis = find_column(&header, &["sentence2", "hypo", "hypothesis"]).ok_or_else(|| missing("hypothesis"))?;
    let label = find_column(&header, &["gold_label", "label"]).ok_or_else(|| missing("label"))?;
    let lang = find_column(&header, &["language", "lang"]);
    let needed = [premise, hypothesis, label, lang.unwrap_or(0)].into_iter().max().unwrap_or(0) + 1;

    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < needed {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected at least {needed} columns, found {}", cols.len()),
            });
        }
        let tag = lang.map_or(default_lang, |c| cols[c]);
        match cols[label].parse::<Label>() {
            Ok(l) if !cols[premise].is_empty() && !cols[hypothesis].is_empty() => {
                pairs.push(PairRecord::new(cols[premise], cols[hypothesis], l, tag)?);
            }
            _ => skipped += 1,
        }
    }
    Ok(NliTable {
        pairs,
        skipped_rows: skipped,
    })
}

pub fn load_nli_table(path: impl AsRef<Path>, default_lang: &str) -> Result<NliTable> {
    parse_nli_table(&std::fs::read_to_string(path)?, default_lang)
}
