use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::contrastive::Triplet;
use crate::error::{Error, Result};

/// Parses `premise TAB entailment TAB contradiction [TAB lang_p TAB lang_e TAB lang_c]`.
pub fn parse_triplets_tsv(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 6 columns, found {}", cols.len()),
            });
        }
        if let Some(pos) = cols.iter().position(|c| c.is_empty()) {
            return Err(Error::Validation {
                line: line_no,
                message: format!("empty field in column {}", pos + 1),
            });
        }
        let lang = |k: usize| cols.get(3 + k).copied().unwrap_or("und").to_string();
        out.push(Triplet {
            premise: cols[0].to_string(),
            entailment: cols[1].to_string(),
            contradiction: cols[2].to_string(),
            lang_p: lang(0),
            lang_e: lang(1),
            lang_c: lang(2),
        });
    }
    Ok(out)
}

pub fn load_triplets_tsv(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    parse_triplets_tsv(&std::fs::read_to_string(path)?)
}

pub(crate) fn check_field(s: &str) -> Result<&str> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!("field {s:?} cannot be stored in a TSV cell")));
    }
    Ok(s)
}

/// Six-column form; always carries language tags.
pub fn format_triplets_tsv(triplets: &[Triplet]) -> Result<String> {
    let mut s = String::new();
    for t in triplets {
        let fields = [&t.premise, &t.entailment, &t.contradiction, &t.lang_p, &t.lang_e, &t.lang_c];
        for (k, f) in fields.into_iter().enumerate() {
            if k > 0 {
                s.push('\t');
            }
            s.push_str(check_field(f)?);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_triplets_tsv(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    std::fs::write(path, format_triplets_tsv(triplets)?)?;
    Ok(())
}

/// A sentence pair with a graded similarity score.
#[derive(Clone, Debug, PartialEq)]
pub struct StsPair {
    pub a: String,
    pub b: String,
    pub score: f64,
    pub lang_a: String,
    pub lang_b: String,
}

/// Parses `text_a TAB text_b TAB score [TAB lang_a TAB lang_b]`.
pub fn parse_sts_tsv(text: &str) -> Result<Vec<StsPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 5 columns, found {}", cols.len()),
            });
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Validation {
                line: line_no,
                message: "empty field".into(),
            });
        }
        let score: f64 = cols[2].parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Validation {
            line: line_no,
            message: format!("bad score {:?}", cols[2]),
        })?;
        out.push(StsPair {
            a: cols[0].to_string(),
            b: cols[1].to_string(),
            score,
            lang_a: cols.get(3).unwrap_or(&"und").to_string(),
            lang_b: cols.get(4).unwrap_or(&"und").to_string(),
        });
    }
    Ok(out)
}

pub fn load_sts_tsv(path: impl AsRef<Path>) -> Result<Vec<StsPair>> {
    parse_sts_tsv(&std::fs::read_to_string(path)?)
}

pub fn write_sts_tsv(path: impl AsRef<Path>, pairs: &[StsPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(
            s,
            "{}\t{}\t{:?}\t{}\t{}",
            check_field(&p.a)?,
            check_field(&p.b)?,
            p.score,
            check_field(&p.lang_a)?,
            check_field(&p.lang_b)?
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// One row of a parallel-sentence file: `id TAB lang TAB text`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelRow {
    pub id: String,
    pub lang: String,
    pub text: String,
}

pub fn parse_parallel_tsv(text: &str) -> Result<Vec<ParallelRow>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Validation {
                line: i + 1,
                message: "empty field".into(),
            });
        }
        out.push(ParallelRow {
            id: cols[0].to_string(),
            lang: cols[1].to_string(),
            text: cols[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_parallel_tsv(path: impl AsRef<Path>) -> Result<Vec<ParallelRow>> {
    parse_parallel_tsv(&std::fs::read_to_string(path)?)
}

pub fn write_parallel_tsv(path: impl AsRef<Path>, rows: &[ParallelRow]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", check_field(&r.id)?, check_field(&r.lang)?, check_field(&r.text)?);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Sentences of one language in a parallel file, ordered by id as they first
/// appear for `pivot`, so row `i` of every language holds the same sentence.
pub fn align_parallel(rows: &[ParallelRow], pivot: &str, lang: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut by_key: HashMap<(&str, &str), &str> = HashMap::new();
    for r in rows {
        by_key.entry((r.id.as_str(), r.lang.as_str())).or_insert(r.text.as_str());
    }
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for r in rows.iter().filter(|r| r.lang == pivot) {
        if by_key.get(&(r.id.as_str(), pivot)) != Some(&r.text.as_str()) {
            continue;
        }
        let t = by_key
            .get(&(r.id.as_str(), lang))
            .ok_or_else(|| Error::Data(format!("sentence {} has no {lang} translation", r.id)))?;
        src.push(r.text.clone());
        tgt.push(t.to_string());
    }
    Ok((src, tgt))
}
