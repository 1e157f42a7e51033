use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `N x d` sentence embeddings with ids and language tags.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<String>,
    langs: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f64>, ids: Vec<String>, langs: Vec<String>) -> Result<Self> {
        let n = ids.len();
        if vectors.len() != n * dim || langs.len() != n {
            return Err(Error::Contract(format!(
                "embedding set with {n} ids, {} tags and {} values for dim {dim}",
                langs.len(),
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embedding_set" });
        }
        if dim > 0 {
            for (r, row) in vectors.chunks(dim).enumerate() {
                if row.iter().all(|&v| v == 0.0) {
                    return Err(Error::ZeroNorm { row: r });
                }
            }
        } else if n > 0 {
            return Err(Error::ZeroNorm { row: 0 });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate embedding id {id:?}")));
            }
        }
        Ok(Self { dim, vectors, ids, langs })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            ids: Vec::new(),
            langs: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.as_ref().len() != dim {
                return Err(Error::shape("embedding_set", &[dim], &[r.as_ref().len()]));
            }
            vectors.extend_from_slice(r.as_ref());
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(dim, vectors, ids, vec!["und".to_string(); rows.len()])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn with_ids(self, ids: Vec<String>) -> Result<Self> {
        Self::new(self.dim, self.vectors, ids, self.langs)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        let mut langs = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("row {i} out of range for {} rows", self.len())));
            }
            vectors.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
            langs.push(self.langs[i].clone());
        }
        Self::new(self.dim, vectors, ids, langs)
    }

    /// Row `i` scaled to unit length, accumulated in `f64`.
    pub(crate) fn unit_rows(&self) -> Vec<f64> {
        let mut out = self.vectors.clone();
        if self.dim == 0 {
            return out;
        }
        for row in out.chunks_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Storage width of embedding values on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn flag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

const MAGIC: &[u8; 5] = b"MSTE1";

/// Binary embedding file: magic `MSTE1`, `u32` N, `u32` d, `u8` width
/// (4 or 8), `N * d` little-endian floats row-major, then N ids and N
/// language tags, each terminated by a newline.
pub fn encode_embeddings(set: &EmbeddingSet, precision: Precision) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len()).map_err(|_| Error::Contract("too many embeddings for u32 header".into()))?;
    let d = u32::try_from(set.dim()).map_err(|_| Error::Contract("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(14 + set.vectors.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(precision.flag());
    for &v in &set.vectors {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    for text in set.ids.iter().chain(&set.langs) {
        if text.contains('\n') {
            return Err(Error::Data(format!("id or tag {text:?} contains a newline")));
        }
        out.extend_from_slice(text.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbeddingSet, Precision)> {
    let bad = |m: &str| Error::Data(format!("malformed embedding file: {m}"));
    if bytes.len() < 14 || &bytes[..5] != MAGIC {
        return Err(bad("missing MSTE1 header"));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let precision = match bytes[13] {
        4 => Precision::F32,
        8 => Precision::F64,
        f => return Err(bad(&format!("precision flag {f}"))),
    };
    let width = precision.flag() as usize;
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(width))
        .ok_or_else(|| bad("size overflow"))?;
    let body = &bytes[14..];
    if body.len() < payload {
        return Err(bad("truncated vector payload"));
    }
    let vectors: Vec<f64> = match precision {
        Precision::F32 => body[..payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => body[..payload]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let text = std::str::from_utf8(&body[payload..]).map_err(|_| bad("ids are not UTF-8"))?;
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    if lines.len() != 2 * n || (n > 0 && !text.ends_with('\n')) {
        return Err(bad(&format!("expected {} id/tag lines, found {}", 2 * n, lines.len())));
    }
    let ids = lines[..n].iter().map(|s| s.to_string()).collect();
    let langs = lines[n..].iter().map(|s| s.to_string()).collect();
    Ok((EmbeddingSet::new(d, vectors, ids, langs)?, precision))
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet, precision: Precision) -> Result<()> {
    let bytes = encode_embeddings(set, precision)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    Ok(decode_embeddings(&fs::read(path)?)?.0)
}
