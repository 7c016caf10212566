//! Character encoder: a trainable embedding table, optionally summed with a
//! projection of precomputed per-character vectors read from a file.
//!
//! External embedding file layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "HGEE" | version (1) | d_ext | count
//! count x { sentence_id | rows | rows * d_ext f32 values, row-major }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2};

use crate::corpus::{Sentence, LAT, NUM, PUNC};
use crate::error::{Error, Result};

pub const PAD: &str = "⟨PAD⟩";
pub const UNK: &str = "⟨UNK⟩";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl CharVocab {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if index.len() != symbols.len() {
            return Err(Error::InvalidInput("duplicate symbol in character vocabulary".into()));
        }
        if !index.contains_key(UNK) {
            return Err(Error::InvalidInput("character vocabulary lacks ⟨UNK⟩".into()));
        }
        Ok(CharVocab { symbols, index })
    }

    /// Builds the vocabulary from training sentences. Special symbols come
    /// first, then the remaining characters in codepoint order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let specials = [PAD, UNK, NUM, LAT, PUNC];
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for s in sentences {
            for c in &s.chars {
                if !specials.contains(&c.as_str()) {
                    seen.insert(c);
                }
            }
        }
        let symbols = specials.iter().copied().chain(seen).map(str::to_string).collect();
        Self::from_symbols(symbols).expect("specials are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or_else(|| self.unk())
    }

    pub fn ids(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.chars.iter().map(|c| self.id(c)).collect()
    }
}

/// Row `i` is `table[ids[i]]`, plus `ext[i] · proj` when both are present.
pub fn encode(
    ids: &[usize],
    table: &Array2<f64>,
    ext: Option<(ArrayView2<f64>, &Array2<f64>)>,
) -> Result<Array2<f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty sentence".into()));
    }
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).assign(&table.row(id));
    }
    if let Some((rows, proj)) = ext {
        if rows.nrows() != ids.len() || rows.ncols() != proj.nrows() || proj.ncols() != table.ncols() {
            return Err(Error::Shape(format!(
                "external rows {:?} / projection {:?} do not fit {} x {}",
                rows.dim(),
                proj.dim(),
                ids.len(),
                table.ncols()
            )));
        }
        out += &rows.dot(proj);
    }
    Ok(out)
}

/// Accumulates gradients of the encoder output into the table and projection.
pub fn encode_backward(
    ids: &[usize],
    d_out: &Array2<f64>,
    d_table: &mut Array2<f64>,
    ext: Option<(ArrayView2<f64>, &mut Array2<f64>)>,
) {
    for (i, &id) in ids.iter().enumerate() {
        let mut row = d_table.row_mut(id);
        row += &d_out.row(i);
    }
    if let Some((rows, d_proj)) = ext {
        *d_proj += &rows.t().dot(d_out);
    }
}

pub const EXT_MAGIC: &[u8; 4] = b"HGEE";
pub const EXT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub rows: BTreeMap<usize, Array2<f64>>,
    /// Sentence ids whose record did not match the sentence length.
    pub rejected: Vec<usize>,
}

impl ExternalEmbeddings {
    pub fn get(&self, sentence: usize) -> Option<ArrayView2<'_, f64>> {
        self.rows.get(&sentence).map(|m| m.view())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses an external embedding file. `lengths[i]` is the character count of
/// sentence `i`; records whose row count disagrees are rejected individually.
pub fn parse_external_embeddings(bytes: &[u8], lengths: &[usize]) -> Result<ExternalEmbeddings> {
    let bad = |m: &str| Error::InvalidInput(format!("external embeddings: {m}"));
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(EXT_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != EXT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if dim == 0 {
        return Err(bad("zero dimension"));
    }
    let mut out = ExternalEmbeddings {
        dim,
        ..Default::default()
    };
    for _ in 0..count {
        let id = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let rows = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let data = r.take(rows * dim * 4).ok_or_else(|| bad("truncated record"))?;
        if lengths.get(id) != Some(&rows) {
            warn!("external embeddings: sentence {id} has {rows} rows, rejected");
            out.rejected.push(id);
            continue;
        }
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.rows
            .insert(id, Array2::from_shape_vec((rows, dim), values).expect("sized above"));
    }
    Ok(out)
}

pub fn load_external_embeddings(path: &Path, lengths: &[usize]) -> Result<ExternalEmbeddings> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_external_embeddings(&bytes, lengths)
}

/// Writes records in the external embedding format.
pub fn write_external_embeddings<W: Write>(
    mut w: W,
    dim: usize,
    records: &[(usize, Array2<f32>)],
) -> std::io::Result<()> {
    w.write_all(EXT_MAGIC)?;
    for v in [EXT_VERSION, dim as u32, records.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (id, m) in records {
        assert_eq!(m.ncols(), dim);
        w.write_all(&(*id as u32).to_le_bytes())?;
        w.write_all(&(m.nrows() as u32).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}
