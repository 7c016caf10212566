//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "HGSEGCKP"
//! version      u32
//! header_len   u64
//! header       JSON: configs, seed, vocabularies, tensor names and shapes,
//!              training state, optimizer step count
//! data         f64 values of every tensor in header order; when the header
//!              says so, the optimizer's first and second moments follow in
//!              the same order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Lexicon;
use crate::encoder::CharVocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::ngram::{NgramEntry, NgramVocab};
use crate::trainer::{Optimizer, OptimizerKind, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"HGSEGCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerInfo {
    kind: OptimizerKind,
    t: u64,
    moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    seed: u64,
    train: Option<TrainConfig>,
    state: Option<TrainState>,
    optimizer: Option<OptimizerInfo>,
    chars: Vec<String>,
    lexicon: Vec<(String, u64)>,
    ngrams: Vec<(String, NgramEntry)>,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
    pub optimizer: Option<Optimizer>,
}

fn push_values(buf: &mut Vec<u8>, p: &ModelParams) {
    for t in p.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn fill_values(data: &mut &[u8], p: &mut ModelParams) -> Result<()> {
    for t in p.tensors_mut() {
        let n = t.len() * 8;
        if data.len() < n {
            return Err(Error::Checkpoint("tensor data truncated".into()));
        }
        for (v, b) in t.iter_mut().zip(data[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        *data = &data[n..];
    }
    Ok(())
}

impl Checkpoint {
    /// A checkpoint holding only the model, for inference.
    pub fn from_model(model: Model, seed: u64) -> Self {
        Checkpoint {
            model,
            seed,
            train: None,
            state: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let moments = self.optimizer.as_ref().and_then(|o| o.moments.as_ref());
        let header = Header {
            model: m.config,
            seed: self.seed,
            train: self.train.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerInfo {
                kind: o.kind,
                t: o.t,
                moments: o.moments.is_some(),
            }),
            chars: m.chars.symbols().to_vec(),
            lexicon: m.lexicon.iter().map(|(w, c)| (w.to_string(), c)).collect(),
            ngrams: m.ngrams.iter().map(|(w, e)| (w.to_string(), *e)).collect(),
            tensors: m
                .params
                .shapes()
                .into_iter()
                .map(|(name, shape)| TensorInfo { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(json.len() + 20 + m.params.num_values() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        push_values(&mut buf, &m.params);
        if let Some((a, b)) = moments {
            push_values(&mut buf, a);
            push_values(&mut buf, b);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("header truncated"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let chars = CharVocab::from_symbols(header.chars)?;
        let mut lexicon = Lexicon::new();
        for (w, c) in &header.lexicon {
            lexicon.insert(w, *c)?;
        }
        let mut ngrams = NgramVocab::new();
        for (w, e) in header.ngrams {
            ngrams.insert(w, e);
        }
        let mut params = ModelParams::zeros(&header.model, chars.len(), lexicon.len(), ngrams.len());
        let expected: Vec<TensorInfo> = params
            .shapes()
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the configuration"));
        }
        let mut data = &bytes[20 + len..];
        fill_values(&mut data, &mut params)?;
        let optimizer = match header.optimizer {
            Some(info) => {
                let moments = if info.moments {
                    let mut a = params.zeros_like();
                    let mut b = params.zeros_like();
                    fill_values(&mut data, &mut a)?;
                    fill_values(&mut data, &mut b)?;
                    Some((a, b))
                } else {
                    None
                };
                Some(Optimizer {
                    kind: info.kind,
                    t: info.t,
                    moments,
                })
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model::new(header.model, chars, lexicon, ngrams, params)?;
        Ok(Checkpoint {
            model,
            seed: header.seed,
            train: header.train,
            state: header.state,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
