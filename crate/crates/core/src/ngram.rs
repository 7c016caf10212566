//! Accessor-variety n-gram extraction.
//!
//! For a string `s`, the left accessor variety counts the distinct characters
//! that precede `s` plus the number of sentences that start with `s`; the
//! right variety is symmetric. A string's score is the smaller of the two.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessorStats {
    pub frequency: u64,
    pub left_av: u64,
    pub right_av: u64,
}

impl AccessorStats {
    pub fn av(&self) -> u64 {
        self.left_av.min(self.right_av)
    }
}

#[derive(Default)]
struct Context {
    frequency: u64,
    preds: HashSet<u32>,
    succs: HashSet<u32>,
    starts: u64,
    ends: u64,
}

impl Context {
    fn merge(&mut self, other: Context) {
        self.frequency += other.frequency;
        self.preds.extend(other.preds);
        self.succs.extend(other.succs);
        self.starts += other.starts;
        self.ends += other.ends;
    }
}

type Table = HashMap<Vec<u32>, Context>;

fn count_shard(sentences: &[Vec<u32>], max_len: usize) -> Table {
    let mut table = Table::new();
    for ids in sentences {
        let n = ids.len();
        for i in 0..n {
            for len in 2..=max_len.min(n - i) {
                let ctx = table.entry(ids[i..i + len].to_vec()).or_default();
                ctx.frequency += 1;
                if i == 0 {
                    ctx.starts += 1;
                } else {
                    ctx.preds.insert(ids[i - 1]);
                }
                if i + len == n {
                    ctx.ends += 1;
                } else {
                    ctx.succs.insert(ids[i + len]);
                }
            }
        }
    }
    table
}

/// Frequency and left/right accessor variety of every substring of length
/// `2..=max_len`. Substrings never cross sentence boundaries and overlapping
/// occurrences are all counted.
///
/// `workers > 1` shards the sentences across threads; the result does not
/// depend on the shard count.
pub fn accessor_counts<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    max_len: usize,
    workers: usize,
) -> BTreeMap<String, AccessorStats> {
    let mut symbols: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let encoded: Vec<Vec<u32>> = sentences
        .into_iter()
        .map(|s| {
            s.chars
                .iter()
                .map(|c| {
                    *ids.entry(c.clone()).or_insert_with(|| {
                        symbols.push(c.clone());
                        (symbols.len() - 1) as u32
                    })
                })
                .collect()
        })
        .collect();
    if max_len < 2 {
        return BTreeMap::new();
    }

    let workers = workers.max(1);
    let chunk = encoded.len().div_ceil(workers).max(1);
    let mut shards: Vec<Table> = std::thread::scope(|scope| {
        let handles: Vec<_> = encoded
            .chunks(chunk)
            .map(|c| scope.spawn(move || count_shard(c, max_len)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("counting thread panicked")).collect()
    });

    let mut merged = shards.pop().unwrap_or_default();
    for shard in shards {
        for (k, v) in shard {
            merged.entry(k).or_default().merge(v);
        }
    }

    merged
        .into_iter()
        .map(|(k, c)| {
            let s: String = k.iter().map(|&i| symbols[i as usize].as_str()).collect();
            let stats = AccessorStats {
                frequency: c.frequency,
                left_av: c.preds.len() as u64 + c.starts,
                right_av: c.succs.len() as u64 + c.ends,
            };
            (s, stats)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub max_len: usize,
    pub min_freq: u64,
    pub av_threshold: u64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            max_len: 5,
            min_freq: 5,
            av_threshold: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramEntry {
    pub frequency: u64,
    pub av: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramVocab {
    entries: BTreeMap<String, NgramEntry>,
}

impl NgramVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ngram: String, entry: NgramEntry) {
        self.entries.insert(ngram, entry);
    }

    pub fn contains(&self, s: &str) -> bool {
        self.entries.contains_key(s)
    }

    pub fn get(&self, s: &str) -> Option<&NgramEntry> {
        self.entries.get(s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NgramEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries ordered by (length in characters, codepoints).
    pub fn sorted(&self) -> Vec<(&str, &NgramEntry)> {
        let mut v: Vec<_> = self.iter().map(|(k, e)| (tokenize(k).len(), k, e)).collect();
        v.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        v.into_iter().map(|(_, k, e)| (k, e)).collect()
    }

    /// One `ngram<TAB>frequency<TAB>av` line per entry.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, e) in self.sorted() {
            writeln!(w, "{k}\t{}\t{}", e.frequency, e.av)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut vocab = NgramVocab::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0].is_empty() {
                return Err(Error::format(&ctx, n + 1, "expected ngram<TAB>frequency<TAB>av"));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::format(&ctx, n + 1, format!("bad number {s:?}")))
            };
            vocab.insert(
                crate::corpus::normalize(cols[0]),
                NgramEntry {
                    frequency: num(cols[1])?,
                    av: num(cols[2])?,
                },
            );
        }
        Ok(vocab)
    }
}

pub fn extract_ngrams<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    config: &NgramConfig,
    workers: usize,
) -> Result<NgramVocab> {
    if config.max_len < 1 || config.min_freq < 1 || config.av_threshold < 1 {
        return Err(Error::Config(format!("n-gram thresholds must be >= 1: {config:?}")));
    }
    let counts = accessor_counts(sentences, config.max_len, workers);
    let mut vocab = NgramVocab::new();
    for (s, st) in counts {
        if st.frequency >= config.min_freq && st.av() >= config.av_threshold {
            vocab.insert(
                s,
                NgramEntry {
                    frequency: st.frequency,
                    av: st.av(),
                },
            );
        }
    }
    Ok(vocab)
}

/// Uniformly samples `round(fraction * |vocab|)` entries.
pub fn subsample_vocab(vocab: &NgramVocab, fraction: f64, seed: u64) -> Result<NgramVocab> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction {fraction} not in (0, 1]")));
    }
    let n = vocab.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    if k == n {
        return Ok(vocab.clone());
    }
    let keys: Vec<(&String, &NgramEntry)> = vocab.entries.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut out = NgramVocab::new();
    for i in picked {
        out.insert(keys[i].0.clone(), *keys[i].1);
    }
    Ok(out)
}
