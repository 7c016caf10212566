//! Word-level scoring, OOV recall and the experiment drivers built on them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Lexicon, Sentence, Span};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, HeteroGraph};
use crate::model::{Instance, Model};
use crate::ngram::{subsample_vocab, NgramVocab};
use crate::trainer::{self, Dataset, TrainConfig};

/// Raw counts behind every metric. Summed across sentences for corpus scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: u64,
    pub predicted: u64,
    pub correct: u64,
    pub oov_gold: u64,
    pub oov_correct: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.gold += o.gold;
        self.predicted += o.predicted;
        self.correct += o.correct;
        self.oov_gold += o.oov_gold;
        self.oov_correct += o.oov_correct;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oov_recall: f64,
    /// No OOV gold words; `oov_recall` is reported as 1.0.
    pub oov_degenerate: bool,
    pub counts: Counts,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_counts(counts: Counts) -> Metrics {
        let precision = ratio(counts.correct, counts.predicted);
        let recall = ratio(counts.correct, counts.gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let oov_degenerate = counts.oov_gold == 0;
        let oov_recall = if oov_degenerate {
            1.0
        } else {
            ratio(counts.oov_correct, counts.oov_gold)
        };
        Metrics {
            precision,
            recall,
            f1,
            oov_recall,
            oov_degenerate,
            counts,
        }
    }
}

fn partition_len(spans: &[Span]) -> Option<usize> {
    let mut at = 0;
    for s in spans {
        if s.begin != at || s.end <= s.begin {
            return None;
        }
        at = s.end;
    }
    Some(at)
}

/// Exact-boundary matches between two partitions of the same sentence.
pub fn score(gold: &[Span], predicted: &[Span]) -> Result<Counts> {
    let g = partition_len(gold).ok_or_else(|| Error::InvalidInput("gold spans are not a partition".into()))?;
    let p = partition_len(predicted).ok_or_else(|| Error::InvalidInput("predicted spans are not a partition".into()))?;
    if g != p {
        return Err(Error::InvalidInput(format!(
            "gold covers {g} characters, prediction covers {p}"
        )));
    }
    let pred: BTreeSet<Span> = predicted.iter().copied().collect();
    let correct = gold.iter().filter(|s| pred.contains(s)).count() as u64;
    Ok(Counts {
        gold: gold.len() as u64,
        predicted: predicted.len() as u64,
        correct,
        ..Counts::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OovRecall {
    pub value: f64,
    pub oov_gold: u64,
    pub oov_correct: u64,
    pub degenerate: bool,
}

/// Recall over gold words missing from `lexicon`.
pub fn oov_recall(sentence: &Sentence, gold: &[Span], predicted: &[Span], lexicon: &Lexicon) -> OovRecall {
    let oov: Vec<bool> = gold.iter().map(|s| !lexicon.contains(&sentence.span_text(*s))).collect();
    let (oov_gold, oov_correct) = oov_counts(gold, &oov, predicted);
    let m = Metrics::from_counts(Counts {
        oov_gold,
        oov_correct,
        ..Counts::default()
    });
    OovRecall {
        value: m.oov_recall,
        oov_gold,
        oov_correct,
        degenerate: m.oov_degenerate,
    }
}

fn oov_counts(gold: &[Span], oov: &[bool], predicted: &[Span]) -> (u64, u64) {
    let pred: BTreeSet<Span> = predicted.iter().copied().collect();
    let mut n = 0;
    let mut hit = 0;
    for (s, &o) in gold.iter().zip(oov) {
        if o {
            n += 1;
            if pred.contains(s) {
                hit += 1;
            }
        }
    }
    (n, hit)
}

/// Full counts for one sentence.
pub fn sentence_counts(sentence: &Sentence, gold: &[Span], predicted: &[Span], lexicon: &Lexicon) -> Result<Counts> {
    let mut c = score(gold, predicted)?;
    let r = oov_recall(sentence, gold, predicted, lexicon);
    c.oov_gold = r.oov_gold;
    c.oov_correct = r.oov_correct;
    Ok(c)
}

/// Scores a predicted corpus against a gold corpus line by line.
pub fn score_corpora(gold: &Corpus, predicted: &Corpus, lexicon: &Lexicon) -> Result<Metrics> {
    if gold.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "{} gold sentences, {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut total = Counts::default();
    for (i, (g, p)) in gold.sentences.iter().zip(&predicted.sentences).enumerate() {
        if g.sentence.chars != p.sentence.chars {
            return Err(Error::InvalidInput(format!("sentence {} differs between gold and prediction", i + 1)));
        }
        total += sentence_counts(&g.sentence, &g.spans, &p.spans, lexicon)?;
    }
    Ok(Metrics::from_counts(total))
}

/// Decodes prepared instances and scores them against their gold spans.
pub fn evaluate(model: &Model, instances: &[Instance]) -> Result<Metrics> {
    let mut total = Counts::default();
    for inst in instances {
        let pred = model.predict_spans(inst)?;
        let mut c = score(&inst.gold_spans, &pred)?;
        let (n, hit) = oov_counts(&inst.gold_spans, &inst.gold_oov, &pred);
        c.oov_gold = n;
        c.oov_correct = hit;
        total += c;
    }
    Ok(Metrics::from_counts(total))
}

/// Node and per-relation edge totals over a set of graphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub graphs: usize,
    pub nodes: usize,
    pub edges: BTreeMap<String, usize>,
    pub cwn_edges: usize,
    pub syntax_edges: usize,
}

impl GraphStats {
    pub fn collect<'a>(graphs: impl IntoIterator<Item = &'a HeteroGraph>) -> GraphStats {
        let mut s = GraphStats::default();
        for g in graphs {
            s.graphs += 1;
            s.nodes += g.num_nodes();
            for &r in &g.relations {
                *s.edges.entry(r.name().to_string()).or_default() += g.edge_count(r);
            }
            s.cwn_edges += g.cwn_edges();
            s.syntax_edges += g.syntax_edges();
        }
        s
    }
}

/// Everything needed to train and test one configuration.
pub struct Experiment<'a> {
    pub train: Dataset<'a>,
    pub dev: Option<Dataset<'a>>,
    pub test: Dataset<'a>,
    pub lexicon: &'a Lexicon,
    pub ngrams: &'a NgramVocab,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub stats: GraphStats,
    pub epochs: usize,
}

/// Trains with the given graph settings and n-gram vocabulary, then scores
/// the test set.
pub fn run_once(exp: &Experiment, graph: GraphConfig, ngrams: &NgramVocab, seed: u64) -> Result<RunResult> {
    let mut config = exp.config.clone();
    config.model.graph = graph;
    config.seed = seed;
    let outcome = trainer::train_in_memory(&config, &exp.train, exp.dev.as_ref(), exp.lexicon, ngrams)?;
    let test = trainer::prepare_instances(&outcome.model, &exp.test, None)?;
    let metrics = evaluate(&outcome.model, &test)?;
    let stats = GraphStats::collect(test.iter().map(|i| &i.graph));
    Ok(RunResult {
        seed,
        metrics,
        stats,
        epochs: outcome.state.epoch,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub graph: GraphConfig,
    pub f1: f64,
    pub oov_recall: f64,
    pub runs: Vec<RunResult>,
}

/// Named graph settings for the standard ablation rows.
pub fn ablation_grid(names: &[&str], base: GraphConfig) -> Result<Vec<(String, GraphConfig)>> {
    names
        .iter()
        .map(|&n| {
            let mut g = base;
            match n {
                "full" => {}
                "no-syntax" => g.use_syntax = false,
                "no-cwn" => g.use_cwn = false,
                "no-lexicon" => g.use_lexicon = false,
                "no-ngrams" => g.use_ngrams = false,
                other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
            }
            g.validate()?;
            Ok((n.to_string(), g))
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn run_ablation(exp: &Experiment, grid: &[(String, GraphConfig)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for (name, graph) in grid {
        let mut runs = Vec::new();
        for &seed in seeds {
            log::info!("ablation {name} seed {seed}");
            runs.push(run_once(exp, *graph, exp.ngrams, seed)?);
        }
        rows.push(AblationRow {
            name: name.clone(),
            graph: *graph,
            f1: mean(runs.iter().map(|r| r.metrics.f1)),
            oov_recall: mean(runs.iter().map(|r| r.metrics.oov_recall)),
            runs,
        });
    }
    Ok(rows)
}

pub fn write_ablation_tsv<W: Write>(mut w: W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "config\tseeds\tf1\toov_recall\tcwn_edges\tsyntax_edges")?;
    for r in rows {
        let first = r.runs.first().map(|x| &x.stats);
        writeln!(
            w,
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            r.name,
            r.runs.len(),
            r.f1,
            r.oov_recall,
            first.map_or(0, |s| s.cwn_edges),
            first.map_or(0, |s| s.syntax_edges)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub vocab_size: usize,
    pub f1: f64,
    pub oov_recall: f64,
    pub runs: Vec<RunResult>,
}

/// Retrains with random subsets of the n-gram vocabulary. The subset for a
/// given fraction and seed is drawn with that seed.
pub fn vocab_sweep(exp: &Experiment, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut points = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        let mut runs = Vec::new();
        let mut size = 0;
        for &seed in seeds {
            let vocab = subsample_vocab(exp.ngrams, f, seed)?;
            size = vocab.len();
            log::info!("sweep fraction {f} seed {seed}: {size} n-grams");
            runs.push(run_once(exp, exp.config.model.graph, &vocab, seed)?);
        }
        points.push(SweepPoint {
            fraction: f,
            vocab_size: size,
            f1: mean(runs.iter().map(|r| r.metrics.f1)),
            oov_recall: mean(runs.iter().map(|r| r.metrics.oov_recall)),
            runs,
        });
    }
    Ok(points)
}

pub fn write_sweep_tsv<W: Write>(mut w: W, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(w, "fraction\tvocab_size\tf1\toov_recall")?;
    for p in points {
        writeln!(w, "{}\t{}\t{:.6}\t{:.6}", p.fraction, p.vocab_size, p.f1, p.oov_recall)?;
    }
    Ok(())
}

/// Sweep curves are expected to rise with vocabulary size but are not
/// required to.
pub fn is_monotone(points: &[SweepPoint]) -> bool {
    points.windows(2).all(|w| w[1].oov_recall >= w[0].oov_recall)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w).map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}
