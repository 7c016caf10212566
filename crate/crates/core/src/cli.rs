//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on data errors, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::{build_lexicon, load_segmented_corpus, split_train_dev, Corpus, Lexicon, Sentence, Split};
use crate::encoder::{load_external_embeddings, ExternalEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{self, Experiment};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::graph::{CwnDirection, GraphConfig, Matcher, RelationGrouping};
use crate::hgnn::Activation;
use crate::model::{Model, ModelConfig};
use crate::ngram::{extract_ngrams, NgramConfig, NgramVocab};
use crate::parses::{load_parses, ParseSet};
use crate::trainer::{self, Dataset, OptimizerKind, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "hgseg", version, about = "Chinese word segmentation with heterogeneous graph networks")]
#[command(arg_required_else_help = true, args_override_self = true)]
struct Cli {
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Collect the word list of a segmented corpus.
    BuildLexicon(BuildLexiconArgs),
    /// Extract n-grams by frequency and accessor variety from raw text.
    ExtractNgrams(ExtractArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Segment raw text with a trained model.
    Segment(SegmentArgs),
    /// Score a segmentation against gold.
    Evaluate(EvaluateArgs),
    /// Train and test a grid of sub-graph ablations.
    Ablate(AblateArgs),
    /// Retrain with random fractions of the n-gram vocabulary.
    Sweep(SweepArgs),
    /// Print the graph built for each input sentence.
    InspectGraph(InspectArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct BuildLexiconArgs {
    /// Segmented corpus, one sentence per line.
    corpus: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExtractArgs {
    /// Raw or segmented text files; spaces are ignored.
    #[arg(required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    max_len: usize,
    #[arg(long, default_value_t = 5)]
    min_freq: u64,
    #[arg(long, default_value_t = 2)]
    av_threshold: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GroupingArg {
    ThreeWay,
    Split,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DirectionArg {
    Directed,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Debug, Serialize, Clone)]
struct GraphArgs {
    /// Drop the dependency sub-graph.
    #[arg(long)]
    no_syntax: bool,
    /// Drop the character/word/n-gram sub-graph.
    #[arg(long)]
    no_cwn: bool,
    /// Drop lexicon word nodes.
    #[arg(long)]
    no_lexicon: bool,
    /// Drop n-gram nodes.
    #[arg(long)]
    no_ngrams: bool,
    #[arg(long, value_enum, default_value_t = GroupingArg::ThreeWay)]
    grouping: GroupingArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Directed)]
    cwn_direction: DirectionArg,
}

impl GraphArgs {
    fn config(&self) -> GraphConfig {
        GraphConfig {
            use_syntax: !self.no_syntax,
            use_cwn: !self.no_cwn,
            use_lexicon: !self.no_lexicon,
            use_ngrams: !self.no_ngrams,
            grouping: match self.grouping {
                GroupingArg::ThreeWay => RelationGrouping::ThreeWay,
                GroupingArg::Split => RelationGrouping::Split,
            },
            cwn_direction: match self.cwn_direction {
                DirectionArg::Directed => CwnDirection::Directed,
                DirectionArg::Both => CwnDirection::Both,
            },
        }
    }
}

#[derive(Args, Debug, Serialize, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 64)]
    char_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Gradient threads; 1 keeps training reproducible.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Longest training sentence before it is cut at word boundaries.
    #[arg(long, default_value_t = 256)]
    max_sentence_len: usize,
    /// Stop once dev F1 reaches this value.
    #[arg(long)]
    target_f1: Option<f64>,
    #[command(flatten)]
    graph: GraphArgs,
}

impl HyperArgs {
    fn train_config(&self, ext_dim: Option<usize>) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                char_dim: self.char_dim,
                hidden_dim: self.hidden_dim,
                layers: self.layers,
                activation: match self.activation {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Tanh => Activation::Tanh,
                },
                ext_dim,
                graph: self.graph.config(),
                ..ModelConfig::default()
            },
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            },
            learning_rate: self.lr,
            lr_decay: self.lr_decay,
            clip_norm: self.clip,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            workers: self.workers,
            max_sentence_len: self.max_sentence_len,
            target_f1: self.target_f1,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Segmented training corpus.
    #[arg(long)]
    train: PathBuf,
    /// Segmented development corpus.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Hold out this fraction of the training corpus as dev when no dev file is given.
    #[arg(long)]
    dev_ratio: Option<f64>,
    /// Lexicon file; built from the training corpus when absent.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// N-gram vocabulary file.
    #[arg(long)]
    ngrams: Option<PathBuf>,
    #[arg(long)]
    train_parses: Option<PathBuf>,
    #[arg(long)]
    dev_parses: Option<PathBuf>,
    /// External per-character embeddings for the training corpus.
    #[arg(long)]
    ext_emb: Option<PathBuf>,
    #[arg(long)]
    dev_ext_emb: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Output directory for checkpoints and the training log.
    #[arg(short, long)]
    out: PathBuf,
    /// Continue from a checkpoint. Its stored settings replace the flags,
    /// except `--epochs`, which sets the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    parses: Option<PathBuf>,
    #[arg(long)]
    ext_emb: Option<PathBuf>,
    /// Input text; standard input when absent.
    input: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Segmented prediction to score.
    #[arg(long, conflicts_with = "model")]
    pred: Option<PathBuf>,
    /// Decode the gold text with this model instead.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    parses: Option<PathBuf>,
    #[arg(long)]
    ext_emb: Option<PathBuf>,
    /// Lexicon defining OOV words.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Build the OOV lexicon from this training corpus.
    #[arg(long, conflicts_with = "lexicon")]
    train: Option<PathBuf>,
    /// Print one JSON record instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug, Serialize)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    test_parses: Option<PathBuf>,
    #[arg(long)]
    test_ext_emb: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Also write per-run records here, one JSON object per line.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,no-syntax,no-cwn")]
    configs: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    fractions: Vec<f64>,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    /// Take vocabularies and graph settings from a checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "model")]
    lexicon: Option<PathBuf>,
    #[arg(long, conflicts_with = "model")]
    ngrams: Option<PathBuf>,
    #[arg(long)]
    parses: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    input: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    /// Segmented sentences to check on.
    corpus: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    ngrams: Option<PathBuf>,
    #[arg(long)]
    parses: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    char_dim: usize,
    #[arg(long, default_value_t = 4)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Sentences checked.
    #[arg(long, default_value_t = 3)]
    sentences: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Parses `key = value` lines into flags. `true` enables a switch, `false`
/// omits it.
fn config_file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path.display().to_string(), n + 1, "expected key = value"))?;
        let key = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => out.push(key.into()),
            "false" => {}
            v => {
                out.push(key.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Inserts config-file flags directly after the subcommand so that flags on
/// the command line, which come later, take precedence.
fn layer_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let extra = config_file_args(&path)?;
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
    let at = args
        .iter()
        .position(|a| names.iter().any(|n| a.to_string_lossy() == *n))
        .map_or(args.len(), |i| i + 1);
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Lines of a UTF-8 file, or of standard input when `path` is `None`.
fn read_lines(path: Option<&Path>) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    match path {
        Some(p) => bytes = fs::read(p).map_err(io_err(p))?,
        None => {
            io::stdin().read_to_end(&mut bytes).map_err(|e| Error::io("<stdin>", e))?;
        }
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::Encoding {
        position: e.utf8_error().valid_up_to(),
    })?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Writes the effective configuration to stderr and, when given, to a sidecar
/// file.
fn echo_config(command: &Command, sidecar: Option<PathBuf>) -> Result<()> {
    let rec = json!({
        "record": "effective-config",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
    });
    eprintln!("{rec}");
    if let Some(path) = sidecar {
        fs::write(&path, format!("{rec}\n")).map_err(io_err(&path))?;
    }
    Ok(())
}

fn load_ext(path: Option<&PathBuf>, sentences: &[&Sentence]) -> Result<Option<ExternalEmbeddings>> {
    let Some(p) = path else { return Ok(None) };
    let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
    let e = load_external_embeddings(p, &lengths)?;
    if !e.rejected.is_empty() {
        log::warn!("{}: {} records rejected for length mismatch", p.display(), e.rejected.len());
    }
    Ok(Some(e))
}

fn load_parse_set(path: Option<&PathBuf>, sentences: &[&Sentence]) -> Result<Option<ParseSet>> {
    let Some(p) = path else { return Ok(None) };
    let set = load_parses(p, sentences)?;
    if set.dropped > 0 {
        log::warn!("{}: {} parses dropped", p.display(), set.dropped);
    }
    Ok(Some(set))
}

fn sentences_of(c: &Corpus) -> Vec<&Sentence> {
    c.sentences.iter().map(|e| &e.sentence).collect()
}

/// A corpus with its parses and external rows, owned.
struct Split3 {
    corpus: Corpus,
    parses: Option<ParseSet>,
    ext: Option<ExternalEmbeddings>,
}

impl Split3 {
    fn load(corpus: Corpus, parses: Option<&PathBuf>, ext: Option<&PathBuf>) -> Result<Self> {
        let sents = sentences_of(&corpus);
        let parses = load_parse_set(parses, &sents)?;
        let ext = load_ext(ext, &sents)?;
        Ok(Split3 { corpus, parses, ext })
    }

    fn dataset(&self) -> Dataset<'_> {
        Dataset {
            corpus: &self.corpus,
            parses: self.parses.as_ref(),
            ext: self.ext.as_ref(),
        }
    }
}

struct LoadedData {
    train: Split3,
    dev: Option<Split3>,
    lexicon: Lexicon,
    ngrams: NgramVocab,
}

fn load_data(d: &DataArgs, seed: u64, want_ngrams: bool) -> Result<LoadedData> {
    let full = load_segmented_corpus(&d.train, Split::Train)?;
    let (train_corpus, dev_corpus) = match (&d.dev, d.dev_ratio) {
        (Some(p), _) => (full, Some(load_segmented_corpus(p, Split::Dev)?)),
        (None, Some(r)) => {
            if d.train_parses.is_some() || d.ext_emb.is_some() {
                return Err(Error::Config(
                    "--dev-ratio cannot be combined with training parses or external embeddings; pass --dev".into(),
                ));
            }
            let (t, v) = split_train_dev(&full, r, seed)?;
            (t, Some(v))
        }
        (None, None) => {
            log::warn!("no dev set: the last epoch is kept and early stopping is off");
            (full, None)
        }
    };
    let train = Split3::load(train_corpus, d.train_parses.as_ref(), d.ext_emb.as_ref())?;
    let dev = match dev_corpus {
        Some(c) => Some(Split3::load(c, d.dev_parses.as_ref(), d.dev_ext_emb.as_ref())?),
        None => None,
    };
    let lexicon = match &d.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => build_lexicon(&train.corpus)?,
    };
    let ngrams = match &d.ngrams {
        Some(p) => NgramVocab::load(p)?,
        None => {
            if want_ngrams {
                log::warn!("no n-gram vocabulary given: the n-gram sub-graph is empty");
            }
            NgramVocab::new()
        }
    };
    Ok(LoadedData {
        train,
        dev,
        lexicon,
        ngrams,
    })
}

fn cmd_build_lexicon(a: &BuildLexiconArgs) -> Result<()> {
    let corpus = load_segmented_corpus(&a.corpus, Split::Train)?;
    let lex = build_lexicon(&corpus)?;
    match &a.output {
        Some(p) => lex.save(p),
        None => lex.write_to(io::stdout().lock()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let mut sentences = Vec::new();
    for p in &a.corpus {
        for line in read_lines(Some(p))? {
            let s = Sentence::from_text(&line);
            if !s.is_empty() {
                sentences.push(s);
            }
        }
    }
    let cfg = NgramConfig {
        max_len: a.max_len,
        min_freq: a.min_freq,
        av_threshold: a.av_threshold,
    };
    let vocab = extract_ngrams(&sentences, &cfg, a.workers)?;
    log::info!("{} n-grams from {} sentences", vocab.len(), sentences.len());
    match &a.output {
        Some(p) => vocab.save(p),
        None => vocab.write_to(io::stdout().lock()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.data, a.hyper.seed, !a.hyper.graph.no_ngrams)?;
    let config = match &a.resume {
        Some(p) => TrainConfig {
            epochs: a.hyper.epochs,
            ..Checkpoint::load(p)?
                .train
                .ok_or_else(|| Error::Checkpoint("checkpoint has no training configuration".into()))?
        },
        None => a.hyper.train_config(data.train.ext.as_ref().map(|e| e.dim)),
    };
    let dev = data.dev.as_ref().map(|d| d.dataset());
    let outcome = trainer::train(
        &config,
        &data.train.dataset(),
        dev.as_ref(),
        &data.lexicon,
        &data.ngrams,
        &a.out,
        a.resume.as_deref(),
    )?;
    println!(
        "{}",
        json!({
            "best_checkpoint": outcome.best_checkpoint,
            "log": outcome.log,
            "epochs": outcome.state.epoch,
            "best_epoch": outcome.state.best_epoch,
            "best_f1": outcome.state.best_f1,
            "stop": outcome.stop,
        })
    );
    Ok(())
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let model = Checkpoint::load(&a.model)?.model;
    let lines = read_lines(a.input.as_deref())?;
    let sentences: Vec<Sentence> = lines.iter().map(|l| Sentence::from_text(l)).collect();
    let refs: Vec<&Sentence> = sentences.iter().collect();
    let parses = load_parse_set(a.parses.as_ref(), &refs)?;
    let ext = load_ext(a.ext_emb.as_ref(), &refs)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (i, s) in sentences.iter().enumerate() {
        let parse = parses.as_ref().and_then(|p| p.parses.get(&i));
        let rows = ext.as_ref().and_then(|e| e.get(i));
        let text = model.segment_sentence(s, parse, rows)?;
        writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    }
    out.flush().map_err(|e| Error::io("<stdout>", e))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let gold = load_segmented_corpus(&a.gold, Split::Test)?;
    let model = match &a.model {
        Some(p) => Some(Checkpoint::load(p)?.model),
        None => None,
    };
    let lexicon = match (&a.lexicon, &a.train, &model) {
        (Some(p), _, _) => Lexicon::load(p)?,
        (None, Some(t), _) => build_lexicon(&load_segmented_corpus(t, Split::Train)?)?,
        (None, None, Some(m)) => m.lexicon.clone(),
        (None, None, None) => {
            log::warn!("no lexicon given: every gold word counts as OOV");
            Lexicon::new()
        }
    };
    let metrics = match (&a.pred, &model) {
        (Some(p), _) => eval::score_corpora(&gold, &load_segmented_corpus(p, Split::Test)?, &lexicon)?,
        (None, Some(m)) => {
            let test = Split3::load(gold.clone(), a.parses.as_ref(), a.ext_emb.as_ref())?;
            let mut predicted = Vec::new();
            for (i, ex) in gold.sentences.iter().enumerate() {
                let parse = test.parses.as_ref().and_then(|p| p.parses.get(&i));
                let rows = test.ext.as_ref().and_then(|e| e.get(i));
                let rows = if m.config.ext_dim.is_some() { rows } else { None };
                let inst = m.prepare(&ex.sentence, parse, rows, None)?;
                predicted.push(crate::corpus::Example {
                    sentence: ex.sentence.clone(),
                    spans: m.predict_spans(&inst)?,
                });
            }
            eval::score_corpora(&gold, &Corpus::new(predicted, Split::Test), &lexicon)?
        }
        (None, None) => return Err(Error::Config("give --pred or --model".into())),
    };
    if a.json {
        println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
    } else {
        let c = metrics.counts;
        println!("precision\trecall\tf1\toov_recall\toov_degenerate\tgold\tpredicted\tcorrect\toov_gold\toov_correct");
        println!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}",
            metrics.precision,
            metrics.recall,
            metrics.f1,
            metrics.oov_recall,
            metrics.oov_degenerate,
            c.gold,
            c.predicted,
            c.correct,
            c.oov_gold,
            c.oov_correct
        );
    }
    Ok(())
}

fn with_experiment<T>(e: &ExperimentArgs, f: impl FnOnce(&Experiment) -> Result<T>) -> Result<T> {
    let data = load_data(&e.data, e.hyper.seed, !e.hyper.graph.no_ngrams)?;
    let test = Split3::load(
        load_segmented_corpus(&e.test, Split::Test)?,
        e.test_parses.as_ref(),
        e.test_ext_emb.as_ref(),
    )?;
    let exp = Experiment {
        train: data.train.dataset(),
        dev: data.dev.as_ref().map(|d| d.dataset()),
        test: test.dataset(),
        lexicon: &data.lexicon,
        ngrams: &data.ngrams,
        config: e.hyper.train_config(data.train.ext.as_ref().map(|x| x.dim)),
    };
    f(&exp)
}

fn write_jsonl_file<T: Serialize>(path: Option<&PathBuf>, records: &[T]) -> Result<()> {
    if let Some(p) = path {
        let mut w = create(p)?;
        eval::write_jsonl(&mut w, records)?;
        w.flush().map_err(io_err(p))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let names: Vec<&str> = a.configs.iter().map(String::as_str).collect();
    let rows = with_experiment(&a.exp, |exp| {
        let grid = eval::ablation_grid(&names, exp.config.model.graph)?;
        eval::run_ablation(exp, &grid, &a.exp.seeds)
    })?;
    eval::write_ablation_tsv(io::stdout().lock(), &rows).map_err(|e| Error::io("<stdout>", e))?;
    write_jsonl_file(a.exp.jsonl.as_ref(), &rows)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let points = with_experiment(&a.exp, |exp| eval::vocab_sweep(exp, &a.fractions, &a.exp.seeds))?;
    eval::write_sweep_tsv(io::stdout().lock(), &points).map_err(|e| Error::io("<stdout>", e))?;
    if !eval::is_monotone(&points) {
        log::info!("OOV recall is not monotone in the vocabulary fraction");
    }
    write_jsonl_file(a.exp.jsonl.as_ref(), &points)
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let (lexicon, ngrams, config) = match &a.model {
        Some(p) => {
            let m = Checkpoint::load(p)?.model;
            let g = m.config.graph;
            (m.lexicon, m.ngrams, g)
        }
        None => (
            a.lexicon.as_deref().map(Lexicon::load).transpose()?.unwrap_or_default(),
            a.ngrams.as_deref().map(NgramVocab::load).transpose()?.unwrap_or_default(),
            a.graph.config(),
        ),
    };
    config.validate()?;
    let matcher = Matcher::new(&lexicon, &ngrams);
    let lines = read_lines(a.input.as_deref())?;
    let sentences: Vec<Sentence> = lines.iter().map(|l| Sentence::from_text(l)).collect();
    let refs: Vec<&Sentence> = sentences.iter().collect();
    let parses = load_parse_set(a.parses.as_ref(), &refs)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for (i, s) in sentences.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let parse = parses.as_ref().and_then(|p| p.parses.get(&i));
        let g = crate::graph::build_graph(s, parse, &matcher.find(s, &config), &config)?;
        write!(out, "# sentence {}\n{}\n", i + 1, g.dump()).map_err(|e| Error::io("<stdout>", e))?;
    }
    out.flush().map_err(|e| Error::io("<stdout>", e))
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    let corpus = load_segmented_corpus(&a.corpus, Split::Train)?;
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => build_lexicon(&corpus)?,
    };
    let ngrams = a.ngrams.as_deref().map(NgramVocab::load).transpose()?.unwrap_or_default();
    let sents = sentences_of(&corpus);
    let parses = load_parse_set(a.parses.as_ref(), &sents)?;
    let config = ModelConfig {
        char_dim: a.char_dim,
        hidden_dim: a.hidden_dim,
        layers: a.layers,
        activation: Activation::Tanh,
        ext_dim: None,
        graph: a.graph.config(),
        ..ModelConfig::default()
    };
    let chars = crate::encoder::CharVocab::build(sents.iter().copied());
    let model = Model::init(config, chars, lexicon, ngrams, a.seed)?;
    let gc = GradCheckConfig {
        epsilon: a.epsilon,
        max_coords: a.samples,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut out = BufWriter::new(io::stdout().lock());
    let w = |e| Error::io("<stdout>", e);
    writeln!(out, "sentence\ttensor\tchecked\tmax_rel_error").map_err(w)?;
    for (i, ex) in corpus.sentences.iter().enumerate().take(a.sentences) {
        let parse = parses.as_ref().and_then(|p| p.parses.get(&i));
        let inst = model.prepare(&ex.sentence, parse, None, Some(&ex.spans))?;
        let r = grad_check(&model.config, &model.params, &inst, &gc)?;
        for t in &r.tensors {
            writeln!(out, "{}\t{}\t{}\t{:.3e}", i + 1, t.name, t.checked, t.max_rel_error).map_err(w)?;
        }
        worst = worst.max(r.max_rel_error);
    }
    out.flush().map_err(w)?;
    if !(worst < a.tolerance) {
        return Err(Error::InvalidInput(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let beside = |p: &Path| {
        let mut name = p.as_os_str().to_owned();
        name.push(".config.json");
        PathBuf::from(name)
    };
    let sidecar = match &cli.command {
        Command::BuildLexicon(a) => a.output.as_deref().map(beside),
        Command::ExtractNgrams(a) => a.output.as_deref().map(beside),
        Command::Train(a) => {
            fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
            Some(a.out.join("config.json"))
        }
        Command::Ablate(a) => a.exp.jsonl.as_deref().map(beside),
        Command::Sweep(a) => a.exp.jsonl.as_deref().map(beside),
        _ => None,
    };
    echo_config(&cli.command, sidecar)?;
    match &cli.command {
        Command::BuildLexicon(a) => cmd_build_lexicon(a),
        Command::ExtractNgrams(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectGraph(a) => cmd_inspect(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn report(e: &Error) {
    let msg = e.to_string().replace(['\n', '\t'], " ");
    eprintln!("error\tkind={}\t{msg}", e.kind());
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match layer_config(args) {
        Ok(a) => a,
        Err(e) => {
            report(&e);
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            1
        }
    }
}
