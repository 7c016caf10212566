//! Parameter estimation: batching, optimization, early stopping and logs.
//!
//! Training is bit-for-bit reproducible for a fixed seed with one worker.
//! With more workers the batch gradient is summed per chunk and the chunk
//! sums are then added, which changes floating-point rounding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::{split_long, Corpus, Lexicon};
use crate::encoder::{CharVocab, ExternalEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::model::{loss_and_grad_into, Instance, Model, ModelConfig, ModelParams};
use crate::ngram::NgramVocab;
use crate::parses::ParseSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Learning rate at epoch `e` (0-based) is `lr / (1 + decay * e)`.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub workers: usize,
    /// Training sentences longer than this are cut at word boundaries when
    /// they carry no parse or external rows.
    pub max_sentence_len: usize,
    /// Stop as soon as dev F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            lr_decay: 0.0,
            clip_norm: 5.0,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 1,
            workers: 1,
            max_sentence_len: 256,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.lr_decay >= 0.0) {
            return bad(format!("lr decay must be non-negative, got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 || self.workers == 0 {
            return bad("batch size, epochs, patience and workers must be positive".into());
        }
        if self.max_sentence_len < 2 {
            return bad("max sentence length must be at least 2".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * epoch as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    /// First and second moments, Adam only.
    pub moments: Option<(ModelParams, ModelParams)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some((params.zeros_like(), params.zeros_like())),
        };
        Optimizer { kind, t: 0, moments }
    }

    /// Clips `grads` to `clip` in global norm and applies one update.
    /// Returns the norm before clipping.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut ModelParams, lr: f64, clip: f64) -> f64 {
        let norm = grads.squared_norm().sqrt();
        if norm > clip {
            grads.scale(clip / norm);
        }
        self.t += 1;
        match &mut self.moments {
            None => params.zip_mut(grads, |p, g| *p -= lr * g),
            Some((m, v)) => {
                m.zip_mut(grads, |m, g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                v.zip_mut(grads, |v, g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                // p -= lr * m_hat / (sqrt(v_hat) + eps), done in two passes
                let mut step = m.clone();
                step.zip_mut(v, |s, v| *s = (*s / c1) / ((v / c2).sqrt() + ADAM_EPS));
                params.zip_mut(&step, |p, s| *p -= lr * s);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_f1: Option<f64>,
    pub best_epoch: usize,
}

/// One split with its optional side inputs, keyed by sentence ordinal.
#[derive(Clone, Copy)]
pub struct Dataset<'a> {
    pub corpus: &'a Corpus,
    pub parses: Option<&'a ParseSet>,
    pub ext: Option<&'a ExternalEmbeddings>,
}

impl<'a> Dataset<'a> {
    pub fn plain(corpus: &'a Corpus) -> Self {
        Dataset {
            corpus,
            parses: None,
            ext: None,
        }
    }
}

/// Builds graphs for every sentence. With `cap`, sentences longer than `cap`
/// and without side inputs are cut into shorter examples first.
pub fn prepare_instances(model: &Model, data: &Dataset, cap: Option<usize>) -> Result<Vec<Instance>> {
    let mut out = Vec::with_capacity(data.corpus.len());
    for (i, ex) in data.corpus.sentences.iter().enumerate() {
        let parse = data.parses.and_then(|p| p.parses.get(&i));
        let ext = data.ext.and_then(|e| e.get(i));
        let ext = if model.config.ext_dim.is_some() { ext } else { None };
        match cap {
            Some(cap) if ex.sentence.len() > cap && parse.is_none() && ext.is_none() => {
                for piece in split_long(ex, cap) {
                    out.push(model.prepare(&piece.sentence, None, None, Some(&piece.spans))?);
                }
            }
            _ => out.push(model.prepare(&ex.sentence, parse, ext, Some(&ex.spans))?),
        }
    }
    Ok(out)
}

fn sum_gradients(cfg: &ModelConfig, params: &ModelParams, batch: &[&Instance]) -> Result<(f64, ModelParams)> {
    let mut total = params.zeros_like();
    let mut scratch = params.zeros_like();
    let mut loss = 0.0;
    for inst in batch {
        loss += loss_and_grad_into(cfg, params, inst, &mut scratch)?;
        total.add_assign(&scratch);
        for t in scratch.tensors_mut() {
            t.fill(0.0);
        }
    }
    Ok((loss, total))
}

/// Summed loss and summed gradient over a batch, each sentence's gradient
/// computed separately and added in batch order.
pub fn batch_gradient(cfg: &ModelConfig, params: &ModelParams, batch: &[&Instance], workers: usize) -> Result<(f64, ModelParams)> {
    if workers <= 1 || batch.len() < 2 {
        return sum_gradients(cfg, params, batch);
    }
    let chunk = batch.len().div_ceil(workers);
    let parts: Vec<Result<(f64, ModelParams)>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|c| s.spawn(move || sum_gradients(cfg, params, c)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut loss = 0.0;
    let mut total = params.zeros_like();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Mean negative log-likelihood over a batch.
pub fn batch_loss(cfg: &ModelConfig, params: &ModelParams, batch: &[&Instance]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut s = 0.0;
    for inst in batch {
        s += crate::model::loss(cfg, params, inst)?;
    }
    Ok(s / batch.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub record: &'static str,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub max_grad_norm: f64,
    pub dev: Option<Metrics>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Epochs,
    Patience,
    Target,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub state: TrainState,
    /// Parameters at the best dev epoch so far.
    pub best: Option<ModelParams>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::Config("model and training configurations disagree".into()));
        }
        let optimizer = Optimizer::new(config.optimizer, &model.params);
        Ok(Trainer {
            model,
            config,
            optimizer,
            state: TrainState::default(),
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`train`].
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training configuration".into()))?;
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| Optimizer::new(config.optimizer, &ckpt.model.params));
        Ok(Trainer {
            model: ckpt.model,
            config,
            optimizer,
            state: ckpt.state.unwrap_or_default(),
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: self.config.seed,
            train: Some(self.config.clone()),
            state: Some(self.state.clone()),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// One pass over `train` in an order drawn from the seed and epoch number.
    pub fn run_epoch(&mut self, train: &[Instance]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::InvalidInput("no training sentences".into()));
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let lr = self.config.lr_at(epoch);
        let mut total = 0.0;
        let mut max_norm: f64 = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradient(&self.config.model, &self.model.params, &batch, self.config.workers)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {} step {}",
                    epoch + 1,
                    self.state.step + 1
                )));
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at epoch {} step {}",
                    epoch + 1,
                    self.state.step + 1
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = self.optimizer.step(&mut self.model.params, &mut grads, lr, self.config.clip_norm);
            max_norm = max_norm.max(norm);
            self.state.step += 1;
            if let Some(name) = self.model.params.first_non_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after step {}", self.state.step)));
            }
            total += loss;
        }
        self.state.epoch += 1;
        Ok((total / train.len() as f64, max_norm))
    }

    /// Trains until the epoch budget, patience or F1 target is exhausted.
    /// Checkpoints go to `out` when given; one JSON record per line goes to
    /// `log`.
    pub fn fit(&mut self, train: &[Instance], dev: &[Instance], out: Option<&Path>, log: &mut dyn Write) -> Result<StopReason> {
        let io = |e: std::io::Error| Error::io("<training log>", e);
        let mut reason = StopReason::Epochs;
        while self.state.epoch < self.config.epochs {
            let lr = self.config.lr_at(self.state.epoch);
            let (loss, max_norm) = self.run_epoch(train)?;
            let dev_metrics = if dev.is_empty() { None } else { Some(evaluate(&self.model, dev)?) };
            // without a dev set every epoch counts as an improvement
            let improved = match (dev_metrics, self.state.best_f1) {
                (None, _) | (_, None) => true,
                (Some(m), Some(b)) => m.f1 > b,
            };
            if improved {
                self.state.best_f1 = dev_metrics.map(|m| m.f1);
                self.state.best_epoch = self.state.epoch;
                self.best = Some(self.model.params.clone());
            }
            let rec = EpochRecord {
                record: "epoch",
                epoch: self.state.epoch,
                step: self.state.step,
                lr,
                loss,
                max_grad_norm: max_norm,
                dev: dev_metrics,
                best_epoch: self.state.best_epoch,
            };
            serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(log).map_err(io)?;
            log::info!(
                "epoch {} loss {:.6} dev f1 {}",
                rec.epoch,
                loss,
                dev_metrics.map_or("-".to_string(), |m| format!("{:.4}", m.f1))
            );
            if let Some(dir) = out {
                let ckpt = self.checkpoint();
                if improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
                ckpt.save(&dir.join("last.ckpt"))?;
            }
            if let (Some(t), Some(m)) = (self.config.target_f1, dev_metrics) {
                if m.f1 >= t {
                    reason = StopReason::Target;
                    break;
                }
            }
            if self.state.epoch - self.state.best_epoch >= self.config.patience {
                reason = StopReason::Patience;
                break;
            }
        }
        let stop = json!({
            "record": "stop",
            "reason": reason,
            "epoch": self.state.epoch,
            "best_epoch": self.state.best_epoch,
            "best_f1": self.state.best_f1,
        });
        writeln!(log, "{stop}").map_err(io)?;
        log.flush().map_err(io)?;
        Ok(reason)
    }

    /// The model at the best dev epoch (the current model if none recorded).
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(p) = &self.best {
            m.params = p.clone();
        }
        m
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub stop: StopReason,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Builds a fresh model for `config` from the training data.
pub fn init_model(config: &TrainConfig, train: &Dataset, lexicon: &Lexicon, ngrams: &NgramVocab) -> Result<Model> {
    config.validate()?;
    // characters seen only in dev or test map to the unknown id
    let chars = CharVocab::build(train.corpus.sentences.iter().map(|e| &e.sentence));
    let mut model_cfg = config.model;
    if let (Some(ext), None) = (train.ext, model_cfg.ext_dim) {
        model_cfg.ext_dim = Some(ext.dim);
    }
    if model_cfg != config.model {
        return Err(Error::Config(format!(
            "external embeddings of width {:?} given but the model expects {:?}",
            train.ext.map(|e| e.dim),
            config.model.ext_dim
        )));
    }
    Model::init(model_cfg, chars, lexicon.clone(), ngrams.clone(), config.seed)
}

/// Trains without touching the filesystem and returns the best-dev model.
pub fn train_in_memory(
    config: &TrainConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
    lexicon: &Lexicon,
    ngrams: &NgramVocab,
) -> Result<TrainOutcome> {
    let model = init_model(config, train, lexicon, ngrams)?;
    let train_set = prepare_instances(&model, train, Some(config.max_sentence_len))?;
    let dev_set = match dev {
        Some(d) => prepare_instances(&model, d, None)?,
        None => Vec::new(),
    };
    let mut trainer = Trainer::new(model, config.clone())?;
    let stop = trainer.fit(&train_set, &dev_set, None, &mut std::io::sink())?;
    Ok(TrainOutcome {
        model: trainer.best_model(),
        state: trainer.state,
        stop,
        best_checkpoint: None,
        log: None,
    })
}

fn config_record(config: &TrainConfig, train: usize, dev: usize, lexicon: usize, ngrams: usize) -> serde_json::Value {
    json!({
        "record": "config",
        "config": config,
        "train_sentences": train,
        "dev_sentences": dev,
        "lexicon_size": lexicon,
        "ngram_size": ngrams,
    })
}

/// Trains and writes `best.ckpt`, `last.ckpt` and `train.jsonl` into `out_dir`.
/// When `resume` is given training continues from that checkpoint with its
/// stored settings, except that `config.epochs` sets the new budget, and the
/// log is appended to.
pub fn train(
    config: &TrainConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
    lexicon: &Lexicon,
    ngrams: &NgramVocab,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train.jsonl");
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(Checkpoint::load(p)?)?;
            t.config.epochs = config.epochs;
            let best = out_dir.join("best.ckpt");
            if best.exists() {
                t.best = Some(Checkpoint::load(&best)?.model.params);
            }
            t
        }
        None => Trainer::new(init_model(config, train, lexicon, ngrams)?, config.clone())?,
    };
    let train_set = prepare_instances(&trainer.model, train, Some(trainer.config.max_sentence_len))?;
    let dev_set = match dev {
        Some(d) => prepare_instances(&trainer.model, d, None)?,
        None => Vec::new(),
    };
    let file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    if resume.is_none() {
        let rec = config_record(
            &trainer.config,
            train.corpus.len(),
            dev.map_or(0, |d| d.corpus.len()),
            lexicon.len(),
            ngrams.len(),
        );
        writeln!(log, "{rec}").map_err(|e| Error::io(&log_path, e))?;
    }
    let stop = trainer.fit(&train_set, &dev_set, Some(out_dir), &mut log)?;
    Ok(TrainOutcome {
        model: trainer.best_model(),
        state: trainer.state,
        stop,
        best_checkpoint: Some(out_dir.join("best.ckpt")),
        log: Some(log_path),
    })
}
