//! The full segmenter: character encoder, heterogeneous graph layers and the
//! CRF decoder, with parameters held in [`ModelParams`].

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{spans_from_labels, LabelSeq, Lexicon, Sentence, Span};
use crate::crf;
use crate::encoder::{self, CharVocab};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, HeteroGraph, Matcher, NodeKind, Relation};
use crate::hgnn::{self, Activation, LayerParams};
use crate::ngram::NgramVocab;
use crate::parses::DepParse;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Character embedding width.
    pub char_dim: usize,
    /// Graph hidden width.
    pub hidden_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    /// Width of external per-character embeddings, when used.
    pub ext_dim: Option<usize>,
    pub graph: GraphConfig,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            char_dim: 64,
            hidden_dim: 64,
            layers: 2,
            activation: Activation::Relu,
            ext_dim: None,
            graph: GraphConfig::default(),
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "dimensions and layer count must be positive: {self:?}"
            )));
        }
        if self.ext_dim == Some(0) {
            return Err(Error::Config("external embedding width must be positive".into()));
        }
        self.graph.validate()
    }

    pub fn relations(&self) -> &'static [Relation] {
        self.graph.grouping.relations()
    }
}

/// Every trainable tensor. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub char_embed: Array2<f64>,
    pub ext_proj: Option<Array2<f64>>,
    pub word_embed: Array2<f64>,
    pub ngram_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub w_s: Array2<f64>,
    pub b_s: Array1<f64>,
    pub trans: Array2<f64>,
    relations: Vec<Relation>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), a: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 })
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize, words: usize, ngrams: usize) -> Self {
        let relations = cfg.relations().to_vec();
        let layers = (0..cfg.layers)
            .map(|l| {
                let d_in = if l == 0 { cfg.char_dim } else { cfg.hidden_dim };
                LayerParams::zeros(relations.len(), d_in, cfg.hidden_dim)
            })
            .collect();
        ModelParams {
            char_embed: Array2::zeros((vocab_size, cfg.char_dim)),
            ext_proj: cfg.ext_dim.map(|d| Array2::zeros((d, cfg.char_dim))),
            word_embed: Array2::zeros((words, cfg.char_dim)),
            ngram_embed: Array2::zeros((ngrams, cfg.char_dim)),
            layers,
            w_s: Array2::zeros((cfg.hidden_dim + cfg.char_dim, crf::NUM_LABELS)),
            b_s: Array1::zeros(crf::NUM_LABELS),
            trans: Array2::zeros((crf::NUM_LABELS, crf::NUM_LABELS)),
            relations,
        }
    }

    /// Embeddings uniform in `[-init_scale, init_scale]`, dense weights with
    /// Glorot-uniform ranges, biases and transitions at zero.
    pub fn init(cfg: &ModelConfig, vocab_size: usize, words: usize, ngrams: usize, seed: u64) -> Self {
        let mut p = Self::zeros(cfg, vocab_size, words, ngrams);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glorot = |m: &Array2<f64>| (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
        let scale = cfg.init_scale;
        p.char_embed = uniform(&mut rng, p.char_embed.dim(), scale);
        if let Some(proj) = &p.ext_proj {
            let a = glorot(proj);
            p.ext_proj = Some(uniform(&mut rng, proj.dim(), a));
        }
        p.word_embed = uniform(&mut rng, p.word_embed.dim(), scale);
        p.ngram_embed = uniform(&mut rng, p.ngram_embed.dim(), scale);
        for layer in &mut p.layers {
            for r in &mut layer.relations {
                let a = glorot(&r.weight);
                r.weight = uniform(&mut rng, r.weight.dim(), a);
                r.gate_w = uniform(&mut rng, (1, r.gate_w.len()), scale).remove_axis(Axis(0));
            }
        }
        let a = glorot(&p.w_s);
        p.w_s = uniform(&mut rng, p.w_s.dim(), a);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    /// Visits every tensor as a flat slice, in a fixed order, with its name.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        fn flat(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        f("char_embed", flat(&self.char_embed));
        if let Some(p) = &self.ext_proj {
            f("ext_proj", flat(p));
        }
        f("word_embed", flat(&self.word_embed));
        f("ngram_embed", flat(&self.ngram_embed));
        for (l, layer) in self.layers.iter().enumerate() {
            for (r, rp) in self.relations.iter().zip(&layer.relations) {
                let name = format!("layer{l}.{}", r.name());
                f(&format!("{name}.weight"), flat(&rp.weight));
                f(&format!("{name}.gate_w"), rp.gate_w.as_slice().unwrap());
                f(&format!("{name}.gate_b"), rp.gate_b.as_slice().unwrap());
            }
        }
        f("crf.w_s", flat(&self.w_s));
        f("crf.b_s", self.b_s.as_slice().unwrap());
        f("crf.trans", flat(&self.trans));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        fn flat(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        f("char_embed", flat(&mut self.char_embed));
        if let Some(p) = &mut self.ext_proj {
            f("ext_proj", flat(p));
        }
        f("word_embed", flat(&mut self.word_embed));
        f("ngram_embed", flat(&mut self.ngram_embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (r, rp) in self.relations.iter().zip(&mut layer.relations) {
                let name = format!("layer{l}.{}", r.name());
                f(&format!("{name}.weight"), flat(&mut rp.weight));
                f(&format!("{name}.gate_w"), rp.gate_w.as_slice_mut().unwrap());
                f(&format!("{name}.gate_b"), rp.gate_b.as_slice_mut().unwrap());
            }
        }
        f("crf.w_s", flat(&mut self.w_s));
        f("crf.b_s", self.b_s.as_slice_mut().unwrap());
        f("crf.trans", flat(&mut self.trans));
    }

    /// Name and shape of every tensor in visiting order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let shape2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        out.push(("char_embed".to_string(), shape2(&self.char_embed)));
        if let Some(p) = &self.ext_proj {
            out.push(("ext_proj".to_string(), shape2(p)));
        }
        out.push(("word_embed".to_string(), shape2(&self.word_embed)));
        out.push(("ngram_embed".to_string(), shape2(&self.ngram_embed)));
        for (l, layer) in self.layers.iter().enumerate() {
            for (r, rp) in self.relations.iter().zip(&layer.relations) {
                let name = format!("layer{l}.{}", r.name());
                out.push((format!("{name}.weight"), shape2(&rp.weight)));
                out.push((format!("{name}.gate_w"), vec![rp.gate_w.len()]));
                out.push((format!("{name}.gate_b"), vec![1]));
            }
        }
        out.push(("crf.w_s".to_string(), shape2(&self.w_s)));
        out.push(("crf.b_s".to_string(), vec![self.b_s.len()]));
        out.push(("crf.trans".to_string(), shape2(&self.trans)));
        out
    }

    /// Every tensor as a flat slice, in visiting order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.char_embed.as_slice().unwrap()];
        if let Some(p) = &self.ext_proj {
            out.push(p.as_slice().unwrap());
        }
        out.push(self.word_embed.as_slice().unwrap());
        out.push(self.ngram_embed.as_slice().unwrap());
        for layer in &self.layers {
            for rp in &layer.relations {
                out.push(rp.weight.as_slice().unwrap());
                out.push(rp.gate_w.as_slice().unwrap());
                out.push(rp.gate_b.as_slice().unwrap());
            }
        }
        out.push(self.w_s.as_slice().unwrap());
        out.push(self.b_s.as_slice().unwrap());
        out.push(self.trans.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.char_embed.as_slice_mut().unwrap()];
        if let Some(p) = &mut self.ext_proj {
            out.push(p.as_slice_mut().unwrap());
        }
        out.push(self.word_embed.as_slice_mut().unwrap());
        out.push(self.ngram_embed.as_slice_mut().unwrap());
        for layer in &mut self.layers {
            for rp in &mut layer.relations {
                out.push(rp.weight.as_slice_mut().unwrap());
                out.push(rp.gate_w.as_slice_mut().unwrap());
                out.push(rp.gate_b.as_slice_mut().unwrap());
            }
        }
        out.push(self.w_s.as_slice_mut().unwrap());
        out.push(self.b_s.as_slice_mut().unwrap());
        out.push(self.trans.as_slice_mut().unwrap());
        out
    }

    /// Applies `f(self, other)` elementwise across matching tensors.
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        let theirs = other.tensors();
        let ours = self.tensors_mut();
        assert_eq!(ours.len(), theirs.len(), "parameter layouts differ");
        for (a, b) in ours.into_iter().zip(theirs) {
            assert_eq!(a.len(), b.len(), "tensor size mismatch");
            a.iter_mut().zip(b).for_each(|(x, &y)| f(x, y));
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        self.zip_mut(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(|name, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Embedding row backing a non-character node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRow {
    Word(usize),
    Ngram(usize),
    /// Entry unknown to the model (only possible with a foreign matcher).
    Zero,
}

/// A sentence with its graph and lookups, ready for the forward pass.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: HeteroGraph,
    pub char_ids: Vec<usize>,
    pub node_rows: Vec<NodeRow>,
    pub ext: Option<Array2<f64>>,
    pub gold: Option<LabelSeq>,
    pub gold_spans: Vec<Span>,
    /// Per gold span: absent from the model's lexicon.
    pub gold_oov: Vec<bool>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}

pub struct ForwardPass {
    pub encoded: Array2<f64>,
    pub caches: Vec<hgnn::LayerCache>,
    pub states: Array2<f64>,
    pub emissions: Array2<f64>,
}

fn initial_states(cfg: &ModelConfig, params: &ModelParams, inst: &Instance, encoded: &Array2<f64>) -> Array2<f64> {
    let n = inst.graph.num_nodes();
    let t = inst.len();
    let mut h0 = Array2::zeros((n, cfg.char_dim));
    h0.slice_mut(s![..t, ..]).assign(encoded);
    for (k, row) in inst.node_rows.iter().enumerate() {
        match *row {
            NodeRow::Word(r) => h0.row_mut(t + k).assign(&params.word_embed.row(r)),
            NodeRow::Ngram(r) => h0.row_mut(t + k).assign(&params.ngram_embed.row(r)),
            NodeRow::Zero => {}
        }
    }
    h0
}

fn ext_view<'a>(params: &'a ModelParams, inst: &'a Instance) -> Option<(ArrayView2<'a, f64>, &'a Array2<f64>)> {
    match (&inst.ext, &params.ext_proj) {
        (Some(rows), Some(proj)) => Some((rows.view(), proj)),
        _ => None,
    }
}

pub fn forward(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<ForwardPass> {
    let encoded = encoder::encode(&inst.char_ids, &params.char_embed, ext_view(params, inst))?;
    let h0 = initial_states(cfg, params, inst, &encoded);
    let (states, caches) = hgnn::forward_all(&inst.graph, &h0, &params.layers, cfg.activation)?;
    let h = states.slice(s![..inst.len(), ..]).to_owned();
    let emissions = crf::emissions(&h, &encoded, &params.w_s, &params.b_s)?;
    Ok(ForwardPass {
        encoded,
        caches,
        states,
        emissions,
    })
}

/// Negative log-likelihood of the instance's gold labels.
pub fn loss(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<f64> {
    let gold = inst
        .gold
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("instance has no gold labels".into()))?;
    let fp = forward(cfg, params, inst)?;
    crf::neg_log_likelihood(&fp.emissions, &params.trans, gold)
}

/// Loss and its gradient with respect to every parameter. The gradient is
/// added into `grads`.
pub fn loss_and_grad_into(cfg: &ModelConfig, params: &ModelParams, inst: &Instance, grads: &mut ModelParams) -> Result<f64> {
    let gold = inst
        .gold
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("instance has no gold labels".into()))?;
    let fp = forward(cfg, params, inst)?;
    let t = inst.len();
    let g = crf::nll_with_grad(&fp.emissions, &params.trans, gold)?;
    grads.trans += &g.d_transitions;

    let h = fp.states.slice(s![..t, ..]);
    let a = ndarray::concatenate(Axis(1), &[h, fp.encoded.view()]).expect("row counts agree");
    grads.w_s += &a.t().dot(&g.d_emissions);
    grads.b_s += &g.d_emissions.sum_axis(Axis(0));
    let d_a = g.d_emissions.dot(&params.w_s.t());

    let mut d_states = Array2::zeros(fp.states.dim());
    d_states.slice_mut(s![..t, ..]).assign(&d_a.slice(s![.., ..cfg.hidden_dim]));
    let mut d_encoded = d_a.slice(s![.., cfg.hidden_dim..]).to_owned();

    let d_h0 = hgnn::backward(&d_states, &fp.caches, &inst.graph, &params.layers, cfg.activation, &mut grads.layers);
    d_encoded += &d_h0.slice(s![..t, ..]);
    for (k, row) in inst.node_rows.iter().enumerate() {
        let d = d_h0.row(t + k);
        match *row {
            NodeRow::Word(r) => {
                let mut dst = grads.word_embed.row_mut(r);
                dst += &d;
            }
            NodeRow::Ngram(r) => {
                let mut dst = grads.ngram_embed.row_mut(r);
                dst += &d;
            }
            NodeRow::Zero => {}
        }
    }
    let ext = match (&inst.ext, grads.ext_proj.as_mut()) {
        (Some(rows), Some(dp)) if params.ext_proj.is_some() => Some((rows.view(), dp)),
        _ => None,
    };
    encoder::encode_backward(&inst.char_ids, &d_encoded, &mut grads.char_embed, ext);
    Ok(g.nll)
}

pub fn loss_and_grad(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let l = loss_and_grad_into(cfg, params, inst, &mut grads)?;
    Ok((l, grads))
}

pub fn decode(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<LabelSeq> {
    let fp = forward(cfg, params, inst)?;
    Ok(crf::viterbi(&fp.emissions, &params.trans, true)?.0)
}

/// A trained segmenter: configuration, vocabularies and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub chars: CharVocab,
    pub lexicon: Lexicon,
    pub ngrams: NgramVocab,
    pub params: ModelParams,
    word_index: HashMap<String, usize>,
    ngram_index: HashMap<String, usize>,
    matcher: Matcher,
}

impl Model {
    pub fn new(config: ModelConfig, chars: CharVocab, lexicon: Lexicon, ngrams: NgramVocab, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::zeros(&config, chars.len(), lexicon.len(), ngrams.len());
        if expected.shapes() != params.shapes() {
            return Err(Error::Shape("parameter shapes do not match the configuration".into()));
        }
        let word_index = lexicon.iter().enumerate().map(|(i, (w, _))| (w.to_string(), i)).collect();
        let ngram_index = ngrams.iter().enumerate().map(|(i, (w, _))| (w.to_string(), i)).collect();
        let matcher = Matcher::new(&lexicon, &ngrams);
        Ok(Model {
            config,
            chars,
            lexicon,
            ngrams,
            params,
            word_index,
            ngram_index,
            matcher,
        })
    }

    /// Fresh randomly initialized model.
    pub fn init(config: ModelConfig, chars: CharVocab, lexicon: Lexicon, ngrams: NgramVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, chars.len(), lexicon.len(), ngrams.len(), seed);
        Self::new(config, chars, lexicon, ngrams, params)
    }

    pub fn build_graph(&self, sentence: &Sentence, parse: Option<&DepParse>) -> Result<HeteroGraph> {
        let matches = self.matcher.find(sentence, &self.config.graph);
        build_graph(sentence, parse, &matches, &self.config.graph)
    }

    pub fn prepare(
        &self,
        sentence: &Sentence,
        parse: Option<&DepParse>,
        ext: Option<ArrayView2<f64>>,
        gold: Option<&[Span]>,
    ) -> Result<Instance> {
        if sentence.is_empty() {
            return Err(Error::InvalidInput("empty sentence".into()));
        }
        let graph = self.build_graph(sentence, parse)?;
        let node_rows = graph.nodes[graph.num_chars..]
            .iter()
            .map(|n| {
                let idx = match n.kind {
                    NodeKind::Word => self.word_index.get(&n.surface).map(|&r| NodeRow::Word(r)),
                    NodeKind::Ngram => self.ngram_index.get(&n.surface).map(|&r| NodeRow::Ngram(r)),
                    NodeKind::Char => None,
                };
                idx.unwrap_or(NodeRow::Zero)
            })
            .collect();
        let ext = match (ext, self.config.ext_dim) {
            (Some(rows), Some(d)) => {
                if rows.dim() != (sentence.len(), d) {
                    return Err(Error::Shape(format!(
                        "external rows {:?} for a sentence of {} characters and width {d}",
                        rows.dim(),
                        sentence.len()
                    )));
                }
                Some(rows.to_owned())
            }
            (Some(_), None) => {
                return Err(Error::Config("model was trained without external embeddings".into()));
            }
            (None, _) => None,
        };
        let (gold_labels, gold_spans, gold_oov) = match gold {
            Some(spans) => (
                Some(crate::corpus::spans_to_labels(spans)),
                spans.to_vec(),
                spans.iter().map(|s| !self.lexicon.contains(&sentence.span_text(*s))).collect(),
            ),
            None => (None, Vec::new(), Vec::new()),
        };
        Ok(Instance {
            graph,
            char_ids: self.chars.ids(sentence),
            node_rows,
            ext,
            gold: gold_labels,
            gold_spans,
            gold_oov,
        })
    }

    pub fn decode(&self, inst: &Instance) -> Result<LabelSeq> {
        decode(&self.config, &self.params, inst)
    }

    pub fn predict_spans(&self, inst: &Instance) -> Result<Vec<Span>> {
        Ok(spans_from_labels(self.decode(inst)?.labels()).spans)
    }

    /// Segments one line of raw text, restoring the original characters of
    /// normalized positions. Whitespace in the input is dropped.
    pub fn segment_line(&self, raw: &str, parse: Option<&DepParse>, ext: Option<ArrayView2<f64>>) -> Result<String> {
        self.segment_sentence(&Sentence::from_text(raw), parse, ext)
    }

    pub fn segment_sentence(&self, sentence: &Sentence, parse: Option<&DepParse>, ext: Option<ArrayView2<f64>>) -> Result<String> {
        if sentence.is_empty() {
            return Ok(String::new());
        }
        let ext = if self.config.ext_dim.is_some() { ext } else { None };
        let inst = self.prepare(sentence, parse, ext, None)?;
        let spans = self.predict_spans(&inst)?;
        Ok(spans.iter().map(|s| sentence.raw_text(*s)).collect::<Vec<_>>().join(" "))
    }
}
