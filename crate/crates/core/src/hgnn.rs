//! Relation-typed graph convolution with edge-wise gating.
//!
//! One layer computes
//!
//! ```text
//! H' = σ( Σ_τ  Ã_τ · diag(g_τ) · H · W_τ ),   g_τ = sigmoid(H · w_τ + b_τ)
//! ```
//!
//! The gate is evaluated per source node, so every message a node sends along
//! relation `τ` is scaled by the same scalar.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth activation used for gradient checking.
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weights of one relation in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    /// `d_in x d_out`
    pub weight: Array2<f64>,
    /// `d_in`
    pub gate_w: Array1<f64>,
    /// Single-element gate bias.
    pub gate_b: Array1<f64>,
}

impl RelationParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        RelationParams {
            weight: Array2::zeros((d_in, d_out)),
            gate_w: Array1::zeros(d_in),
            gate_b: Array1::zeros(1),
        }
    }
}

/// One entry per relation of the graph, in the graph's relation order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub relations: Vec<RelationParams>,
}

impl LayerParams {
    pub fn zeros(num_relations: usize, d_in: usize, d_out: usize) -> Self {
        LayerParams {
            relations: (0..num_relations).map(|_| RelationParams::zeros(d_in, d_out)).collect(),
        }
    }

    pub fn d_out(&self) -> usize {
        self.relations.first().map_or(0, |r| r.weight.ncols())
    }
}

/// `sigmoid(H · w + b)`, one scalar per node row.
pub fn gate(h: &Array2<f64>, w: &Array1<f64>, b: f64) -> Array1<f64> {
    h.dot(w).mapv(|z| sigmoid(z + b))
}

struct RelationCache {
    gate: Array1<f64>,
    /// `H · W`
    transformed: Array2<f64>,
}

pub struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    relations: Vec<Option<RelationCache>>,
}

fn check_dims(h: &Array2<f64>, graph: &HeteroGraph, layer: &LayerParams) -> Result<()> {
    if h.nrows() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} node rows for a graph of {} nodes",
            h.nrows(),
            graph.num_nodes()
        )));
    }
    if layer.relations.len() != graph.relations.len() {
        return Err(Error::Shape(format!(
            "{} relation weights for {} relations",
            layer.relations.len(),
            graph.relations.len()
        )));
    }
    for r in &layer.relations {
        if r.weight.nrows() != h.ncols() || r.gate_w.len() != h.ncols() {
            return Err(Error::Shape(format!(
                "layer expects width {} but states have width {}",
                r.weight.nrows(),
                h.ncols()
            )));
        }
    }
    Ok(())
}

/// Pre-activation sum of gated relation messages, plus the pieces needed for
/// the backward pass.
fn aggregate(h: &Array2<f64>, graph: &HeteroGraph, layer: &LayerParams) -> (Array2<f64>, Vec<Option<RelationCache>>) {
    let mut pre = Array2::zeros((h.nrows(), layer.d_out()));
    let mut caches = Vec::with_capacity(layer.relations.len());
    for (k, rp) in layer.relations.iter().enumerate() {
        if !graph.enabled[k] {
            caches.push(None);
            continue;
        }
        let g = gate(h, &rp.gate_w, rp.gate_b[0]);
        let transformed = h.dot(&rp.weight);
        let gated = &transformed * &g.view().insert_axis(Axis(1));
        pre += &graph.normalized[k].mul(&gated);
        caches.push(Some(RelationCache { gate: g, transformed }));
    }
    (pre, caches)
}

pub fn layer_forward(
    h: &Array2<f64>,
    graph: &HeteroGraph,
    layer: &LayerParams,
    act: Activation,
) -> Result<(Array2<f64>, LayerCache)> {
    check_dims(h, graph, layer)?;
    let (pre, relations) = aggregate(h, graph, layer);
    let out = pre.mapv(|x| act.apply(x));
    Ok((
        out,
        LayerCache {
            input: h.clone(),
            pre,
            relations,
        },
    ))
}

/// Backpropagates `d_out` through one layer. Parameter gradients are added to
/// `grads`; the gradient with respect to the layer input is returned.
pub fn layer_backward(
    d_out: &Array2<f64>,
    cache: &LayerCache,
    graph: &HeteroGraph,
    layer: &LayerParams,
    act: Activation,
    grads: &mut LayerParams,
) -> Array2<f64> {
    let d_pre = d_out * &cache.pre.mapv(|x| act.derivative(x));
    let h = &cache.input;
    let mut d_h = Array2::zeros(h.dim());
    for (k, rc) in cache.relations.iter().enumerate() {
        let Some(rc) = rc else { continue };
        let rp = &layer.relations[k];
        let gr = &mut grads.relations[k];
        let d_gated = graph.normalized[k].mul_transposed(&d_pre);
        let d_transformed = &d_gated * &rc.gate.view().insert_axis(Axis(1));
        gr.weight += &h.t().dot(&d_transformed);
        d_h += &d_transformed.dot(&rp.weight.t());
        let d_gate = (&d_gated * &rc.transformed).sum_axis(Axis(1));
        let d_z = &d_gate * &rc.gate.mapv(|g| g * (1.0 - g));
        gr.gate_w += &h.t().dot(&d_z);
        gr.gate_b[0] += d_z.sum();
        d_h += &d_z.view().insert_axis(Axis(1)).dot(&rp.gate_w.view().insert_axis(Axis(0)));
    }
    d_h
}

/// Runs every layer and returns the final states of all nodes together with
/// the caches for [`backward`].
pub fn forward_all(
    graph: &HeteroGraph,
    h0: &Array2<f64>,
    layers: &[LayerParams],
    act: Activation,
) -> Result<(Array2<f64>, Vec<LayerCache>)> {
    let mut h = h0.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, cache) = layer_forward(&h, graph, layer, act)?;
        caches.push(cache);
        h = next;
    }
    Ok((h, caches))
}

/// Character-node rows after all layers, in sentence order.
pub fn forward(
    graph: &HeteroGraph,
    h0: &Array2<f64>,
    layers: &[LayerParams],
    act: Activation,
) -> Result<Array2<f64>> {
    let (h, _) = forward_all(graph, h0, layers, act)?;
    Ok(h.slice(ndarray::s![..graph.num_chars, ..]).to_owned())
}

/// Gradient with respect to `h0`, given the gradient of the final node states.
pub fn backward(
    d_final: &Array2<f64>,
    caches: &[LayerCache],
    graph: &HeteroGraph,
    layers: &[LayerParams],
    act: Activation,
    grads: &mut [LayerParams],
) -> Array2<f64> {
    let mut d = d_final.clone();
    for l in (0..layers.len()).rev() {
        d = layer_backward(&d, &caches[l], graph, &layers[l], act, &mut grads[l]);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Lexicon, Sentence, Span};
    use crate::graph::{build_graph, GraphConfig, MatchSource, SpanMatch};
    use crate::parses::{align, RawParse};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_layer(rng: &mut ChaCha8Rng, rels: usize, d_in: usize, d_out: usize) -> LayerParams {
        LayerParams {
            relations: (0..rels)
                .map(|_| RelationParams {
                    weight: Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-1.0..1.0)),
                    gate_w: Array1::from_shape_fn(d_in, |_| rng.random_range(-1.0..1.0)),
                    gate_b: Array1::from_elem(1, rng.random_range(-1.0..1.0)),
                })
                .collect(),
        }
    }

    /// Random graph with up to `max_nodes` nodes: characters with a random
    /// parse and random candidate spans.
    fn rand_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> HeteroGraph {
        loop {
            let t = rng.random_range(1..=6usize);
            let text: String = (0..t).map(|_| ['甲', '乙', '丙', '丁'][rng.random_range(0..4)]).collect();
            let s = Sentence::from_text(&text);
            let mut matches = Vec::new();
            for b in 0..t {
                for e in b + 2..=t {
                    if rng.random_bool(0.3) {
                        let source = if rng.random_bool(0.5) { MatchSource::Lexicon } else { MatchSource::Ngram };
                        matches.push(SpanMatch { span: Span::new(b, e), source });
                    }
                }
            }
            if t + matches.len() > max_nodes {
                continue;
            }
            // random projective-ish parse over single-character tokens
            let forms: Vec<String> = s.chars.clone();
            let root = rng.random_range(0..t);
            let heads: Vec<usize> = (0..t)
                .map(|i| if i == root { 0 } else { root + 1 })
                .collect();
            let parse = align(&RawParse { forms, heads }, &s).unwrap();
            let cfg = GraphConfig {
                use_syntax: rng.random_bool(0.8),
                use_cwn: true,
                ..Default::default()
            };
            return build_graph(&s, Some(&parse), &matches, &cfg).unwrap();
        }
    }

    /// Dense reference that normalizes from the raw edge lists itself.
    fn dense_layer(h: &Array2<f64>, g: &HeteroGraph, layer: &LayerParams, act: Activation) -> Array2<f64> {
        let n = g.num_nodes();
        let mut pre = Array2::zeros((n, layer.d_out()));
        for (k, rp) in layer.relations.iter().enumerate() {
            if !g.enabled[k] {
                continue;
            }
            let mut a = Array2::<f64>::eye(n);
            for &(src, dst) in &g.edges[k] {
                a[[dst, src]] = 1.0;
            }
            let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
            let mut dinv = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                dinv[[i, i]] = deg[i].powf(-0.5);
            }
            let norm = dinv.dot(&a).dot(&dinv);
            let mut gdiag = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let z: f64 = h.row(i).dot(&rp.gate_w) + rp.gate_b[0];
                gdiag[[i, i]] = 1.0 / (1.0 + (-z).exp());
            }
            pre += &norm.dot(&gdiag).dot(h).dot(&rp.weight);
        }
        pre.mapv(|x| act.apply(x))
    }

    #[test]
    fn gate_examples() {
        let h = array![[1.0, -1.0], [3.0, 2.0]];
        assert_eq!(gate(&h, &array![0.0, 0.0], 0.0), array![0.5, 0.5]);
        let g = gate(&h, &array![0.0, 0.0], 20.0);
        assert!(g.iter().all(|v| (1.0 - v).abs() < 1e-8));
        assert_eq!(gate(&h, &array![1.0, 1.0], 0.0)[0], 0.5);
    }

    fn single_relation_graph(n: usize, edges: &[(usize, usize)]) -> HeteroGraph {
        let text: String = std::iter::repeat_n('字', n).collect();
        let s = Sentence::from_text(&text);
        let mut g = build_graph(&s, None, &[], &GraphConfig { use_syntax: false, ..Default::default() }).unwrap();
        g.edges[2] = edges.to_vec();
        g.normalized[2] = crate::graph::normalize_adjacency(n, edges);
        g
    }

    #[test]
    fn isolated_node_is_identity() {
        let g = single_relation_graph(1, &[]);
        let mut layer = LayerParams::zeros(3, 2, 2);
        layer.relations[2].weight = Array2::eye(2);
        layer.relations[2].gate_b[0] = 50.0;
        let h0 = array![[0.7, -1.3]];
        let (h1, _) = layer_forward(&h0, &g, &layer, Activation::Identity).unwrap();
        assert_eq!(h1, h0);
    }

    #[test]
    fn two_node_mutual_edge() {
        let g = single_relation_graph(2, &[(0, 1), (1, 0)]);
        let mut layer = LayerParams::zeros(3, 1, 1);
        layer.relations[2].weight[[0, 0]] = 1.0;
        layer.relations[2].gate_b[0] = 50.0;
        let (h1, _) = layer_forward(&array![[2.0], [4.0]], &g, &layer, Activation::Identity).unwrap();
        assert!(h1.iter().all(|v| (v - 3.0).abs() < 1e-12), "{h1}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = single_relation_graph(2, &[]);
        let layer = LayerParams::zeros(3, 2, 2);
        assert!(layer_forward(&Array2::zeros((3, 2)), &g, &layer, Activation::Relu).is_err());
        assert!(layer_forward(&Array2::zeros((2, 5)), &g, &layer, Activation::Relu).is_err());
    }

    #[test]
    fn sparse_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = rand_graph(&mut rng, 12);
            let h = Array2::from_shape_fn((g.num_nodes(), 3), |_| rng.random_range(-1.0..1.0));
            let layer = rand_layer(&mut rng, 3, 3, 4);
            for act in [Activation::Relu, Activation::Tanh] {
                let (fast, _) = layer_forward(&h, &g, &layer, act).unwrap();
                let slow = dense_layer(&h, &g, &layer, act);
                let err = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(err < 1e-10, "max diff {err}");
            }
        }
    }

    #[test]
    fn two_layer_shapes_and_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Sentence::from_text("武汉市长江大桥");
        let mut lex = Lexicon::new();
        lex.insert("长江", 1).unwrap();
        let cfg = GraphConfig::default();
        let m = crate::graph::match_spans(&s, &lex, &Default::default(), &cfg);
        let g = build_graph(&s, None, &m, &cfg).unwrap();
        let h0 = Array2::from_shape_fn((g.num_nodes(), 4), |_| rng.random_range(-1.0..1.0));
        let layers = vec![rand_layer(&mut rng, 3, 4, 5), rand_layer(&mut rng, 3, 5, 5)];
        assert_eq!(forward(&g, &h0, &layers, Activation::Relu).unwrap().dim(), (7, 5));
        let zeros = vec![LayerParams::zeros(3, 4, 5), LayerParams::zeros(3, 5, 5)];
        let out = forward(&g, &h0, &zeros, Activation::Relu).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabling_cwn_removes_only_its_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let g = rand_graph(&mut rng, 12);
            let h = Array2::from_shape_fn((g.num_nodes(), 3), |_| rng.random_range(-1.0..1.0));
            let layer = rand_layer(&mut rng, 3, 3, 3);
            let mut no_cwn = g.clone();
            no_cwn.enabled[2] = false;
            let mut only_cwn = g.clone();
            only_cwn.enabled[0] = false;
            only_cwn.enabled[1] = false;
            let (full, _) = layer_forward(&h, &g, &layer, Activation::Identity).unwrap();
            let (a, _) = layer_forward(&h, &no_cwn, &layer, Activation::Identity).unwrap();
            let (b, _) = layer_forward(&h, &only_cwn, &layer, Activation::Identity).unwrap();
            let diff = (&full - &(&a + &b)).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
            assert!(diff < 1e-12);
            if g.cwn_edges() > 0 || g.num_nodes() > 0 {
                assert!((&full - &a).iter().any(|v| v.abs() > 0.0));
            }
        }
    }

    #[test]
    fn extra_node_order_does_not_change_char_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let g = rand_graph(&mut rng, 12);
            let extra = g.num_nodes() - g.num_chars;
            let mut perm: Vec<usize> = (0..extra).collect();
            perm.reverse();
            let pg = g.permute_extra_nodes(&perm);
            let h = Array2::from_shape_fn((g.num_nodes(), 3), |_| rng.random_range(-1.0..1.0));
            let mut ph = h.clone();
            for k in 0..extra {
                ph.row_mut(g.num_chars + perm[k]).assign(&h.row(g.num_chars + k));
            }
            let layers = vec![rand_layer(&mut rng, 3, 3, 3), rand_layer(&mut rng, 3, 3, 3)];
            let a = forward(&g, &h, &layers, Activation::Relu).unwrap();
            let b = forward(&pg, &ph, &layers, Activation::Relu).unwrap();
            assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn edge_storage_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = rand_graph(&mut rng, 12);
        let mut shuffled = g.clone();
        for m in &mut shuffled.normalized {
            m.entries.reverse();
        }
        let h = Array2::from_shape_fn((g.num_nodes(), 3), |_| rng.random_range(-1.0..1.0));
        let layer = rand_layer(&mut rng, 3, 3, 3);
        let (a, _) = layer_forward(&h, &g, &layer, Activation::Relu).unwrap();
        let (b, _) = layer_forward(&h, &shuffled, &layer, Activation::Relu).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let g = rand_graph(&mut rng, 8);
            let n = g.num_nodes();
            let h = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let layers = vec![rand_layer(&mut rng, 3, 3, 2), rand_layer(&mut rng, 3, 2, 2)];
            let weights = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
            let act = Activation::Tanh;
            let f = |h: &Array2<f64>, ls: &[LayerParams]| {
                let (out, _) = forward_all(&g, h, ls, act).unwrap();
                (&out * &weights).sum()
            };
            let (_, caches) = forward_all(&g, &h, &layers, act).unwrap();
            let mut grads: Vec<LayerParams> = layers.iter().map(|l| LayerParams::zeros(3, l.relations[0].weight.nrows(), l.d_out())).collect();
            let d_h = backward(&weights, &caches, &g, &layers, act, &mut grads);
            let eps = 1e-5;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
            for i in 0..n {
                for j in 0..3 {
                    let (mut p, mut m) = (h.clone(), h.clone());
                    p[[i, j]] += eps;
                    m[[i, j]] -= eps;
                    let num = (f(&p, &layers) - f(&m, &layers)) / (2.0 * eps);
                    assert!(close(num, d_h[[i, j]]), "dH {num} vs {}", d_h[[i, j]]);
                }
            }
            for l in 0..2 {
                for k in 0..3 {
                    let (mut p, mut m) = (layers.clone(), layers.clone());
                    p[l].relations[k].gate_b[0] += eps;
                    m[l].relations[k].gate_b[0] -= eps;
                    let num = (f(&h, &p) - f(&h, &m)) / (2.0 * eps);
                    assert!(close(num, grads[l].relations[k].gate_b[0]));
                    let (mut p, mut m) = (layers.clone(), layers.clone());
                    p[l].relations[k].weight[[1, 0]] += eps;
                    m[l].relations[k].weight[[1, 0]] -= eps;
                    let num = (f(&h, &p) - f(&h, &m)) / (2.0 * eps);
                    assert!(close(num, grads[l].relations[k].weight[[1, 0]]));
                    let (mut p, mut m) = (layers.clone(), layers.clone());
                    p[l].relations[k].gate_w[0] += eps;
                    m[l].relations[k].gate_w[0] -= eps;
                    let num = (f(&h, &p) - f(&h, &m)) / (2.0 * eps);
                    assert!(close(num, grads[l].relations[k].gate_w[0]));
                }
            }
        }
    }
}
