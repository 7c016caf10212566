//! Per-sentence heterogeneous graph over characters, lexicon words and n-grams.
//!
//! Character nodes come first in sentence order, followed by one node per
//! matched span. Each relation keeps its own adjacency; an edge `src -> dst`
//! means `dst` aggregates the state of `src`.

use std::collections::{HashSet, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Sentence, Span};
use crate::error::{Error, Result};
use crate::ngram::NgramVocab;
use crate::parses::{char_syntax_edges, DepParse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Char,
    Word,
    Ngram,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Char => "char",
            NodeKind::Word => "word",
            NodeKind::Ngram => "ngram",
        }
    }
}

/// Where a matched span was found. A string in both sources is reported once
/// as `Lexicon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatchSource {
    Lexicon,
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpanMatch {
    pub span: Span,
    pub source: MatchSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    /// Syntax edges from dependent characters to head characters.
    In,
    /// Syntax edges from head characters to dependent characters.
    Out,
    /// Character/word/n-gram edges plus sequential character edges.
    Cwn,
    CwnBegin,
    CwnEnd,
    Sequential,
}

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::Out => "out",
            Relation::Cwn => "cwn",
            Relation::CwnBegin => "cwn_begin",
            Relation::CwnEnd => "cwn_end",
            Relation::Sequential => "seq",
        }
    }

    pub fn is_syntax(self) -> bool {
        matches!(self, Relation::In | Relation::Out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RelationGrouping {
    /// `{in, out, cwn}`.
    #[default]
    ThreeWay,
    /// `{in, out, cwn_begin, cwn_end, seq}`, each with its own weights.
    Split,
}

impl RelationGrouping {
    pub fn relations(self) -> &'static [Relation] {
        match self {
            RelationGrouping::ThreeWay => &[Relation::In, Relation::Out, Relation::Cwn],
            RelationGrouping::Split => &[
                Relation::In,
                Relation::Out,
                Relation::CwnBegin,
                Relation::CwnEnd,
                Relation::Sequential,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CwnDirection {
    /// begin char -> word, word -> end char, char -> next char.
    #[default]
    Directed,
    /// Every character/word/n-gram and sequential edge in both directions.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub use_syntax: bool,
    pub use_cwn: bool,
    pub use_lexicon: bool,
    pub use_ngrams: bool,
    pub grouping: RelationGrouping,
    pub cwn_direction: CwnDirection,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            use_syntax: true,
            use_cwn: true,
            use_lexicon: true,
            use_ngrams: true,
            grouping: RelationGrouping::ThreeWay,
            cwn_direction: CwnDirection::Directed,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_syntax && !self.use_cwn {
            return Err(Error::Config(
                "at least one of the syntax and character-word/n-gram sub-graphs must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Span lookup against the lexicon and the n-gram vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Matcher {
    lexicon: HashSet<String>,
    ngrams: HashSet<String>,
    lex_max: usize,
    ngram_max: usize,
}

impl Matcher {
    pub fn new(lexicon: &Lexicon, vocab: &NgramVocab) -> Self {
        let len = |s: &str| crate::corpus::token_len(s);
        let lexicon: HashSet<String> = lexicon.iter().map(|(w, _)| w.to_string()).collect();
        let ngrams: HashSet<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
        Matcher {
            lex_max: lexicon.iter().map(|w| len(w)).max().unwrap_or(0),
            ngram_max: ngrams.iter().map(|w| len(w)).max().unwrap_or(0),
            lexicon,
            ngrams,
        }
    }

    /// Every span of length >= 2 found in an enabled source, sorted by
    /// (begin, end, source).
    pub fn find(&self, sentence: &Sentence, config: &GraphConfig) -> Vec<SpanMatch> {
        let max = match (config.use_lexicon, config.use_ngrams) {
            (true, true) => self.lex_max.max(self.ngram_max),
            (true, false) => self.lex_max,
            (false, true) => self.ngram_max,
            (false, false) => 0,
        };
        let n = sentence.len();
        let mut out = Vec::new();
        for b in 0..n {
            let mut s = sentence.chars[b].clone();
            for e in b + 2..=(b + max).min(n) {
                s.push_str(&sentence.chars[e - 1]);
                let source = if config.use_lexicon && self.lexicon.contains(&s) {
                    Some(MatchSource::Lexicon)
                } else if config.use_ngrams && self.ngrams.contains(&s) {
                    Some(MatchSource::Ngram)
                } else {
                    None
                };
                if let Some(source) = source {
                    out.push(SpanMatch {
                        span: Span::new(b, e),
                        source,
                    });
                }
            }
        }
        out.sort();
        out
    }
}

pub fn match_spans(
    sentence: &Sentence,
    lexicon: &Lexicon,
    vocab: &NgramVocab,
    config: &GraphConfig,
) -> Vec<SpanMatch> {
    Matcher::new(lexicon, vocab).find(sentence, config)
}

/// Sparse matrix stored as (row, col, value) triples sorted by row then col.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for &(r, c, v) in &self.entries {
            m[[r, c]] += v;
        }
        m
    }

    /// `self · x`
    pub fn mul(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(r).scaled_add(v, &x.row(c));
        }
        out
    }

    /// `selfᵀ · x`
    pub fn mul_transposed(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(c).scaled_add(v, &x.row(r));
        }
        out
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` where `A[dst][src] = 1` for each edge and
/// `D_ii` is the row sum of `A + I`. Direction is preserved.
pub fn normalize_adjacency(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut support: BTreeSet<(usize, usize)> = edges.iter().map(|&(src, dst)| (dst, src)).collect();
    support.extend((0..n).map(|i| (i, i)));
    let mut degree = vec![0.0f64; n];
    for &(r, _) in &support {
        degree[r] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    SparseMatrix {
        n,
        entries: support
            .into_iter()
            .map(|(r, c)| (r, c, inv_sqrt[r] * inv_sqrt[c]))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub surface: String,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub nodes: Vec<Node>,
    pub num_chars: usize,
    pub relations: Vec<Relation>,
    /// Directed (src, dst) edges per relation, sorted and deduplicated.
    pub edges: Vec<Vec<(usize, usize)>>,
    pub normalized: Vec<SparseMatrix>,
    /// Relations switched off by the config contribute no messages.
    pub enabled: Vec<bool>,
}

impl HeteroGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self, rel: Relation) -> usize {
        self.relations
            .iter()
            .position(|&r| r == rel)
            .map_or(0, |i| self.edges[i].len())
    }

    pub fn total_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Edge count summed over the character/word/n-gram sub-graph relations.
    pub fn cwn_edges(&self) -> usize {
        self.relations
            .iter()
            .zip(&self.edges)
            .filter(|(r, _)| !r.is_syntax())
            .map(|(_, e)| e.len())
            .sum()
    }

    pub fn syntax_edges(&self) -> usize {
        self.total_edges() - self.cwn_edges()
    }

    /// Kind-local index of a node, e.g. the third word node is `word:2`.
    fn local_index(&self, node: usize) -> (NodeKind, usize) {
        let kind = self.nodes[node].kind;
        let idx = self.nodes[..node].iter().filter(|n| n.kind == kind).count();
        (kind, idx)
    }

    /// Text dump: a node table followed by one `relation<TAB>src<TAB>dst`
    /// line per edge, with endpoints written as `kind:index`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let locals: Vec<(NodeKind, usize)> = (0..self.num_nodes()).map(|i| self.local_index(i)).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            let (k, li) = locals[i];
            let _ = writeln!(
                s,
                "node\t{}:{}\t{}\t{}\t{}",
                k.name(),
                li,
                node.surface,
                node.span.begin,
                node.span.end
            );
        }
        for (rel, edges) in self.relations.iter().zip(&self.edges) {
            for &(src, dst) in edges {
                let (sk, si) = locals[src];
                let (dk, di) = locals[dst];
                let _ = writeln!(s, "{}\t{}:{}\t{}:{}", rel.name(), sk.name(), si, dk.name(), di);
            }
        }
        s
    }

    /// Reorders the non-character nodes. `perm[k]` is the new position of the
    /// k-th non-character node.
    pub fn permute_extra_nodes(&self, perm: &[usize]) -> HeteroGraph {
        let extra = self.num_nodes() - self.num_chars;
        assert_eq!(perm.len(), extra);
        let map = |i: usize| if i < self.num_chars { i } else { self.num_chars + perm[i - self.num_chars] };
        let mut nodes = self.nodes.clone();
        for k in 0..extra {
            nodes[self.num_chars + perm[k]] = self.nodes[self.num_chars + k].clone();
        }
        let edges: Vec<Vec<(usize, usize)>> = self
            .edges
            .iter()
            .map(|es| {
                let mut v: Vec<_> = es.iter().map(|&(a, b)| (map(a), map(b))).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let normalized = edges.iter().map(|e| normalize_adjacency(nodes.len(), e)).collect();
        HeteroGraph {
            nodes,
            num_chars: self.num_chars,
            relations: self.relations.clone(),
            edges,
            normalized,
            enabled: self.enabled.clone(),
        }
    }
}

pub fn build_graph(
    sentence: &Sentence,
    parse: Option<&DepParse>,
    matches: &[SpanMatch],
    config: &GraphConfig,
) -> Result<HeteroGraph> {
    config.validate()?;
    let t = sentence.len();
    let mut nodes: Vec<Node> = sentence
        .chars
        .iter()
        .enumerate()
        .map(|(i, c)| Node {
            kind: NodeKind::Char,
            surface: c.clone(),
            span: Span::new(i, i + 1),
        })
        .collect();
    let mut sorted = matches.to_vec();
    sorted.sort();
    for m in &sorted {
        if m.span.end > t || m.span.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "match {:?} does not fit a sentence of {t} characters",
                m.span
            )));
        }
        nodes.push(Node {
            kind: match m.source {
                MatchSource::Lexicon => NodeKind::Word,
                MatchSource::Ngram => NodeKind::Ngram,
            },
            surface: sentence.span_text(m.span),
            span: m.span,
        });
    }

    let mut syntax_in = Vec::new();
    let mut syntax_out = Vec::new();
    if let (Some(p), true) = (parse, config.use_syntax) {
        if p.alignment.last().map(|s| s.end) != Some(t) {
            return Err(Error::Shape("parse alignment does not cover the sentence".into()));
        }
        let (out, inc) = char_syntax_edges(p);
        syntax_out = out;
        syntax_in = inc;
    }

    let mut begin = Vec::new();
    let mut end = Vec::new();
    let mut seq = Vec::new();
    if config.use_cwn {
        let both = config.cwn_direction == CwnDirection::Both;
        for (k, m) in sorted.iter().enumerate() {
            let node = t + k;
            begin.push((m.span.begin, node));
            end.push((node, m.span.end - 1));
            if both {
                begin.push((node, m.span.begin));
                end.push((m.span.end - 1, node));
            }
        }
        for i in 1..t {
            seq.push((i - 1, i));
            if both {
                seq.push((i, i - 1));
            }
        }
    }

    let relations = config.grouping.relations().to_vec();
    let mut edges: Vec<Vec<(usize, usize)>> = relations
        .iter()
        .map(|r| match r {
            Relation::In => syntax_in.clone(),
            Relation::Out => syntax_out.clone(),
            Relation::Cwn => begin.iter().chain(&end).chain(&seq).copied().collect(),
            Relation::CwnBegin => begin.clone(),
            Relation::CwnEnd => end.clone(),
            Relation::Sequential => seq.clone(),
        })
        .collect();
    for e in &mut edges {
        e.sort_unstable();
        e.dedup();
    }
    let enabled = relations
        .iter()
        .map(|r| if r.is_syntax() { config.use_syntax } else { config.use_cwn })
        .collect();
    let normalized = edges.iter().map(|e| normalize_adjacency(nodes.len(), e)).collect();
    Ok(HeteroGraph {
        nodes,
        num_chars: t,
        relations,
        edges,
        normalized,
        enabled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::NgramEntry;
    use crate::parses::{align, RawParse};

    fn bridge() -> (Sentence, Lexicon, NgramVocab) {
        let s = Sentence::from_text("武汉市长江大桥");
        let mut lex = Lexicon::new();
        for w in ["武汉", "市长", "长江", "大桥"] {
            lex.insert(w, 1).unwrap();
        }
        let mut vocab = NgramVocab::new();
        vocab.insert("长江大桥".into(), NgramEntry { frequency: 5, av: 2 });
        (s, lex, vocab)
    }

    #[test]
    fn matches_bridge_sentence() {
        let (s, lex, vocab) = bridge();
        let m = match_spans(&s, &lex, &vocab, &GraphConfig::default());
        let spans: Vec<(usize, usize, MatchSource)> =
            m.iter().map(|m| (m.span.begin, m.span.end, m.source)).collect();
        assert_eq!(
            spans,
            vec![
                (0, 2, MatchSource::Lexicon),
                (2, 4, MatchSource::Lexicon),
                (3, 5, MatchSource::Lexicon),
                (3, 7, MatchSource::Ngram),
                (5, 7, MatchSource::Lexicon),
            ]
        );
        let none = match_spans(&s, &Lexicon::new(), &NgramVocab::new(), &GraphConfig::default());
        assert!(none.is_empty());
    }

    #[test]
    fn string_in_both_sources_is_one_lexicon_match() {
        let (s, mut lex, vocab) = bridge();
        lex.insert("长江大桥", 1).unwrap();
        let m = match_spans(&s, &lex, &vocab, &GraphConfig::default());
        let hits: Vec<_> = m.iter().filter(|m| m.span == Span::new(3, 7)).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].source, MatchSource::Lexicon);

        let cfg = GraphConfig { use_lexicon: false, ..Default::default() };
        let m = match_spans(&s, &lex, &vocab, &cfg);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].source, MatchSource::Ngram);
    }

    #[test]
    fn overlapping_self_matches() {
        let s = Sentence::from_text("aaa");
        let mut lex = Lexicon::new();
        lex.insert(crate::corpus::LAT, 1).unwrap();
        let s2 = Sentence::from_text("人人人");
        let mut lex2 = Lexicon::new();
        lex2.insert("人人", 1).unwrap();
        let m = match_spans(&s2, &lex2, &NgramVocab::new(), &GraphConfig::default());
        assert_eq!(m.iter().map(|m| m.span).collect::<Vec<_>>(), vec![Span::new(0, 2), Span::new(1, 3)]);
        // a Latin run is a single position, so nothing of length >= 2 exists
        assert!(match_spans(&s, &lex, &NgramVocab::new(), &GraphConfig::default()).is_empty());
    }

    #[test]
    fn bridge_graph_counts() {
        let (s, lex, vocab) = bridge();
        let cfg = GraphConfig::default();
        let m = match_spans(&s, &lex, &vocab, &cfg);
        let g = build_graph(&s, None, &m, &cfg).unwrap();
        assert_eq!(g.num_nodes(), 7 + 5);
        assert_eq!(g.edge_count(Relation::Cwn), 2 * 5 + 6);
        assert_eq!(g.edge_count(Relation::In) + g.edge_count(Relation::Out), 0);

        // 长 at position 3: end of 市长, begin of 长江 and 长江大桥
        let chang = 3;
        let cwn = &g.edges[2];
        let touching: Vec<&str> = cwn
            .iter()
            .filter(|&&(a, b)| (a == chang || b == chang) && a.max(b) >= 7)
            .map(|&(a, b)| g.nodes[a.max(b)].surface.as_str())
            .collect();
        assert_eq!(touching, vec!["长江", "长江大桥", "市长"]);
    }

    #[test]
    fn config_requires_a_subgraph() {
        let (s, _, _) = bridge();
        let cfg = GraphConfig { use_syntax: false, use_cwn: false, ..Default::default() };
        assert!(build_graph(&s, None, &[], &cfg).is_err());
    }

    #[test]
    fn syntax_edges_come_from_parse() {
        let (s, lex, vocab) = bridge();
        let raw = RawParse {
            forms: vec!["武汉".into(), "市".into(), "长江".into(), "大桥".into()],
            heads: vec![2, 4, 4, 0],
        };
        let p = align(&raw, &s).unwrap();
        let cfg = GraphConfig::default();
        let m = match_spans(&s, &lex, &vocab, &cfg);
        let g = build_graph(&s, Some(&p), &m, &cfg).unwrap();
        assert_eq!(g.edge_count(Relation::Out), 8);
        assert_eq!(g.edge_count(Relation::In), 8);
        assert_eq!(g.total_edges(), 16 + 2 * m.len() + 6);

        let no_syn = GraphConfig { use_syntax: false, ..cfg };
        let g2 = build_graph(&s, Some(&p), &m, &no_syn).unwrap();
        assert_eq!(g2.syntax_edges(), 0);
        assert_eq!(g2.cwn_edges(), g.cwn_edges());
        assert_eq!(g2.nodes, g.nodes);

        let no_cwn = GraphConfig { use_cwn: false, ..cfg };
        let g3 = build_graph(&s, Some(&p), &m, &no_cwn).unwrap();
        assert_eq!(g3.cwn_edges(), 0);
        assert_eq!(g3.syntax_edges(), 16);
        assert_eq!(g3.nodes, g.nodes);
    }

    #[test]
    fn split_grouping_partitions_cwn() {
        let (s, lex, vocab) = bridge();
        let cfg = GraphConfig { grouping: RelationGrouping::Split, ..Default::default() };
        let m = match_spans(&s, &lex, &vocab, &cfg);
        let g = build_graph(&s, None, &m, &cfg).unwrap();
        assert_eq!(g.edge_count(Relation::CwnBegin), 5);
        assert_eq!(g.edge_count(Relation::CwnEnd), 5);
        assert_eq!(g.edge_count(Relation::Sequential), 6);

        let both = GraphConfig { cwn_direction: CwnDirection::Both, ..Default::default() };
        let g = build_graph(&s, None, &m, &both).unwrap();
        assert_eq!(g.edge_count(Relation::Cwn), 2 * (2 * 5 + 6));
    }

    #[test]
    fn normalization_examples() {
        let iso = normalize_adjacency(1, &[]);
        assert_eq!(iso.entries, vec![(0, 0, 1.0)]);

        let pair = normalize_adjacency(2, &[(0, 1), (1, 0)]);
        for &(_, _, v) in &pair.entries {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(pair.nnz(), 4);

        let cycle = normalize_adjacency(3, &[(0, 1), (1, 0), (1, 2), (2, 1), (2, 0), (0, 2)]);
        let dense = cycle.to_dense();
        for r in 0..3 {
            assert!((dense.row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_support_matches_adjacency_plus_identity() {
        let (s, lex, vocab) = bridge();
        let cfg = GraphConfig::default();
        let g = build_graph(&s, None, &match_spans(&s, &lex, &vocab, &cfg), &cfg).unwrap();
        for (edges, norm) in g.edges.iter().zip(&g.normalized) {
            let mut expected: BTreeSet<(usize, usize)> = edges.iter().map(|&(a, b)| (b, a)).collect();
            expected.extend((0..g.num_nodes()).map(|i| (i, i)));
            let got: BTreeSet<(usize, usize)> = norm.entries.iter().map(|&(r, c, _)| (r, c)).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn dump_format() {
        let s = Sentence::from_text("长江");
        let mut lex = Lexicon::new();
        lex.insert("长江", 1).unwrap();
        let cfg = GraphConfig::default();
        let g = build_graph(&s, None, &match_spans(&s, &lex, &NgramVocab::new(), &cfg), &cfg).unwrap();
        assert_eq!(
            g.dump(),
            "node\tchar:0\t长\t0\t1\n\
             node\tchar:1\t江\t1\t2\n\
             node\tword:0\t长江\t0\t2\n\
             cwn\tchar:0\tchar:1\n\
             cwn\tchar:0\tword:0\n\
             cwn\tword:0\tchar:1\n"
        );
    }
}
