#![allow(dead_code)]

use hgseg::corpus::{Lexicon, Sentence, Span};
use hgseg::encoder::CharVocab;
use hgseg::graph::GraphConfig;
use hgseg::hgnn::Activation;
use hgseg::model::{Instance, Model, ModelConfig};
use hgseg::ngram::{NgramEntry, NgramVocab};
use hgseg::parses::{align, RawParse};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const ALPHABET: [&str; 8] = ["甲", "乙", "丙", "丁", "戊", "己", "庚", "辛"];

/// Random partition of `0..t` into spans.
pub fn random_spans(rng: &mut ChaCha8Rng, t: usize, max_word: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut b = 0;
    while b < t {
        let len = rng.random_range(1..=max_word.min(t - b));
        spans.push(Span::new(b, b + len));
        b += len;
    }
    spans
}

/// Random dependency tree over `n` tokens, 1-based heads with one root.
pub fn random_heads(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let root = rng.random_range(0..n);
    let mut order: Vec<usize> = (0..n).filter(|&i| i != root).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut heads = vec![0; n];
    let mut placed = vec![root];
    for i in order {
        heads[i] = placed[rng.random_range(0..placed.len())] + 1;
        placed.push(i);
    }
    heads
}

/// A small random instance in smooth mode: graph of at most `max_nodes`
/// nodes with every relation family populated where possible.
pub fn random_model_and_instance(seed: u64, max_nodes: usize, graph: GraphConfig) -> (Model, Instance) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(3..=5.min(max_nodes - 1));
    let chars: Vec<&str> = (0..t).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
    let text: String = chars.concat();
    let sentence = Sentence::from_text(&text);
    let gold = random_spans(&mut rng, t, 3);

    let mut lexicon = Lexicon::new();
    let mut ngrams = NgramVocab::new();
    let budget = max_nodes - t;
    let mut used = 0;
    for _ in 0..budget {
        let b = rng.random_range(0..t - 1);
        let e = rng.random_range(b + 2..=t);
        let s = sentence.span_text(Span::new(b, e));
        if lexicon.contains(&s) || ngrams.contains(&s) {
            continue;
        }
        // count occurrences so the budget holds for repeated substrings
        let occ = (0..=t - (e - b)).filter(|&i| sentence.span_text(Span::new(i, i + e - b)) == s).count();
        if used + occ > budget {
            continue;
        }
        used += occ;
        if rng.random_bool(0.5) {
            lexicon.insert(&s, 1).unwrap();
        } else {
            ngrams.insert(s, NgramEntry { frequency: 5, av: 2 });
        }
    }
    // one unmatched entry of each kind so untouched rows exist
    lexicon.insert("壬癸", 1).unwrap();
    ngrams.insert("癸壬".to_string(), NgramEntry { frequency: 5, av: 2 });

    let words: Vec<String> = gold.iter().map(|s| sentence.span_text(*s)).collect();
    let raw = RawParse { heads: random_heads(&mut rng, words.len()), forms: words };
    let parse = align(&raw, &sentence).expect("forms come from the sentence");

    let vocab = CharVocab::build([&sentence]);
    let cfg = ModelConfig {
        char_dim: 3,
        hidden_dim: 4,
        layers: 2,
        activation: Activation::Tanh,
        ext_dim: Some(2),
        graph,
        init_scale: 0.5,
    };
    let mut model = Model::init(cfg, vocab, lexicon, ngrams, seed).unwrap();
    // biases and transitions start at zero; perturb them so their gradients are generic
    model.params.visit_mut(|name, t| {
        if name.ends_with("gate_b") || name.starts_with("crf.b_s") || name == "crf.trans" {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    });
    let ext = Array2::from_shape_fn((t, 2), |_| rng.random_range(-1.0..1.0));
    let inst = model.prepare(&sentence, Some(&parse), Some(ext.view()), Some(&gold)).unwrap();
    assert!(inst.graph.num_nodes() <= max_nodes);
    (model, inst)
}

pub const SYLLABLES: [&str; 24] = [
    "山", "水", "风", "云", "花", "鸟", "日", "月", "星", "雨", "雪", "江", "河", "湖", "海", "林", "石", "火",
    "金", "木", "天", "地", "人", "心",
];

/// Sentences drawn from a fixed random word list over a small character set.
pub fn toy_corpus_lines(seed: u64, sentences: usize) -> Vec<String> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..30)
        .map(|_| {
            let len = rng.random_range(1..=3);
            (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
        })
        .collect();
    (0..sentences)
        .map(|_| {
            let n = rng.random_range(4..=8);
            (0..n).map(|_| words[rng.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

pub struct OovCorpus {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub oov_words: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct OovParams {
    pub train: usize,
    pub test: usize,
    /// Characters that occur as single-character words.
    pub singles: usize,
    /// Two-character training words made of those characters.
    pub compounds: usize,
    /// Two-character test-only words made of those characters.
    pub oov: usize,
    /// Per-word chance of a single character, and again of a compound.
    pub single_rate: f64,
    /// Per-sentence chance of a run of separate single characters.
    pub run_rate: f64,
}

impl Default for OovParams {
    fn default() -> Self {
        OovParams {
            train: 300,
            test: 100,
            singles: 30,
            compounds: 400,
            oov: 20,
            single_rate: 0.3,
            run_rate: 0.5,
        }
    }
}

/// Synthetic split in which held-out OOV words are pairs of characters that
/// never occur next to each other in training. In training the same
/// characters appear alone, in runs of separate singles, and inside many
/// rarely repeated compounds, so only a candidate-word node over a pair
/// tells a word from two singles. Known multi-character words use their own
/// characters.
pub fn oov_corpus(seed: u64, p: OovParams) -> OovCorpus {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0x4E2Du32;
    let mut fresh = || {
        let c = char::from_u32(next).unwrap();
        next += 1;
        c
    };
    let singles: Vec<String> = (0..p.singles).map(|_| fresh().to_string()).collect();
    let known: Vec<String> = (0..40)
        .map(|_| {
            let len = rng.random_range(2..=3);
            (0..len).map(|_| fresh()).collect()
        })
        .collect();
    let mut pairs: Vec<String> = Vec::new();
    for a in &singles {
        for b in &singles {
            if a != b {
                pairs.push(format!("{a}{b}"));
            }
        }
    }
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    assert!(p.compounds + p.oov <= pairs.len());
    let oov: Vec<String> = pairs[..p.oov].to_vec();
    let compounds: Vec<String> = pairs[p.oov..p.oov + p.compounds].to_vec();
    let sentence = |rng: &mut ChaCha8Rng, with_oov: bool| -> String {
        loop {
            let n = rng.random_range(4..=7);
            let mut words: Vec<String> = (0..n)
                .map(|_| {
                    let r: f64 = rng.random();
                    if r < p.single_rate {
                        singles[rng.random_range(0..singles.len())].clone()
                    } else if r < 2.0 * p.single_rate {
                        compounds[rng.random_range(0..compounds.len())].clone()
                    } else {
                        known[rng.random_range(0..known.len())].clone()
                    }
                })
                .collect();
            if rng.random_bool(p.run_rate) {
                let at = rng.random_range(0..=words.len());
                for _ in 0..rng.random_range(2..=3) {
                    words.insert(at, singles[rng.random_range(0..singles.len())].clone());
                }
            }
            if with_oov {
                for _ in 0..rng.random_range(1..=2) {
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, oov[rng.random_range(0..oov.len())].clone());
                }
            }
            // every compound or OOV string in the text must be a gold word
            let text: String = words.concat();
            let hits: usize = oov.iter().chain(&compounds).map(|o| text.matches(o.as_str()).count()).sum();
            let expect = words.iter().filter(|w| oov.contains(w) || compounds.contains(w)).count();
            if hits == expect {
                return words.join(" ");
            }
        }
    };
    let train = (0..p.train).map(|_| sentence(&mut rng, false)).collect();
    let test = (0..p.test).map(|_| sentence(&mut rng, true)).collect();
    OovCorpus { train, test, oov_words: oov }
}
