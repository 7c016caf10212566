//! Corpus ingestion, text normalization, and BMES label conversion.
//!
//! Sentences are stored as sequences of normalized character tokens. A token is
//! either a single codepoint or one of the placeholder symbols [`NUM`], [`LAT`]
//! and [`PUNC`], each of which occupies one position.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub const NUM: &str = "⟨NUM⟩";
pub const LAT: &str = "⟨LAT⟩";
pub const PUNC: &str = "⟨PUNC⟩";

const PLACEHOLDERS: [&str; 3] = [NUM, LAT, PUNC];

/// Maps full-width ASCII variants and the ideographic space onto their
/// half-width forms.
fn fold_width(c: char) -> char {
    match c {
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        '\u{3000}' => ' ',
        _ => c,
    }
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic() || (('\u{00C0}'..='\u{024F}').contains(&c) && c.is_alphabetic())
}

fn in_cjk_punct_block(c: char) -> bool {
    matches!(c,
        '\u{3000}'..='\u{303F}'
        | '\u{FE10}'..='\u{FE1F}'
        | '\u{FE30}'..='\u{FE4F}'
        | '\u{FE50}'..='\u{FE6F}'
        | '\u{FF61}'..='\u{FF65}')
}

pub(crate) fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    match get_general_category(c) {
        ConnectorPunctuation | DashPunctuation | OpenPunctuation | ClosePunctuation
        | InitialPunctuation | FinalPunctuation | OtherPunctuation | MathSymbol
        | CurrencySymbol | ModifierSymbol | OtherSymbol => true,
        _ => in_cjk_punct_block(c) && !c.is_alphanumeric(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Latin,
    Punct,
    Space,
    Other,
}

fn classify(c: char) -> Class {
    let f = fold_width(c);
    if f.is_ascii_digit() {
        Class::Digit
    } else if is_latin_letter(f) {
        Class::Latin
    } else if f.is_whitespace() {
        Class::Space
    } else if is_punctuation(f) {
        Class::Punct
    } else {
        Class::Other
    }
}

/// One normalized token together with the byte range it covers in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits text into normalized tokens. Whitespace is dropped; digit and Latin
/// runs collapse to one placeholder; every punctuation codepoint becomes its
/// own placeholder.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some(&(start, c)) = iter.peek() {
        if let Some(p) = PLACEHOLDERS.iter().find(|p| text[start..].starts_with(**p)) {
            // already normalized
            for _ in 0..p.chars().count() {
                iter.next();
            }
            out.push(Token {
                text: (*p).to_string(),
                start,
                end: start + p.len(),
            });
            continue;
        }
        let class = classify(c);
        iter.next();
        let mut end = start + c.len_utf8();
        match class {
            Class::Digit | Class::Latin => {
                while let Some(&(i, n)) = iter.peek() {
                    if classify(n) != class {
                        break;
                    }
                    end = i + n.len_utf8();
                    iter.next();
                }
                let sym = if class == Class::Digit { NUM } else { LAT };
                out.push(Token {
                    text: sym.to_string(),
                    start,
                    end,
                });
            }
            Class::Punct => out.push(Token {
                text: PUNC.to_string(),
                start,
                end,
            }),
            Class::Space => {}
            Class::Other => out.push(Token {
                text: c.to_string(),
                start,
                end,
            }),
        }
    }
    out
}

/// Normalizes text: placeholder substitution is applied and whitespace is kept
/// verbatim, so `normalize(normalize(x)) == normalize(x)`.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for tok in tokenize(text) {
        out.push_str(&text[cursor..tok.start]);
        out.push_str(&tok.text);
        cursor = tok.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Like [`normalize`], for raw bytes that may not be valid UTF-8.
pub fn normalize_bytes(bytes: &[u8]) -> Result<String> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Encoding {
        position: e.valid_up_to(),
    })?;
    Ok(normalize(text))
}

/// Number of normalized positions a word occupies.
pub fn token_len(word: &str) -> usize {
    tokenize(word).len()
}

/// A normalized sentence with alignment back to the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub chars: Vec<String>,
    pub raw: String,
    /// Byte range in `raw` of each entry of `chars`.
    pub char_offsets: Vec<(usize, usize)>,
}

impl Sentence {
    pub fn from_text(raw: &str) -> Self {
        let toks = tokenize(raw);
        Sentence {
            chars: toks.iter().map(|t| t.text.clone()).collect(),
            char_offsets: toks.iter().map(|t| (t.start, t.end)).collect(),
            raw: raw.to_string(),
        }
    }

    /// Builds a sentence from a word segmentation, returning the gold spans.
    /// Each word is normalized on its own, so runs never merge across words.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<(Self, Vec<Span>)> {
        let mut raw = String::new();
        let mut chars = Vec::new();
        let mut offsets = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            let toks = tokenize(w);
            if toks.is_empty() {
                return Err(Error::InvalidInput(format!("empty word {w:?}")));
            }
            let base = raw.len();
            let begin = chars.len();
            raw.push_str(w);
            for t in toks {
                chars.push(t.text);
                offsets.push((base + t.start, base + t.end));
            }
            spans.push(Span::new(begin, chars.len()));
        }
        Ok((
            Sentence {
                chars,
                raw,
                char_offsets: offsets,
            },
            spans,
        ))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Normalized surface string of a span.
    pub fn span_text(&self, span: Span) -> String {
        self.chars[span.begin..span.end].concat()
    }

    /// Original (pre-normalization) text covered by a span.
    pub fn raw_text(&self, span: Span) -> &str {
        let start = self.char_offsets[span.begin].0;
        let end = self.char_offsets[span.end - 1].1;
        &self.raw[start..end]
    }
}

/// Half-open range of character positions `[begin, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Self {
        debug_assert!(begin < end);
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    B = 0,
    M = 1,
    E = 2,
    S = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::B, Label::M, Label::E, Label::S];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        Label::ALL[i]
    }

    pub fn can_start(self) -> bool {
        matches!(self, Label::B | Label::S)
    }

    pub fn can_end(self) -> bool {
        matches!(self, Label::E | Label::S)
    }

    pub fn can_precede(self, next: Label) -> bool {
        match self {
            Label::B | Label::M => matches!(next, Label::M | Label::E),
            Label::E | Label::S => matches!(next, Label::B | Label::S),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Label::B => 'B',
            Label::M => 'M',
            Label::E => 'E',
            Label::S => 'S',
        };
        write!(f, "{c}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSeq(pub Vec<Label>);

impl LabelSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    /// True when the sequence satisfies the BMES transition closure.
    pub fn is_legal(&self) -> bool {
        let l = &self.0;
        match (l.first(), l.last()) {
            (Some(f), Some(e)) if f.can_start() && e.can_end() => {
                l.windows(2).all(|w| w[0].can_precede(w[1]))
            }
            _ => false,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                'B' => Ok(Label::B),
                'M' => Ok(Label::M),
                'E' => Ok(Label::E),
                'S' => Ok(Label::S),
                other => Err(Error::InvalidInput(format!("unknown label {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelSeq)
    }
}

impl fmt::Display for LabelSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.0 {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Labels for a segmentation given as word lengths (in positions).
pub fn bmes_from_lengths(lengths: &[usize]) -> Result<LabelSeq> {
    let mut out = Vec::with_capacity(lengths.iter().sum());
    for &k in lengths {
        match k {
            0 => return Err(Error::InvalidInput("empty word".into())),
            1 => out.push(Label::S),
            k => {
                out.push(Label::B);
                out.extend(std::iter::repeat_n(Label::M, k - 2));
                out.push(Label::E);
            }
        }
    }
    Ok(LabelSeq(out))
}

pub fn to_bmes<S: AsRef<str>>(words: &[S]) -> Result<LabelSeq> {
    if words.is_empty() {
        return Err(Error::InvalidInput("no words".into()));
    }
    let lengths: Vec<usize> = words.iter().map(|w| token_len(w.as_ref())).collect();
    bmes_from_lengths(&lengths)
}

pub fn spans_to_labels(spans: &[Span]) -> LabelSeq {
    let lengths: Vec<usize> = spans.iter().map(Span::len).collect();
    bmes_from_lengths(&lengths).expect("spans are non-empty")
}

/// Word spans recovered from a label sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub spans: Vec<Span>,
    /// Set when the labels violated BMES legality and were repaired.
    pub repaired: bool,
}

/// Converts labels to spans. Illegal sequences are repaired greedily: a word
/// opens at B or S and closes at E, S or the end of the sentence; a stray M
/// or E outside a word starts a new one.
pub fn spans_from_labels(labels: &[Label]) -> Decoded {
    let mut spans = Vec::new();
    let mut repaired = false;
    let mut open: Option<usize> = None;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Label::B => {
                if let Some(b) = open.take() {
                    spans.push(Span::new(b, i));
                    repaired = true;
                }
                open = Some(i);
            }
            Label::M => {
                if open.is_none() {
                    open = Some(i);
                    repaired = true;
                }
            }
            Label::E => match open.take() {
                Some(b) => spans.push(Span::new(b, i + 1)),
                None => {
                    spans.push(Span::new(i, i + 1));
                    repaired = true;
                }
            },
            Label::S => {
                if let Some(b) = open.take() {
                    spans.push(Span::new(b, i));
                    repaired = true;
                }
                spans.push(Span::new(i, i + 1));
            }
        }
    }
    if let Some(b) = open {
        spans.push(Span::new(b, labels.len()));
        repaired = true;
    }
    Decoded { spans, repaired }
}

pub fn from_bmes(sentence: &Sentence, labels: &LabelSeq) -> Result<Decoded> {
    if sentence.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} characters but {} labels",
            sentence.len(),
            labels.len()
        )));
    }
    Ok(spans_from_labels(labels.labels()))
}

/// Training-set word list with frequencies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, u64>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, count: u64) -> Result<()> {
        if word.is_empty() || count == 0 {
            return Err(Error::InvalidInput(format!(
                "lexicon entry {word:?} with count {count}"
            )));
        }
        *self.entries.entry(word.to_string()).or_default() += count;
        Ok(())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn count(&self, word: &str) -> u64 {
        self.entries.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(w, &c)| (w.as_str(), c))
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Writes one `word<TAB>count` line per entry.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (word, count) in &self.entries {
            writeln!(w, "{word}\t{count}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&ctx, n + 1, "expected word<TAB>count"))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::format(&ctx, n + 1, format!("bad count {count:?}")))?;
            lex.insert(&normalize(word), count)
                .map_err(|e| Error::format(&ctx, n + 1, e.to_string()))?;
        }
        Ok(lex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

/// A sentence with its gold segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub sentence: Sentence,
    pub spans: Vec<Span>,
}

impl Example {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let (sentence, spans) = Sentence::from_words(words)?;
        Ok(Example { sentence, spans })
    }

    pub fn labels(&self) -> LabelSeq {
        spans_to_labels(&self.spans)
    }

    pub fn words(&self) -> Vec<String> {
        self.spans.iter().map(|s| self.sentence.span_text(*s)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Example>,
    pub split: Split,
    /// Blank input lines skipped while loading.
    pub skipped_empty: usize,
}

impl Corpus {
    pub fn new(sentences: Vec<Example>, split: Split) -> Self {
        Corpus {
            sentences,
            split,
            skipped_empty: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.sentences.iter().map(|e| e.spans.len()).sum()
    }

    /// Parses whitespace-segmented lines into a corpus.
    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        split: Split,
        context: &str,
    ) -> Result<Self> {
        let mut corpus = Corpus::new(Vec::new(), split);
        for (n, line) in lines.into_iter().enumerate() {
            let line = line.trim_end_matches(['\r', '\n']);
            let words: Vec<&str> = line.split(' ').filter(|w| !w.is_empty()).collect();
            if words.is_empty() {
                corpus.skipped_empty += 1;
                continue;
            }
            if let Some(w) = words.iter().find(|w| w.chars().any(char::is_whitespace)) {
                return Err(Error::format(
                    context,
                    n + 1,
                    format!("word {w:?} contains embedded whitespace"),
                ));
            }
            let ex = Example::from_words(&words).map_err(|e| Error::format(context, n + 1, e.to_string()))?;
            corpus.sentences.push(ex);
        }
        Ok(corpus)
    }
}

/// Loads a corpus with one sentence per line and words separated by ASCII spaces.
pub fn load_segmented_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(f).split(b'\n').enumerate() {
        let bytes = line.map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| {
            Error::format(
                path.display().to_string(),
                n + 1,
                format!("invalid utf-8 at byte {}", e.utf8_error().valid_up_to()),
            )
        })?;
        lines.push(text);
    }
    let corpus = Corpus::from_lines(lines.iter().map(String::as_str), split, &path.display().to_string())?;
    if corpus.is_empty() {
        warn!("{}: no sentences loaded", path.display());
    }
    if corpus.skipped_empty > 0 {
        log::info!("{}: skipped {} empty lines", path.display(), corpus.skipped_empty);
    }
    Ok(corpus)
}

/// Writes a corpus back as space-separated original-text words.
pub fn write_segmented<W: Write>(mut w: W, examples: &[Example]) -> std::io::Result<()> {
    for ex in examples {
        let words: Vec<&str> = ex.spans.iter().map(|s| ex.sentence.raw_text(*s)).collect();
        writeln!(w, "{}", words.join(" "))?;
    }
    Ok(())
}

/// Randomly splits off a development set of `max(1, round(ratio * n))`
/// sentences. Both halves keep the original sentence order.
pub fn split_train_dev(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "cannot split a corpus of {n} sentences"
        )));
    }
    let dev_n = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut is_dev = vec![false; n];
    for &i in &idx[..dev_n] {
        is_dev[i] = true;
    }
    let mut train = Vec::with_capacity(n - dev_n);
    let mut dev = Vec::with_capacity(dev_n);
    for (ex, d) in corpus.sentences.iter().zip(is_dev) {
        if d {
            dev.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((Corpus::new(train, Split::Train), Corpus::new(dev, Split::Dev)))
}

pub fn build_lexicon(train: &Corpus) -> Result<Lexicon> {
    if train.is_empty() {
        return Err(Error::InvalidInput("cannot build a lexicon from an empty corpus".into()));
    }
    let mut lex = Lexicon::new();
    for ex in &train.sentences {
        for span in &ex.spans {
            lex.insert(&ex.sentence.span_text(*span), 1)?;
        }
    }
    Ok(lex)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OovReport {
    /// (sentence index, span) of every gold word missing from the lexicon.
    pub spans: Vec<(usize, Span)>,
    pub gold_words: usize,
    pub rate: f64,
}

pub fn oov_words(test: &Corpus, lexicon: &Lexicon) -> OovReport {
    let mut spans = Vec::new();
    let mut gold_words = 0;
    for (i, ex) in test.sentences.iter().enumerate() {
        for span in &ex.spans {
            gold_words += 1;
            if !lexicon.contains(&ex.sentence.span_text(*span)) {
                spans.push((i, *span));
            }
        }
    }
    let rate = if gold_words == 0 {
        0.0
    } else {
        spans.len() as f64 / gold_words as f64
    };
    OovReport {
        spans,
        gold_words,
        rate,
    }
}

fn sub_example(ex: &Example, words: std::ops::Range<usize>) -> Example {
    let spans = &ex.spans[words];
    let begin = spans[0].begin;
    let end = spans[spans.len() - 1].end;
    let byte_start = ex.sentence.char_offsets[begin].0;
    let byte_end = ex.sentence.char_offsets[end - 1].1;
    Example {
        sentence: Sentence {
            chars: ex.sentence.chars[begin..end].to_vec(),
            raw: ex.sentence.raw[byte_start..byte_end].to_string(),
            char_offsets: ex.sentence.char_offsets[begin..end]
                .iter()
                .map(|&(s, e)| (s - byte_start, e - byte_start))
                .collect(),
        },
        spans: spans
            .iter()
            .map(|s| Span::new(s.begin - begin, s.end - begin))
            .collect(),
    }
}

/// Splits an example longer than `cap` characters at word boundaries,
/// preferring boundaries right after a punctuation word. A single word longer
/// than `cap` is kept whole.
pub fn split_long(ex: &Example, cap: usize) -> Vec<Example> {
    if ex.sentence.len() <= cap || cap == 0 {
        return vec![ex.clone()];
    }
    let mut out = Vec::new();
    let mut first_word = 0;
    while first_word < ex.spans.len() {
        let start_char = ex.spans[first_word].begin;
        let mut last_fit = None;
        let mut last_punct = None;
        for w in first_word..ex.spans.len() {
            if ex.spans[w].end - start_char > cap {
                break;
            }
            last_fit = Some(w);
            if ex.sentence.chars[ex.spans[w].end - 1] == PUNC {
                last_punct = Some(w);
            }
        }
        let cut = match (last_punct, last_fit) {
            (_, Some(w)) if w + 1 == ex.spans.len() => w,
            (Some(p), _) => p,
            (None, Some(w)) => w,
            (None, None) => first_word,
        };
        out.push(sub_example(ex, first_word..cut + 1));
        first_word = cut + 1;
    }
    out
}
