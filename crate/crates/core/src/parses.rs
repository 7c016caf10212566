//! Word-level dependency parses projected onto character positions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;

use crate::corpus::{tokenize, Sentence, Span};
use crate::error::{Error, Result};

/// A parse read from a tab-separated 10-column file, before alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawParse {
    pub forms: Vec<String>,
    /// 1-based head index per token, 0 for the root.
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepParse {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
    /// Character span of each token in the normalized sentence.
    pub alignment: Vec<Span>,
    /// More than one token attaches to the root.
    pub multi_root: bool,
}

/// Reads sentence blocks. Only the ID, FORM and HEAD columns are used;
/// multiword ranges (`1-2`) and empty nodes (`1.1`) are skipped.
pub fn read_conll(text: &str, context: &str) -> Result<Vec<RawParse>> {
    let mut out = Vec::new();
    let mut cur = RawParse {
        forms: Vec::new(),
        heads: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.forms.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    RawParse {
                        forms: Vec::new(),
                        heads: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err(Error::format(context, n + 1, format!("expected 10 columns, got {}", cols.len())));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| Error::format(context, n + 1, format!("bad ID {:?}", cols[0])))?;
        if id != cur.forms.len() + 1 {
            return Err(Error::format(context, n + 1, format!("ID {id} out of sequence")));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| Error::format(context, n + 1, format!("bad HEAD {:?}", cols[6])))?;
        cur.forms.push(cols[1].to_string());
        cur.heads.push(head);
    }
    if !cur.forms.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Aligns a parse to a sentence by matching normalized token forms left to
/// right. Returns `None` when the forms do not spell the sentence exactly or a
/// head index is out of range.
pub fn align(raw: &RawParse, sentence: &Sentence) -> Option<DepParse> {
    let n = raw.forms.len();
    if raw.heads.iter().any(|&h| h > n) {
        return None;
    }
    let mut alignment = Vec::with_capacity(n);
    let mut pos = 0;
    for form in &raw.forms {
        let toks = tokenize(form);
        if toks.is_empty() || pos + toks.len() > sentence.len() {
            return None;
        }
        for (i, t) in toks.iter().enumerate() {
            if sentence.chars[pos + i] != t.text {
                return None;
            }
        }
        alignment.push(Span::new(pos, pos + toks.len()));
        pos += toks.len();
    }
    if pos != sentence.len() {
        return None;
    }
    Some(DepParse {
        tokens: raw.forms.clone(),
        heads: raw.heads.clone(),
        alignment,
        multi_root: raw.heads.iter().filter(|&&h| h == 0).count() > 1,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ParseSet {
    /// Aligned parses keyed by sentence ordinal.
    pub parses: BTreeMap<usize, DepParse>,
    pub dropped: usize,
}

/// Pairs the i-th block of the file with the i-th sentence.
pub fn align_all(raw: &[RawParse], sentences: &[&Sentence]) -> ParseSet {
    let mut set = ParseSet::default();
    for (i, r) in raw.iter().enumerate() {
        match sentences.get(i).and_then(|s| align(r, s)) {
            Some(p) => {
                if p.multi_root {
                    warn!("parse {i}: multiple root attachments");
                }
                set.parses.insert(i, p);
            }
            None => {
                warn!("parse {i}: does not align with its sentence, dropped");
                set.dropped += 1;
            }
        }
    }
    set
}

pub fn load_parses(path: &Path, sentences: &[&Sentence]) -> Result<ParseSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw = read_conll(&text, &path.display().to_string())?;
    Ok(align_all(&raw, sentences))
}

/// Character-level syntax edges. `outgoing` holds (head char, dependent char)
/// pairs for every dependency; `incoming` holds the same pairs reversed.
pub fn char_syntax_edges(parse: &DepParse) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut outgoing = BTreeSet::new();
    for (dep, &head) in parse.heads.iter().enumerate() {
        if head == 0 || head - 1 == dep {
            continue;
        }
        let h = parse.alignment[head - 1];
        let d = parse.alignment[dep];
        for hc in h.begin..h.end {
            for dc in d.begin..d.end {
                outgoing.insert((hc, dc));
            }
        }
    }
    let mut incoming: Vec<(usize, usize)> = outgoing.iter().map(|&(a, b)| (b, a)).collect();
    incoming.sort_unstable();
    (outgoing.into_iter().collect(), incoming)
}
