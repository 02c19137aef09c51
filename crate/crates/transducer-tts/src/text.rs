//! Character-level byte-pair encoding.
//!
//! Whitespace characters are their own base symbols and merges never cross
//! them, so tokens stay within words. Merge order is the training order;
//! retraining on the same corpus reproduces it exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    base: Vec<String>,
    merges: Vec<(String, String)>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl BpeVocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn n_base(&self) -> usize {
        self.base.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Virtual padding id, one past the densely assigned token ids.
    pub fn pad_id(&self) -> u32 {
        self.id_to_token.len() as u32
    }

    /// Character-only vocabulary (each base symbol one token, no merges).
    pub fn char_only(corpus: &[String]) -> Result<Self> {
        let base = collect_base(corpus)?;
        Ok(assemble(base, Vec::new()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Validation(detail) => Error::Format { path: path.to_path_buf(), detail },
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "BPEV1 {} {}", self.base.len(), self.merges.len());
        for sym in &self.base {
            let _ = writeln!(out, "{}", escape(sym));
        }
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{}\t{}", escape(l), escape(r));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Validation("empty vocab file".into()))?;
        let mut parts = header.split_whitespace();
        let magic = parts.next();
        if magic != Some("BPEV1") {
            return Err(Error::Validation(format!("bad vocab header {header:?}")));
        }
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Validation(format!("bad vocab header {header:?}")))
        };
        let n_base = parse(parts.next())?;
        let n_merges = parse(parts.next())?;
        let mut base = Vec::with_capacity(n_base);
        for _ in 0..n_base {
            let line = lines.next().ok_or_else(|| Error::Validation("vocab file truncated".into()))?;
            base.push(unescape(line)?);
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| Error::Validation("vocab file truncated".into()))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("merge line missing tab: {line:?}")))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        Ok(assemble(base, merges))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            other => out.push(other),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => {
                return Err(Error::Validation(format!(
                    "bad escape \\{} in vocab entry {s:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

fn collect_base(corpus: &[String]) -> Result<Vec<String>> {
    if corpus.iter().all(|line| line.is_empty()) {
        return Err(Error::Input("BPE training corpus is empty".into()));
    }
    let set: BTreeSet<char> = corpus.iter().flat_map(|l| l.chars()).collect();
    Ok(set.into_iter().map(String::from).collect())
}

fn assemble(base: Vec<String>, merges: Vec<(String, String)>) -> BpeVocab {
    let mut id_to_token: Vec<String> = base.clone();
    id_to_token.extend(merges.iter().map(|(l, r)| format!("{l}{r}")));
    let token_to_id =
        id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    BpeVocab { base, merges, token_to_id, id_to_token }
}

fn mergeable(sym: &str) -> bool {
    !sym.chars().any(char::is_whitespace)
}

/// Replace every non-overlapping `[left, right]` occurrence left-to-right.
fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair
/// (ties: lexicographically smallest) until the vocabulary budget is spent
/// or no mergeable pair remains.
pub fn bpe_train(corpus: &[String], vocab_size: usize) -> Result<BpeVocab> {
    let base = collect_base(corpus)?;
    if vocab_size < base.len() {
        return Err(Error::Input(format!(
            "vocab_size {vocab_size} below {} distinct characters",
            base.len()
        )));
    }
    let mut lines: Vec<Vec<String>> =
        corpus.iter().map(|l| l.chars().map(String::from).collect()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    while base.len() + merges.len() < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for line in &lines {
            for w in line.windows(2) {
                if mergeable(&w[0]) && mergeable(&w[1]) {
                    *counts.entry((&w[0], &w[1])).or_insert(0) += 1;
                }
            }
        }
        // BTreeMap iterates in pair order, so strict > keeps the smallest pair on ties
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, count) in &counts {
            if best.map_or(true, |(_, c)| *count > c) {
                best = Some((*pair, *count));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for line in &mut lines {
            apply_merge(line, &l, &r);
        }
        merges.push((l, r));
    }
    Ok(assemble(base, merges))
}

/// Tokenize by applying the merge list in training order.
pub fn bpe_encode(vocab: &BpeVocab, text: &str) -> Result<TokenSeq> {
    let mut symbols: Vec<String> = Vec::with_capacity(text.len());
    for c in text.chars() {
        let s = String::from(c);
        if !vocab.token_to_id.contains_key(&s) {
            return Err(Error::UnknownChar { ch: c });
        }
        symbols.push(s);
    }
    for (l, r) in &vocab.merges {
        apply_merge(&mut symbols, l, r);
    }
    let ids = symbols.iter().map(|s| vocab.token_to_id[s]).collect();
    Ok(TokenSeq { ids, text: text.to_string() })
}

pub fn bpe_decode(vocab: &BpeVocab, ids: &[u32]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or_else(|| Error::Index {
            op: "bpe_decode",
            detail: format!("id {id} outside vocabulary of {}", vocab.len()),
        })?;
        out.push_str(token);
    }
    Ok(out)
}
