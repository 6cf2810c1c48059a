//! Rule-based segmentation of raw text into candidate spans.
//!
//! Pipeline per sentence (sentences end at `.`, `!`, `?` followed by
//! whitespace, or at `;`):
//!
//! 1. find the first trigger pattern; the text after it is an enumeration
//!    region split on commas and coordinating conjunctions;
//! 2. the remaining part of the sentence (all of it when there is no trigger)
//!    yields noun-like runs, gerund phrases and `to <verb>` phrases;
//! 3. boundaries are normalized (leading conjunctions, trailing punctuation).
//!
//! Rules are loaded from a plain-text table (see `assets/chunker_rules.txt`).

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::corpus::{char_slice, CharIndex};
use crate::rng::rng_from_seed;

pub const DEFAULT_RULES: &str = include_str!("../assets/chunker_rules.txt");

#[derive(Debug, thiserror::Error)]
pub enum ChunkError {
    #[error("input is empty or whitespace only")]
    EmptyInput,
    #[error("rules line {line}: {msg}")]
    Rules { line: usize, msg: String },
    #[error("cannot read rules file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("n-gram length must be at least 1")]
    BadMaxLen,
    #[error("perturbation fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

/// A candidate span; offsets are characters into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct ChunkerRules {
    triggers: Vec<Regex>,
    function_words: HashSet<String>,
    conjunctions: HashSet<String>,
}

impl ChunkerRules {
    pub fn parse(src: &str) -> Result<Self, ChunkError> {
        let mut section = None;
        let mut triggers = Vec::new();
        let mut function_words = HashSet::new();
        let mut conjunctions = HashSet::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ChunkError::Rules { line: i + 1, msg };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "triggers" | "function_words" | "conjunctions" => Some(name.to_string()),
                    other => return Err(err(format!("unknown section [{other}]"))),
                };
                continue;
            }
            match section.as_deref() {
                Some("triggers") => {
                    let re = RegexBuilder::new(line).case_insensitive(true).build().map_err(|e| err(e.to_string()))?;
                    triggers.push(re);
                }
                Some("function_words") => {
                    function_words.insert(line.to_lowercase());
                }
                Some("conjunctions") => {
                    conjunctions.insert(line.to_lowercase());
                }
                _ => return Err(err("entry outside of a section".into())),
            }
        }
        Ok(Self { triggers, function_words, conjunctions })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ChunkError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|source| ChunkError::Io { path: path.display().to_string(), source })?;
        Self::parse(&src)
    }

    fn is_function(&self, w: &str) -> bool {
        self.function_words.contains(&w.to_lowercase())
    }

    fn is_conjunction(&self, w: &str) -> bool {
        self.conjunctions.contains(&w.to_lowercase())
    }
}

impl Default for ChunkerRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled chunker rules parse")
    }
}

#[derive(Debug, Clone, Copy)]
struct Word {
    start: usize,
    end: usize,
    // punctuation (not just whitespace) separates this word from the previous one
    break_before: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '\''
}

fn words_in(text: &str, lo: usize, hi: usize) -> Vec<Word> {
    let mut out = Vec::new();
    let mut cur: Option<usize> = None;
    let mut saw_punct = false;
    for (b, c) in text[lo..hi].char_indices() {
        let b = b + lo;
        if is_word_char(c) {
            if cur.is_none() {
                cur = Some(b);
            }
        } else {
            if let Some(s) = cur.take() {
                out.push(Word { start: s, end: b, break_before: saw_punct });
                saw_punct = false;
            }
            if !c.is_whitespace() {
                saw_punct = true;
            }
        }
    }
    if let Some(s) = cur {
        out.push(Word { start: s, end: hi, break_before: saw_punct });
    }
    out
}

fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | ')' | ']' | '-')
}

fn is_leading_punct(c: char) -> bool {
    matches!(c, ',' | ';' | ':' | '"' | '\'' | '(' | '[' | '-')
}

fn is_strong(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';')
}

/// Byte ranges of sentences, strong punctuation excluded.
fn sentences(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut it = text.char_indices().peekable();
    while let Some((b, c)) = it.next() {
        let ends = match c {
            ';' => true,
            '.' | '!' | '?' => it.peek().is_none_or(|&(_, n)| n.is_whitespace()),
            _ => false,
        };
        if ends {
            out.push((start, b));
            start = b + c.len_utf8();
        }
    }
    out.push((start, text.len()));
    out
}

/// Segments raw text into candidate spans.
#[derive(Debug, Clone, Default)]
pub struct Chunker {
    rules: ChunkerRules,
}

impl Chunker {
    pub fn new(rules: ChunkerRules) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &ChunkerRules {
        &self.rules
    }

    /// Trim whitespace, leading conjunctions and punctuation around `[lo, hi)`.
    fn normalize(&self, text: &str, mut lo: usize, mut hi: usize) -> Option<(usize, usize)> {
        loop {
            let before = (lo, hi);
            let s = &text[lo..hi];
            let t = s.trim_start_matches(|c: char| c.is_whitespace() || is_leading_punct(c));
            lo += s.len() - t.len();
            let s = &text[lo..hi];
            let t = s.trim_end_matches(|c: char| c.is_whitespace() || is_trailing_punct(c));
            hi = lo + t.len();
            if let Some(first) = words_in(text, lo, hi).first() {
                if first.start == lo && self.rules.is_conjunction(&text[first.start..first.end]) {
                    lo = first.end;
                }
            }
            if (lo, hi) == before || lo >= hi {
                break;
            }
        }
        (lo < hi).then_some((lo, hi))
    }

    fn enumeration(&self, text: &str, lo: usize, hi: usize, out: &mut Vec<(usize, usize)>) {
        let mut cuts = vec![lo];
        let mut ends = Vec::new();
        for (b, c) in text[lo..hi].char_indices() {
            if c == ',' || c == ';' {
                ends.push(lo + b);
                cuts.push(lo + b + 1);
            }
        }
        for w in words_in(text, lo, hi) {
            if self.rules.is_conjunction(&text[w.start..w.end]) {
                ends.push(w.start);
                cuts.push(w.end);
            }
        }
        ends.push(hi);
        cuts.sort_unstable();
        ends.sort_unstable();
        for (&a, &b) in cuts.iter().zip(&ends) {
            if a < b {
                if let Some(r) = self.normalize(text, a, b) {
                    out.push(r);
                }
            }
        }
    }

    fn phrases(&self, text: &str, lo: usize, hi: usize, out: &mut Vec<(usize, usize)>) {
        let words = words_in(text, lo, hi);
        let func: Vec<bool> = words.iter().map(|w| self.rules.is_function(&text[w.start..w.end])).collect();

        // noun-like runs: maximal runs of content words not interrupted by punctuation
        let mut i = 0;
        while i < words.len() {
            if func[i] {
                i += 1;
                continue;
            }
            let mut j = i;
            while j + 1 < words.len() && !func[j + 1] && !words[j + 1].break_before {
                j += 1;
            }
            out.push((words[i].start, words[j].end));
            i = j + 1;
        }

        for (i, w) in words.iter().enumerate() {
            let lw = text[w.start..w.end].to_lowercase();
            // gerund plus up to three following modifiers, ending on a content word
            if lw.len() >= 5 && lw.ends_with("ing") && !func[i] {
                let mut last = i;
                let mut j = i + 1;
                while j < words.len() && j <= i + 3 && !words[j].break_before {
                    if self.rules.is_conjunction(&text[words[j].start..words[j].end]) {
                        break;
                    }
                    if !func[j] {
                        last = j;
                    }
                    j += 1;
                }
                out.push((w.start, words[last].end));
            }
            // infinitive `to <verb>` followed by its content-word run
            if lw == "to" && i + 1 < words.len() && !func[i + 1] && !words[i + 1].break_before {
                let mut j = i + 1;
                while j + 1 < words.len() && !func[j + 1] && !words[j + 1].break_before {
                    j += 1;
                }
                out.push((w.start, words[j].end));
            }
        }
    }

    /// Segment `text` into ordered, deduplicated chunks.
    pub fn segment(&self, text: &str) -> Result<Vec<Chunk>, ChunkError> {
        if text.trim().is_empty() {
            return Err(ChunkError::EmptyInput);
        }
        let mut ranges = Vec::new();
        for (s, e) in sentences(text) {
            if s >= e {
                continue;
            }
            let trigger = self.rules.triggers.iter().filter_map(|re| re.find(&text[s..e])).min_by_key(|m| m.start());
            match trigger {
                Some(m) => {
                    self.enumeration(text, s + m.end(), e, &mut ranges);
                    self.phrases(text, s, s + m.start(), &mut ranges);
                }
                None => self.phrases(text, s, e, &mut ranges),
            }
        }
        let idx = CharIndex::new(text);
        let set: BTreeSet<(usize, usize)> = ranges
            .into_iter()
            .filter_map(|(a, b)| self.normalize(text, a, b))
            .map(|(a, b)| (idx.char_of(a), idx.char_of(b)))
            .collect();
        Ok(set.into_iter().map(|(start, end)| make_chunk(text, start, end)).collect())
    }
}

fn make_chunk(text: &str, start: usize, end: usize) -> Chunk {
    Chunk { start, end, text: char_slice(text, start, end).to_string() }
}

/// Segment with the bundled default rules.
pub fn segment(text: &str) -> Result<Vec<Chunk>, ChunkError> {
    Chunker::default().segment(text)
}

/// Whitespace tokens with surrounding punctuation trimmed, as char ranges.
fn ws_tokens(text: &str) -> Vec<(usize, usize)> {
    let idx = CharIndex::new(text);
    let mut out = Vec::new();
    let mut pos = 0;
    for tok in text.split_whitespace() {
        let b = pos + text[pos..].find(tok).expect("token present");
        pos = b + tok.len();
        let lead = tok.len() - tok.trim_start_matches(|c: char| c.is_ascii_punctuation()).len();
        let inner = tok.trim_matches(|c: char| c.is_ascii_punctuation());
        if inner.is_empty() {
            continue;
        }
        out.push((idx.char_of(b + lead), idx.char_of(b + lead + inner.len())));
    }
    out
}

/// All contiguous token windows of length `1..=max_len`.
pub fn segment_ngrams(text: &str, max_len: usize) -> Result<Vec<Chunk>, ChunkError> {
    if max_len == 0 {
        return Err(ChunkError::BadMaxLen);
    }
    if text.trim().is_empty() {
        return Err(ChunkError::EmptyInput);
    }
    let toks = ws_tokens(text);
    let mut out = Vec::new();
    for i in 0..toks.len() {
        for len in 1..=max_len {
            if i + len > toks.len() {
                break;
            }
            out.push(make_chunk(text, toks[i].0, toks[i + len - 1].1));
        }
    }
    out.sort();
    Ok(out)
}

fn crosses_strong_boundary(s: &str) -> bool {
    let mut it = s.chars().peekable();
    while let Some(c) = it.next() {
        if c == ';' || (is_strong(c) && it.peek().is_some_and(|n| n.is_whitespace())) {
            return true;
        }
    }
    false
}

/// Randomly re-segment `floor(p * n)` chunks, each merged with an adjacent
/// chunk or split at an internal whitespace. Chunks must come from `text`.
pub fn perturb_boundaries(text: &str, chunks: &[Chunk], p: f64, seed: u64) -> Result<Vec<Chunk>, ChunkError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ChunkError::BadFraction(p));
    }
    let mut work: Vec<Option<Chunk>> = chunks.iter().cloned().map(Some).collect();
    work.sort();
    let n = work.len();
    let k = (p * n as f64).floor() as usize;
    if k == 0 {
        return Ok(work.into_iter().flatten().collect());
    }
    let mut rng = rng_from_seed(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    // a chunk already produced by a split or merge is not merged again, which keeps the output non-overlapping
    let mut touched = vec![false; n];

    for i in picked {
        let Some(c) = work[i].clone() else { continue };
        if touched[i] {
            continue;
        }
        let split_points: Vec<usize> = c
            .text
            .chars()
            .enumerate()
            .filter(|&(j, ch)| ch.is_whitespace() && j > 0)
            .map(|(j, _)| c.start + j)
            .collect();
        let merge_with = [i + 1, i.wrapping_sub(1)].into_iter().find(|&j| {
            j < n
                && !touched[j]
                && work[j].as_ref().is_some_and(|o| {
                    let (a, b) = (c.start.min(o.start), c.end.max(o.end));
                    !crosses_strong_boundary(char_slice(text, a, b))
                })
        });
        let do_split = !split_points.is_empty() && (merge_with.is_none() || rng.random_bool(0.5));
        if do_split {
            let at = split_points[rng.random_range(0..split_points.len())];
            let left = char_slice(text, c.start, at).trim_end();
            let right_full = char_slice(text, at, c.end);
            let right = right_full.trim_start();
            let l_end = c.start + left.chars().count();
            let r_start = c.end - right.chars().count();
            work[i] = Some(make_chunk(text, c.start, l_end));
            touched[i] = true;
            // the right half takes the slot of a removed chunk when placed back into order
            work.push(Some(make_chunk(text, r_start, c.end)));
        } else if let Some(j) = merge_with {
            let o = work[j].take().expect("checked present");
            touched[i] = true;
            touched[j] = true;
            work[i] = Some(make_chunk(text, c.start.min(o.start), c.end.max(o.end)));
        }
    }
    let mut out: Vec<Chunk> = work.into_iter().flatten().collect();
    out.sort();
    out.dedup_by(|a, b| a.start == b.start && a.end == b.end);
    Ok(out)
}
