//! Annotated documents, canonical JSONL persistence and corpus splitting.
//!
//! Span offsets count Unicode scalar values (not bytes) and are end-exclusive.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use synth::{synth_corpus, DomainVocab, SynthSpec};

use crate::rng::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: malformed record: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("document {id:?}: span [{start}, {end}) out of range for text of {len} characters")]
    OffsetOutOfRange { id: String, start: usize, end: usize, len: usize },
    #[error("document {id:?}: spans [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingSpans { id: String, a_start: usize, a_end: usize, b_start: usize, b_end: usize },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document with empty id")]
    EmptyId,
    #[error("document {id:?}: domain {domain:?} not in the declared domain set")]
    UnknownDomain { id: String, domain: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
}

/// A character-offset span inside a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    pub start: usize,
    pub end: usize,
    pub private: bool,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub domain: Option<String>,
    pub text: String,
    pub spans: Vec<AnnotatedSpan>,
}

impl Document {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Text covered by `[start, end)` in character offsets.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        char_slice(&self.text, start, end)
    }

    pub fn span_text(&self, span: &AnnotatedSpan) -> &str {
        self.slice(span.start, span.end)
    }

    /// Private spans ordered by start offset.
    pub fn private_spans(&self) -> Vec<&AnnotatedSpan> {
        let mut v: Vec<_> = self.spans.iter().filter(|s| s.private).collect();
        v.sort_by_key(|s| s.start);
        v
    }

    pub fn private_texts(&self) -> Vec<&str> {
        self.private_spans().into_iter().map(|s| self.span_text(s)).collect()
    }

    /// Check the offset and overlap invariants of this document.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        let len = self.char_len();
        let mut sorted: Vec<&AnnotatedSpan> = self.spans.iter().collect();
        sorted.sort_by_key(|s| (s.start, s.end));
        for s in &sorted {
            if s.start >= s.end || s.end > len {
                return Err(CorpusError::OffsetOutOfRange {
                    id: self.id.clone(),
                    start: s.start,
                    end: s.end,
                    len,
                });
            }
        }
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(CorpusError::OverlappingSpans {
                    id: self.id.clone(),
                    a_start: w[0].start,
                    a_end: w[0].end,
                    b_start: w[1].start,
                    b_end: w[1].end,
                });
            }
        }
        Ok(())
    }
}

/// Byte offset of the `char_idx`-th character (or `text.len()` past the end).
pub fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices().nth(char_idx).map_or(text.len(), |(b, _)| b)
}

/// Substring by character offsets `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let b0 = char_to_byte(text, start);
    let b1 = char_to_byte(text, end);
    &text[b0..b1]
}

/// Maps byte offsets to character offsets for a fixed text.
#[derive(Debug, Clone)]
pub struct CharIndex {
    // byte_to_char[b] is defined at every char boundary and at text.len()
    byte_to_char: Vec<usize>,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        let mut byte_to_char = vec![usize::MAX; text.len() + 1];
        let mut n = 0;
        for (b, _) in text.char_indices() {
            byte_to_char[b] = n;
            n += 1;
        }
        byte_to_char[text.len()] = n;
        Self { byte_to_char }
    }

    pub fn char_of(&self, byte: usize) -> usize {
        let c = self.byte_to_char[byte];
        debug_assert!(c != usize::MAX, "byte offset {byte} is not a char boundary");
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    /// Build a corpus, checking every document and id uniqueness.
    pub fn new(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let c = Self { docs };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// The declared domain set: every domain label present in the corpus.
    pub fn domains(&self) -> BTreeSet<String> {
        self.docs.iter().filter_map(|d| d.domain.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for d in &self.docs {
            d.validate()?;
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(())
    }

    /// Validate against an externally declared domain set.
    pub fn validate_domains(&self, declared: &BTreeSet<String>) -> Result<(), CorpusError> {
        for d in &self.docs {
            if let Some(dom) = &d.domain {
                if !declared.contains(dom) {
                    return Err(CorpusError::UnknownDomain { id: d.id.clone(), domain: dom.clone() });
                }
            }
        }
        Ok(())
    }

    /// Distinct private span texts per domain, sorted.
    pub fn private_texts_by_domain(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for d in &self.docs {
            let Some(dom) = &d.domain else { continue };
            for s in d.spans.iter().filter(|s| s.private) {
                out.entry(dom.clone()).or_default().insert(d.span_text(s).to_string());
            }
        }
        out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
    }

    /// Distinct non-private span texts, sorted.
    pub fn nonprivate_texts(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .docs
            .iter()
            .flat_map(|d| d.spans.iter().filter(|s| !s.private).map(move |s| d.span_text(s).to_string()))
            .collect();
        set.into_iter().collect()
    }
}

// Field order is alphabetical so the derived serializer emits sorted keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRecord {
    end: usize,
    label: Option<String>,
    private: bool,
    start: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    domain: Option<String>,
    id: String,
    spans: Vec<SpanRecord>,
    text: String,
}

impl From<&Document> for DocRecord {
    fn from(d: &Document) -> Self {
        DocRecord {
            domain: d.domain.clone(),
            id: d.id.clone(),
            spans: d
                .spans
                .iter()
                .map(|s| SpanRecord { end: s.end, label: s.label.clone(), private: s.private, start: s.start })
                .collect(),
            text: d.text.clone(),
        }
    }
}

impl From<DocRecord> for Document {
    fn from(r: DocRecord) -> Self {
        Document {
            id: r.id,
            domain: r.domain,
            text: r.text,
            spans: r
                .spans
                .into_iter()
                .map(|s| AnnotatedSpan { start: s.start, end: s.end, private: s.private, label: s.label })
                .collect(),
        }
    }
}

/// Serialize one document as a canonical JSON line (no trailing newline).
pub fn document_to_line(doc: &Document) -> String {
    serde_json::to_string(&DocRecord::from(doc)).expect("document record serializes")
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus, CorpusError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: "<reader>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Malformed { line: i + 1, source })?;
        docs.push(Document::from(rec));
    }
    Corpus::new(docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    parse_corpus(BufReader::new(f))
}

pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> io::Result<()> {
    for d in &corpus.docs {
        w.write_all(document_to_line(d).as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).map_err(io_err)?;
    fs::write(path, buf).map_err(io_err)
}

/// Stratified, seeded train/test split. Documents without a domain form their own stratum.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut strata: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, d) in corpus.docs.iter().enumerate() {
        strata.entry(d.domain.as_deref()).or_default().push(i);
    }
    let mut train_idx = BTreeSet::new();
    for (dom, mut idx) in strata {
        let mut rng = rng_for(seed, &format!("split/{}", dom.unwrap_or("")));
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train_idx.extend(idx.into_iter().take(n_train));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, d) in corpus.docs.iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(d.clone());
        } else {
            test.push(d.clone());
        }
    }
    Ok((Corpus { docs: train }, Corpus { docs: test }))
}
