//! Mask-free privacy span localization.
//!
//! Chunks are scored by their maximum cosine to each domain's prototypes, the
//! query domain is the one with the highest mean score, and private chunks are
//! those whose score exceeds an Otsu threshold on that domain's scores.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use crate::chunker::{Chunk, ChunkError, Chunker};
use crate::encoder::{encode_all, EncoderError, EncoderParams, Embedding};
use crate::prototypes::{PrototypeMap, PrototypeSet};
use crate::scalar::Scalar;

/// Threshold used when a text yields a single chunk and Otsu is undefined.
pub const SINGLE_CHUNK_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum LocalizeError {
    #[error("prototype set for {0:?} is empty")]
    EmptyPrototypes(String),
    #[error("no prototype domains available")]
    NoDomains,
    #[error("no chunks to score")]
    NoChunks,
    #[error("Otsu threshold needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("affinity value is not finite")]
    NonFinite,
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Maximum cosine between `z` and any prototype of the set.
pub fn affinity<T: Scalar>(z: &Embedding<T>, protos: &PrototypeSet<T>) -> Result<T, LocalizeError> {
    protos
        .prototypes
        .iter()
        .map(|p| z.cos(p))
        .reduce(T::max)
        .ok_or_else(|| LocalizeError::EmptyPrototypes(protos.domain.clone()))
}

/// Per-domain affinities of every embedding.
pub fn affinity_table<T: Scalar>(
    embeddings: &[Embedding<T>],
    all: &PrototypeMap<T>,
) -> Result<BTreeMap<String, Vec<T>>, LocalizeError> {
    if all.is_empty() {
        return Err(LocalizeError::NoDomains);
    }
    all.iter()
        .map(|(dom, set)| {
            let row = embeddings.iter().map(|z| affinity(z, set)).collect::<Result<Vec<_>, _>>()?;
            Ok((dom.clone(), row))
        })
        .collect()
}

/// Domain with the highest mean affinity; earlier (smaller) names win ties.
pub fn argmax_mean<T: Scalar>(table: &BTreeMap<String, Vec<T>>) -> Result<String, LocalizeError> {
    let mut best: Option<(&String, T)> = None;
    for (dom, row) in table {
        let m = crate::scalar::mean(row).ok_or(LocalizeError::NoChunks)?;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((dom, m));
        }
    }
    best.map(|(d, _)| d.clone()).ok_or(LocalizeError::NoDomains)
}

pub fn infer_domain<T: Scalar>(embeddings: &[Embedding<T>], all: &PrototypeMap<T>) -> Result<String, LocalizeError> {
    if embeddings.is_empty() {
        return Err(LocalizeError::NoChunks);
    }
    argmax_mean(&affinity_table(embeddings, all)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuSplit<T> {
    /// Number of values on the low side, in `[1, M-1]`.
    pub split: usize,
    pub threshold: T,
    /// Between-cluster variance for every split `t = 1..M-1`.
    pub variances: Vec<T>,
}

/// Relative gap below which two split variances are treated as equal.
pub const OTSU_TIE_TOLERANCE: f64 = 1e-9;

/// Between-cluster variance of splitting sorted values after the first `t`.
pub fn between_variance<T: Scalar>(sorted: &[T], t: usize) -> T {
    let m = T::of_usize(sorted.len());
    let mu = sorted.iter().sum::<T>() / m;
    let (lo, hi) = sorted.split_at(t);
    let mu_l = lo.iter().sum::<T>() / T::of_usize(lo.len());
    let mu_r = hi.iter().sum::<T>() / T::of_usize(hi.len());
    T::of_usize(lo.len()) / m * (mu_l - mu).powi(2) + T::of_usize(hi.len()) / m * (mu_r - mu).powi(2)
}

/// Otsu split of 1-D scores; the smallest split wins ties and the threshold is
/// the midpoint of the two values adjacent to the split.
pub fn otsu_threshold<T: Scalar>(values: &[T]) -> Result<OtsuSplit<T>, LocalizeError> {
    if values.len() < 2 {
        return Err(LocalizeError::TooFewValues(values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LocalizeError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = sorted.len();
    if sorted[0] == sorted[m - 1] {
        return Ok(OtsuSplit { split: 1, threshold: sorted[0], variances: vec![T::zero(); m - 1] });
    }
    let variances: Vec<T> = (1..m).map(|t| between_variance(&sorted, t)).collect();
    // splits within rounding noise of the best count as ties, won by the smallest t
    let top = variances.iter().copied().fold(T::neg_infinity(), T::max);
    let tol = top * T::of(OTSU_TIE_TOLERANCE);
    let best = 1 + variances.iter().position(|&v| v >= top - tol).expect("nonempty");
    let threshold = (sorted[best - 1] + sorted[best]) / T::of(2.0);
    Ok(OtsuSplit { split: best, threshold, variances })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult<T> {
    pub chunks: Vec<Chunk>,
    /// domain → affinity of each chunk
    pub affinities: BTreeMap<String, Vec<T>>,
    pub inferred_domain: String,
    pub threshold: T,
    /// Indices of chunks judged private, ascending.
    pub detected: Vec<usize>,
    /// True when the single-chunk fallback threshold was used.
    pub fallback: bool,
}

impl<T: Scalar> DetectionResult<T> {
    pub fn detected_chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.detected.iter().map(|&i| &self.chunks[i])
    }

    pub fn domain_affinities(&self) -> &[T] {
        &self.affinities[&self.inferred_domain]
    }

    pub fn to_value(&self, doc_id: &str) -> Value {
        let row = self.domain_affinities();
        json!({
            "doc_id": doc_id,
            "inferred_domain": self.inferred_domain,
            "threshold": self.threshold.as_f64(),
            "fallback": self.fallback,
            "detected": self.detected,
            "chunks": self.chunks.iter().enumerate().map(|(i, c)| json!({
                "start": c.start,
                "end": c.end,
                "text": c.text,
                "affinity": row[i].as_f64(),
            })).collect::<Vec<_>>(),
            "affinities": self.affinities.iter()
                .map(|(d, r)| (d.clone(), Value::Array(r.iter().map(|x| Value::from(x.as_f64())).collect())))
                .collect::<serde_json::Map<_, _>>(),
        })
    }
}

/// Score pre-computed chunks and select the private ones.
pub fn detect_chunks<T: Scalar>(
    chunks: Vec<Chunk>,
    encoder: &EncoderParams<T>,
    protos: &PrototypeMap<T>,
) -> Result<DetectionResult<T>, LocalizeError> {
    if chunks.is_empty() {
        return Err(LocalizeError::NoChunks);
    }
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let z = encode_all(encoder, &texts)?;
    let affinities = affinity_table(&z, protos)?;
    let inferred_domain = argmax_mean(&affinities)?;
    let row = &affinities[&inferred_domain];
    let (threshold, fallback) = if row.len() == 1 {
        log::warn!("single chunk: using fallback threshold {SINGLE_CHUNK_THRESHOLD}");
        (T::of(SINGLE_CHUNK_THRESHOLD), true)
    } else {
        (otsu_threshold(row)?.threshold, false)
    };
    let detected = (0..row.len()).filter(|&i| row[i] > threshold).collect();
    Ok(DetectionResult { chunks, affinities, inferred_domain, threshold, detected, fallback })
}

/// Segment, encode, infer the domain and threshold the affinities.
pub fn detect<T: Scalar>(
    text: &str,
    chunker: &Chunker,
    encoder: &EncoderParams<T>,
    protos: &PrototypeMap<T>,
) -> Result<DetectionResult<T>, LocalizeError> {
    detect_chunks(chunker.segment(text)?, encoder, protos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub pf1: f64,
}

/// Collapse whitespace runs and trim.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Set-based precision/recall/F1 over span texts.
pub fn localization_metrics<P, G>(predicted: P, gold: G) -> LocalizationMetrics
where
    P: IntoIterator,
    P::Item: AsRef<str>,
    G: IntoIterator,
    G::Item: AsRef<str>,
{
    let p: BTreeSet<String> = predicted.into_iter().map(|s| normalize_ws(s.as_ref())).collect();
    let g: BTreeSet<String> = gold.into_iter().map(|s| normalize_ws(s.as_ref())).collect();
    let hit = p.intersection(&g).count() as f64;
    let precision = if p.is_empty() { 1.0 } else { hit / p.len() as f64 };
    let recall = if g.is_empty() { 1.0 } else { hit / g.len() as f64 };
    let pf1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    LocalizationMetrics { precision, recall, pf1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::ClusterMethod;

    fn e(v: &[f64]) -> Embedding<f64> {
        Embedding::from_vec(v.to_vec())
    }

    fn set(domain: &str, ps: &[&[f64]]) -> PrototypeSet<f64> {
        PrototypeSet {
            domain: domain.into(),
            prototypes: ps.iter().map(|p| e(p)).collect(),
            method: ClusterMethod::Mean,
            level: None,
        }
    }

    #[test]
    fn affinity_cases() {
        let s = set("a", &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(affinity(&e(&[0.0, 1.0, 0.0]), &s).unwrap(), 1.0);
        assert_eq!(affinity(&e(&[0.0, 0.0, 1.0]), &s).unwrap(), 0.0);
        let empty = set("b", &[]);
        assert!(matches!(affinity(&e(&[1.0, 0.0, 0.0]), &empty), Err(LocalizeError::EmptyPrototypes(_))));
    }

    #[test]
    fn otsu_examples() {
        let o = otsu_threshold(&[0.1f64, 0.9]).unwrap();
        assert_eq!(o.split, 1);
        assert!((o.threshold - 0.5).abs() < 1e-12);

        let o = otsu_threshold(&[0.9f64, 0.1, 0.8, 0.2]).unwrap();
        assert_eq!(o.split, 2);
        assert!((o.threshold - 0.5).abs() < 1e-12);
        let want = [0.0533, 0.1225, 0.0533];
        for (v, w) in o.variances.iter().zip(want) {
            assert!((v - w).abs() < 1e-4, "{v} vs {w}");
        }

        let o = otsu_threshold(&[0.4f64; 5]).unwrap();
        assert_eq!(o.split, 1);
        assert_eq!(o.threshold, 0.4);
        assert!(o.variances.iter().all(|&v| v == 0.0));

        assert!(matches!(otsu_threshold(&[0.3f64]), Err(LocalizeError::TooFewValues(1))));
    }

    #[test]
    fn domain_ties_go_to_smallest_name() {
        let mut all = PrototypeMap::new();
        all.insert("zeta".to_string(), set("zeta", &[&[1.0, 0.0]]));
        all.insert("alpha".to_string(), set("alpha", &[&[1.0, 0.0]]));
        assert_eq!(infer_domain(&[e(&[1.0, 1.0])], &all).unwrap(), "alpha");
        assert!(matches!(infer_domain(&[], &all), Err(LocalizeError::NoChunks)));
    }

    #[test]
    fn metric_examples() {
        let m = localization_metrics(["a", "b"], ["b", "a"]);
        assert_eq!((m.precision, m.recall, m.pf1), (1.0, 1.0, 1.0));
        let m = localization_metrics(["x"], ["y"]);
        assert_eq!((m.precision, m.recall, m.pf1), (0.0, 0.0, 0.0));
        let m = localization_metrics(["a", "b", "c", "d"], ["a", "b", "c", "d", "e"]);
        assert_eq!(m.precision, 1.0);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.pf1 - 8.0 / 9.0).abs() < 1e-12);
        let m = localization_metrics(["cough  up blood "], ["cough up blood"]);
        assert_eq!(m.pf1, 1.0);
    }
}
