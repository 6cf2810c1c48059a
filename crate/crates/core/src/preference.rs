//! Prototype-guided rewards and automatic preference pairs.
//!
//! A rewrite is scored by how far its replacements move away from the original
//! spans (privacy) and how close they stay to the domain's prototypes
//! (utility). Sampling several candidates from the reference policy and keeping
//! the best and worst gives a preference pair without human labels.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{self, ArtifactError};
use crate::corpus::{Corpus, Document};
use crate::encoder::{encode_all, EncoderError, EncoderParams, Embedding};
use crate::localizer::{affinity, LocalizeError};
use crate::policy::{sample_replacement_with, DpoExample, PolicyError, PolicyInput, PolicyParams};
use crate::prototypes::{PrototypeMap, PrototypeSet};
use crate::rng::rng_for;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error("{orig} original spans but {new} replacements")]
    LengthMismatch { orig: usize, new: usize },
    #[error("reward needs at least one span")]
    NoSpans,
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("only {0} candidates survived after dropping empty replacements")]
    TooFewSurvivors(usize),
    #[error("all candidates are identical (insufficient diversity)")]
    InsufficientDiversity,
    #[error("document {0:?} has no private spans")]
    NoPrivateSpans(String),
    #[error("document {0:?} has no domain label")]
    Unlabeled(String),
    #[error("no prototypes for domain {0:?}")]
    UnknownDomain(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// `1 − mean_i cos(new_i, orig_i)`.
pub fn reward_priv_embeddings<T: Scalar>(orig: &[Embedding<T>], new: &[Embedding<T>]) -> Result<T, PreferenceError> {
    if orig.len() != new.len() {
        return Err(PreferenceError::LengthMismatch { orig: orig.len(), new: new.len() });
    }
    if orig.is_empty() {
        return Err(PreferenceError::NoSpans);
    }
    // identical spans score exactly 0 rather than 1 − cos(z, z) rounding noise
    let d: T = orig.iter().zip(new).map(|(a, b)| if a == b { T::zero() } else { T::one() - a.cos(b) }).sum();
    Ok(d / T::of_usize(orig.len()))
}

/// `mean_i max_j cos(new_i, p_j)` over the domain's prototypes.
pub fn reward_util_embeddings<T: Scalar>(new: &[Embedding<T>], protos: &PrototypeSet<T>) -> Result<T, PreferenceError> {
    if new.is_empty() {
        return Err(PreferenceError::NoSpans);
    }
    let mut s = T::zero();
    for z in new {
        s += affinity(z, protos)?;
    }
    Ok(s / T::of_usize(new.len()))
}

pub fn reward_priv<T: Scalar, A: AsRef<str>, B: AsRef<str>>(
    orig: &[A],
    new: &[B],
    encoder: &EncoderParams<T>,
) -> Result<T, PreferenceError> {
    if orig.len() != new.len() {
        return Err(PreferenceError::LengthMismatch { orig: orig.len(), new: new.len() });
    }
    reward_priv_embeddings(&encode_all(encoder, orig)?, &encode_all(encoder, new)?)
}

pub fn reward_util<T: Scalar, B: AsRef<str>>(
    new: &[B],
    protos: &PrototypeSet<T>,
    encoder: &EncoderParams<T>,
) -> Result<T, PreferenceError> {
    reward_util_embeddings(&encode_all(encoder, new)?, protos)
}

/// `(1 − α)·r_priv + α·r_util`.
pub fn reward<T: Scalar>(r_priv: T, r_util: T, alpha: f64) -> Result<T, PreferenceError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PreferenceError::BadAlpha(alpha));
    }
    let a = T::of(alpha);
    Ok((T::one() - a) * r_priv + a * r_util)
}

/// One candidate rewrite: a replacement per private span and its rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub replacements: Vec<String>,
    pub r_priv: T,
    pub r_util: T,
    pub r: T,
}

impl<T: Scalar> Candidate<T> {
    pub fn score(
        replacements: Vec<String>,
        orig: &[Embedding<T>],
        encoder: &EncoderParams<T>,
        protos: &PrototypeSet<T>,
        alpha: f64,
    ) -> Result<Self, PreferenceError> {
        let z = encode_all(encoder, &replacements)?;
        let r_priv = reward_priv_embeddings(orig, &z)?;
        let r_util = reward_util_embeddings(&z, protos)?;
        let r = reward(r_priv, r_util, alpha)?;
        Ok(Self { replacements, r_priv, r_util, r })
    }

    /// Re-weight the stored components for another `alpha`.
    pub fn reward_at(&self, alpha: f64) -> Result<T, PreferenceError> {
        reward(self.r_priv, self.r_util, alpha)
    }
}

/// Sample `n` replacement sets from the policy. Sets containing an empty
/// replacement are dropped; fewer than two survivors, or survivors that are
/// all identical, is an error.
pub fn generate_candidates<T: Scalar>(
    policy: &PolicyParams<T>,
    input: &PolicyInput,
    n: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<String>>, PreferenceError> {
    if n < 2 {
        return Err(PreferenceError::TooFewCandidates(n));
    }
    if input.spans.is_empty() {
        return Err(PreferenceError::NoSpans);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let reps = (0..input.spans.len())
            .map(|i| sample_replacement_with(policy, input, i, temperature, rng))
            .collect::<Result<Vec<_>, _>>()?;
        if reps.iter().all(|r| !r.is_empty()) {
            out.push(reps);
        }
    }
    if out.len() < 2 {
        return Err(PreferenceError::TooFewSurvivors(out.len()));
    }
    if out.iter().all(|c| c == &out[0]) {
        return Err(PreferenceError::InsufficientDiversity);
    }
    Ok(out)
}

/// Index of the first maximum and first minimum of `r`.
pub fn select_pair<T: Scalar>(scores: &[T]) -> (usize, usize) {
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[hi] {
            hi = i;
        }
        if s < scores[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub alpha: f64,
    pub candidates: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self { alpha: 0.3, candidates: 10, temperature: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair<T> {
    pub doc_id: String,
    pub x: String,
    pub span_offsets: Vec<(usize, usize)>,
    pub y_w: Vec<String>,
    pub y_l: Vec<String>,
    pub r_w: T,
    pub r_l: T,
}

impl<T: Scalar> PreferencePair<T> {
    pub fn to_dpo(&self) -> DpoExample {
        DpoExample {
            input: PolicyInput::new(self.x.clone(), self.span_offsets.clone()),
            chosen: self.y_w.clone(),
            rejected: self.y_l.clone(),
        }
    }

    pub fn to_value(&self) -> Value {
        json!({
            "doc_id": self.doc_id,
            "x": self.x,
            "span_offsets": self.span_offsets.iter().map(|&(s, e)| json!([s, e])).collect::<Vec<_>>(),
            "y_w": self.y_w,
            "y_l": self.y_l,
            "r_w": self.r_w.as_f64(),
            "r_l": self.r_l.as_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreferenceBuild<T> {
    pub pairs: Vec<PreferencePair<T>>,
    /// Documents without a pair, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Scored candidates for one labeled document.
pub fn score_document<T: Scalar>(
    doc: &Document,
    policy: &PolicyParams<T>,
    encoder: &EncoderParams<T>,
    protos: &PrototypeMap<T>,
    cfg: &PreferenceConfig,
) -> Result<Vec<Candidate<T>>, PreferenceError> {
    let domain = doc.domain.as_ref().ok_or_else(|| PreferenceError::Unlabeled(doc.id.clone()))?;
    let set = protos.get(domain).ok_or_else(|| PreferenceError::UnknownDomain(domain.clone()))?;
    let input = PolicyInput::from_document(doc);
    if input.spans.is_empty() {
        return Err(PreferenceError::NoPrivateSpans(doc.id.clone()));
    }
    let orig = encode_all(encoder, &doc.private_texts())?;
    let mut rng = rng_for(cfg.seed, &format!("preference/{}", doc.id));
    generate_candidates(policy, &input, cfg.candidates, cfg.temperature, &mut rng)?
        .into_iter()
        .map(|reps| Candidate::score(reps, &orig, encoder, set, cfg.alpha))
        .collect()
}

/// Best-versus-worst candidate pairs for every labeled document.
pub fn build_preferences<T: Scalar>(
    corpus: &Corpus,
    reference: &PolicyParams<T>,
    encoder: &EncoderParams<T>,
    protos: &PrototypeMap<T>,
    cfg: &PreferenceConfig,
) -> Result<PreferenceBuild<T>, PreferenceError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(PreferenceError::BadAlpha(cfg.alpha));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for doc in &corpus.docs {
        let cands = match score_document(doc, reference, encoder, protos, cfg) {
            Ok(c) => c,
            Err(
                e @ (PreferenceError::InsufficientDiversity
                | PreferenceError::TooFewSurvivors(_)
                | PreferenceError::NoPrivateSpans(_)),
            ) => {
                log::info!("skipping {}: {e}", doc.id);
                skipped.push((doc.id.clone(), e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let scores: Vec<T> = cands.iter().map(|c| c.r).collect();
        let (w, l) = select_pair(&scores);
        if scores[w] == scores[l] {
            log::info!("skipping {}: zero reward spread", doc.id);
            skipped.push((doc.id.clone(), "zero reward spread".into()));
            continue;
        }
        let input = PolicyInput::from_document(doc);
        pairs.push(PreferencePair {
            doc_id: doc.id.clone(),
            x: doc.text.clone(),
            span_offsets: input.spans,
            y_w: cands[w].replacements.clone(),
            y_l: cands[l].replacements.clone(),
            r_w: scores[w],
            r_l: scores[l],
        });
    }
    log::info!("built {} preference pairs, skipped {} documents", pairs.len(), skipped.len());
    Ok(PreferenceBuild { pairs, skipped })
}

pub fn save_preferences<T: Scalar>(pairs: &[PreferencePair<T>], path: &Path) -> Result<(), PreferenceError> {
    let values: Vec<Value> = pairs.iter().map(PreferencePair::to_value).collect();
    artifact::write_jsonl(path, &values)?;
    Ok(())
}

fn strings(path: &Path, v: &Value, key: &str) -> Result<Vec<String>, ArtifactError> {
    artifact::field(path, v, key)?
        .as_array()
        .and_then(|a| a.iter().map(|x| x.as_str().map(String::from)).collect())
        .ok_or_else(|| ArtifactError::format(path, format!("{key:?} is not an array of strings")))
}

pub fn load_preferences<T: Scalar>(path: &Path) -> Result<Vec<PreferencePair<T>>, PreferenceError> {
    use artifact::{field, field_f64, field_str};
    let mut out = Vec::new();
    for v in artifact::read_jsonl(path)? {
        let offsets = field(path, &v, "span_offsets")?
            .as_array()
            .and_then(|a| {
                a.iter()
                    .map(|p| match p.as_array().map(Vec::as_slice) {
                        Some([s, e]) => Some((s.as_u64()? as usize, e.as_u64()? as usize)),
                        _ => None,
                    })
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| ArtifactError::format(path, "\"span_offsets\" must be [[start, end], ...]"))?;
        out.push(PreferencePair {
            doc_id: field_str(path, &v, "doc_id")?.to_string(),
            x: field_str(path, &v, "x")?.to_string(),
            span_offsets: offsets,
            y_w: strings(path, &v, "y_w")?,
            y_l: strings(path, &v, "y_l")?,
            r_w: T::of(field_f64(path, &v, "r_w")?),
            r_l: T::of(field_f64(path, &v, "r_l")?),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::ClusterMethod;

    fn e(v: &[f64]) -> Embedding<f64> {
        Embedding::from_vec(v.to_vec())
    }

    #[test]
    fn privacy_reward_bounds() {
        let a = [e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        assert_eq!(reward_priv_embeddings(&a, &a).unwrap(), 0.0);
        let b = [e(&[-1.0, 0.0]), e(&[0.0, -1.0])];
        assert_eq!(reward_priv_embeddings(&a, &b).unwrap(), 2.0);
        assert!(matches!(reward_priv_embeddings(&a, &b[..1]), Err(PreferenceError::LengthMismatch { .. })));
    }

    #[test]
    fn utility_reward_cases() {
        let set = PrototypeSet {
            domain: "d".into(),
            prototypes: vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0])],
            method: ClusterMethod::Finch,
            level: Some(0),
        };
        assert_eq!(reward_util_embeddings(&[e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0])], &set).unwrap(), 1.0);
        assert_eq!(reward_util_embeddings(&[e(&[0.0, 0.0, 1.0])], &set).unwrap(), 0.0);
    }

    #[test]
    fn reward_mixing() {
        assert_eq!(reward(0.8f64, 0.2, 0.0).unwrap(), 0.8);
        assert_eq!(reward(0.8, 0.2, 1.0).unwrap(), 0.2);
        assert!((reward(0.8f64, 0.2, 0.3).unwrap() - 0.62).abs() < 1e-12);
        assert!(matches!(reward(0.8, 0.2, 1.5), Err(PreferenceError::BadAlpha(_))));
        assert_eq!(PreferenceConfig::default().alpha, 0.3);
        assert_eq!(PreferenceConfig::default().candidates, 10);
    }

    #[test]
    fn pair_selection_uses_first_extreme() {
        assert_eq!(select_pair(&[0.2, 0.9]), (1, 0));
        assert_eq!(select_pair(&[0.5, 0.9, 0.1, 0.9, 0.1]), (1, 2));
    }

    #[test]
    fn greedy_candidates_lack_diversity() {
        let p = PolicyParams::<f64>::new(["a", "b", "c"], Default::default()).unwrap();
        let mut p = p;
        // make "a" then the end marker overwhelmingly likely
        let h = p.config.feature_dim;
        for f in 0..h {
            p.weights[h + f] = 5.0;
        }
        let input = PolicyInput::new("x y", vec![(0, 1)]);
        let mut rng = rng_for(0, "t");
        let r = generate_candidates(&p, &input, 10, 1e-4, &mut rng);
        assert!(matches!(r, Err(PreferenceError::InsufficientDiversity)), "{r:?}");
    }
}
