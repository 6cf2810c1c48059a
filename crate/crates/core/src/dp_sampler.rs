//! Span-level differentially private rewriting.
//!
//! Only detected spans are regenerated. Every regenerated token is drawn with
//! the exponential mechanism: policy utilities are clipped to `[R1, R2]`, so
//! the utility sensitivity is at most `R2 − R1`, and a temperature softmax at
//! `τ2` costs `ε_token = 2(R2 − R1)/τ2` per draw. Draws compose sequentially and
//! the per-query cap `n_sp_max` fixes `τ2 = 2(R2 − R1)·n_sp_max/ε_text`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{self, ArtifactError};
use crate::corpus::{char_slice, char_to_byte};
use crate::localizer::DetectionResult;
use crate::policy::{PolicyError, PolicyInput, PolicyParams, END_ID};
use crate::rng::rng_for;
use crate::scalar::{inverse_cdf, log_softmax, log_sum_exp, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum DpError {
    #[error("eps_text must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("clipping bounds need R1 < R2, got R1={r1}, R2={r2}")]
    BadBounds { r1: f64, r2: f64 },
    #[error("n_sp_max must be at least 1")]
    BadCap,
    #[error("eps_text {eps_text} disagrees with 2 x eps_hyper = {}", 2.0 * .eps_hyper)]
    HyperMismatch { eps_text: f64, eps_hyper: f64 },
    #[error("tau2 must be positive, got {0}")]
    BadTemperature(f64),
    #[error("audit needs vocab_size >= 2 and trials >= 1")]
    BadAudit,
    #[error("detected span {start}..{end} is outside the text")]
    SpanOutOfRange { start: usize, end: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// Query-level budget and clipping bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    pub eps_text: f64,
    pub r1: f64,
    pub r2: f64,
    pub n_sp_max: usize,
    #[serde(default)]
    pub eps_hyper: Option<f64>,
}

impl PrivacyBudget {
    pub fn new(eps_text: f64, r1: f64, r2: f64, n_sp_max: usize) -> Result<Self, DpError> {
        let b = Self { eps_text, r1, r2, n_sp_max, eps_hyper: None };
        b.validate()?;
        Ok(b)
    }

    /// Budget stated as the hyperparameter `ε` with `ε_text = 2ε`.
    pub fn from_hyper(eps: f64, r1: f64, r2: f64, n_sp_max: usize) -> Result<Self, DpError> {
        let b = Self { eps_text: 2.0 * eps, r1, r2, n_sp_max, eps_hyper: Some(eps) };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.eps_text > 0.0 && self.eps_text.is_finite()) {
            return Err(DpError::BadEpsilon(self.eps_text));
        }
        if !(self.r1.is_finite() && self.r2.is_finite() && self.r1 < self.r2) {
            return Err(DpError::BadBounds { r1: self.r1, r2: self.r2 });
        }
        if self.n_sp_max == 0 {
            return Err(DpError::BadCap);
        }
        if let Some(h) = self.eps_hyper {
            if (2.0 * h - self.eps_text).abs() > 1e-9 * self.eps_text.max(1.0) {
                return Err(DpError::HyperMismatch { eps_text: self.eps_text, eps_hyper: h });
            }
        }
        Ok(())
    }

    pub fn calibrate(&self) -> Result<Calibration, DpError> {
        calibrate(self)
    }
}

/// Sampling temperature and per-token cost derived from a budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau2: f64,
    pub eps_token: f64,
}

pub fn calibrate(budget: &PrivacyBudget) -> Result<Calibration, DpError> {
    budget.validate()?;
    let width = budget.r2 - budget.r1;
    let n = budget.n_sp_max as f64;
    let mut tau2 = 2.0 * width * n / budget.eps_text;
    // rounding may put n·ε_token one ulp above ε_text; a slightly hotter
    // temperature keeps the accounting conservative
    while n * (2.0 * width / tau2) > budget.eps_text {
        tau2 = tau2.next_up();
    }
    Ok(Calibration { tau2, eps_token: 2.0 * width / tau2 })
}

/// Clamp every coordinate to `[r1, r2]`.
pub fn clip<T: Scalar>(logits: &[T], r1: f64, r2: f64) -> Vec<T> {
    let (lo, hi) = (T::of(r1), T::of(r2));
    logits.iter().map(|&x| x.max(lo).min(hi)).collect()
}

/// `softmax(u / τ2)`.
pub fn em_probabilities<T: Scalar>(clipped: &[T], tau2: f64) -> Vec<T> {
    let inv = T::of(1.0 / tau2);
    let scaled: Vec<T> = clipped.iter().map(|&u| u * inv).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|s| (s - lse).exp()).collect()
}

/// Exponential-mechanism draw by inverse CDF on one uniform from `rng`.
pub fn em_sample_with<T: Scalar>(clipped: &[T], tau2: f64, rng: &mut impl Rng) -> usize {
    inverse_cdf(&em_probabilities(clipped, tau2), T::of(rng.random::<f64>()))
}

pub fn em_sample<T: Scalar>(clipped: &[T], tau2: f64, seed: u64) -> usize {
    em_sample_with(clipped, tau2, &mut rng_for(seed, "em"))
}

/// Mechanism utilities for one decoding step: the policy's log-probabilities
/// shifted by `R2` (so the most likely tokens sit near the top of the range),
/// then clipped.
pub fn step_utilities<T: Scalar>(logits: &[T], r1: f64, r2: f64) -> Vec<T> {
    let shift = T::of(r2);
    let u: Vec<T> = log_softmax(logits).into_iter().map(|x| x + shift).collect();
    clip(&u, r1, r2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub start: usize,
    pub end: usize,
    pub original: String,
    pub replacement: String,
    /// False when the span was copied verbatim because the budget ran out.
    pub regenerated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub output_text: String,
    pub replacements: Vec<Replacement>,
    pub n_sp: usize,
    pub eps_token: f64,
    pub realized_eps: f64,
    pub budget_exhausted: bool,
    pub inferred_domain: Option<String>,
}

impl RewriteResult {
    pub fn to_value(&self, doc_id: &str) -> Value {
        json!({
            "doc_id": doc_id,
            "output_text": self.output_text,
            "replacements": self.replacements,
            "n_sp": self.n_sp,
            "eps_token": self.eps_token,
            "realized_eps": self.realized_eps,
            "budget_exhausted": self.budget_exhausted,
            "inferred_domain": self.inferred_domain,
        })
    }
}

/// Sort ranges and merge overlapping ones into their union.
pub fn merge_spans(mut spans: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    spans.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Replace character ranges (sorted, disjoint) of `text`.
pub fn splice(text: &str, edits: &[(usize, usize, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for &(s, e, rep) in edits {
        let (bs, be) = (char_to_byte(text, s), char_to_byte(text, e));
        out.push_str(&text[cursor..bs]);
        out.push_str(rep);
        cursor = be;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Regenerate the given character ranges of `text` under the budget.
pub fn dp_rewrite_spans<T: Scalar>(
    text: &str,
    spans: Vec<(usize, usize)>,
    policy: &PolicyParams<T>,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<RewriteResult, DpError> {
    let cal = calibrate(budget)?;
    let n_chars = text.chars().count();
    let spans = merge_spans(spans);
    if let Some(&(start, end)) = spans.iter().find(|&&(s, e)| s >= e || e > n_chars) {
        return Err(DpError::SpanOutOfRange { start, end });
    }
    let input = PolicyInput::new(text, spans.clone());
    let mut rng = rng_for(seed, "dp_rewrite");
    let mut n_sp = 0usize;
    let mut exhausted = false;
    let mut replacements = Vec::with_capacity(spans.len());
    for (i, &(start, end)) in spans.iter().enumerate() {
        let original = char_slice(text, start, end).to_string();
        let mut tokens = Vec::new();
        if !exhausted {
            let ctx = policy.span_context(&input, i)?;
            while tokens.len() < policy.max_len() {
                if n_sp + 1 > budget.n_sp_max {
                    exhausted = true;
                    break;
                }
                let u = step_utilities(&policy.step_logits(&ctx, &tokens), budget.r1, budget.r2);
                // the end marker is not a candidate for the first token, so
                // a regenerated span is never empty
                let t = if tokens.is_empty() {
                    1 + em_sample_with(&u[1..], cal.tau2, &mut rng)
                } else {
                    em_sample_with(&u, cal.tau2, &mut rng)
                };
                n_sp += 1;
                if t == END_ID {
                    break;
                }
                tokens.push(t);
            }
        }
        if exhausted {
            log::warn!("token budget of {} exhausted; copying remaining spans verbatim", budget.n_sp_max);
            replacements.push(Replacement { start, end, replacement: original.clone(), original, regenerated: false });
        } else {
            replacements.push(Replacement { start, end, original, replacement: policy.detokenize(&tokens), regenerated: true });
        }
    }
    let edits: Vec<(usize, usize, &str)> =
        replacements.iter().map(|r| (r.start, r.end, r.replacement.as_str())).collect();
    Ok(RewriteResult {
        output_text: splice(text, &edits),
        replacements,
        n_sp,
        eps_token: cal.eps_token,
        realized_eps: n_sp as f64 * cal.eps_token,
        budget_exhausted: exhausted,
        inferred_domain: None,
    })
}

/// Regenerate the detected spans of `text`.
pub fn dp_rewrite<T: Scalar>(
    text: &str,
    detection: &DetectionResult<T>,
    policy: &PolicyParams<T>,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<RewriteResult, DpError> {
    let spans = detection.detected_chunks().map(|c| (c.start, c.end)).collect();
    let mut r = dp_rewrite_spans(text, spans, policy, budget, seed)?;
    r.inferred_domain = Some(detection.inferred_domain.clone());
    Ok(r)
}

/// `max_i |log p_i − log p'_i|` for the mechanism distributions of two
/// clipped utility vectors.
pub fn max_log_ratio(u: &[f64], v: &[f64], tau2: f64) -> f64 {
    let su: Vec<f64> = u.iter().map(|x| x / tau2).collect();
    let sv: Vec<f64> = v.iter().map(|x| x / tau2).collect();
    let (lu, lv) = (log_sum_exp(&su), log_sum_exp(&sv));
    su.iter().zip(&sv).map(|(a, b)| ((a - lu) - (b - lv)).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub max_log_ratio: f64,
    pub bound: f64,
    pub corner_pairs: u64,
    pub random_pairs: u64,
}

impl AuditReport {
    pub fn holds(&self) -> bool {
        self.max_log_ratio <= self.bound + 1e-9
    }
}

/// Largest exhaustive corner enumeration done literally (`4^V` pairs).
pub const LITERAL_CORNER_MAX_VOCAB: usize = 6;

/// Every pair of corner vectors in `{R1, R2}^V`, enumerated literally.
pub fn corner_ratio_literal(r1: f64, r2: f64, tau2: f64, vocab: usize) -> (f64, u64) {
    let n = 1usize << vocab;
    let corner = |mask: usize| -> Vec<f64> { (0..vocab).map(|i| if mask >> i & 1 == 1 { r2 } else { r1 }).collect() };
    let corners: Vec<Vec<f64>> = (0..n).map(corner).collect();
    let mut best = 0.0f64;
    for a in &corners {
        for b in &corners {
            best = best.max(max_log_ratio(a, b, tau2));
        }
    }
    (best, (n * n) as u64)
}

/// Exhaustive corner search by composition: for a token `i`, the log ratio
/// depends only on `(u_i, u'_i)` and how many other coordinates of each
/// vector sit at `R2`, so all `4^V` pairs reduce to `4·V²` cases.
pub fn corner_ratio_by_counts(r1: f64, r2: f64, tau2: f64, vocab: usize) -> (f64, u64) {
    let lse = |k: usize| -> f64 {
        // k coordinates at R2, the rest at R1
        let mut xs = vec![r1 / tau2; vocab];
        for x in xs.iter_mut().take(k) {
            *x = r2 / tau2;
        }
        log_sum_exp(&xs)
    };
    let table: Vec<f64> = (0..=vocab).map(lse).collect();
    let mut best = 0.0f64;
    let mut cases = 0;
    for ui in [r1, r2] {
        for vi in [r1, r2] {
            let (ku, kv) = (usize::from(ui == r2), usize::from(vi == r2));
            for a in 0..vocab {
                for b in 0..vocab {
                    let lp = ui / tau2 - table[a + ku];
                    let lq = vi / tau2 - table[b + kv];
                    best = best.max((lp - lq).abs());
                    cases += 1;
                }
            }
        }
    }
    (best, cases)
}

/// Empirical check of the per-token bound `2(R2 − R1)/τ2`: exhaustive corner
/// pairs plus `trials` random pairs (coordinates drawn at `R1`, at `R2`, or
/// uniformly between).
pub fn audit_ratio(r1: f64, r2: f64, tau2: f64, vocab: usize, trials: u64, seed: u64) -> Result<AuditReport, DpError> {
    if vocab < 2 || trials == 0 {
        return Err(DpError::BadAudit);
    }
    if !(r1.is_finite() && r2.is_finite() && r1 < r2) {
        return Err(DpError::BadBounds { r1, r2 });
    }
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(DpError::BadTemperature(tau2));
    }
    let (mut best, mut corner_pairs) = corner_ratio_by_counts(r1, r2, tau2, vocab);
    if vocab <= LITERAL_CORNER_MAX_VOCAB {
        let (b, n) = corner_ratio_literal(r1, r2, tau2, vocab);
        best = best.max(b);
        corner_pairs += n;
    }
    let mut rng = rng_for(seed, &format!("audit/{vocab}"));
    let draw = |rng: &mut crate::rng::DetRng| -> Vec<f64> {
        (0..vocab)
            .map(|_| match rng.random_range(0..3) {
                0 => r1,
                1 => r2,
                _ => rng.random_range(r1..=r2),
            })
            .collect()
    };
    for _ in 0..trials {
        let u = draw(&mut rng);
        let v = draw(&mut rng);
        best = best.max(max_log_ratio(&u, &v, tau2));
    }
    Ok(AuditReport { max_log_ratio: best, bound: 2.0 * (r2 - r1) / tau2, corner_pairs, random_pairs: trials })
}

pub fn save_rewrites(results: &[(String, RewriteResult)], path: &Path) -> Result<(), DpError> {
    let values: Vec<Value> = results.iter().map(|(id, r)| r.to_value(id)).collect();
    artifact::write_jsonl(path, &values)?;
    Ok(())
}
