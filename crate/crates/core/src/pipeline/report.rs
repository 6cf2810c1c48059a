//! Evaluation report, emitted as one canonical JSON document.

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentReport {
    pub doc_id: String,
    pub domain: Option<String>,
    pub inferred_domain: String,
    pub domain_correct: bool,
    pub precision: f64,
    pub recall: f64,
    pub pf1: f64,
    pub n_chunks: usize,
    pub n_detected: usize,
    /// `None` when no span was regenerated.
    pub soi: Option<f64>,
    pub dfs: Option<f64>,
    pub rouge_l: Option<f64>,
    pub n_sp: usize,
    pub realized_eps: f64,
    pub budget_exhausted: bool,
    pub preserved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Means of the per-document values; optional metrics average over the
/// documents where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub documents: usize,
    pub precision: f64,
    pub recall: f64,
    pub pf1: f64,
    pub domain_accuracy: f64,
    pub soi: Option<f64>,
    pub dfs: Option<f64>,
    pub rouge_l: Option<f64>,
    pub preserved_fraction: f64,
    pub budget_exhausted: usize,
    pub realized_eps: Option<Summary>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Aggregate {
    pub fn from_documents(docs: &[DocumentReport]) -> Self {
        let all = |f: fn(&DocumentReport) -> f64| mean_of(docs.iter().map(f)).unwrap_or(0.0);
        let eps: Vec<f64> = docs.iter().map(|d| d.realized_eps).collect();
        Self {
            documents: docs.len(),
            precision: all(|d| d.precision),
            recall: all(|d| d.recall),
            pf1: all(|d| d.pf1),
            domain_accuracy: all(|d| f64::from(u8::from(d.domain_correct))),
            soi: mean_of(docs.iter().filter_map(|d| d.soi)),
            dfs: mean_of(docs.iter().filter_map(|d| d.dfs)),
            rouge_l: mean_of(docs.iter().filter_map(|d| d.rouge_l)),
            preserved_fraction: all(|d| f64::from(u8::from(d.preserved))),
            budget_exhausted: docs.iter().filter(|d| d.budget_exhausted).count(),
            realized_eps: Summary::of(&eps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub eps_text: f64,
    pub r1: f64,
    pub r2: f64,
    pub n_sp_max: usize,
    pub tau2: f64,
    pub eps_token: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub heldout_pairs: usize,
    /// Mean `β(Δ_w − Δ_l)` of the trained policy on held-out pairs.
    pub heldout_margin: Option<f64>,
    /// Mean composite reward of sampled replacements on held-out documents.
    pub reward_reference: Option<f64>,
    pub reward_policy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub soi: f64,
    pub dfs: f64,
    pub soi_drop: f64,
    pub dfs_drop: f64,
    pub sum_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: Value,
    pub config_fingerprint: String,
    pub calibration: CalibrationReport,
    pub aggregate: Aggregate,
    pub documents: Vec<DocumentReport>,
    pub dpo: Option<DpoReport>,
    pub alpha_sweep: Option<Vec<SweepPoint>>,
}

impl Report {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}
