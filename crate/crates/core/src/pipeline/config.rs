//! Pipeline configuration: one TOML file with a section per stage.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::{Chunker, ChunkerRules};
use crate::corpus::{DomainVocab, SynthSpec};
use crate::dp_sampler::PrivacyBudget;
use crate::encoder::EncoderConfig;
use crate::policy::{DpoConfig, PolicyConfig};
use crate::preference::PreferenceConfig;
use crate::prototypes::PrototypeOptions;
use crate::rng::derive_seed;

use super::PipelineError;

pub const DEFAULT_CONFIG: &str = include_str!("../../assets/default_config.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub docs_per_domain: usize,
    pub spans_per_doc: [usize; 2],
    pub train_fraction: f64,
    #[serde(default)]
    pub domains: Vec<DomainVocab>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub feature_dim: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub siblings: usize,
    #[serde(default)]
    pub extra_tokens: Vec<String>,
    pub dpo: DpoConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub eps_text: f64,
    pub r1: f64,
    pub r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sp_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_hyper: Option<f64>,
}

impl BudgetSection {
    /// The budget with `n_sp_max` taken from the config, else `default_cap`.
    pub fn resolve(&self, default_cap: usize) -> Result<PrivacyBudget, PipelineError> {
        let b = PrivacyBudget {
            eps_text: self.eps_text,
            r1: self.r1,
            r2: self.r2,
            n_sp_max: self.n_sp_max.unwrap_or(default_cap),
            eps_hyper: self.eps_hyper,
        };
        b.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkerVariant {
    Rule,
    Ngram,
}

impl fmt::Display for ChunkerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkerVariant::Rule => "rule",
            ChunkerVariant::Ngram => "ngram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub chunker: ChunkerVariant,
    pub ngram_max_len: usize,
    pub perturb: f64,
    pub alpha_sweep: bool,
    pub alpha_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunker_rules: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeOptions,
    pub preference: PreferenceConfig,
    pub policy: PolicySection,
    pub budget: BudgetSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::parse("").expect("bundled default config is valid")
    }
}

/// Merge `over` into `base`: tables merge key by key, everything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parse a (possibly partial) config, layered over the bundled defaults.
    pub fn parse(src: &str) -> Result<Self, PipelineError> {
        let mut base: toml::Value = toml::from_str(DEFAULT_CONFIG).expect("bundled default config parses");
        let over: toml::Value = toml::from_str(src).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: PipelineConfig = base.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&src)?;
        // relative paths in the config are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.chunker_rules.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        if let Some(p) = cfg.corpus.path.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, PipelineError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let f = self.corpus.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("corpus.train_fraction {f} outside (0, 1)"));
        }
        if self.corpus.path.is_none() {
            self.synth_spec().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.encoder.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.prototypes.kmeans_k == 0 {
            return bad("prototypes.kmeans_k must be at least 1".into());
        }
        let a = self.preference.alpha;
        if !(0.0..=1.0).contains(&a) {
            return bad(format!("preference.alpha {a} outside [0, 1]"));
        }
        if self.preference.candidates < 2 {
            return bad("preference.candidates must be at least 2".into());
        }
        if !(self.preference.temperature > 0.0 && self.preference.temperature.is_finite()) {
            return bad("preference.temperature must be positive".into());
        }
        self.policy_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.policy.dpo.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.policy.siblings == 0 {
            return bad("policy.siblings must be at least 1".into());
        }
        self.budget.resolve(1)?;
        if self.eval.ngram_max_len == 0 {
            return bad("eval.ngram_max_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eval.perturb) {
            return bad(format!("eval.perturb {} outside [0, 1]", self.eval.perturb));
        }
        if let Some(a) = self.eval.alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("eval.alpha_grid value {a} outside [0, 1]"));
        }
        if self.eval.alpha_sweep && self.eval.alpha_grid.is_empty() {
            return bad("eval.alpha_grid is empty".into());
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            domains: self.corpus.domains.clone(),
            docs_per_domain: self.corpus.docs_per_domain,
            spans_per_doc: self.corpus.spans_per_doc,
            seed: self.stage_seed("corpus"),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { seed: self.stage_seed("encoder"), ..self.encoder.clone() }
    }

    pub fn prototype_options(&self) -> PrototypeOptions {
        PrototypeOptions { seed: self.stage_seed("prototypes"), ..self.prototypes.clone() }
    }

    pub fn preference_config(&self) -> PreferenceConfig {
        PreferenceConfig { seed: self.stage_seed("preferences"), ..self.preference }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            feature_dim: p.feature_dim,
            max_len: p.max_len,
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            batch_size: p.batch_size,
            seed: self.stage_seed("reference"),
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig { seed: self.stage_seed("dpo"), ..self.policy.dpo }
    }

    pub fn chunker(&self) -> Result<Chunker, PipelineError> {
        let rules = match &self.chunker_rules {
            Some(p) => ChunkerRules::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => ChunkerRules::default(),
        };
        Ok(Chunker::new(rules))
    }

    /// Canonical JSON echo of the config (sorted keys).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
