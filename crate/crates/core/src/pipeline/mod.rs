//! Offline training, online rewriting and evaluation.
//!
//! Offline stages run in order encoder → prototypes → reference policy →
//! preferences → DPO policy. Each writes one artifact into the output
//! directory and is recorded in `manifest.json` with a key derived from its
//! configuration and upstream artifacts. A rerun reuses a stage whose key and
//! file hash still match; once any stage is recomputed, everything downstream
//! is recomputed as well.

pub mod config;
pub mod metrics;
pub mod report;

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde_json::{json, Value};

use crate::artifact::{self, ArtifactError};
use crate::chunker::{perturb_boundaries, segment_ngrams, Chunk, Chunker};
use crate::corpus::{load_corpus, split_corpus, synth_corpus, write_corpus, Corpus, CorpusError, save_corpus};
use crate::dp_sampler::{calibrate, dp_rewrite, PrivacyBudget, Replacement, RewriteResult};
use crate::encoder::{encode_all, load_encoder, save_encoder, train_encoder, EncoderParams};
use crate::localizer::{detect, detect_chunks, localization_metrics, DetectionResult};
use crate::policy::{
    load_policy, pretrain_reference, sample_replacement_with, save_policy, train_dpo, words, DpoExample, PolicyExample,
    PolicyInput, PolicyParams, END,
};
use crate::preference::{
    build_preferences, load_preferences, reward_priv_embeddings, reward_util_embeddings, save_preferences,
    score_document, select_pair, Candidate, PreferenceConfig, PreferencePair,
};
use crate::prototypes::{build_prototypes, load_prototypes, save_prototypes, PrototypeMap};
use crate::rng::rng_for;
use crate::scalar::Scalar;

pub use config::{ChunkerVariant, PipelineConfig};
pub use metrics::{drop_metric, outside_spans_preserved, rouge_l};
pub use report::{Aggregate, CalibrationReport, DocumentReport, DpoReport, Report, SweepPoint};

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: BoxError },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl PipelineError {
    fn stage(stage: &'static str) -> impl FnOnce(BoxError) -> PipelineError {
        move |source| PipelineError::Stage { stage, source }
    }

    /// Errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Input(_) | PipelineError::Corpus(_))
    }
}

fn boxed<E: StdError + Send + Sync + 'static>(e: E) -> BoxError {
    Box::new(e)
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "damper-manifest";
const MANIFEST_VERSION: u64 = 1;

/// Offline stages in execution order with their artifact file names.
pub const STAGES: [(&str, &str); 5] = [
    ("encoder", "encoder.json"),
    ("prototypes", "prototypes.json"),
    ("reference", "reference.json"),
    ("preferences", "preferences.jsonl"),
    ("dpo", "policy.json"),
];

/// Generate (or load) the corpus and split it into train and test parts.
pub fn prepare_corpora(cfg: &PipelineConfig) -> Result<(Corpus, Corpus), PipelineError> {
    let corpus = match &cfg.corpus.path {
        Some(p) => load_corpus(p)?,
        None => synth_corpus(&cfg.synth_spec())?,
    };
    Ok(split_corpus(&corpus, cfg.corpus.train_fraction, cfg.stage_seed("split"))?)
}

pub fn corpus_sha256(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to memory");
    config::sha256_hex(&buf)
}

/// Policy vocabulary: words of every annotated span plus the configured extra
/// tokens, sorted.
pub fn build_vocab(corpus: &Corpus, extra: &[String]) -> Vec<String> {
    let mut v: std::collections::BTreeSet<String> = corpus
        .docs
        .iter()
        .flat_map(|d| d.spans.iter().flat_map(move |s| words(d.span_text(s))))
        .collect();
    v.extend(extra.iter().flat_map(|t| words(t)));
    v.remove(END);
    v.into_iter().collect()
}

/// Reference-policy training data: each labeled document, with every private
/// span mapped to a random different private phrase of the same domain.
pub fn reference_examples(corpus: &Corpus, siblings: usize, max_len: usize, seed: u64) -> Vec<PolicyExample> {
    let by_domain = corpus.private_texts_by_domain();
    let mut out = Vec::new();
    for doc in &corpus.docs {
        let Some(pool) = doc.domain.as_ref().and_then(|d| by_domain.get(d)) else { continue };
        let input = PolicyInput::from_document(doc);
        if input.spans.is_empty() {
            continue;
        }
        for k in 0..siblings {
            let mut rng = rng_for(seed, &format!("reference/{}/{k}", doc.id));
            let reps: Option<Vec<String>> = (0..input.spans.len())
                .map(|i| {
                    let orig = input.span_text(i).to_lowercase();
                    let others: Vec<&String> = pool.iter().filter(|p| p.to_lowercase() != orig).collect();
                    let sib = others.choose(&mut rng)?;
                    let w = words(sib);
                    Some(w[..w.len().min(max_len)].join(" "))
                })
                .collect();
            if let Some(replacements) = reps.filter(|r| r.iter().all(|s| !s.is_empty())) {
                out.push(PolicyExample { input: input.clone(), replacements });
            }
        }
    }
    out
}

/// Largest regenerated-token demand of any training document: one draw per
/// token for each private span at full length.
pub fn default_n_sp_max(corpus: &Corpus, max_len: usize) -> usize {
    corpus.docs.iter().map(|d| d.private_spans().len() * max_len).max().unwrap_or(0).max(1)
}

#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub encoder: EncoderParams<T>,
    pub prototypes: PrototypeMap<T>,
    pub reference: PolicyParams<T>,
    pub policy: PolicyParams<T>,
    pub chunker: Chunker,
    pub config_fingerprint: String,
    pub seed: u64,
    /// Token cap used when the config does not set one.
    pub default_n_sp_max: usize,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn budget(&self, cfg: &PipelineConfig) -> Result<PrivacyBudget, PipelineError> {
        cfg.budget.resolve(self.default_n_sp_max)
    }

    /// Load a bundle written by [`train_offline`].
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))?
            .ok_or_else(|| PipelineError::Input(format!("no {MANIFEST_FILE} in {}", dir.display())))?;
        for (name, _) in STAGES {
            if !m.stages.contains_key(name) {
                return Err(PipelineError::Input(format!("manifest lacks stage {name}; train first")));
            }
        }
        let p = |name: &str| dir.join(&m.stages[name].file);
        Ok(Self {
            encoder: load_encoder(&p("encoder")).map_err(|e| PipelineError::Input(e.to_string()))?,
            prototypes: load_prototypes(&p("prototypes")).map_err(|e| PipelineError::Input(e.to_string()))?,
            reference: load_policy(&p("reference")).map_err(|e| PipelineError::Input(e.to_string()))?,
            policy: load_policy(&p("dpo")).map_err(|e| PipelineError::Input(e.to_string()))?,
            chunker: cfg.chunker()?,
            config_fingerprint: m.config_fingerprint,
            seed: m.seed,
            default_n_sp_max: m.default_n_sp_max,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StageEntry {
    file: String,
    key: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
struct Manifest {
    config_fingerprint: String,
    seed: u64,
    corpus_sha256: String,
    default_n_sp_max: usize,
    stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    fn to_value(&self) -> Value {
        json!({
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "corpus_sha256": self.corpus_sha256,
            "default_n_sp_max": self.default_n_sp_max,
            "stages": self.stages.iter().map(|(k, e)| {
                (k.clone(), json!({"file": e.file, "key": e.key, "sha256": e.sha256}))
            }).collect::<serde_json::Map<_, _>>(),
        })
    }

    fn read(path: &Path) -> Result<Option<Self>, PipelineError> {
        use artifact::{field, field_str, field_u64};
        if !path.exists() {
            return Ok(None);
        }
        let v = artifact::read_json(path)?;
        artifact::check_header(path, &v, MANIFEST_FORMAT, MANIFEST_VERSION)?;
        let mut stages = BTreeMap::new();
        let raw = field(path, &v, "stages")?
            .as_object()
            .ok_or_else(|| ArtifactError::format(path, "\"stages\" is not an object"))?;
        for (k, e) in raw {
            stages.insert(
                k.clone(),
                StageEntry {
                    file: field_str(path, e, "file")?.to_string(),
                    key: field_str(path, e, "key")?.to_string(),
                    sha256: field_str(path, e, "sha256")?.to_string(),
                },
            );
        }
        Ok(Some(Self {
            config_fingerprint: field_str(path, &v, "config_fingerprint")?.to_string(),
            seed: field_u64(path, &v, "seed")?,
            corpus_sha256: field_str(path, &v, "corpus_sha256")?.to_string(),
            default_n_sp_max: field_u64(path, &v, "default_n_sp_max")? as usize,
            stages,
        }))
    }
}

fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(artifact::io_err(path))?;
    Ok(config::sha256_hex(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Computed,
    Reused,
}

struct Stager<'a> {
    dir: &'a Path,
    previous: Option<Manifest>,
    manifest: Manifest,
    force: bool,
    statuses: Vec<(&'static str, StageStatus)>,
}

impl Stager<'_> {
    /// Run or reuse one stage; returns its value and the artifact hash.
    fn run<V>(
        &mut self,
        name: &'static str,
        inputs: Value,
        compute: impl FnOnce() -> Result<V, BoxError>,
        save: impl FnOnce(&V, &Path) -> Result<(), BoxError>,
        load: impl FnOnce(&Path) -> Result<V, BoxError>,
    ) -> Result<(V, String), PipelineError> {
        let file = STAGES.iter().find(|(n, _)| *n == name).expect("known stage").1;
        let path = self.dir.join(file);
        let key = config::sha256_hex(json!({"stage": name, "inputs": inputs}).to_string().as_bytes());
        let reusable = !self.force
            && path.exists()
            && self.previous.as_ref().and_then(|m| m.stages.get(name)).is_some_and(|e| {
                e.key == key && file_sha256(&path).is_ok_and(|h| h == e.sha256)
            });
        let (value, status) = if reusable {
            log::info!("{name}: reusing {}", path.display());
            (load(&path).map_err(PipelineError::stage(name))?, StageStatus::Reused)
        } else {
            log::info!("{name}: computing");
            let v = compute().map_err(PipelineError::stage(name))?;
            save(&v, &path).map_err(PipelineError::stage(name))?;
            self.force = true;
            (v, StageStatus::Computed)
        };
        let sha256 = file_sha256(&path)?;
        self.manifest.stages.insert(name.to_string(), StageEntry { file: file.to_string(), key, sha256: sha256.clone() });
        artifact::write_json(&self.dir.join(MANIFEST_FILE), &self.manifest.to_value())?;
        self.statuses.push((name, status));
        Ok((value, sha256))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub bundle: ModelBundle<T>,
    pub stages: Vec<(&'static str, StageStatus)>,
}

/// Train (or resume) every offline stage on `train`, persisting artifacts in `out_dir`.
pub fn train_offline<T: Scalar>(
    train: &Corpus,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<T>, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(artifact::io_err(out_dir))?;
    let corpus_sha = corpus_sha256(train);
    let policy_cfg = cfg.policy_config();
    let default_cap = default_n_sp_max(train, policy_cfg.max_len);
    let previous = Manifest::read(&out_dir.join(MANIFEST_FILE)).unwrap_or_else(|e| {
        log::warn!("ignoring unreadable manifest: {e}");
        None
    });
    let mut st = Stager {
        dir: out_dir,
        previous,
        manifest: Manifest {
            config_fingerprint: cfg.fingerprint(),
            seed: cfg.seed,
            corpus_sha256: corpus_sha.clone(),
            default_n_sp_max: default_cap,
            stages: BTreeMap::new(),
        },
        force: false,
        statuses: Vec::new(),
    };

    let enc_cfg = cfg.encoder_config();
    let (encoder, enc_sha) = st.run(
        "encoder",
        json!({"corpus": corpus_sha, "config": enc_cfg}),
        || {
            let p0 = EncoderParams::<T>::init(enc_cfg.clone()).map_err(boxed)?;
            Ok(train_encoder(train, &p0).map_err(boxed)?.params)
        },
        |v, p| save_encoder(v, p).map_err(boxed),
        |p| load_encoder(p).map_err(boxed),
    )?;

    let proto_opts = cfg.prototype_options();
    let (prototypes, proto_sha) = st.run(
        "prototypes",
        json!({"corpus": corpus_sha, "encoder": enc_sha, "config": proto_opts}),
        || build_prototypes(train, &encoder, &proto_opts).map_err(boxed),
        |v, p| save_prototypes(v, p).map_err(boxed),
        |p| load_prototypes(p).map_err(boxed),
    )?;
    // downstream stages always see prototypes as stored on disk
    let prototypes: PrototypeMap<T> = if st.statuses.last().map(|s| s.1) == Some(StageStatus::Computed) {
        load_prototypes(&out_dir.join(STAGES[1].1)).map_err(|e| PipelineError::stage("prototypes")(boxed(e)))?
    } else {
        prototypes
    };

    let vocab = build_vocab(train, &cfg.policy.extra_tokens);
    let siblings = cfg.policy.siblings;
    let (reference, ref_sha) = st.run(
        "reference",
        json!({"corpus": corpus_sha, "config": policy_cfg, "vocab": vocab, "siblings": siblings}),
        || {
            let p0 = PolicyParams::<T>::new(vocab.iter().cloned(), policy_cfg.clone()).map_err(boxed)?;
            let examples = reference_examples(train, siblings, policy_cfg.max_len, policy_cfg.seed);
            Ok(pretrain_reference(&p0, &examples).map_err(boxed)?.params)
        },
        |v, p| save_policy(v, p).map_err(boxed),
        |p| load_policy(p).map_err(boxed),
    )?;

    let pref_cfg = cfg.preference_config();
    let (pairs, pref_sha) = st.run(
        "preferences",
        json!({"corpus": corpus_sha, "encoder": enc_sha, "prototypes": proto_sha, "reference": ref_sha, "config": pref_cfg}),
        || Ok(build_preferences(train, &reference, &encoder, &prototypes, &pref_cfg).map_err(boxed)?.pairs),
        |v: &Vec<PreferencePair<T>>, p| save_preferences(v, p).map_err(boxed),
        |p| load_preferences(p).map_err(boxed),
    )?;

    let dpo_cfg = cfg.dpo_config();
    let (policy, _) = st.run(
        "dpo",
        json!({"preferences": pref_sha, "reference": ref_sha, "config": dpo_cfg}),
        || {
            let examples: Vec<DpoExample> = pairs.iter().map(PreferencePair::to_dpo).collect();
            Ok(train_dpo(&examples, &reference, &dpo_cfg).map_err(boxed)?.params)
        },
        |v, p| save_policy(v, p).map_err(boxed),
        |p| load_policy(p).map_err(boxed),
    )?;

    Ok(TrainOutcome {
        bundle: ModelBundle {
            encoder,
            prototypes,
            reference,
            policy,
            chunker: cfg.chunker()?,
            config_fingerprint: st.manifest.config_fingerprint.clone(),
            seed: cfg.seed,
            default_n_sp_max: default_cap,
        },
        stages: st.statuses,
    })
}

/// Localize private spans of `text` and rewrite them under `budget`.
pub fn rewrite_online<T: Scalar>(
    bundle: &ModelBundle<T>,
    text: &str,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<RewriteResult, PipelineError> {
    let det = detect(text, &bundle.chunker, &bundle.encoder, &bundle.prototypes)
        .map_err(|e| PipelineError::stage("detect")(boxed(e)))?;
    dp_rewrite(text, &det, &bundle.policy, budget, seed).map_err(|e| PipelineError::stage("rewrite")(boxed(e)))
}

/// Strategy for replacing detected spans during evaluation.
pub trait SpanRewriter<T: Scalar> {
    fn rewrite(&self, text: &str, detection: &DetectionResult<T>, seed: u64) -> Result<RewriteResult, PipelineError>;
}

/// The differentially private rewriter.
pub struct DpRewriter<'a, T> {
    pub policy: &'a PolicyParams<T>,
    pub budget: PrivacyBudget,
}

impl<T: Scalar> SpanRewriter<T> for DpRewriter<'_, T> {
    fn rewrite(&self, text: &str, detection: &DetectionResult<T>, seed: u64) -> Result<RewriteResult, PipelineError> {
        dp_rewrite(text, detection, self.policy, &self.budget, seed).map_err(|e| PipelineError::stage("rewrite")(boxed(e)))
    }
}

/// Leaves every detected span unchanged; useful as a no-op baseline.
pub struct IdentityRewriter;

impl<T: Scalar> SpanRewriter<T> for IdentityRewriter {
    fn rewrite(&self, text: &str, detection: &DetectionResult<T>, _seed: u64) -> Result<RewriteResult, PipelineError> {
        let spans = crate::dp_sampler::merge_spans(detection.detected_chunks().map(|c| (c.start, c.end)).collect());
        let replacements = spans
            .into_iter()
            .map(|(start, end)| {
                let original = crate::corpus::char_slice(text, start, end).to_string();
                Replacement { start, end, replacement: original.clone(), original, regenerated: true }
            })
            .collect();
        Ok(RewriteResult {
            output_text: text.to_string(),
            replacements,
            n_sp: 0,
            eps_token: 0.0,
            realized_eps: 0.0,
            budget_exhausted: false,
            inferred_domain: Some(detection.inferred_domain.clone()),
        })
    }
}

/// Candidate chunks for evaluation, per the configured chunker variant.
pub fn eval_chunks(
    bundle_chunker: &Chunker,
    text: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<Chunk>, PipelineError> {
    let err = |e: crate::chunker::ChunkError| PipelineError::stage("detect")(boxed(e));
    let chunks = match cfg.eval.chunker {
        ChunkerVariant::Rule => bundle_chunker.segment(text).map_err(err)?,
        ChunkerVariant::Ngram => segment_ngrams(text, cfg.eval.ngram_max_len).map_err(err)?,
    };
    if cfg.eval.perturb > 0.0 {
        return perturb_boundaries(text, &chunks, cfg.eval.perturb, seed).map_err(err);
    }
    Ok(chunks)
}

fn doc_seed(seed: u64, tag: &str, doc_id: &str) -> u64 {
    crate::rng::derive_seed(seed, &format!("{tag}/{doc_id}"))
}

struct Detected<T> {
    doc_index: usize,
    detection: DetectionResult<T>,
}

fn detect_all<T: Scalar>(bundle: &ModelBundle<T>, test: &Corpus, cfg: &PipelineConfig) -> Result<Vec<Detected<T>>, PipelineError> {
    test.docs
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let chunks = eval_chunks(&bundle.chunker, &doc.text, cfg, doc_seed(cfg.seed, "perturb", &doc.id))?;
            let detection = detect_chunks(chunks, &bundle.encoder, &bundle.prototypes)
                .map_err(|e| PipelineError::stage("detect")(boxed(e)))?;
            Ok(Detected { doc_index: i, detection })
        })
        .collect()
}

/// SOI, DFS and mean ROUGE-L; `None` where undefined.
type SpanScores = (Option<f64>, Option<f64>, Option<f64>);

/// SOI, DFS and mean ROUGE-L over the regenerated spans of one rewrite.
fn span_scores<T: Scalar>(
    bundle: &ModelBundle<T>,
    domain: Option<&str>,
    result: &RewriteResult,
) -> Result<SpanScores, PipelineError> {
    let regen: Vec<&Replacement> = result.replacements.iter().filter(|r| r.regenerated).collect();
    if regen.is_empty() {
        return Ok((None, None, None));
    }
    let err = |e: crate::encoder::EncoderError| PipelineError::stage("evaluate")(boxed(e));
    let orig = encode_all(&bundle.encoder, &regen.iter().map(|r| r.original.as_str()).collect::<Vec<_>>()).map_err(err)?;
    let new = encode_all(&bundle.encoder, &regen.iter().map(|r| r.replacement.as_str()).collect::<Vec<_>>()).map_err(err)?;
    let perr = |e: crate::preference::PreferenceError| PipelineError::stage("evaluate")(boxed(e));
    let soi = reward_priv_embeddings(&orig, &new).map_err(perr)?.as_f64();
    let dfs = match domain.and_then(|d| bundle.prototypes.get(d)) {
        Some(set) => Some(reward_util_embeddings(&new, set).map_err(perr)?.as_f64()),
        None => None,
    };
    let rouge = regen.iter().map(|r| rouge_l(&r.replacement, &r.original)).sum::<f64>() / regen.len() as f64;
    Ok((Some(soi), dfs, Some(rouge)))
}

fn document_report<T: Scalar>(
    bundle: &ModelBundle<T>,
    doc: &crate::corpus::Document,
    det: &DetectionResult<T>,
    result: &RewriteResult,
) -> Result<DocumentReport, PipelineError> {
    let predicted = metrics::chunk_texts(det.detected_chunks());
    let m = localization_metrics(&predicted, doc.private_texts());
    let (soi, dfs, rouge) = span_scores(bundle, doc.domain.as_deref(), result)?;
    Ok(DocumentReport {
        doc_id: doc.id.clone(),
        domain: doc.domain.clone(),
        inferred_domain: det.inferred_domain.clone(),
        domain_correct: doc.domain.as_deref() == Some(det.inferred_domain.as_str()),
        precision: m.precision,
        recall: m.recall,
        pf1: m.pf1,
        n_chunks: det.chunks.len(),
        n_detected: det.detected.len(),
        soi,
        dfs,
        rouge_l: rouge,
        n_sp: result.n_sp,
        realized_eps: result.realized_eps,
        budget_exhausted: result.budget_exhausted,
        preserved: outside_spans_preserved(&doc.text, result),
    })
}

/// Per-document reports for `test` using `rewriter`.
pub fn evaluate_with<T: Scalar>(
    bundle: &ModelBundle<T>,
    test: &Corpus,
    cfg: &PipelineConfig,
    rewriter: &dyn SpanRewriter<T>,
) -> Result<Vec<DocumentReport>, PipelineError> {
    let dets = detect_all(bundle, test, cfg)?;
    dets.iter()
        .map(|d| {
            let doc = &test.docs[d.doc_index];
            let result = rewriter.rewrite(&doc.text, &d.detection, doc_seed(cfg.seed, "rewrite", &doc.id))?;
            document_report(bundle, doc, &d.detection, &result)
        })
        .collect()
}

/// Held-out DPO margin and the reward of sampled replacements from the
/// reference and trained policies.
pub fn dpo_report<T: Scalar>(
    bundle: &ModelBundle<T>,
    test: &Corpus,
    cfg: &PipelineConfig,
) -> Result<DpoReport, PipelineError> {
    let err = |e: crate::preference::PreferenceError| PipelineError::stage("evaluate")(boxed(e));
    let pref_cfg = PreferenceConfig { seed: cfg.stage_seed("heldout-preferences"), ..cfg.preference };
    let held = build_preferences(test, &bundle.reference, &bundle.encoder, &bundle.prototypes, &pref_cfg).map_err(err)?;
    let beta = cfg.policy.dpo.beta;
    let mut margins = Vec::new();
    for p in &held.pairs {
        let m = crate::policy::dpo_margin(&bundle.policy, &bundle.reference, &p.to_dpo(), beta)
            .map_err(|e| PipelineError::stage("evaluate")(boxed(e)))?;
        margins.push(m.as_f64());
    }
    let reward_of = |policy: &PolicyParams<T>| -> Result<Option<f64>, PipelineError> {
        let mut scores = Vec::new();
        for doc in &test.docs {
            let (Some(dom), input) = (doc.domain.as_ref(), PolicyInput::from_document(doc)) else { continue };
            let Some(set) = bundle.prototypes.get(dom) else { continue };
            if input.spans.is_empty() {
                continue;
            }
            let orig = encode_all(&bundle.encoder, &doc.private_texts()).map_err(|e| PipelineError::stage("evaluate")(boxed(e)))?;
            let mut rng = rng_for(cfg.stage_seed("reward-sample"), &doc.id);
            for _ in 0..cfg.preference.candidates {
                let reps = (0..input.spans.len())
                    .map(|i| sample_replacement_with(policy, &input, i, cfg.preference.temperature, &mut rng))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| PipelineError::stage("evaluate")(boxed(e)))?;
                let c = Candidate::score(reps, &orig, &bundle.encoder, set, cfg.preference.alpha).map_err(err)?;
                scores.push(c.r.as_f64());
            }
        }
        Ok(mean_opt(&scores))
    };
    Ok(DpoReport {
        heldout_pairs: held.pairs.len(),
        heldout_margin: mean_opt(&margins),
        reward_reference: reward_of(&bundle.reference)?,
        reward_policy: reward_of(&bundle.policy)?,
    })
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Retrain the DPO policy for every α of the grid (re-selecting pairs from
/// the same scored candidates) and measure mean SOI/DFS on `test`.
pub fn alpha_sweep<T: Scalar>(
    bundle: &ModelBundle<T>,
    train: &Corpus,
    test: &Corpus,
    cfg: &PipelineConfig,
) -> Result<Vec<SweepPoint>, PipelineError> {
    let budget = bundle.budget(cfg)?;
    let pref_cfg = cfg.preference_config();
    let mut scored: Vec<(PolicyInput, Vec<Candidate<T>>)> = Vec::new();
    for doc in &train.docs {
        match score_document(doc, &bundle.reference, &bundle.encoder, &bundle.prototypes, &pref_cfg) {
            Ok(c) => scored.push((PolicyInput::from_document(doc), c)),
            Err(e) => log::debug!("sweep: skipping {}: {e}", doc.id),
        }
    }
    let dets = detect_all(bundle, test, cfg)?;
    let mut soi = Vec::new();
    let mut dfs = Vec::new();
    for &alpha in &cfg.eval.alpha_grid {
        let mut examples = Vec::new();
        for (input, cands) in &scored {
            let r: Vec<T> = cands
                .iter()
                .map(|c| c.reward_at(alpha))
                .collect::<Result<_, _>>()
                .map_err(|e| PipelineError::stage("sweep")(boxed(e)))?;
            let (w, l) = select_pair(&r);
            if r[w] > r[l] {
                examples.push(DpoExample {
                    input: input.clone(),
                    chosen: cands[w].replacements.clone(),
                    rejected: cands[l].replacements.clone(),
                });
            }
        }
        let policy = if examples.is_empty() {
            bundle.reference.clone()
        } else {
            train_dpo(&examples, &bundle.reference, &cfg.dpo_config()).map_err(|e| PipelineError::stage("sweep")(boxed(e)))?.params
        };
        let rw = DpRewriter { policy: &policy, budget };
        let (mut s, mut d) = (Vec::new(), Vec::new());
        for det in &dets {
            let doc = &test.docs[det.doc_index];
            let res = rw.rewrite(&doc.text, &det.detection, doc_seed(cfg.seed, "rewrite", &doc.id))?;
            let (so, df, _) = span_scores(bundle, doc.domain.as_deref(), &res)?;
            s.extend(so);
            d.extend(df);
        }
        let (ms, md) = (mean_opt(&s).unwrap_or(0.0), mean_opt(&d).unwrap_or(0.0));
        log::info!("sweep alpha={alpha}: soi {ms:.4} dfs {md:.4}");
        soi.push(ms);
        dfs.push(md);
    }
    let (sd, dd) = (drop_metric(&soi), drop_metric(&dfs));
    Ok(cfg
        .eval
        .alpha_grid
        .iter()
        .enumerate()
        .map(|(i, &alpha)| SweepPoint {
            alpha,
            soi: soi[i],
            dfs: dfs[i],
            soi_drop: sd[i],
            dfs_drop: dd[i],
            sum_drop: sd[i] + dd[i],
        })
        .collect())
}

/// Full evaluation: detection and DP rewriting of every test document,
/// held-out DPO statistics, and the α-sweep when enabled (which needs `train`).
pub fn evaluate<T: Scalar>(
    bundle: &ModelBundle<T>,
    train: Option<&Corpus>,
    test: &Corpus,
    cfg: &PipelineConfig,
) -> Result<Report, PipelineError> {
    let budget = bundle.budget(cfg)?;
    let cal = calibrate(&budget).map_err(|e| PipelineError::Config(e.to_string()))?;
    let documents = evaluate_with(bundle, test, cfg, &DpRewriter { policy: &bundle.policy, budget })?;
    let dpo = Some(dpo_report(bundle, test, cfg)?);
    let alpha_sweep = match (cfg.eval.alpha_sweep, train) {
        (true, Some(tr)) => Some(alpha_sweep(bundle, tr, test, cfg)?),
        (true, None) => {
            log::warn!("alpha sweep requested but no training corpus given; skipping");
            None
        }
        _ => None,
    };
    Ok(Report {
        config: cfg.to_json(),
        config_fingerprint: cfg.fingerprint(),
        calibration: CalibrationReport {
            eps_text: budget.eps_text,
            r1: budget.r1,
            r2: budget.r2,
            n_sp_max: budget.n_sp_max,
            tau2: cal.tau2,
            eps_token: cal.eps_token,
        },
        aggregate: Aggregate::from_documents(&documents),
        documents,
        dpo,
        alpha_sweep,
    })
}

pub fn save_report(report: &Report, path: &Path) -> Result<(), PipelineError> {
    artifact::write_json(path, &report.to_value())?;
    Ok(())
}

/// Files written by [`run`].
pub const TRAIN_CORPUS_FILE: &str = "corpus_train.jsonl";
pub const TEST_CORPUS_FILE: &str = "corpus_test.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Prepare data, train every stage and evaluate, writing everything to `out_dir`.
pub fn run<T: Scalar>(cfg: &PipelineConfig, out_dir: &Path) -> Result<(TrainOutcome<T>, Report), PipelineError> {
    fs::create_dir_all(out_dir).map_err(artifact::io_err(out_dir))?;
    let (train, test) = prepare_corpora(cfg)?;
    save_corpus(&train, out_dir.join(TRAIN_CORPUS_FILE))?;
    save_corpus(&test, out_dir.join(TEST_CORPUS_FILE))?;
    let outcome = train_offline::<T>(&train, cfg, out_dir)?;
    let report = evaluate(&outcome.bundle, Some(&train), &test, cfg)?;
    save_report(&report, &out_dir.join(REPORT_FILE))?;
    Ok((outcome, report))
}

/// Paths of all artifacts a full run writes, in a fixed order.
pub fn artifact_paths(out_dir: &Path) -> Vec<PathBuf> {
    let mut v = vec![out_dir.join(TRAIN_CORPUS_FILE), out_dir.join(TEST_CORPUS_FILE)];
    v.extend(STAGES.iter().map(|(_, f)| out_dir.join(f)));
    v.push(out_dir.join(MANIFEST_FILE));
    v.push(out_dir.join(REPORT_FILE));
    v
}
