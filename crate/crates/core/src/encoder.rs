//! Span encoder: hashed n-gram features, a trainable linear projection and
//! L2 normalization, trained with a multi-positive InfoNCE objective.
//!
//! For an anchor `z` with positive set `A` and negative set `N`,
//!
//! ```text
//! loss = -log( Σ_{a∈A} exp(cos(z,a)/τ) / Σ_{g∈A∪N} exp(cos(z,g)/τ) )
//! ```
//!
//! Embeddings are unit-norm, so cosine is a dot product everywhere downstream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{self, ArtifactError};
use crate::corpus::Corpus;
use crate::optim::Adam;
use crate::rng::{fnv1a, rng_for};
use crate::scalar::{dot, log_sum_exp, mean, Scalar};

pub const MIN_FEATURE_DIM: usize = 16;
const MODEL_FORMAT: &str = "damper-encoder";
const MODEL_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("non-finite value while encoding {0:?}; parameters are corrupted")]
    NonFinite(String),
    #[error("anchor has no positives")]
    EmptyPositives,
    #[error("invalid encoder configuration: {0}")]
    BadConfig(String),
    #[error("training corpus: {0}")]
    Precondition(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// Sparse hashed feature counts, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    pub dim: usize,
    pub entries: Vec<(usize, T)>,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn feature_index(tag: &str, gram: &str, dim: usize) -> usize {
    let mut bytes = Vec::with_capacity(tag.len() + 1 + gram.len());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.push(b':');
    bytes.extend_from_slice(gram.as_bytes());
    (fnv1a(&bytes) % dim as u64) as usize
}

/// Case-folded character 2/3/4-grams plus word unigrams, hashed into `dim` buckets.
///
/// # Panics
/// If `dim < 16`.
pub fn featurize<T: Scalar>(text: &str, dim: usize) -> FeatureVector<T> {
    assert!(dim >= MIN_FEATURE_DIM, "feature dimension {dim} below {MIN_FEATURE_DIM}");
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut gram = String::new();
    for n in 2..=4 {
        let tag = ["", "", "c2", "c3", "c4"][n];
        for w in chars.windows(n) {
            gram.clear();
            gram.extend(w);
            *counts.entry(feature_index(tag, &gram, dim)).or_default() += 1;
        }
    }
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        *counts.entry(feature_index("w", word, dim)).or_default() += 1;
    }
    FeatureVector { dim, entries: counts.into_iter().map(|(i, c)| (i, T::of_usize(c))).collect() }
}

/// Training hyperparameters and shape of the projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub tau1: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            feature_dim: 4096,
            tau1: 0.1,
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 32,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::BadConfig(m.into()));
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2");
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return bad("feature_dim must be at least 16");
        }
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return bad("tau1 must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        Ok(())
    }
}

/// A unit-norm span embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T>(Vec<T>);

impl<T: Scalar> Embedding<T> {
    /// Normalize `v`; a zero vector maps to `e1`.
    pub fn from_vec(mut v: Vec<T>) -> Self {
        if !crate::scalar::normalize_in_place(&mut v) {
            let d = v.len();
            v = Self::e1(d).0;
        }
        Embedding(v)
    }

    pub fn e1(d: usize) -> Self {
        let mut v = vec![T::zero(); d];
        v[0] = T::one();
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cos(&self, other: &Self) -> T {
        dot(&self.0, &other.0).max(-T::one()).min(T::one())
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

impl<T> AsRef<[T]> for Embedding<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// Projection matrix (row-major, `embed_dim x feature_dim`) and its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub weights: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Gaussian initialization seeded from `config.seed`.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "encoder/init");
        let normal = Normal::new(0.0, config.init_scale).map_err(|e| EncoderError::BadConfig(e.to_string()))?;
        let n = config.embed_dim * config.feature_dim;
        let weights = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
        Ok(Self { config, weights })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Unnormalized projection `W f`.
    pub fn project(&self, f: &FeatureVector<T>) -> Vec<T> {
        let d = self.embed_dim();
        let big_d = self.feature_dim();
        let mut y = vec![T::zero(); d];
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.weights[r * big_d..(r + 1) * big_d];
            *yr = f.entries.iter().fold(T::zero(), |acc, &(c, v)| acc + row[c] * v);
        }
        y
    }

    pub fn encode_features(&self, f: &FeatureVector<T>) -> Embedding<T> {
        Embedding::from_vec(self.project(f))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// `h(s) = normalize(W · featurize(s))`.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, text: &str) -> Result<Embedding<T>, EncoderError> {
    let f = featurize(text, params.feature_dim());
    let y = params.project(&f);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite(text.to_string()));
    }
    Ok(Embedding::from_vec(y))
}

pub fn encode_all<T: Scalar, S: AsRef<str>>(
    params: &EncoderParams<T>,
    texts: &[S],
) -> Result<Vec<Embedding<T>>, EncoderError> {
    texts.iter().map(|t| encode(params, t.as_ref())).collect()
}

/// Multi-positive InfoNCE for one anchor, log-sum-exp stabilized.
pub fn infonce_loss<T: Scalar>(
    anchor: &Embedding<T>,
    positives: &[Embedding<T>],
    negatives: &[Embedding<T>],
    tau1: T,
) -> Result<T, EncoderError> {
    if positives.is_empty() {
        return Err(EncoderError::EmptyPositives);
    }
    let pos: Vec<T> = positives.iter().map(|a| anchor.cos(a) / tau1).collect();
    let all: Vec<T> = pos.iter().copied().chain(negatives.iter().map(|g| anchor.cos(g) / tau1)).collect();
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// One anchor of a contrastive batch; indices refer to `ContrastiveBatch::texts`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub texts: Vec<String>,
    pub anchors: Vec<AnchorSet>,
}

struct Forward<T> {
    feats: Vec<FeatureVector<T>>,
    norms: Vec<T>,
    z: Vec<Embedding<T>>,
}

fn forward<T: Scalar>(params: &EncoderParams<T>, feats: Vec<FeatureVector<T>>) -> Forward<T> {
    let mut norms = Vec::with_capacity(feats.len());
    let mut z = Vec::with_capacity(feats.len());
    for f in &feats {
        let y = params.project(f);
        norms.push(crate::scalar::norm(&y));
        z.push(Embedding::from_vec(y));
    }
    Forward { feats, norms, z }
}

fn anchor_terms<T: Scalar>(z: &[Embedding<T>], a: &AnchorSet, tau: T) -> (T, Vec<(usize, T)>) {
    let za = &z[a.anchor];
    let pos: Vec<T> = a.positives.iter().map(|&j| za.cos(&z[j]) / tau).collect();
    let neg: Vec<T> = a.negatives.iter().map(|&j| za.cos(&z[j]) / tau).collect();
    let all: Vec<T> = pos.iter().chain(&neg).copied().collect();
    let lse_all = log_sum_exp(&all);
    let lse_pos = log_sum_exp(&pos);
    // d loss / d cos_j = (softmax_all_j - [j∈A] softmax_pos_j) / τ
    let mut g = Vec::with_capacity(all.len());
    for (k, &j) in a.positives.iter().enumerate() {
        g.push((j, ((all[k] - lse_all).exp() - (pos[k] - lse_pos).exp()) / tau));
    }
    for (k, &j) in a.negatives.iter().enumerate() {
        g.push((j, (neg[k] - lse_all).exp() / tau));
    }
    (lse_all - lse_pos, g)
}

fn check_batch(batch: &ContrastiveBatch) -> Result<(), EncoderError> {
    let n = batch.texts.len();
    for a in &batch.anchors {
        if a.positives.is_empty() {
            return Err(EncoderError::EmptyPositives);
        }
        let in_range = std::iter::once(&a.anchor).chain(&a.positives).chain(&a.negatives).all(|&i| i < n);
        if !in_range {
            return Err(EncoderError::Precondition("anchor index out of range".into()));
        }
    }
    Ok(())
}

/// Mean InfoNCE over the anchors of `batch`.
pub fn batch_loss<T: Scalar>(params: &EncoderParams<T>, batch: &ContrastiveBatch) -> Result<T, EncoderError> {
    check_batch(batch)?;
    let feats = batch.texts.iter().map(|t| featurize(t, params.feature_dim())).collect();
    Ok(loss_of(params, &forward(params, feats), &batch.anchors))
}

fn loss_of<T: Scalar>(params: &EncoderParams<T>, fw: &Forward<T>, anchors: &[AnchorSet]) -> T {
    if anchors.is_empty() {
        return T::zero();
    }
    let tau = T::of(params.config.tau1);
    let total: T = anchors.iter().map(|a| anchor_terms(&fw.z, a, tau).0).sum();
    total / T::of_usize(anchors.len())
}

/// Mean batch loss and its exact gradient with respect to the projection matrix.
pub fn infonce_grad<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &ContrastiveBatch,
) -> Result<(T, Vec<T>), EncoderError> {
    check_batch(batch)?;
    let feats = batch.texts.iter().map(|t| featurize(t, params.feature_dim())).collect();
    let fw = forward(params, feats);
    Ok(grad_of(params, &fw, &batch.anchors))
}

fn grad_of<T: Scalar>(params: &EncoderParams<T>, fw: &Forward<T>, anchors: &[AnchorSet]) -> (T, Vec<T>) {
    let d = params.embed_dim();
    let big_d = params.feature_dim();
    let mut grad = vec![T::zero(); d * big_d];
    if anchors.is_empty() {
        return (T::zero(), grad);
    }
    let tau = T::of(params.config.tau1);
    let scale = T::one() / T::of_usize(anchors.len());
    let mut gz: Vec<Vec<T>> = vec![vec![T::zero(); d]; fw.z.len()];
    let mut loss = T::zero();
    for a in anchors {
        let (l, gs) = anchor_terms(&fw.z, a, tau);
        loss += l;
        let za = fw.z[a.anchor].as_slice().to_vec();
        for (j, g) in gs {
            let g = g * scale;
            let zj = fw.z[j].as_slice();
            for r in 0..d {
                gz[a.anchor][r] += g * zj[r];
                gz[j][r] += g * za[r];
            }
        }
    }
    for (i, gzi) in gz.iter().enumerate() {
        let n = fw.norms[i];
        if n == T::zero() {
            // constant e1 fallback carries no gradient
            continue;
        }
        let zi = fw.z[i].as_slice();
        let proj = dot(zi, gzi);
        for r in 0..d {
            let gy = (gzi[r] - proj * zi[r]) / n;
            if gy == T::zero() {
                continue;
            }
            let row = &mut grad[r * big_d..(r + 1) * big_d];
            for &(c, v) in &fw.feats[i].entries {
                row[c] += gy * v;
            }
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone)]
pub struct EncoderTraining<T> {
    pub params: EncoderParams<T>,
    /// Full-pass loss before the first update.
    pub initial_loss: T,
    /// Full-pass loss after the last update.
    pub final_loss: T,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<T>,
}

#[derive(Debug, Clone)]
struct TrainItem {
    text: String,
    domain: Option<String>,
}

fn training_items(corpus: &Corpus) -> Result<Vec<TrainItem>, EncoderError> {
    let by_domain = corpus.private_texts_by_domain();
    if by_domain.len() < 2 {
        return Err(EncoderError::Precondition(format!(
            "need at least 2 domains with private spans, found {}",
            by_domain.len()
        )));
    }
    for (dom, texts) in &by_domain {
        if texts.len() < 2 {
            return Err(EncoderError::Precondition(format!(
                "domain {dom:?} has {} distinct private spans, need at least 2",
                texts.len()
            )));
        }
    }
    let nonprivate = corpus.nonprivate_texts();
    if nonprivate.is_empty() {
        return Err(EncoderError::Precondition("no non-private spans".into()));
    }
    let mut items: Vec<TrainItem> = by_domain
        .into_iter()
        .flat_map(|(dom, texts)| texts.into_iter().map(move |text| TrainItem { text, domain: Some(dom.clone()) }))
        .collect();
    items.extend(nonprivate.into_iter().map(|text| TrainItem { text, domain: None }));
    Ok(items)
}

/// In-batch anchors: every private item with at least one same-domain
/// positive and one negative in the batch.
fn anchors_for(items: &[&TrainItem]) -> Vec<AnchorSet> {
    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let Some(dom) = &it.domain else { continue };
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (j, other) in items.iter().enumerate() {
            if i == j {
                continue;
            }
            match &other.domain {
                Some(d) if d == dom => positives.push(j),
                _ => negatives.push(j),
            }
        }
        if !positives.is_empty() && !negatives.is_empty() {
            out.push(AnchorSet { anchor: i, positives, negatives });
        }
    }
    out
}

/// Mini-batch training of the projection on the distinct annotated spans of `corpus`.
pub fn train_encoder<T: Scalar>(
    corpus: &Corpus,
    params0: &EncoderParams<T>,
) -> Result<EncoderTraining<T>, EncoderError> {
    params0.config.validate()?;
    let items = training_items(corpus)?;
    let cfg = params0.config.clone();
    let feats: Vec<FeatureVector<T>> = items.iter().map(|it| featurize(&it.text, cfg.feature_dim)).collect();

    let all_refs: Vec<&TrainItem> = items.iter().collect();
    let full_anchors = anchors_for(&all_refs);
    let full_loss = |p: &EncoderParams<T>| loss_of(p, &forward(p, feats.clone()), &full_anchors);

    let mut params = params0.clone();
    let initial_loss = full_loss(&params);
    let mut opt = Adam::new(params.weights.len(), cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &format!("encoder/epoch/{epoch}"));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch_items: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let anchors = anchors_for(&batch_items);
            if anchors.is_empty() {
                continue;
            }
            let fw = forward(&params, chunk.iter().map(|&i| feats[i].clone()).collect());
            let (loss, grad) = grad_of(&params, &fw, &anchors);
            losses.push(loss);
            opt.step(&mut params.weights, &grad);
        }
        let epoch_loss = mean(&losses).unwrap_or_else(T::zero);
        log::debug!("encoder epoch {epoch}: loss {epoch_loss}");
        epoch_losses.push(epoch_loss);
    }
    if !params.is_finite() {
        return Err(EncoderError::NonFinite("<training>".into()));
    }
    let final_loss = full_loss(&params);
    log::info!("encoder trained: full-pass loss {initial_loss} -> {final_loss}");
    Ok(EncoderTraining { params, initial_loss, final_loss, epoch_losses })
}

/// Mean pairwise cosines used to check contrastive separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub intra_domain: f64,
    pub cross_domain: f64,
    pub private_vs_nonprivate: f64,
}

pub fn separation<T: Scalar>(params: &EncoderParams<T>, corpus: &Corpus) -> Result<Separation, EncoderError> {
    let items = training_items(corpus)?;
    let z = encode_all(params, &items.iter().map(|i| i.text.as_str()).collect::<Vec<_>>())?;
    let (mut intra, mut cross, mut pn) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let c = z[i].cos(&z[j]).as_f64();
            match (&items[i].domain, &items[j].domain) {
                (Some(a), Some(b)) if a == b => intra.push(c),
                (Some(_), Some(_)) => cross.push(c),
                (Some(_), None) | (None, Some(_)) => pn.push(c),
                (None, None) => {}
            }
        }
    }
    let m = |v: &[f64]| mean(v).unwrap_or(0.0);
    Ok(Separation { intra_domain: m(&intra), cross_domain: m(&cross), private_vs_nonprivate: m(&pn) })
}

pub fn save_encoder<T: Scalar>(params: &EncoderParams<T>, path: &Path) -> Result<(), EncoderError> {
    let c = &params.config;
    let v = json!({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "header": {"d": c.embed_dim, "D": c.feature_dim, "tau1": c.tau1, "seed": c.seed},
        "training": {
            "learning_rate": c.learning_rate,
            "epochs": c.epochs,
            "batch_size": c.batch_size,
            "init_scale": c.init_scale,
        },
        "weights": artifact::floats_to_value(&params.weights),
    });
    artifact::write_json(path, &v)?;
    Ok(())
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<EncoderParams<T>, EncoderError> {
    use artifact::{field, field_f64, field_u64};
    let v = artifact::read_json(path)?;
    artifact::check_header(path, &v, MODEL_FORMAT, MODEL_VERSION)?;
    let h = field(path, &v, "header")?;
    let t = field(path, &v, "training")?;
    let config = EncoderConfig {
        embed_dim: field_u64(path, h, "d")? as usize,
        feature_dim: field_u64(path, h, "D")? as usize,
        tau1: field_f64(path, h, "tau1")?,
        seed: field_u64(path, h, "seed")?,
        learning_rate: field_f64(path, t, "learning_rate")?,
        epochs: field_u64(path, t, "epochs")? as usize,
        batch_size: field_u64(path, t, "batch_size")? as usize,
        init_scale: field_f64(path, t, "init_scale")?,
    };
    config.validate()?;
    let weights = artifact::value_to_floats(path, field(path, &v, "weights")?)?;
    if weights.len() != config.embed_dim * config.feature_dim {
        return Err(ArtifactError::format(path, "weight count does not match d x D").into());
    }
    let p = EncoderParams { config, weights };
    if !p.is_finite() {
        return Err(EncoderError::NonFinite(path.display().to_string()));
    }
    Ok(p)
}
