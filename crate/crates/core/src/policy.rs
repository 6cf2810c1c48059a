//! Toy span-replacement policy.
//!
//! A log-linear autoregressive model over a small token vocabulary. At every
//! decoding step the logits are `W · x` where `x` is a bag of hashed context
//! features: a bias, the step position, the previous token, the tokens already
//! emitted for this span, the words of the original span and the words of the
//! whole document. Token 0 is the end marker; once `max_len` tokens have been
//! emitted the end marker is forced, so sequence probabilities sum to one.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{self, ArtifactError};
use crate::corpus::{char_slice, Document};
use crate::optim::Adam;
use crate::rng::{fnv1a, rng_for};
use crate::scalar::{inverse_cdf, log_sigmoid, log_softmax, mean, sigmoid, softmax, Scalar};

pub const END: &str = "</s>";
pub const END_ID: usize = 0;
pub const MIN_VOCAB: usize = 4;
const MODEL_FORMAT: &str = "damper-policy";
const MODEL_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token {0:?} is not in the policy vocabulary")]
    OutOfVocab(String),
    #[error("vocabulary needs at least {MIN_VOCAB} tokens including the end marker, got {0}")]
    SmallVocab(usize),
    #[error("duplicate or reserved vocabulary token {0:?}")]
    BadToken(String),
    #[error("invalid policy configuration: {0}")]
    BadConfig(String),
    #[error("expected {expected} replacements, got {got}")]
    Misaligned { expected: usize, got: usize },
    #[error("replacement of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("span index {0} out of range")]
    BadSpan(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("policy weights became non-finite")]
    NonFinite,
    #[error("policies have different shapes")]
    ShapeMismatch,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// Architecture and pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub feature_dim: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { feature_dim: 1024, max_len: 4, learning_rate: 0.05, epochs: 15, batch_size: 16, seed: 0 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::BadConfig(m.to_string()));
        if self.feature_dim < 8 {
            return bad("feature_dim must be at least 8");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Text plus the character ranges to be replaced, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyInput {
    pub text: String,
    pub spans: Vec<(usize, usize)>,
}

impl PolicyInput {
    pub fn new(text: impl Into<String>, spans: Vec<(usize, usize)>) -> Self {
        Self { text: text.into(), spans }
    }

    /// The document's annotated private spans, sorted by offset.
    pub fn from_document(doc: &Document) -> Self {
        Self { text: doc.text.clone(), spans: doc.private_spans().iter().map(|s| (s.start, s.end)).collect() }
    }

    pub fn span_text(&self, i: usize) -> &str {
        let (s, e) = self.spans[i];
        char_slice(&self.text, s, e)
    }
}

/// Lowercased alphanumeric words.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Static (per-span) feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanContext {
    features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub config: PolicyConfig,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// Row-major `vocab_size x feature_dim`.
    pub weights: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    /// Zero-weight (uniform) policy over `END` followed by `tokens`.
    pub fn new<I, S>(tokens: I, config: PolicyConfig) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        config.validate()?;
        let mut vocab = vec![END.to_string()];
        let mut index = HashMap::from([(END.to_string(), END_ID)]);
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) || index.contains_key(&t) {
                return Err(PolicyError::BadToken(t));
            }
            index.insert(t.clone(), vocab.len());
            vocab.push(t);
        }
        if vocab.len() < MIN_VOCAB {
            return Err(PolicyError::SmallVocab(vocab.len()));
        }
        let weights = vec![T::zero(); vocab.len() * config.feature_dim];
        Ok(Self { config, vocab, index, weights })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.config.feature_dim == other.config.feature_dim
            && self.config.max_len == other.config.max_len
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace tokens of a replacement; the end marker is not a valid token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, PolicyError> {
        text.split_whitespace()
            .map(|t| match self.index.get(t) {
                Some(&i) if i != END_ID => Ok(i),
                _ => Err(PolicyError::OutOfVocab(t.to_string())),
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }

    fn hash(&self, tag: &str, value: &str) -> usize {
        (fnv1a(format!("{tag}:{value}").as_bytes()) % self.config.feature_dim as u64) as usize
    }

    pub fn span_context(&self, input: &PolicyInput, span: usize) -> Result<SpanContext, PolicyError> {
        if span >= input.spans.len() {
            return Err(PolicyError::BadSpan(span));
        }
        let mut features = vec![self.hash("bias", "")];
        let span_words: BTreeSet<String> = words(input.span_text(span)).into_iter().collect();
        features.extend(span_words.iter().map(|w| self.hash("span", w)));
        let doc_words: BTreeSet<String> = words(&input.text).into_iter().collect();
        features.extend(doc_words.iter().map(|w| self.hash("doc", w)));
        Ok(SpanContext { features })
    }

    fn step_features(&self, ctx: &SpanContext, history: &[usize]) -> Vec<usize> {
        let mut f = ctx.features.clone();
        f.push(self.hash("pos", &history.len().to_string()));
        let prev = history.last().map_or("<s>", |&t| self.vocab[t].as_str());
        f.push(self.hash("prev", prev));
        let seen: BTreeSet<usize> = history.iter().copied().collect();
        f.extend(seen.iter().map(|&t| self.hash("hist", &self.vocab[t])));
        f
    }

    fn logits_of(&self, feats: &[usize]) -> Vec<T> {
        let h = self.config.feature_dim;
        (0..self.vocab.len())
            .map(|v| {
                let row = &self.weights[v * h..(v + 1) * h];
                feats.iter().map(|&f| row[f]).sum()
            })
            .collect()
    }

    /// Next-token logits given the tokens emitted so far for this span.
    pub fn step_logits(&self, ctx: &SpanContext, history: &[usize]) -> Vec<T> {
        self.logits_of(&self.step_features(ctx, history))
    }

    pub fn step_log_probs(&self, ctx: &SpanContext, history: &[usize]) -> Vec<T> {
        log_softmax(&self.step_logits(ctx, history))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        if tokens.len() > self.config.max_len {
            return Err(PolicyError::TooLong { len: tokens.len(), max_len: self.config.max_len });
        }
        match tokens.iter().find(|&&t| t == END_ID || t >= self.vocab.len()) {
            Some(&t) => Err(PolicyError::OutOfVocab(self.vocab.get(t).cloned().unwrap_or_else(|| format!("#{t}")))),
            None => Ok(()),
        }
    }

    /// Log-probability of one span's tokens followed by the end marker
    /// (which is free once `max_len` tokens are out).
    pub fn span_logprob(&self, ctx: &SpanContext, tokens: &[usize]) -> Result<T, PolicyError> {
        self.check_tokens(tokens)?;
        let mut lp = T::zero();
        for l in 0..=tokens.len() {
            if l == self.config.max_len {
                break;
            }
            let target = tokens.get(l).copied().unwrap_or(END_ID);
            lp += self.step_log_probs(ctx, &tokens[..l])[target];
        }
        Ok(lp)
    }

    /// Add `scale · ∇ span_logprob` into `grad`.
    fn add_span_grad(&self, ctx: &SpanContext, tokens: &[usize], scale: T, grad: &mut [T]) {
        let h = self.config.feature_dim;
        for l in 0..=tokens.len() {
            if l == self.config.max_len {
                break;
            }
            let target = tokens.get(l).copied().unwrap_or(END_ID);
            let feats = self.step_features(ctx, &tokens[..l]);
            let p = softmax(&self.logits_of(&feats));
            for (v, &pv) in p.iter().enumerate() {
                let ind = if v == target { T::one() } else { T::zero() };
                let c = scale * (ind - pv);
                let row = &mut grad[v * h..(v + 1) * h];
                for &f in &feats {
                    row[f] += c;
                }
            }
        }
    }

    fn sample_span_with(&self, ctx: &SpanContext, temperature: f64, rng: &mut impl Rng) -> Vec<usize> {
        let inv_t = T::of(1.0 / temperature);
        let mut out = Vec::new();
        while out.len() < self.config.max_len {
            let logits: Vec<T> = self.step_logits(ctx, &out).into_iter().map(|x| x * inv_t).collect();
            let t = inverse_cdf(&softmax(&logits), T::of(rng.random::<f64>()));
            if t == END_ID {
                break;
            }
            out.push(t);
        }
        out
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn greedy_span(&self, ctx: &SpanContext) -> Vec<usize> {
        let mut out = Vec::new();
        while out.len() < self.config.max_len {
            let logits = self.step_logits(ctx, &out);
            let mut best = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            if best == END_ID {
                break;
            }
            out.push(best);
        }
        out
    }
}

/// Pre-tokenized spans of one input.
#[derive(Debug, Clone)]
struct Prepared {
    contexts: Vec<SpanContext>,
}

fn prepare<T: Scalar>(params: &PolicyParams<T>, input: &PolicyInput) -> Result<Prepared, PolicyError> {
    let contexts = (0..input.spans.len()).map(|i| params.span_context(input, i)).collect::<Result<_, _>>()?;
    Ok(Prepared { contexts })
}

fn tokenize_all<T: Scalar>(
    params: &PolicyParams<T>,
    input: &PolicyInput,
    replacements: &[String],
) -> Result<Vec<Vec<usize>>, PolicyError> {
    if replacements.len() != input.spans.len() {
        return Err(PolicyError::Misaligned { expected: input.spans.len(), got: replacements.len() });
    }
    replacements.iter().map(|r| params.tokenize(r)).collect()
}

fn prepared_logprob<T: Scalar>(params: &PolicyParams<T>, p: &Prepared, toks: &[Vec<usize>]) -> Result<T, PolicyError> {
    let mut lp = T::zero();
    for (ctx, t) in p.contexts.iter().zip(toks) {
        lp += params.span_logprob(ctx, t)?;
    }
    Ok(lp)
}

/// Sum of span log-probabilities of `replacements` (one per span of `input`).
pub fn seq_logprob<T: Scalar>(
    params: &PolicyParams<T>,
    input: &PolicyInput,
    replacements: &[String],
) -> Result<T, PolicyError> {
    let toks = tokenize_all(params, input, replacements)?;
    prepared_logprob(params, &prepare(params, input)?, &toks)
}

/// Sample a replacement for one span by ancestral sampling at `temperature`.
pub fn sample_replacement<T: Scalar>(
    params: &PolicyParams<T>,
    input: &PolicyInput,
    span: usize,
    temperature: f64,
    seed: u64,
) -> Result<String, PolicyError> {
    let mut rng = rng_for(seed, &format!("policy/sample/{span}"));
    sample_replacement_with(params, input, span, temperature, &mut rng)
}

pub fn sample_replacement_with<T: Scalar>(
    params: &PolicyParams<T>,
    input: &PolicyInput,
    span: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<String, PolicyError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::BadTemperature(temperature));
    }
    let ctx = params.span_context(input, span)?;
    Ok(params.detokenize(&params.sample_span_with(&ctx, temperature, rng)))
}

pub fn greedy_replacement<T: Scalar>(params: &PolicyParams<T>, input: &PolicyInput, span: usize) -> Result<String, PolicyError> {
    let ctx = params.span_context(input, span)?;
    Ok(params.detokenize(&params.greedy_span(&ctx)))
}

/// An input with target replacements for maximum-likelihood training.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyExample {
    pub input: PolicyInput,
    pub replacements: Vec<String>,
}

struct MleItem {
    prepared: Prepared,
    tokens: Vec<Vec<usize>>,
}

fn mle_items<T: Scalar>(params: &PolicyParams<T>, examples: &[PolicyExample]) -> Result<Vec<MleItem>, PolicyError> {
    examples
        .iter()
        .map(|ex| {
            Ok(MleItem { prepared: prepare(params, &ex.input)?, tokens: tokenize_all(params, &ex.input, &ex.replacements)? })
        })
        .collect()
}

fn mle_loss_grad<T: Scalar>(params: &PolicyParams<T>, items: &[&MleItem]) -> Result<(T, Vec<T>), PolicyError> {
    let mut grad = vec![T::zero(); params.weights.len()];
    let scale = T::one() / T::of_usize(items.len());
    let mut loss = T::zero();
    for it in items {
        loss -= prepared_logprob(params, &it.prepared, &it.tokens)?;
        for (ctx, t) in it.prepared.contexts.iter().zip(&it.tokens) {
            params.add_span_grad(ctx, t, -scale, &mut grad);
        }
    }
    Ok((loss * scale, grad))
}

/// Mean negative log-likelihood of the examples.
pub fn mle_loss<T: Scalar>(params: &PolicyParams<T>, examples: &[PolicyExample]) -> Result<T, PolicyError> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    let mut total = T::zero();
    for ex in examples {
        total -= seq_logprob(params, &ex.input, &ex.replacements)?;
    }
    Ok(total / T::of_usize(examples.len()))
}

/// Mean negative log-likelihood and its gradient with respect to the weights.
pub fn mle_grad<T: Scalar>(params: &PolicyParams<T>, examples: &[PolicyExample]) -> Result<(T, Vec<T>), PolicyError> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    let items = mle_items(params, examples)?;
    mle_loss_grad(params, &items.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone)]
pub struct PolicyTraining<T> {
    pub params: PolicyParams<T>,
    pub initial_loss: T,
    pub final_loss: T,
    pub epoch_losses: Vec<T>,
}

/// Maximum-likelihood training from `params0` (usually the zero policy).
pub fn pretrain_reference<T: Scalar>(
    params0: &PolicyParams<T>,
    examples: &[PolicyExample],
) -> Result<PolicyTraining<T>, PolicyError> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    let cfg = params0.config.clone();
    let items = mle_items(params0, examples)?;
    let all: Vec<&MleItem> = items.iter().collect();
    let mut params = params0.clone();
    let initial_loss = mle_loss_grad(&params, &all)?.0;
    let mut opt = Adam::new(params.weights.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &format!("policy/mle/epoch/{epoch}")));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MleItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grad) = mle_loss_grad(&params, &batch)?;
            losses.push(loss);
            opt.step(&mut params.weights, &grad);
        }
        let l = mean(&losses).unwrap_or_else(T::zero);
        log::debug!("reference epoch {epoch}: nll {l}");
        epoch_losses.push(l);
    }
    if !params.is_finite() {
        return Err(PolicyError::NonFinite);
    }
    let final_loss = mle_loss_grad(&params, &all)?.0;
    log::info!("reference policy trained: nll {initial_loss} -> {final_loss}");
    Ok(PolicyTraining { params, initial_loss, final_loss, epoch_losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1, learning_rate: 0.02, epochs: 20, batch_size: 8, seed: 0 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PolicyError::BadBeta(self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(PolicyError::BadConfig("dpo learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A preferred and a dispreferred set of replacements for the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub input: PolicyInput,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
}

struct DpoItem<T> {
    prepared: Prepared,
    chosen: Vec<Vec<usize>>,
    rejected: Vec<Vec<usize>>,
    ref_chosen: T,
    ref_rejected: T,
}

fn dpo_items<T: Scalar>(reference: &PolicyParams<T>, examples: &[DpoExample]) -> Result<Vec<DpoItem<T>>, PolicyError> {
    examples
        .iter()
        .map(|ex| {
            let prepared = prepare(reference, &ex.input)?;
            let chosen = tokenize_all(reference, &ex.input, &ex.chosen)?;
            let rejected = tokenize_all(reference, &ex.input, &ex.rejected)?;
            let ref_chosen = prepared_logprob(reference, &prepared, &chosen)?;
            let ref_rejected = prepared_logprob(reference, &prepared, &rejected)?;
            Ok(DpoItem { prepared, chosen, rejected, ref_chosen, ref_rejected })
        })
        .collect()
}

fn item_margin<T: Scalar>(theta: &PolicyParams<T>, it: &DpoItem<T>, beta: T) -> Result<T, PolicyError> {
    let dw = prepared_logprob(theta, &it.prepared, &it.chosen)? - it.ref_chosen;
    let dl = prepared_logprob(theta, &it.prepared, &it.rejected)? - it.ref_rejected;
    Ok(beta * (dw - dl))
}

fn dpo_loss_grad<T: Scalar>(
    theta: &PolicyParams<T>,
    items: &[&DpoItem<T>],
    beta: T,
) -> Result<(T, Vec<T>), PolicyError> {
    let mut grad = vec![T::zero(); theta.weights.len()];
    let n = T::of_usize(items.len());
    let mut loss = T::zero();
    for it in items {
        let m = item_margin(theta, it, beta)?;
        loss -= log_sigmoid(m);
        // d(-log σ(m))/dθ = -σ(-m) · β (∇logπ(y_w) - ∇logπ(y_l))
        let c = sigmoid(-m) * beta / n;
        for (ctx, t) in it.prepared.contexts.iter().zip(&it.chosen) {
            theta.add_span_grad(ctx, t, -c, &mut grad);
        }
        for (ctx, t) in it.prepared.contexts.iter().zip(&it.rejected) {
            theta.add_span_grad(ctx, t, c, &mut grad);
        }
    }
    Ok((loss / n, grad))
}

/// `β(Δ_w − Δ_l)` where `Δ = log π_θ − log π_ref`.
pub fn dpo_margin<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    ex: &DpoExample,
    beta: f64,
) -> Result<T, PolicyError> {
    if !theta.same_shape(reference) {
        return Err(PolicyError::ShapeMismatch);
    }
    let it = dpo_items(reference, std::slice::from_ref(ex))?.remove(0);
    item_margin(theta, &it, T::of(beta))
}

/// `−log σ(β(Δ_w − Δ_l))`.
pub fn dpo_loss<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    ex: &DpoExample,
    beta: f64,
) -> Result<T, PolicyError> {
    if !(beta > 0.0) {
        return Err(PolicyError::BadBeta(beta));
    }
    Ok(-log_sigmoid(dpo_margin(theta, reference, ex, beta)?))
}

/// Mean DPO loss over `examples` and its gradient with respect to `theta`.
pub fn dpo_grad<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    examples: &[DpoExample],
    beta: f64,
) -> Result<(T, Vec<T>), PolicyError> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    if !theta.same_shape(reference) {
        return Err(PolicyError::ShapeMismatch);
    }
    let items = dpo_items(reference, examples)?;
    dpo_loss_grad(theta, &items.iter().collect::<Vec<_>>(), T::of(beta))
}

#[derive(Debug, Clone)]
pub struct DpoTraining<T> {
    pub params: PolicyParams<T>,
    /// Mean loss at θ = reference (ln 2).
    pub initial_loss: T,
    pub final_loss: T,
    pub epoch_losses: Vec<T>,
}

/// DPO starting from the reference policy.
pub fn train_dpo<T: Scalar>(
    examples: &[DpoExample],
    reference: &PolicyParams<T>,
    config: &DpoConfig,
) -> Result<DpoTraining<T>, PolicyError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    let beta = T::of(config.beta);
    let items = dpo_items(reference, examples)?;
    let all: Vec<&DpoItem<T>> = items.iter().collect();
    let mut theta = reference.clone();
    let initial_loss = dpo_loss_grad(&theta, &all, beta)?.0;
    let mut opt = Adam::new(theta.weights.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, &format!("policy/dpo/epoch/{epoch}")));
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&DpoItem<T>> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grad) = dpo_loss_grad(&theta, &batch, beta)?;
            losses.push(loss);
            opt.step(&mut theta.weights, &grad);
        }
        let l = mean(&losses).unwrap_or_else(T::zero);
        log::debug!("dpo epoch {epoch}: loss {l}");
        epoch_losses.push(l);
    }
    if !theta.is_finite() {
        return Err(PolicyError::NonFinite);
    }
    let final_loss = dpo_loss_grad(&theta, &all, beta)?.0;
    log::info!("dpo trained: loss {initial_loss} -> {final_loss}");
    Ok(DpoTraining { params: theta, initial_loss, final_loss, epoch_losses })
}

pub fn save_policy<T: Scalar>(params: &PolicyParams<T>, path: &Path) -> Result<(), PolicyError> {
    let c = &params.config;
    let v = json!({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "header": {
            "vocab": params.vocab,
            "feature_dim": c.feature_dim,
            "max_len": c.max_len,
            "seed": c.seed,
        },
        "training": {
            "learning_rate": c.learning_rate,
            "epochs": c.epochs,
            "batch_size": c.batch_size,
        },
        "weights": artifact::floats_to_value(&params.weights),
    });
    artifact::write_json(path, &v)?;
    Ok(())
}

pub fn load_policy<T: Scalar>(path: &Path) -> Result<PolicyParams<T>, PolicyError> {
    use artifact::{field, field_f64, field_u64};
    let v = artifact::read_json(path)?;
    artifact::check_header(path, &v, MODEL_FORMAT, MODEL_VERSION)?;
    let h = field(path, &v, "header")?;
    let t = field(path, &v, "training")?;
    let vocab: Vec<String> = field(path, h, "vocab")?
        .as_array()
        .and_then(|a| a.iter().map(|x| x.as_str().map(String::from)).collect())
        .ok_or_else(|| ArtifactError::format(path, "\"vocab\" is not an array of strings"))?;
    if vocab.first().map(String::as_str) != Some(END) {
        return Err(ArtifactError::format(path, "vocabulary must start with the end marker").into());
    }
    let config = PolicyConfig {
        feature_dim: field_u64(path, h, "feature_dim")? as usize,
        max_len: field_u64(path, h, "max_len")? as usize,
        seed: field_u64(path, h, "seed")?,
        learning_rate: field_f64(path, t, "learning_rate")?,
        epochs: field_u64(path, t, "epochs")? as usize,
        batch_size: field_u64(path, t, "batch_size")? as usize,
    };
    let mut p = PolicyParams::new(vocab.into_iter().skip(1), config)?;
    let weights = artifact::value_to_floats(path, field(path, &v, "weights")?)?;
    if weights.len() != p.weights.len() {
        return Err(ArtifactError::format(path, "weight count does not match vocab x feature_dim").into());
    }
    p.weights = weights;
    if !p.is_finite() {
        return Err(PolicyError::NonFinite);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(max_len: usize) -> PolicyParams<f64> {
        let cfg = PolicyConfig { feature_dim: 16, max_len, ..Default::default() };
        PolicyParams::new(["a", "b", "c"], cfg).unwrap()
    }

    fn input() -> PolicyInput {
        PolicyInput::new("she has a cough today", vec![(10, 15)])
    }

    fn randomize(p: &mut PolicyParams<f64>, seed: u64) {
        let mut rng = rng_for(seed, "test");
        for w in &mut p.weights {
            *w = rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn uniform_logprob() {
        let p = tiny(4);
        let lp = seq_logprob(&p, &input(), &["a b".to_string()]).unwrap();
        assert!((lp + 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_sequences_sum_to_one() {
        let mut p = tiny(3);
        randomize(&mut p, 1);
        let ctx = p.span_context(&input(), 0).unwrap();
        let mut total = 0.0;
        let mut stack = vec![vec![]];
        while let Some(seq) = stack.pop() {
            total += p.span_logprob(&ctx, &seq).unwrap().exp();
            if seq.len() < 3 {
                for t in 1..4 {
                    let mut s = seq.clone();
                    s.push(t);
                    stack.push(s);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = tiny(2);
        assert!(matches!(p.tokenize("a zz"), Err(PolicyError::OutOfVocab(_))));
        assert!(matches!(p.tokenize(END), Err(PolicyError::OutOfVocab(_))));
        assert!(matches!(
            seq_logprob(&p, &input(), &["a b c".to_string()]),
            Err(PolicyError::TooLong { .. })
        ));
        assert!(matches!(seq_logprob(&p, &input(), &[]), Err(PolicyError::Misaligned { .. })));
        assert!(matches!(PolicyParams::<f64>::new(["a", "b"], PolicyConfig::default()), Err(PolicyError::SmallVocab(3))));
        assert!(matches!(PolicyParams::<f64>::new(["a", "a", "b"], PolicyConfig::default()), Err(PolicyError::BadToken(_))));
    }

    #[test]
    fn tiny_temperature_matches_greedy() {
        let mut p = tiny(4);
        randomize(&mut p, 2);
        let g = greedy_replacement(&p, &input(), 0).unwrap();
        for seed in 0..20 {
            assert_eq!(sample_replacement(&p, &input(), 0, 1e-6, seed).unwrap(), g);
        }
        assert!(matches!(sample_replacement(&p, &input(), 0, 0.0, 0), Err(PolicyError::BadTemperature(_))));
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let mut p = tiny(3);
        randomize(&mut p, 3);
        let ex = DpoExample { input: input(), chosen: vec!["a".into()], rejected: vec!["b c".into()] };
        let l = dpo_loss(&p, &p, &ex, 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pretraining_overfits_single_pair() {
        let p0 = PolicyParams::<f64>::new(["x", "y", "z", "w"], PolicyConfig { feature_dim: 64, epochs: 200, ..Default::default() }).unwrap();
        let ex = PolicyExample { input: input(), replacements: vec!["y w".into()] };
        let t = pretrain_reference(&p0, std::slice::from_ref(&ex)).unwrap();
        assert!(t.final_loss < 0.05, "{}", t.final_loss);
        assert!(t.final_loss < t.initial_loss);
    }

    #[test]
    fn model_file_round_trip() {
        let mut p = tiny(3);
        randomize(&mut p, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        save_policy(&p, &path).unwrap();
        let q: PolicyParams<f64> = load_policy(&path).unwrap();
        assert_eq!(p, q);
    }
}
