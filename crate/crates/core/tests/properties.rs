//! Property tests for module-level invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use damper_core::chunker::segment;
use damper_core::corpus::{parse_corpus, split_corpus, synth_corpus, write_corpus};
use damper_core::dp_sampler::{
    calibrate, clip, em_probabilities, em_sample, max_log_ratio, merge_spans, PrivacyBudget,
};
use damper_core::encoder::{batch_loss, encode_all, AnchorSet, ContrastiveBatch, EncoderConfig, EncoderParams};
use damper_core::localizer::otsu_threshold;
use damper_core::pipeline::{rouge_l, PipelineConfig};
use damper_core::policy::{dpo_grad, dpo_loss, DpoExample, PolicyConfig, PolicyInput, PolicyParams};
use damper_core::preference::{reward, reward_priv, select_pair};
use damper_core::prototypes::{build_prototypes, ClusterMethod};

const WORDS: [&str; 10] = ["amber", "basil", "cedar", "dune", "ember", "fern", "grove", "heath", "iris", "juniper"];

fn synth(seed: u64, docs: usize) -> damper_core::corpus::Corpus {
    let mut spec = PipelineConfig::default().synth_spec();
    spec.seed = seed;
    spec.docs_per_domain = docs;
    synth_corpus(&spec).unwrap()
}

fn policy(seed: u64) -> PolicyParams<f64> {
    let cfg = PolicyConfig { feature_dim: 32, max_len: 3, learning_rate: 0.1, epochs: 1, batch_size: 1, seed };
    let mut p = PolicyParams::new(WORDS.iter().copied(), cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for w in &mut p.weights {
        *w = StandardNormal.sample(&mut r);
    }
    p
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..=3).prop_map(|w| w.join(" "))
}

/// Text "w0 w1 ... wn" with one span per selected word.
fn text_and_spans() -> impl Strategy<Value = (String, Vec<(usize, usize)>)> {
    prop::collection::vec((prop::sample::select(&WORDS[..]), any::<bool>()), 2..8).prop_map(|ws| {
        let mut text = String::new();
        let mut spans = Vec::new();
        for (i, (w, pick)) in ws.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            let s = text.len();
            text.push_str(w);
            if *pick || (i == 0 && !ws.iter().any(|x| x.1)) {
                spans.push((s, text.len()));
            }
        }
        (text, spans)
    })
}

// ---------------------------------------------------------------- corpus

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), frac in 0.1f64..0.9) {
        let c = synth(seed, 6);
        let (a, b) = split_corpus(&c, frac, seed).unwrap();
        let ids = |x: &damper_core::corpus::Corpus| x.docs.iter().map(|d| d.id.clone()).collect::<BTreeSet<_>>();
        let (ia, ib) = (ids(&a), ids(&b));
        prop_assert!(ia.is_disjoint(&ib));
        prop_assert_eq!(ia.union(&ib).cloned().collect::<BTreeSet<_>>(), ids(&c));
    }

    #[test]
    fn corpus_round_trips(seed in any::<u64>()) {
        let c = synth(seed, 4);
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let back = parse_corpus(&buf[..]).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn synthetic_spans_are_vocabulary_phrases(seed in any::<u64>()) {
        let cfg = PipelineConfig::default();
        let c = synth(seed, 5);
        for d in &c.docs {
            let vocab = cfg.corpus.domains.iter().find(|v| Some(&v.name) == d.domain.as_ref()).unwrap();
            for s in &d.spans {
                let t = d.span_text(s).to_string();
                let pool = if s.private { &vocab.private_vocab } else { &vocab.neutral_vocab };
                prop_assert!(pool.contains(&t), "{t:?} not in vocabulary");
            }
        }
    }
}

// ---------------------------------------------------------------- chunker

proptest! {
    #[test]
    fn chunks_address_their_text(text in "[a-zA-Z ,.;!?]{1,80}") {
        prop_assume!(!text.trim().is_empty());
        let chunks = segment(&text).unwrap();
        prop_assert_eq!(&chunks, &segment(&text).unwrap());
        let chars: Vec<char> = text.chars().collect();
        for c in &chunks {
            prop_assert!(c.start < c.end && c.end <= chars.len());
            prop_assert_eq!(chars[c.start..c.end].iter().collect::<String>(), c.text.clone());
            prop_assert!(!c.text.contains(['.', '!', '?', ';']), "chunk {:?} crosses strong punctuation", c.text);
        }
    }
}

#[test]
fn synthetic_spans_are_recovered_as_chunks() {
    for seed in 0..5 {
        for d in &synth(seed, 10).docs {
            let chunks: BTreeSet<(usize, usize)> = segment(&d.text).unwrap().iter().map(|c| (c.start, c.end)).collect();
            for s in &d.spans {
                assert!(chunks.contains(&(s.start, s.end)), "{}: span {:?} missing", d.id, d.span_text(s));
            }
        }
    }
}

// ---------------------------------------------------------------- encoder

fn small_encoder(seed: u64) -> EncoderParams<f64> {
    EncoderParams::init(EncoderConfig {
        embed_dim: 6,
        feature_dim: 32,
        tau1: 0.2,
        learning_rate: 0.01,
        epochs: 1,
        batch_size: 4,
        init_scale: 0.5,
        seed,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), texts in prop::collection::vec(phrase(), 1..6)) {
        let e = small_encoder(seed);
        let z = encode_all(&e, &texts).unwrap();
        for (a, za) in z.iter().enumerate() {
            let n: f64 = za.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
            for zb in &z[a..] {
                let c = za.cos(zb);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            }
        }
    }

    #[test]
    fn infonce_ignores_member_order(seed in any::<u64>(), texts in prop::collection::vec(phrase(), 6)) {
        let e = small_encoder(seed);
        let a = AnchorSet { anchor: 0, positives: vec![1, 2], negatives: vec![3, 4, 5] };
        let b = AnchorSet { anchor: 0, positives: vec![2, 1], negatives: vec![5, 3, 4] };
        let la = batch_loss(&e, &ContrastiveBatch { texts: texts.clone(), anchors: vec![a] }).unwrap();
        let lb = batch_loss(&e, &ContrastiveBatch { texts, anchors: vec![b] }).unwrap();
        prop_assert!((la - lb).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- prototypes

#[test]
fn prototypes_are_unit_and_deterministic() {
    let c = synth(3, 8);
    let e = EncoderParams::<f64>::init(PipelineConfig::default().encoder_config()).unwrap();
    for method in [ClusterMethod::Finch, ClusterMethod::Kmeans, ClusterMethod::Mean] {
        let mut opts = PipelineConfig::default().prototype_options();
        opts.method = method;
        let a = build_prototypes(&c, &e, &opts).unwrap();
        assert_eq!(a, build_prototypes(&c, &e, &opts).unwrap());
        for set in a.values() {
            assert!(!set.prototypes.is_empty());
            for p in &set.prototypes {
                let n: f64 = p.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}

// ---------------------------------------------------------------- localizer

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn otsu_shifts_with_constant(v in prop::collection::vec(-64i32..64, 2..64), shift in -16i32..16) {
        // eighths keep the arithmetic exact
        let a: Vec<f64> = v.iter().map(|&x| x as f64 / 8.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + shift as f64).collect();
        let (sa, sb) = (otsu_threshold(&a).unwrap(), otsu_threshold(&b).unwrap());
        prop_assert_eq!(sa.split, sb.split);
        prop_assert_eq!(sa.threshold + shift as f64, sb.threshold);
        let det = |x: &[f64], g: f64| x.iter().enumerate().filter(|(_, &y)| y > g).map(|(i, _)| i).collect::<Vec<_>>();
        prop_assert_eq!(det(&a, sa.threshold), det(&b, sb.threshold));
    }

    #[test]
    fn otsu_split_separates(v in prop::collection::vec(-1.0f64..1.0, 2..64)) {
        let s = otsu_threshold(&v).unwrap();
        prop_assert!(s.split >= 1 && s.split < v.len());
        let below = v.iter().filter(|&&x| x <= s.threshold).count();
        if v.iter().any(|&x| x != v[0]) {
            prop_assert_eq!(below, s.split);
        }
    }
}

#[test]
fn raising_an_affinity_keeps_it_detected() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..2000 {
        let n = rand::Rng::random_range(&mut r, 2..24);
        let mut v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
        let g = otsu_threshold(&v).unwrap().threshold;
        let detected: Vec<usize> = (0..n).filter(|&i| v[i] > g).collect();
        let Some(&i) = detected.first() else { continue };
        v[i] += rand::Rng::random_range(&mut r, 0.0..1.0);
        let g2 = otsu_threshold(&v).unwrap().threshold;
        violations += usize::from(v[i] <= g2);
    }
    assert_eq!(violations, 0);
}

// ---------------------------------------------------------------- preference

proptest! {
    #[test]
    fn reward_is_affine_in_alpha(p in -1.0f64..1.0, u in -1.0f64..1.0) {
        let r = |a| reward(p, u, a).unwrap();
        prop_assert!((r(0.5) - (r(0.0) + r(1.0)) / 2.0).abs() < 1e-12);
        prop_assert!((r(1.0) - r(0.0) - (u - p)).abs() < 1e-12);
    }

    #[test]
    fn pair_selection_matches_rescoring(scores in prop::collection::vec(-1.0f64..1.0, 2..12)) {
        let (w, l) = select_pair(&scores);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(w, scores.iter().position(|&s| s == max).unwrap());
        prop_assert_eq!(l, scores.iter().position(|&s| s == min).unwrap());
    }

    #[test]
    fn identity_rewrite_has_zero_privacy_reward(seed in any::<u64>(), spans in prop::collection::vec(phrase(), 1..4)) {
        let e = small_encoder(seed);
        let r: f64 = reward_priv(&spans, &spans, &e).unwrap();
        prop_assert_eq!(r, 0.0);
    }
}

// ---------------------------------------------------------------- policy

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_distributions_sum_to_one(seed in any::<u64>(), (text, spans) in text_and_spans(), hist in prop::collection::vec(1usize..WORDS.len() + 1, 0..3)) {
        let p = policy(seed);
        let ctx = p.span_context(&PolicyInput::new(text, spans), 0).unwrap();
        let total: f64 = p.step_log_probs(&ctx, &hist).iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dpo_at_reference_is_ln2(seed in any::<u64>(), (text, spans) in text_and_spans(), w in phrase(), l in phrase()) {
        let p = policy(seed);
        let n = spans.len();
        let ex = DpoExample { input: PolicyInput::new(text, spans), chosen: vec![w; n], rejected: vec![l; n] };
        let loss = dpo_loss(&p, &p, &ex, 0.1).unwrap();
        prop_assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (g_loss, _) = dpo_grad(&p, &p, &[ex], 0.1).unwrap();
        prop_assert!((g_loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dpo_ignores_uniform_logit_shift(seed in any::<u64>(), (text, spans) in text_and_spans(), w in phrase(), l in phrase(), col in 0usize..32, c in -3.0f64..3.0) {
        let reference = policy(seed ^ 1);
        let theta = policy(seed);
        let mut shifted = theta.clone();
        // one feature column feeds every token's logit equally
        let h = shifted.config.feature_dim;
        for row in 0..shifted.vocab_size() {
            shifted.weights[row * h + col] += c;
        }
        let n = spans.len();
        let ex = DpoExample { input: PolicyInput::new(text, spans), chosen: vec![w; n], rejected: vec![l; n] };
        let a = dpo_loss(&theta, &reference, &ex, 0.5).unwrap();
        let b = dpo_loss(&shifted, &reference, &ex, 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------- dp sampler

proptest! {
    #[test]
    fn budget_identity_is_tight_and_conservative(eps in 0.5f64..500.0, n in 1usize..2000, r1 in -10.0f64..10.0, w in 0.1f64..30.0) {
        let b = PrivacyBudget::new(eps, r1, r1 + w, n).unwrap();
        let c = calibrate(&b).unwrap();
        let spent = n as f64 * c.eps_token;
        prop_assert!(spent <= eps);
        prop_assert!((spent - eps).abs() <= 1e-12 * eps);
        prop_assert!((c.eps_token - 2.0 * w / c.tau2).abs() <= 1e-12 * c.eps_token);
    }

    #[test]
    fn mechanism_ratio_is_bounded(u in prop::collection::vec(-50.0f64..50.0, 2..12), v_seed in any::<u64>(), tau2 in 0.5f64..30.0) {
        let mut r = ChaCha8Rng::seed_from_u64(v_seed);
        let v: Vec<f64> = (0..u.len()).map(|_| rand::Rng::random_range(&mut r, -50.0..50.0)).collect();
        let (cu, cv) = (clip(&u, 5.0, 20.0), clip(&v, 5.0, 20.0));
        prop_assert!(cu.iter().all(|x| (5.0..=20.0).contains(x)));
        prop_assert_eq!(clip(&cu, 5.0, 20.0), cu.clone());
        let p: f64 = em_probabilities(&cu, tau2).iter().sum();
        prop_assert!((p - 1.0).abs() < 1e-12);
        prop_assert!(max_log_ratio(&cu, &cv, tau2) <= 2.0 * 15.0 / tau2 + 1e-9);
    }

    #[test]
    fn merged_spans_cover_the_union(spans in prop::collection::vec((0usize..40, 1usize..8), 0..8)) {
        let spans: Vec<(usize, usize)> = spans.into_iter().map(|(s, l)| (s, s + l)).collect();
        let merged = merge_spans(spans.clone());
        for w in merged.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        let cover = |v: &[(usize, usize)]| v.iter().flat_map(|&(s, e)| s..e).collect::<BTreeSet<_>>();
        prop_assert_eq!(cover(&merged), cover(&spans));
    }

    #[test]
    fn rouge_is_bounded_and_reflexive(a in phrase(), b in phrase()) {
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, rouge_l(&b, &a));
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
    }
}

#[test]
fn sampled_tokens_follow_mechanism_probabilities() {
    let u = [20.0, 12.0, 9.0, 5.0];
    let tau2 = 6.0;
    let p = em_probabilities(&u, tau2);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for seed in 0..n {
        counts[em_sample(&u, tau2, seed)] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / n as f64;
        // five standard errors
        let se = (p[i] * (1.0 - p[i]) / n as f64).sqrt();
        assert!((f - p[i]).abs() <= 5.0 * se + 1e-4, "token {i}: {f} vs {}", p[i]);
    }
}

#[test]
fn closed_form_two_token_probability() {
    let p = em_probabilities(&[20.0, 5.0], 15.0);
    assert!((p[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
}
