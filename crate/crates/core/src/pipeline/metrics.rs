//! Evaluation metrics that are not tied to a single module.

use crate::chunker::Chunk;
use crate::corpus::{char_slice, char_to_byte};
use crate::dp_sampler::RewriteResult;

fn rouge_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F-measure (case-insensitive, punctuation trimmed).
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Drop of each value from the best one, after min-max normalization over the
/// sweep. A constant series has zero drop everywhere.
pub fn drop_metric(values: &[f64]) -> Vec<f64> {
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| 1.0 - (v - lo) / (hi - lo)).collect()
}

/// Check that `result.output_text` equals the input with only the recorded
/// replacements substituted, walking both strings independently.
pub fn outside_spans_preserved(input: &str, result: &RewriteResult) -> bool {
    let out = result.output_text.as_bytes();
    let mut pos = 0usize;
    let mut cursor = 0usize;
    for r in &result.replacements {
        let gap = &input.as_bytes()[char_to_byte(input, cursor)..char_to_byte(input, r.start)];
        if out.get(pos..pos + gap.len()) != Some(gap) {
            return false;
        }
        pos += gap.len();
        if char_slice(input, r.start, r.end) != r.original {
            return false;
        }
        let rep = r.replacement.as_bytes();
        if out.get(pos..pos + rep.len()) != Some(rep) {
            return false;
        }
        pos += rep.len();
        cursor = r.end;
    }
    let tail = &input.as_bytes()[char_to_byte(input, cursor)..];
    out.get(pos..) == Some(tail)
}

/// Texts of the detected chunks.
pub fn chunk_texts<'a>(chunks: impl IntoIterator<Item = &'a Chunk>) -> Vec<String> {
    chunks.into_iter().map(|c| c.text.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp_sampler::Replacement;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert!((rouge_l("a b c", "a c") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(rouge_l("Cough,", "cough"), 1.0);
    }

    #[test]
    fn drop_is_zero_at_best() {
        let d = drop_metric(&[0.2, 0.6, 0.4]);
        for (a, b) in d.iter().zip([1.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(drop_metric(&[0.3, 0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn preservation_walk() {
        let input = "she has chest pain today";
        let good = RewriteResult {
            output_text: "she has item today".into(),
            replacements: vec![Replacement {
                start: 8,
                end: 18,
                original: "chest pain".into(),
                replacement: "item".into(),
                regenerated: true,
            }],
            n_sp: 2,
            eps_token: 1.0,
            realized_eps: 2.0,
            budget_exhausted: false,
            inferred_domain: None,
        };
        assert!(outside_spans_preserved(input, &good));
        let mut bad = good.clone();
        bad.output_text = "she had item today".into();
        assert!(!outside_spans_preserved(input, &bad));
    }
}
