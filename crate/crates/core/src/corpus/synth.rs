//! Seeded synthetic multi-domain corpus generator.
//!
//! Each document is a sequence of template sentences. A template carries a
//! single `{}` slot that receives an enumeration of one to three phrases
//! ("a", "a and b", "a, b, and c"). Every inserted phrase is annotated with
//! its exact character offsets and its privacy flag.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSpan, Corpus, CorpusError, Document};
use crate::rng::rng_for;

const SLOT: &str = "{}";
const STRONG_PUNCT: [char; 4] = ['.', '!', '?', ';'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVocab {
    pub name: String,
    pub private_vocab: Vec<String>,
    pub neutral_vocab: Vec<String>,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<DomainVocab>,
    pub docs_per_domain: usize,
    /// Inclusive `[min, max]` number of inserted phrases per document.
    pub spans_per_doc: [usize; 2],
    pub seed: u64,
}

fn bad(msg: impl Into<String>) -> CorpusError {
    CorpusError::InvalidSynthSpec(msg.into())
}

fn check_phrase(domain: &str, p: &str) -> Result<(), CorpusError> {
    if p.trim().is_empty() || p.trim() != p {
        return Err(bad(format!("domain {domain}: phrase {p:?} is empty or padded")));
    }
    if p.contains(|c: char| c == ',' || STRONG_PUNCT.contains(&c)) {
        return Err(bad(format!("domain {domain}: phrase {p:?} contains a separator")));
    }
    if p.split_whitespace().any(|w| w.eq_ignore_ascii_case("and") || w.eq_ignore_ascii_case("or")) {
        return Err(bad(format!("domain {domain}: phrase {p:?} contains a coordinating conjunction")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.domains.is_empty() {
            return Err(bad("no domains"));
        }
        if self.docs_per_domain == 0 {
            return Err(bad("docs_per_domain must be at least 1"));
        }
        let [lo, hi] = self.spans_per_doc;
        if lo == 0 || lo > hi {
            return Err(bad(format!("spans_per_doc range [{lo}, {hi}] is invalid")));
        }
        let mut names = HashSet::new();
        let mut private_owner: std::collections::HashMap<String, &str> = Default::default();
        for d in &self.domains {
            if d.name.is_empty() || !names.insert(d.name.as_str()) {
                return Err(bad(format!("domain name {:?} empty or repeated", d.name)));
            }
            if d.private_vocab.len() < 2 || d.neutral_vocab.len() < 2 {
                return Err(bad(format!("domain {} needs at least 2 private and 2 neutral phrases", d.name)));
            }
            if d.templates.is_empty() {
                return Err(bad(format!("domain {} has no templates", d.name)));
            }
            let privs: BTreeSet<String> = d.private_vocab.iter().map(|p| p.to_lowercase()).collect();
            let neus: BTreeSet<String> = d.neutral_vocab.iter().map(|p| p.to_lowercase()).collect();
            if privs.len() != d.private_vocab.len() || neus.len() != d.neutral_vocab.len() {
                return Err(bad(format!("domain {} repeats a phrase", d.name)));
            }
            if let Some(p) = privs.intersection(&neus).next() {
                return Err(bad(format!("domain {}: {p:?} is both private and neutral", d.name)));
            }
            for p in d.private_vocab.iter().chain(&d.neutral_vocab) {
                check_phrase(&d.name, p)?;
            }
            for p in &privs {
                if let Some(other) = private_owner.insert(p.clone(), &d.name) {
                    return Err(bad(format!("private phrase {p:?} shared by domains {other} and {}", d.name)));
                }
            }
            for t in &d.templates {
                let slots: Vec<_> = t.match_indices(SLOT).collect();
                if slots.len() != 1 {
                    return Err(bad(format!("template {t:?} must contain exactly one slot")));
                }
                let after = &t[slots[0].0 + SLOT.len()..];
                if !(after.is_empty() || after.starts_with(STRONG_PUNCT)) {
                    return Err(bad(format!("template {t:?}: slot must end its clause")));
                }
            }
        }
        Ok(())
    }
}

struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    fn push(&mut self, s: &str) -> (usize, usize) {
        let start = self.chars;
        self.text.push_str(s);
        self.chars += s.chars().count();
        (start, self.chars)
    }
}

/// Generate a corpus from `spec`. Deterministic in `spec.seed`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut docs = Vec::with_capacity(spec.domains.len() * spec.docs_per_domain);
    for dom in &spec.domains {
        for j in 0..spec.docs_per_domain {
            let mut rng = rng_for(spec.seed, &format!("synth/{}/{j}", dom.name));
            let [lo, hi] = spec.spans_per_doc;
            let cap = dom.private_vocab.len() + dom.neutral_vocab.len();
            let n = rng.random_range(lo..=hi).min(cap);
            let coin_private = (0..n).filter(|_| rng.random_bool(0.5)).count();
            let n_priv = coin_private.clamp(1, n.min(dom.private_vocab.len()));
            let n_neu = (n - n_priv).min(dom.neutral_vocab.len());

            let mut items: Vec<(&str, bool)> = dom
                .private_vocab
                .choose_multiple(&mut rng, n_priv)
                .map(|p| (p.as_str(), true))
                .chain(dom.neutral_vocab.choose_multiple(&mut rng, n_neu).map(|p| (p.as_str(), false)))
                .collect();
            items.shuffle(&mut rng);

            let mut b = Builder { text: String::new(), chars: 0 };
            let mut spans = Vec::new();
            let mut rest = &items[..];
            while !rest.is_empty() {
                let k = rng.random_range(1..=3usize).min(rest.len());
                let (group, tail) = rest.split_at(k);
                rest = tail;
                let template = dom.templates.choose(&mut rng).expect("validated non-empty");
                let (before, after) = template.split_once(SLOT).expect("validated slot");
                if !b.text.is_empty() {
                    b.push(" ");
                }
                b.push(before);
                let conj = if rng.random_bool(0.8) { "and" } else { "or" };
                let oxford = rng.random_bool(0.5);
                for (i, &(phrase, private)) in group.iter().enumerate() {
                    if i > 0 {
                        let last = i + 1 == group.len();
                        let sep = match (group.len(), last) {
                            (2, _) => format!(" {conj} "),
                            (_, true) if oxford => format!(", {conj} "),
                            (_, true) => format!(" {conj} "),
                            _ => ", ".to_string(),
                        };
                        b.push(&sep);
                    }
                    let (start, end) = b.push(phrase);
                    let label = private.then(|| dom.name.clone());
                    spans.push(AnnotatedSpan { start, end, private, label });
                }
                b.push(after);
            }
            docs.push(Document {
                id: format!("{}-{j:04}", dom.name),
                domain: Some(dom.name.clone()),
                text: b.text,
                spans,
            });
        }
    }
    Corpus::new(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec {
            domains: vec![
                DomainVocab {
                    name: "med".into(),
                    private_vocab: vec!["cough up blood".into(), "fatigue".into(), "chest pain".into()],
                    neutral_vocab: vec!["cough".into(), "runny nose".into()],
                    templates: vec!["The patient reports {}.".into()],
                },
                DomainVocab {
                    name: "law".into(),
                    private_vocab: vec!["armed robbery".into(), "fraud".into()],
                    neutral_vocab: vec!["parking ticket".into(), "hearing date".into()],
                    templates: vec!["He was charged with {}.".into()],
                },
            ],
            docs_per_domain: 10,
            spans_per_doc: [2, 4],
            seed: 11,
        }
    }

    #[test]
    fn generates_expected_shape() {
        let c = synth_corpus(&tiny()).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.docs.iter().all(|d| d.spans.iter().any(|s| s.private)));
        assert_eq!(c, synth_corpus(&tiny()).unwrap());
    }

    #[test]
    fn annotations_match_vocabulary() {
        let spec = tiny();
        let c = synth_corpus(&spec).unwrap();
        for d in &c.docs {
            let dom = spec.domains.iter().find(|v| Some(&v.name) == d.domain.as_ref()).unwrap();
            for s in &d.spans {
                let t = d.span_text(s).to_string();
                let vocab = if s.private { &dom.private_vocab } else { &dom.neutral_vocab };
                assert!(vocab.contains(&t), "{t:?} not in vocab");
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = tiny();
        s.domains[0].private_vocab.truncate(1);
        assert!(s.validate().is_err());

        let mut s = tiny();
        s.domains[1].private_vocab.push("fatigue".into());
        assert!(s.validate().unwrap_err().to_string().contains("shared"));

        let mut s = tiny();
        s.domains[0].neutral_vocab.push("salt and pepper".into());
        assert!(s.validate().is_err());

        let mut s = tiny();
        s.domains[0].templates = vec!["{} is noted in the file.".into()];
        assert!(s.validate().is_err());

        let mut s = tiny();
        s.domains[0].private_vocab.clear();
        assert!(synth_corpus(&s).is_err());
    }
}
