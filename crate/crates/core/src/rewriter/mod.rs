//! Candidate generation, label verification and greedy candidate selection.
//!
//! A document is rewritten by asking the generator backend for several
//! candidates, keeping only those the verifier (a separate, stateless call)
//! assigns the original label, and finally picking the accepted candidate
//! with the lowest shortcut score, provided it beats the original.

pub mod backend;
pub mod http;
pub mod mock;
mod prompt;

use std::collections::BTreeSet;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassId, LabelSet, LabeledDocument};
pub use backend::{BackendError, CallCounter, GenerationRequest, LlmCalls, RewriteBackend, VerificationRequest};
pub use prompt::{build_prompt, build_verify_prompt, PromptTemplate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("prompt template references unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("prompt rendered empty")]
    EmptyPrompt,
    #[error("no label name for class {0}")]
    MissingLabelName(ClassId),
    #[error("backend failed for document `{doc_id}`: {source}")]
    Backend {
        doc_id: String,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Sampling temperature for verification calls.
    pub verifier_temperature: f64,
    pub candidates_per_doc: usize,
    pub max_retries: u32,
    /// Base delay between retries; doubled on each attempt.
    pub retry_backoff_ms: u64,
    pub backend: BackendKind,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 0.7,
            verifier_temperature: 0.0,
            candidates_per_doc: 3,
            max_retries: 3,
            retry_backoff_ms: 500,
            backend: BackendKind::Mock,
            model: "gpt-3.5-turbo".into(),
            timeout_secs: 60,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(self.temperature >= 0.0) || !(self.verifier_temperature >= 0.0) {
            return Err("temperatures must be non-negative".into());
        }
        if self.candidates_per_doc == 0 {
            return Err("candidates_per_doc must be positive".into());
        }
        Ok(())
    }
}

fn with_retries<T>(
    config: &GeneratorConfig,
    counter: &CallCounter,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(value) => return Ok(value),
            Err(e) if e.is_retryable() && attempt < config.max_retries => {
                log::warn!("backend call failed ({e}); retry {} of {}", attempt + 1, config.max_retries);
                counter.record_retry();
                if config.retry_backoff_ms > 0 {
                    thread::sleep(Duration::from_millis(config.retry_backoff_ms << attempt.min(6)));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Asks the generator for rewrites of `doc`. Returns at most
/// `candidates_per_doc` distinct, non-empty texts that differ from the
/// original; an empty result means the original should be kept.
pub fn generate_candidates(
    doc: &LabeledDocument,
    labels: &LabelSet,
    template: &PromptTemplate,
    config: &GeneratorConfig,
    backend: &dyn RewriteBackend,
    counter: &CallCounter,
) -> Result<Vec<String>, RewriteError> {
    let prompt = build_prompt(doc, template, labels, config.candidates_per_doc)?;
    let label_name = labels.name(doc.label()).ok_or(RewriteError::MissingLabelName(doc.label()))?;
    let request = GenerationRequest {
        doc_id: doc.id(),
        prompt: &prompt,
        original: doc.mutable_text(),
        context: doc.context_text(),
        label_name,
        n: config.candidates_per_doc,
        temperature: config.temperature,
        top_p: config.top_p,
    };
    let raw = with_retries(config, counter, || {
        counter.record_generation();
        backend.generate(&request)
    })
    .map_err(|source| RewriteError::Backend {
        doc_id: doc.id().to_string(),
        source,
    })?;

    let original = doc.mutable_text().trim();
    let mut seen = BTreeSet::new();
    Ok(raw
        .into_iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty() && c != original)
        .filter(|c| seen.insert(c.clone()))
        .take(config.candidates_per_doc)
        .collect())
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn mentions(reply_lower: &str, name_lower: &str) -> bool {
    let mut start = 0;
    while let Some(offset) = reply_lower[start..].find(name_lower) {
        let begin = start + offset;
        let end = begin + name_lower.len();
        let before_ok = reply_lower[..begin]
            .chars()
            .next_back()
            .is_none_or(|c| !is_word(c));
        let after_ok = reply_lower[end..]
            .chars()
            .next()
            .is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return true;
        }
        start = begin + name_lower.len().max(1);
    }
    false
}

/// The single label named in a verifier reply (whole word, any case), or
/// `None` when the reply names zero or several labels.
pub fn parse_verdict(reply: &str, labels: &LabelSet) -> Option<ClassId> {
    let reply = reply.to_lowercase();
    let mut found = labels.iter().filter(|(_, name)| mentions(&reply, &name.to_lowercase()));
    let first = found.next()?;
    found.next().is_none().then_some(first.0)
}

/// Asks the verifier which label `candidate` carries and accepts it only if
/// that is the original label. Replies naming no label or several labels are
/// retried, then counted as a rejection.
pub fn verify_label(
    candidate: &str,
    doc: &LabeledDocument,
    labels: &LabelSet,
    template: &PromptTemplate,
    config: &GeneratorConfig,
    backend: &dyn RewriteBackend,
    counter: &CallCounter,
) -> Result<bool, RewriteError> {
    let prompt = build_verify_prompt(doc, candidate, template, labels)?;
    let expected = labels.name(doc.label()).ok_or(RewriteError::MissingLabelName(doc.label()))?;
    let names: Vec<&str> = labels.iter().map(|(_, n)| n).collect();
    let request = VerificationRequest {
        doc_id: doc.id(),
        prompt: &prompt,
        candidate,
        context: doc.context_text(),
        expected_label: expected,
        label_names: &names,
        temperature: config.verifier_temperature,
        top_p: config.top_p,
    };
    for attempt in 0..=config.max_retries {
        let reply = with_retries(config, counter, || {
            counter.record_verification();
            backend.verify(&request)
        })
        .map_err(|source| RewriteError::Backend {
            doc_id: doc.id().to_string(),
            source,
        })?;
        match parse_verdict(&reply, labels) {
            Some(label) => return Ok(label == doc.label()),
            None => {
                counter.record_unparseable();
                log::warn!(
                    "document `{}`: unparseable verifier reply (attempt {}): {:?}",
                    doc.id(),
                    attempt + 1,
                    reply
                );
            }
        }
    }
    log::warn!("document `{}`: treating unparseable verdict as rejection", doc.id());
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub text: String,
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Generates candidates for `doc` and verifies each one. Scores are left
/// empty; they depend on corpus statistics the caller owns.
pub fn rewrite_document(
    doc: &LabeledDocument,
    labels: &LabelSet,
    template: &PromptTemplate,
    config: &GeneratorConfig,
    backend: &dyn RewriteBackend,
    counter: &CallCounter,
) -> Result<Vec<RewriteCandidate>, RewriteError> {
    let texts = generate_candidates(doc, labels, template, config, backend, counter)?;
    texts
        .into_iter()
        .map(|text| {
            let verified = verify_label(&text, doc, labels, template, config, backend, counter)?;
            Ok(RewriteCandidate {
                text,
                verified,
                score: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReplacementDecision {
    Replace {
        text: String,
        score: f64,
        original_score: f64,
    },
    KeepOriginal,
}

/// Picks the verified, scored candidate with the lowest score if it is
/// strictly below `original_score`. Equal scores go to the lexicographically
/// smallest text.
pub fn select_replacement(original_score: f64, candidates: &[RewriteCandidate]) -> ReplacementDecision {
    let best = candidates
        .iter()
        .filter(|c| c.verified)
        .filter_map(|c| c.score.map(|s| (s, &c.text)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    match best {
        Some((score, text)) if score < original_score => ReplacementDecision::Replace {
            text: text.clone(),
            score,
            original_score,
        },
        _ => ReplacementDecision::KeepOriginal,
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBackend, MockRule, MockRules, VerdictPolicy};
    use super::*;
    use crate::corpus::{Schema, TokenizerConfig};

    fn labels() -> LabelSet {
        LabelSet::from_names(["refutes", "supports"]).unwrap()
    }

    fn doc(text: &str) -> LabeledDocument {
        LabeledDocument::new("d1", text, Some("ev".into()), ClassId(0), &TokenizerConfig::default()).unwrap()
    }

    fn quiet() -> GeneratorConfig {
        GeneratorConfig {
            retry_backoff_ms: 0,
            ..Default::default()
        }
    }

    fn mock(rules: &[(&str, &str)], verdict: VerdictPolicy) -> MockBackend {
        MockBackend::new(MockRules {
            seed: 0,
            rules: rules
                .iter()
                .map(|(p, r)| MockRule {
                    pattern: p.to_string(),
                    replacement: r.to_string(),
                })
                .collect(),
            verdict,
            fail_after_calls: None,
        })
        .unwrap()
    }

    fn template() -> PromptTemplate {
        PromptTemplate::for_schema(Schema::ClaimEvidence)
    }

    #[test]
    fn generation_defaults() {
        let c = GeneratorConfig::default();
        assert_eq!(c.top_p, 0.9);
        assert_eq!(c.temperature, 0.7);
        assert_eq!(c.candidates_per_doc, 3);
    }

    #[test]
    fn mock_deletion_rule() {
        let backend = mock(&[(r"\bnot\s+", "")], VerdictPolicy::Echo);
        let out = generate_candidates(&doc("x is not y"), &labels(), &template(), &quiet(), &backend, &CallCounter::default())
            .unwrap();
        assert_eq!(out, ["x is y"]);
    }

    #[test]
    fn original_text_is_discarded() {
        let backend = mock(&[("zzz", "q"), ("x", "x")], VerdictPolicy::Echo);
        let out = generate_candidates(&doc("x is y"), &labels(), &template(), &quiet(), &backend, &CallCounter::default())
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn duplicates_are_removed() {
        let backend = mock(&[("a", "b"), ("a", "b"), ("c", "d")], VerdictPolicy::Echo);
        let out = generate_candidates(&doc("a c"), &labels(), &template(), &quiet(), &backend, &CallCounter::default())
            .unwrap();
        let mut sorted = out.clone();
        sorted.sort();
        assert_eq!(sorted, ["a d", "b c"]);
    }

    struct AlwaysDown;

    impl RewriteBackend for AlwaysDown {
        fn generate(&self, _: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
            Err(BackendError::Transport("timeout".into()))
        }
        fn verify(&self, _: &VerificationRequest<'_>) -> Result<String, BackendError> {
            Err(BackendError::Transport("timeout".into()))
        }
    }

    #[test]
    fn transport_failure_after_retries() {
        let counter = CallCounter::default();
        let err = generate_candidates(&doc("a b"), &labels(), &template(), &quiet(), &AlwaysDown, &counter).unwrap_err();
        assert!(matches!(
            err,
            RewriteError::Backend {
                source: BackendError::Transport(_),
                ..
            }
        ));
        let calls = counter.snapshot();
        assert_eq!(calls.generation, 4);
        assert_eq!(calls.retries, 3);
    }

    #[test]
    fn verdict_policies() {
        let d = doc("a b");
        let check = |policy| {
            let backend = mock(&[], policy);
            verify_label("c d", &d, &labels(), &template(), &quiet(), &backend, &CallCounter::default()).unwrap()
        };
        assert!(check(VerdictPolicy::Echo));
        assert!(!check(VerdictPolicy::Flip));
        assert!(!check(VerdictPolicy::Unparseable));
        assert!(!check(VerdictPolicy::Fixed("REFUTES or SUPPORTS".into())));
        assert!(check(VerdictPolicy::Fixed("Refutes.".into())));
    }

    #[test]
    fn unparseable_is_retried_then_rejected() {
        let backend = mock(&[], VerdictPolicy::Unparseable);
        let counter = CallCounter::default();
        let ok = verify_label("c d", &doc("a b"), &labels(), &template(), &quiet(), &backend, &counter).unwrap();
        assert!(!ok);
        assert_eq!(counter.snapshot().verification, 4);
        assert_eq!(counter.snapshot().unparseable_verdicts, 4);
    }

    #[test]
    fn verdict_parsing_is_whole_word() {
        let l = LabelSet::from_names(["entailment", "neutral", "contradiction"]).unwrap();
        assert_eq!(parse_verdict("Neutral", &l), Some(ClassId(1)));
        assert_eq!(parse_verdict("non-contradiction", &l), Some(ClassId(2)));
        assert_eq!(parse_verdict("neutrality", &l), None);
        assert_eq!(parse_verdict("entailment, not neutral", &l), None);
    }

    fn cand(text: &str, score: f64) -> RewriteCandidate {
        RewriteCandidate {
            text: text.into(),
            verified: true,
            score: Some(score),
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(
            select_replacement(0.6, &[cand("p", 0.4), cand("q", 0.7)]),
            ReplacementDecision::Replace {
                text: "p".into(),
                score: 0.4,
                original_score: 0.6
            }
        );
        assert_eq!(select_replacement(0.6, &[cand("p", 0.65)]), ReplacementDecision::KeepOriginal);
        assert_eq!(select_replacement(0.6, &[cand("p", 0.6)]), ReplacementDecision::KeepOriginal);
        match select_replacement(0.6, &[cand("zeta", 0.4), cand("alpha", 0.4)]) {
            ReplacementDecision::Replace { text, .. } => assert_eq!(text, "alpha"),
            other => panic!("{other:?}"),
        }
        assert_eq!(select_replacement(0.6, &[]), ReplacementDecision::KeepOriginal);
        let mut unverified = cand("x", 0.1);
        unverified.verified = false;
        assert_eq!(select_replacement(0.6, &[unverified]), ReplacementDecision::KeepOriginal);
    }
}
