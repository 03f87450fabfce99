//! Deterministic rule-driven backend for tests and offline runs.
//!
//! Rules file format:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "rules": [{"pattern": "\\bnot\\s+", "replacement": ""}],
//!   "verdict": "echo",
//!   "fail_after_calls": null
//! }
//! ```
//!
//! Each rule whose regex matches the original text yields one candidate
//! (`replace_all`, whitespace collapsed). `verdict` is `"echo"` (answer the
//! original label), `"flip"` (answer some other label), `"unparseable"`, or
//! `{"fixed": "<label>"}`.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::backend::{BackendError, GenerationRequest, RewriteBackend, VerificationRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictPolicy {
    #[default]
    Echo,
    Flip,
    Unparseable,
    Fixed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub seed: u64,
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub verdict: VerdictPolicy,
    /// Fail every call after this many successful ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_after_calls: Option<u64>,
}

impl MockRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(path, json + "\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockCallKind {
    Generate,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub kind: MockCallKind,
    pub doc_id: String,
}

#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    rules: Vec<(Regex, String)>,
    verdict: VerdictPolicy,
    fail_after_calls: Option<u64>,
    calls: AtomicU64,
    log: Mutex<Vec<MockCall>>,
}

// FNV-1a; stable across runs and platforms.
fn stable_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3))
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Result<Self, BackendError> {
        let compiled = rules
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.replacement.clone()))
                    .map_err(|e| BackendError::Config(format!("bad pattern `{}`: {e}", r.pattern)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            seed: rules.seed,
            rules: compiled,
            verdict: rules.verdict,
            fail_after_calls: rules.fail_after_calls,
            calls: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every call made so far, in arrival order.
    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn enter(&self, kind: MockCallKind, doc_id: &str) -> Result<(), BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_after_calls.is_some_and(|limit| n > limit) {
            return Err(BackendError::Transport(format!("simulated failure on call {n}")));
        }
        self.log.lock().unwrap().push(MockCall {
            kind,
            doc_id: doc_id.to_string(),
        });
        Ok(())
    }
}

impl RewriteBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
        self.enter(MockCallKind::Generate, request.doc_id)?;
        let matching: Vec<String> = self
            .rules
            .iter()
            .filter(|(re, _)| re.is_match(request.original))
            .map(|(re, replacement)| collapse_whitespace(&re.replace_all(request.original, replacement.as_str())))
            .collect();
        if matching.is_empty() {
            return Ok(matching);
        }
        let start = (self.seed ^ stable_hash(request.doc_id)) as usize % matching.len();
        Ok(matching
            .iter()
            .cycle()
            .skip(start)
            .take(matching.len().min(request.n))
            .cloned()
            .collect())
    }

    fn verify(&self, request: &VerificationRequest<'_>) -> Result<String, BackendError> {
        self.enter(MockCallKind::Verify, request.doc_id)?;
        Ok(match &self.verdict {
            VerdictPolicy::Echo => format!("Answer: {}", request.expected_label),
            VerdictPolicy::Flip => {
                let other = request
                    .label_names
                    .iter()
                    .find(|n| !n.eq_ignore_ascii_case(request.expected_label))
                    .copied()
                    .unwrap_or("");
                format!("Answer: {other}")
            }
            VerdictPolicy::Unparseable => "I cannot tell from the information given.".to_string(),
            VerdictPolicy::Fixed(label) => label.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_request<'a>(original: &'a str, n: usize) -> GenerationRequest<'a> {
        GenerationRequest {
            doc_id: "d",
            prompt: "",
            original,
            context: None,
            label_name: "x",
            n,
            temperature: 0.7,
            top_p: 0.9,
        }
    }

    #[test]
    fn deletes_token() {
        let backend = MockBackend::new(MockRules {
            rules: vec![MockRule {
                pattern: r"\bnot\b".into(),
                replacement: "".into(),
            }],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(backend.generate(&gen_request("x is not y", 3)).unwrap(), ["x is y"]);
        assert!(backend.generate(&gen_request("x is y", 3)).unwrap().is_empty());
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn fails_after_limit() {
        let backend = MockBackend::new(MockRules {
            fail_after_calls: Some(1),
            ..Default::default()
        })
        .unwrap();
        assert!(backend.generate(&gen_request("a b", 1)).is_ok());
        assert!(matches!(
            backend.generate(&gen_request("a b", 1)),
            Err(BackendError::Transport(_))
        ));
        assert_eq!(backend.calls().len(), 1);
    }

    #[test]
    fn rules_file_round_trip() {
        let rules: MockRules = serde_json::from_str(
            r#"{"seed":3,"rules":[{"pattern":"a","replacement":"b"}],"verdict":{"fixed":"supports"}}"#,
        )
        .unwrap();
        assert_eq!(rules.verdict, VerdictPolicy::Fixed("supports".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        rules.save(&path).unwrap();
        assert_eq!(MockRules::load(&path).unwrap(), rules);
    }
}
