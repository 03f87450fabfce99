use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Network failure, timeout, rate limit or server error. Retried.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The request was refused and retrying will not help.
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Asks the generator for rewrites of one document.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub doc_id: &'a str,
    pub prompt: &'a str,
    pub original: &'a str,
    pub context: Option<&'a str>,
    pub label_name: &'a str,
    pub n: usize,
    pub temperature: f64,
    pub top_p: f64,
}

/// Asks the verifier which label a candidate rewrite carries.
#[derive(Debug, Clone)]
pub struct VerificationRequest<'a> {
    pub doc_id: &'a str,
    pub prompt: &'a str,
    pub candidate: &'a str,
    pub context: Option<&'a str>,
    pub expected_label: &'a str,
    pub label_names: &'a [&'a str],
    pub temperature: f64,
    pub top_p: f64,
}

/// Text-generation service used for both the generator and the verifier
/// role. Each call is a fresh, stateless session.
pub trait RewriteBackend: Send + Sync {
    /// Raw candidate texts; cleanup and deduplication happen in the caller.
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError>;
    /// Raw verifier reply; parsed by the caller.
    fn verify(&self, request: &VerificationRequest<'_>) -> Result<String, BackendError>;
}

/// Call counters shared by concurrent rewrites.
#[derive(Debug, Default)]
pub struct CallCounter {
    generation: AtomicU64,
    verification: AtomicU64,
    retries: AtomicU64,
    unparseable: AtomicU64,
}

impl CallCounter {
    pub fn record_generation(&self) {
        self.generation.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_verification(&self) {
        self.verification.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_unparseable(&self) {
        self.unparseable.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LlmCalls {
        LlmCalls {
            generation: self.generation.load(Ordering::Relaxed),
            verification: self.verification.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            unparseable_verdicts: self.unparseable.load(Ordering::Relaxed),
            cached_documents: 0,
        }
    }
}

/// Backend call accounting for one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCalls {
    pub generation: u64,
    pub verification: u64,
    pub retries: u64,
    pub unparseable_verdicts: u64,
    /// Documents whose outcome was taken from a checkpoint instead of the backend.
    pub cached_documents: u64,
}
