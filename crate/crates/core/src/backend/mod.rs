//! Language-model backends.
//!
//! Every scoring and discovery routine talks to a model through
//! [`LanguageModel`]. Three implementations ship with the crate:
//!
//! * [`TableBackend`]: deterministic lookup tables, used by tests and for
//!   offline fixtures.
//! * [`RemoteBackend`]: a JSON-over-HTTP client for a completions-style
//!   inference server that echoes per-token log-probabilities.
//! * [`CachedBackend`]: wraps any backend with a persistent append-only
//!   score cache.

mod cache;
mod remote;
mod table;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CacheEntry, CacheError, CacheStats, CachedBackend, ScoreCache, PROTOCOL_VERSION};
pub use remote::{
    RemoteBackend, RemoteConfig, RemoteStats, ENV_API_KEY, ENV_DOCUMENT_START, ENV_EMBED_ENDPOINT, ENV_ENDPOINT,
    ENV_FILL_MASK_ENDPOINT, ENV_MAX_IN_FLIGHT, ENV_MODEL,
};
pub use table::{TableBackend, TableBackendBuilder, TableFile};

/// Placeholder marking the slot in a fill-mask template.
pub const MASK_SLOT: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    SequenceLogprob,
    FillMask,
    Embed,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Capability::SequenceLogprob => "sequence_logprob",
            Capability::FillMask => "fill_mask",
            Capability::Embed => "embed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub model_id: String,
    pub capabilities: BTreeSet<Capability>,
    pub deterministic: bool,
}

impl BackendDescriptor {
    pub fn supports(&self, capability: Capability) -> bool {
        self.capabilities.contains(&capability)
    }
}

/// Total log-probability of a string as reported by a backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceLogProb {
    /// Natural-log probability of the scored tokens.
    pub log_prob: f64,
    /// Set when the backend could not condition the first token on a
    /// document-start marker and its term was left out of the sum.
    pub first_token_dropped: bool,
}

impl SequenceLogProb {
    pub fn new(log_prob: f64) -> Self {
        Self { log_prob, first_token_dropped: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFill {
    pub word: String,
    pub probability: f64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{backend}` does not support {capability}")]
    Unsupported { backend: String, capability: Capability },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no table entry for {0:?}")]
    UnknownInput(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Capabilities a language model may expose. Methods a backend does not
/// support return [`BackendError::Unsupported`].
pub trait LanguageModel: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Total natural-log probability of `text`.
    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        let _ = text;
        Err(self.unsupported(Capability::SequenceLogprob))
    }

    /// One repeated evaluation of `text`. Stochastic backends are queried
    /// once per repetition index; caches key on it.
    fn sequence_logprob_sample(&self, text: &str, repetition: u32) -> Result<SequenceLogProb, BackendError> {
        let _ = repetition;
        self.sequence_logprob(text)
    }

    /// Ranked fills for the single [`MASK_SLOT`] in `template`.
    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        let _ = (template, top_k);
        Err(self.unsupported(Capability::FillMask))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let _ = text;
        Err(self.unsupported(Capability::Embed))
    }

    fn unsupported(&self, capability: Capability) -> BackendError {
        BackendError::Unsupported { backend: self.descriptor().backend_id.clone(), capability }
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        (**self).sequence_logprob(text)
    }
    fn sequence_logprob_sample(&self, text: &str, repetition: u32) -> Result<SequenceLogProb, BackendError> {
        (**self).sequence_logprob_sample(text, repetition)
    }
    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        (**self).fill_mask(template, top_k)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        (**self).sequence_logprob(text)
    }
    fn sequence_logprob_sample(&self, text: &str, repetition: u32) -> Result<SequenceLogProb, BackendError> {
        (**self).sequence_logprob_sample(text, repetition)
    }
    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        (**self).fill_mask(template, top_k)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

/// Checks that `template` contains exactly one [`MASK_SLOT`].
pub fn check_single_slot(template: &str) -> Result<(), BackendError> {
    match template.matches(MASK_SLOT).count() {
        1 => Ok(()),
        n => Err(BackendError::InvalidArgument(format!(
            "fill-mask template must contain exactly one {MASK_SLOT} slot, found {n}"
        ))),
    }
}

/// Orders fills by probability (descending), ties by word, and keeps `top_k`.
pub(crate) fn rank_fills(mut fills: Vec<MaskFill>, top_k: usize) -> Vec<MaskFill> {
    fills.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.word.cmp(&b.word)));
    fills.truncate(top_k);
    fills
}
