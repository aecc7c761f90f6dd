//! Human-like tone (HumT) and social-perception (SocioT) scoring from
//! language-model log-probabilities, plus the statistics, dataset
//! construction, and discovery tooling built around it.

pub mod backend;
pub mod corpus;
pub mod discovery;
pub mod dumt;
pub mod rng;
pub mod stats;
pub mod tone;

pub use backend::{BackendDescriptor, BackendError, Capability, LanguageModel, TableBackend};
pub use tone::{score, score_batch, Aggregation, DimensionSpec, Registry, ScoringConfig, ToneError, ToneScore};
