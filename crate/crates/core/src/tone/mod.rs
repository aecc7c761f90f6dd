//! Tone scores: the log-ratio of a text's probability after the positive
//! prefix phrases of a dimension to its probability after the negative ones.
//!
//! For a dimension with phrase sets `D+` and `D-`,
//!
//! ```text
//! T(s) = log( agg_{w in D+} P(w + " " + s[:limit]) / agg_{w in D-} P(w + " " + s[:limit]) )
//! ```
//!
//! where each `P` is the arithmetic mean of `repetitions` backend
//! evaluations and `agg` is a plain sum ([`Aggregation::SumLiteral`]) or a
//! mean ([`Aggregation::MeanNormalized`]). Everything is computed in log
//! space.

mod spec;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel};

pub use spec::{builtin_specs, Aggregation, DimensionSpec, Registry};

/// Separator between a prefix phrase and the scored text.
pub const JOIN: &str = " ";
pub const DEFAULT_TRUNCATION: usize = 300;
/// Stand-in for `ln 0` when a single phrase underflows (≈ ln of the
/// smallest subnormal double).
pub const UNDERFLOW_LOG_PROB: f64 = -745.0;

#[derive(Debug, Error)]
pub enum ToneError {
    #[error("invalid dimension spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate dimension name {0:?}")]
    DuplicateDimension(String),
    #[error("unknown dimension {name:?}; known: {}", known.join(", "))]
    UnknownDimension { name: String, known: Vec<String> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension config: {0}")]
    Config(String),
    #[error("text {text_id:?}, phrase {phrase:?}: {source}")]
    Backend {
        text_id: String,
        phrase: String,
        #[source]
        source: BackendError,
    },
    #[error("text {text_id:?}, dimension {dimension}: every {side} phrase has zero probability")]
    DegenerateSide { text_id: String, dimension: String, side: &'static str },
    #[error("text {text_id:?}, dimension {dimension}: backend dropped the first token for some phrases but not others")]
    InconsistentFirstToken { text_id: String, dimension: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub truncation_limit: usize,
    pub repetitions: u32,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { truncation_limit: DEFAULT_TRUNCATION, repetitions: 1 }
    }
}

impl ScoringConfig {
    pub fn new(truncation_limit: usize, repetitions: u32) -> Result<Self, ToneError> {
        let cfg = Self { truncation_limit, repetitions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ToneError> {
        if self.truncation_limit == 0 {
            return Err(ToneError::InvalidArgument("truncation limit must be ≥ 1".into()));
        }
        if self.repetitions == 0 {
            return Err(ToneError::InvalidArgument("repetitions must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One text's score on one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneScore {
    pub text_id: String,
    pub dimension: String,
    /// Natural-log units.
    pub value: f64,
    pub aggregation: Aggregation,
    pub repetitions: u32,
    pub backend_id: String,
    pub truncated: bool,
    #[serde(default)]
    pub first_token_dropped: bool,
}

/// First `limit` characters of `text`, never splitting a character.
pub fn truncate(text: &str, limit: usize) -> &str {
    match text.char_indices().nth(limit) {
        Some((byte_idx, _)) => &text[..byte_idx],
        None => text,
    }
}

/// `ln Σ exp(x_i)` without overflow or underflow of the shifted terms.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Combines log-probabilities of one phrase side.
pub fn log_aggregate(log_probs: &[f64], mode: Aggregation) -> Result<f64, ToneError> {
    if log_probs.is_empty() {
        return Err(ToneError::InvalidArgument("cannot aggregate an empty list".into()));
    }
    if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(ToneError::InvalidArgument("log-probabilities must be finite or -inf".into()));
    }
    let lse = log_sum_exp(log_probs);
    Ok(match mode {
        Aggregation::SumLiteral => lse,
        Aggregation::MeanNormalized => lse - (log_probs.len() as f64).ln(),
    })
}

/// Averaged probability (in log space) of `phrase + JOIN + text`.
fn phrase_log_prob<B: LanguageModel + ?Sized>(
    backend: &B,
    phrase: &str,
    text: &str,
    text_id: &str,
    repetitions: u32,
) -> Result<(f64, bool), ToneError> {
    let query = format!("{phrase}{JOIN}{text}");
    let wrap = |source| ToneError::Backend { text_id: text_id.to_string(), phrase: phrase.to_string(), source };
    // identical samples average to themselves
    let n = if backend.descriptor().deterministic { 1 } else { repetitions };
    let mut samples = Vec::with_capacity(n as usize);
    let mut dropped = None;
    for rep in 0..n {
        let s = backend.sequence_logprob_sample(&query, rep).map_err(wrap)?;
        if s.log_prob.is_nan() || s.log_prob > 0.0 {
            return Err(wrap(BackendError::Protocol(format!("log-probability {} out of range", s.log_prob))));
        }
        match dropped {
            None => dropped = Some(s.first_token_dropped),
            Some(d) if d != s.first_token_dropped => {
                return Err(wrap(BackendError::Protocol("first-token policy changed between repetitions".into())))
            }
            Some(_) => {}
        }
        samples.push(s.log_prob);
    }
    let avg = log_sum_exp(&samples) - (samples.len() as f64).ln();
    Ok((avg, dropped.unwrap_or(false)))
}

#[allow(clippy::too_many_arguments)]
fn side_log_prob<B: LanguageModel + ?Sized>(
    backend: &B,
    phrases: &[String],
    text: &str,
    text_id: &str,
    spec: &DimensionSpec,
    side: &'static str,
    config: &ScoringConfig,
    dropped_flags: &mut Vec<bool>,
) -> Result<f64, ToneError> {
    let mut logs = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        let (lp, dropped) = phrase_log_prob(backend, phrase, text, text_id, config.repetitions)?;
        dropped_flags.push(dropped);
        logs.push(lp);
    }
    if logs.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(ToneError::DegenerateSide { text_id: text_id.to_string(), dimension: spec.name().to_string(), side });
    }
    for (lp, phrase) in logs.iter_mut().zip(phrases) {
        if *lp == f64::NEG_INFINITY {
            log::warn!("text {text_id:?}: probability of {phrase:?} underflowed; using ln p = {UNDERFLOW_LOG_PROB}");
            *lp = UNDERFLOW_LOG_PROB;
        }
    }
    log_aggregate(&logs, spec.aggregation())
}

/// Scores one text on one dimension.
pub fn score<B: LanguageModel + ?Sized>(
    text_id: &str,
    text: &str,
    spec: &DimensionSpec,
    config: &ScoringConfig,
    backend: &B,
) -> Result<ToneScore, ToneError> {
    config.validate()?;
    let cut = truncate(text, config.truncation_limit);
    let mut flags = Vec::new();
    let pos = side_log_prob(backend, spec.positive_phrases(), cut, text_id, spec, "positive", config, &mut flags)?;
    let neg = side_log_prob(backend, spec.negative_phrases(), cut, text_id, spec, "negative", config, &mut flags)?;
    let first_token_dropped = flags.first().copied().unwrap_or(false);
    if flags.iter().any(|&f| f != first_token_dropped) {
        return Err(ToneError::InconsistentFirstToken { text_id: text_id.to_string(), dimension: spec.name().to_string() });
    }
    let value = pos - neg;
    debug_assert!(value.is_finite());
    Ok(ToneScore {
        text_id: text_id.to_string(),
        dimension: spec.name().to_string(),
        value,
        aggregation: spec.aggregation(),
        repetitions: config.repetitions,
        backend_id: backend.descriptor().backend_id.clone(),
        truncated: cut.len() < text.len(),
        first_token_dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    /// Worker threads; 1 scores sequentially.
    pub jobs: usize,
    pub fail_fast: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { jobs: 1, fail_fast: false }
    }
}

#[derive(Debug)]
pub struct BatchRow {
    pub text_id: String,
    pub dimension: String,
    pub result: Result<ToneScore, ToneError>,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// Sorted by `(text_id, dimension)`.
    pub rows: Vec<BatchRow>,
}

impl BatchOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &BatchRow> {
        self.rows.iter().filter(|r| r.result.is_err())
    }

    pub fn scores(&self) -> impl Iterator<Item = &ToneScore> {
        self.rows.iter().filter_map(|r| r.result.as_ref().ok())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_ok())
    }
}

/// Scores every `(text, spec)` combination. Rows come back sorted by
/// `(text_id, dimension)` regardless of worker scheduling; a failing row
/// does not stop the batch unless `fail_fast` is set, in which case the
/// first failure in that order is returned.
pub fn score_batch<B, S>(
    texts: &[(S, S)],
    specs: &[DimensionSpec],
    config: &ScoringConfig,
    backend: &B,
    options: BatchOptions,
) -> Result<BatchOutcome, ToneError>
where
    B: LanguageModel + ?Sized,
    S: AsRef<str> + Sync,
{
    config.validate()?;
    let mut seen = HashSet::new();
    for (id, _) in texts {
        if !seen.insert(id.as_ref()) {
            return Err(ToneError::InvalidArgument(format!("duplicate text id {:?}", id.as_ref())));
        }
    }
    let mut seen_dims = HashSet::new();
    for s in specs {
        if !seen_dims.insert(s.name()) {
            return Err(ToneError::DuplicateDimension(s.name().to_string()));
        }
    }

    let tasks: Vec<(usize, usize)> =
        (0..texts.len()).flat_map(|t| (0..specs.len()).map(move |d| (t, d))).collect();
    let results: Mutex<Vec<Option<Result<ToneScore, ToneError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);

    let work = || loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(t, d)) = tasks.get(i) else { break };
        let (id, text) = &texts[t];
        let r = score(id.as_ref(), text.as_ref(), &specs[d], config, backend);
        if r.is_err() && options.fail_fast {
            stop.store(true, Ordering::Relaxed);
        }
        results.lock().expect("results poisoned")[i] = Some(r);
    };

    let jobs = options.jobs.max(1).min(tasks.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(work);
            }
        });
    }

    let mut rows: Vec<BatchRow> = tasks
        .iter()
        .zip(results.into_inner().expect("results poisoned"))
        .filter_map(|(&(t, d), r)| {
            r.map(|result| BatchRow { text_id: texts[t].0.as_ref().to_string(), dimension: specs[d].name().to_string(), result })
        })
        .collect();
    rows.sort_by(|a, b| (&a.text_id, &a.dimension).cmp(&(&b.text_id, &b.dimension)));
    if options.fail_fast {
        if let Some(pos) = rows.iter().position(|r| r.result.is_err()) {
            return Err(rows.swap_remove(pos).result.unwrap_err());
        }
    }
    Ok(BatchOutcome { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TableBackend;

    fn humt_table() -> TableBackend {
        TableBackend::builder()
            .prob("He said x", 0.02)
            .prob("She said x", 0.01)
            .prob("It said x", 0.005)
            .build()
            .unwrap()
    }

    #[test]
    fn truncation_by_characters() {
        let a301 = "a".repeat(301);
        assert_eq!(truncate(&a301, 300), "a".repeat(300));
        assert_eq!(truncate("Hi", 300), "Hi");
        let multi: String = "é😀ß".chars().cycle().take(305).collect();
        let cut = truncate(&multi, 300);
        assert_eq!(cut.chars().count(), 300);
        assert_eq!(cut, multi.chars().take(300).collect::<String>());
    }

    #[test]
    fn aggregate_examples() {
        let lps = [0.02f64.ln(), 0.01f64.ln()];
        let sum = log_aggregate(&lps, Aggregation::SumLiteral).unwrap();
        let mean = log_aggregate(&lps, Aggregation::MeanNormalized).unwrap();
        assert!((sum - (-3.506557897319982)).abs() < 1e-12);
        assert!((mean - (-4.199705077879927)).abs() < 1e-12);
        assert_eq!(log_aggregate(&[-2.5], Aggregation::SumLiteral).unwrap(), -2.5);
        assert_eq!(log_aggregate(&[-2.5], Aggregation::MeanNormalized).unwrap(), -2.5);
        assert!(log_aggregate(&[], Aggregation::SumLiteral).is_err());
    }

    #[test]
    fn aggregate_is_stable_at_extremes() {
        let tiny = log_aggregate(&[-1e4, -1e4 - 1.0], Aggregation::SumLiteral).unwrap();
        assert!((tiny - (-1e4 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
        let near_zero = log_aggregate(&[-1e-12, -1e-12], Aggregation::SumLiteral).unwrap();
        assert!((near_zero - (2f64.ln() - 1e-12)).abs() < 1e-12);
    }

    #[test]
    fn humt_hand_evaluation() {
        let b = humt_table();
        let reg = Registry::builtin();
        let humt = reg.get("humt").unwrap();
        let s = score("t1", "x", humt, &ScoringConfig::default(), &b).unwrap();
        assert!((s.value - 6f64.ln()).abs() < 1e-12);
        let m = score("t1", "x", &humt.clone().with_aggregation(Aggregation::MeanNormalized), &ScoringConfig::default(), &b)
            .unwrap();
        assert!((m.value - 3f64.ln()).abs() < 1e-12);
        assert!(!s.truncated);
    }

    #[test]
    fn identical_sets_score_zero() {
        let b = humt_table();
        let spec = DimensionSpec::new("same", ["He said", "It said"], ["He said", "It said"], Aggregation::SumLiteral).unwrap();
        assert_eq!(score("t", "x", &spec, &ScoringConfig::default(), &b).unwrap().value, 0.0);
    }

    #[test]
    fn full_side_zero_is_error_single_phrase_is_floored() {
        let b = TableBackend::builder()
            .log_prob("He said x", f64::NEG_INFINITY)
            .log_prob("She said x", f64::NEG_INFINITY)
            .prob("It said x", 0.1)
            .build()
            .unwrap();
        let humt = Registry::builtin().get("humt").unwrap().clone();
        assert!(matches!(
            score("t", "x", &humt, &ScoringConfig::default(), &b),
            Err(ToneError::DegenerateSide { side: "positive", .. })
        ));
        let b = TableBackend::builder()
            .log_prob("He said x", f64::NEG_INFINITY)
            .prob("She said x", 0.1)
            .prob("It said x", 0.1)
            .build()
            .unwrap();
        let s = score("t", "x", &humt, &ScoringConfig::default(), &b).unwrap();
        assert!(s.value.is_finite());
        assert!(s.value.abs() < 1e-12);
    }

    #[test]
    fn empty_text_scores_phrases_alone() {
        let b = TableBackend::builder().prob("He said ", 0.04).prob("She said ", 0.02).prob("It said ", 0.03).build().unwrap();
        let humt = Registry::builtin().get("humt").unwrap().clone();
        let s = score("e", "", &humt, &ScoringConfig::default(), &b).unwrap();
        assert!((s.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn truncated_flag_set() {
        let b = humt_table();
        let humt = Registry::builtin().get("humt").unwrap().clone();
        let long = "y".repeat(400);
        assert!(score("t", &long, &humt, &ScoringConfig::default(), &b).unwrap().truncated);
    }

    #[test]
    fn batch_cardinality_and_order() {
        let b = humt_table();
        let texts = [("b", "x"), ("a", "hello")];
        let out = score_batch(&texts, &builtin_specs(), &ScoringConfig::default(), &b, BatchOptions { jobs: 3, fail_fast: false })
            .unwrap();
        assert_eq!(out.rows.len(), 10);
        assert!(out.is_complete());
        let keys: Vec<_> = out.rows.iter().map(|r| (r.text_id.clone(), r.dimension.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn batch_rejects_duplicate_ids() {
        let b = humt_table();
        let texts = [("a", "x"), ("a", "y")];
        assert!(score_batch(&texts, &builtin_specs(), &ScoringConfig::default(), &b, BatchOptions::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ScoringConfig::new(0, 1).is_err());
        assert!(ScoringConfig::new(300, 0).is_err());
        assert!(ScoringConfig::new(300, 100).is_ok());
    }
}
