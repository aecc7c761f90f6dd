//! Preference datasets for tone-reduction fine-tuning.
//!
//! * [`Variant::Tone`]: pairs where the human-rejected response is more
//!   human-like than the chosen one by more than `threshold`.
//! * [`Variant::Random`]: uniform sample ignoring tone (baseline).
//! * [`Variant::MaxTone`]: ablation pairs where the chosen response is the
//!   more human-like one by more than `threshold`.
//!
//! Sampling is uniform without replacement using [`CounterRng`], so a seed
//! reproduces the same dataset everywhere.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PreferencePair;
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum DumtError {
    #[error("eligible {eligible} < requested {requested}")]
    PoolTooSmall { eligible: usize, requested: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no prompts shared by both score maps")]
    EmptyIntersection,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

/// A preference pair with tone scores for both responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub humt_chosen: f64,
    pub humt_rejected: f64,
}

impl ScoredPair {
    /// `humt_rejected - humt_chosen`: positive when the human-preferred
    /// response is less human-like.
    pub fn margin(&self) -> f64 {
        self.humt_rejected - self.humt_chosen
    }
}

/// Joins pairs with their per-response scores (keyed by
/// `<pair_id>:chosen` / `<pair_id>:rejected`). Returns the scored pairs
/// and the ids of pairs lacking a score on either side.
pub fn attach_scores(pairs: &[PreferencePair], scores: &BTreeMap<String, f64>) -> (Vec<ScoredPair>, Vec<String>) {
    let mut scored = Vec::new();
    let mut missing = Vec::new();
    for p in pairs {
        match (scores.get(&p.chosen_id()), scores.get(&p.rejected_id())) {
            (Some(&c), Some(&r)) => scored.push(ScoredPair {
                pair_id: p.pair_id.clone(),
                prompt: p.prompt.clone(),
                chosen: p.chosen.clone(),
                rejected: p.rejected.clone(),
                humt_chosen: c,
                humt_rejected: r,
            }),
            _ => missing.push(p.pair_id.clone()),
        }
    }
    (scored, missing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tone,
    Random,
    MaxTone,
}

impl std::str::FromStr for Variant {
    type Err = DumtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tone" => Ok(Variant::Tone),
            "random" => Ok(Variant::Random),
            "maxtone" | "max_tone" => Ok(Variant::MaxTone),
            other => Err(DumtError::InvalidArgument(format!("unknown variant {other:?} (tone, random, maxtone)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub threshold: f64,
    pub pair_count: usize,
    pub seed: u64,
    /// Used only by [`epsilon_filter`] callers; recorded for provenance.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    0.02
}


impl BuildConfig {
    pub fn new(threshold: f64, pair_count: usize, seed: u64) -> Self {
        Self { threshold, pair_count, seed, epsilon: default_epsilon() }
    }

    fn validate(&self) -> Result<(), DumtError> {
        if self.pair_count == 0 {
            return Err(DumtError::InvalidArgument("pair count must be ≥ 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(DumtError::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A training triple. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub humt_chosen: f64,
    pub humt_rejected: f64,
    pub pair_id: String,
    pub variant: Variant,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub pairs: Vec<DpoPair>,
    pub pool_size: usize,
    pub eligible: usize,
}

fn check_scores(pool: &[ScoredPair]) -> Result<(), DumtError> {
    if let Some(p) = pool.iter().find(|p| !p.humt_chosen.is_finite() || !p.humt_rejected.is_finite()) {
        return Err(DumtError::InvalidArgument(format!("pair {:?} has a non-finite score", p.pair_id)));
    }
    Ok(())
}

fn sample(
    pool: &[ScoredPair],
    eligible: Vec<&ScoredPair>,
    config: &BuildConfig,
    orient: impl Fn(&ScoredPair) -> DpoPair,
) -> Result<BuildOutcome, DumtError> {
    config.validate()?;
    check_scores(pool)?;
    if eligible.len() < config.pair_count {
        return Err(DumtError::PoolTooSmall { eligible: eligible.len(), requested: config.pair_count });
    }
    let mut rng = CounterRng::derive(config.seed, "dpo-sample");
    let mut picked = rng.sample_indices(eligible.len(), config.pair_count);
    picked.sort_unstable();
    let pairs = picked.into_iter().map(|i| orient(eligible[i])).collect();
    Ok(BuildOutcome { pairs, pool_size: pool.len(), eligible: eligible.len() })
}

fn as_preferred(p: &ScoredPair, variant: Variant) -> DpoPair {
    DpoPair {
        prompt: p.prompt.clone(),
        chosen: p.chosen.clone(),
        rejected: p.rejected.clone(),
        humt_chosen: p.humt_chosen,
        humt_rejected: p.humt_rejected,
        pair_id: p.pair_id.clone(),
        variant,
    }
}

/// Samples `pair_count` pairs whose rejected response is more human-like
/// than the chosen one by strictly more than `threshold`.
pub fn build_tone_pairs(pool: &[ScoredPair], config: &BuildConfig) -> Result<BuildOutcome, DumtError> {
    check_scores(pool)?;
    let eligible = pool.iter().filter(|p| p.margin() > config.threshold).collect();
    sample(pool, eligible, config, |p| as_preferred(p, Variant::Tone))
}

/// Samples `pair_count` pairs uniformly, ignoring tone.
pub fn build_random_pairs(pool: &[ScoredPair], config: &BuildConfig) -> Result<BuildOutcome, DumtError> {
    let eligible = pool.iter().collect();
    sample(pool, eligible, config, |p| as_preferred(p, Variant::Random))
}

/// Ablation: samples pairs whose human-preferred response is the more
/// human-like one by strictly more than `threshold`, emitted with the more
/// human-like response as `chosen`.
pub fn build_max_tone_pairs(pool: &[ScoredPair], config: &BuildConfig) -> Result<BuildOutcome, DumtError> {
    check_scores(pool)?;
    let eligible = pool.iter().filter(|p| p.humt_chosen - p.humt_rejected > config.threshold).collect();
    sample(pool, eligible, config, |p| {
        // eligibility makes the preferred side the more human-like one
        debug_assert!(p.humt_chosen > p.humt_rejected);
        as_preferred(p, Variant::MaxTone)
    })
}

pub fn build(variant: Variant, pool: &[ScoredPair], config: &BuildConfig) -> Result<BuildOutcome, DumtError> {
    match variant {
        Variant::Tone => build_tone_pairs(pool, config),
        Variant::Random => build_random_pairs(pool, config),
        Variant::MaxTone => build_max_tone_pairs(pool, config),
    }
}

/// Which difference the ε-filter thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonDirection {
    /// Keep prompts where `baseline - reduced > ε` (the reduced model is
    /// substantively less human-like).
    #[default]
    BaselineMinusReduced,
    /// Keep prompts where `reduced - baseline > ε`.
    ReducedMinusBaseline,
}

impl std::str::FromStr for EpsilonDirection {
    type Err = DumtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline-minus-reduced" | "baseline_minus_reduced" => Ok(Self::BaselineMinusReduced),
            "reduced-minus-baseline" | "reduced_minus_baseline" => Ok(Self::ReducedMinusBaseline),
            other => Err(DumtError::InvalidArgument(format!("unknown direction {other:?}"))),
        }
    }
}

/// Prompts (sorted) on which the two models' scores differ by strictly
/// more than `epsilon` in the configured direction. `reduced` holds the
/// tone-reduced model's scores, `baseline` the reference model's.
pub fn epsilon_filter(
    reduced: &BTreeMap<String, f64>,
    baseline: &BTreeMap<String, f64>,
    epsilon: f64,
    direction: EpsilonDirection,
) -> Result<Vec<String>, DumtError> {
    if !epsilon.is_finite() {
        return Err(DumtError::InvalidArgument("epsilon must be finite".into()));
    }
    let mut shared = 0usize;
    let mut kept = Vec::new();
    for (prompt, &a) in reduced {
        let Some(&b) = baseline.get(prompt) else { continue };
        shared += 1;
        let diff = match direction {
            EpsilonDirection::BaselineMinusReduced => b - a,
            EpsilonDirection::ReducedMinusBaseline => a - b,
        };
        if diff > epsilon {
            kept.push(prompt.clone());
        }
    }
    if shared == 0 {
        return Err(DumtError::EmptyIntersection);
    }
    Ok(kept)
}

/// Serializes pairs as JSONL; identical input gives identical bytes.
pub fn dpo_jsonl_bytes(pairs: &[DpoPair]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p).expect("pair serializes");
        out.push(b'\n');
    }
    out
}

pub fn emit_dpo_jsonl(pairs: &[DpoPair], path: &Path) -> Result<(), DumtError> {
    let io = |source| DumtError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&dpo_jsonl_bytes(pairs)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn read_dpo_jsonl(path: &Path) -> Result<Vec<DpoPair>, DumtError> {
    let text = std::fs::read_to_string(path).map_err(|source| DumtError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DumtError::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// Provenance written next to every built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub variant: Variant,
    pub config: BuildConfig,
    pub sampler: String,
    pub pool_size: usize,
    pub eligible: usize,
    pub emitted: usize,
    pub input_digests: BTreeMap<String, String>,
    pub output_digest: String,
}

/// Written into manifests of ε-filtered prompt sets: the source notation
/// puts the reduced model first while its prose describes the reduced
/// model as less human-like.
pub const EPSILON_DIRECTION_NOTE: &str = "default keeps prompts where baseline - reduced > epsilon (reduced model less \
human-like); the formula as originally written, reduced - baseline > epsilon, is available as \
--direction reduced-minus-baseline";

pub const SAMPLER_NAME: &str = "splitmix64-counter/partial-fisher-yates";
