use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{normalize_whitespace, CorpusError, PromptKeyed};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratio: f64,
    pub seed: u64,
    pub train_prompts: usize,
    pub test_prompts: usize,
    pub assignments: BTreeMap<String, Side>,
}

impl SplitAssignment {
    pub fn side(&self, id: &str) -> Option<Side> {
        self.assignments.get(id).copied()
    }

    pub fn ids(&self, side: Side) -> impl Iterator<Item = &str> {
        self.assignments.iter().filter(move |(_, s)| **s == side).map(|(id, _)| id.as_str())
    }
}

/// Prompt-level train/test split: every record sharing a normalized prompt
/// lands on the same side. `round(ratio * prompts)` prompts go to train,
/// clamped so both sides are non-empty.
pub fn split<T: PromptKeyed>(records: &[T], ratio: f64, seed: u64) -> Result<SplitAssignment, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let prompts: BTreeSet<String> = records.iter().map(|r| normalize_whitespace(r.prompt_key())).collect();
    if prompts.len() < 2 {
        return Err(CorpusError::Split(format!("need at least 2 distinct prompts, found {}", prompts.len())));
    }
    let mut order: Vec<&String> = prompts.iter().collect();
    CounterRng::derive(seed, "split").shuffle(&mut order);
    let n = order.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let train: BTreeSet<&String> = order[..n_train].iter().copied().collect();

    let mut assignments = BTreeMap::new();
    for r in records {
        let side = if train.contains(&normalize_whitespace(r.prompt_key())) { Side::Train } else { Side::Test };
        if assignments.insert(r.record_id().to_string(), side).is_some() {
            return Err(CorpusError::InvalidArgument(format!("duplicate record id {:?}", r.record_id())));
        }
    }
    Ok(SplitAssignment { ratio, seed, train_prompts: n_train, test_prompts: n - n_train, assignments })
}
