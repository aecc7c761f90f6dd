use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    check_single_slot, rank_fills, BackendDescriptor, BackendError, Capability, LanguageModel, MaskFill,
    SequenceLogProb,
};

pub const DEFAULT_FLOOR: f64 = 1e-9;

/// Deterministic backend answering from exact-string lookup tables.
///
/// Unknown strings get the configured floor probability. Fill-mask tables
/// may be keyed by exact template, with `"*"` as the fallback for any
/// template.
#[derive(Debug)]
pub struct TableBackend {
    descriptor: BackendDescriptor,
    log_probs: HashMap<String, f64>,
    floor_log_prob: f64,
    fills: HashMap<String, Vec<MaskFill>>,
    embeddings: HashMap<String, Vec<f64>>,
    calls: AtomicUsize,
}

/// On-disk form of a table backend (JSON).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableFile {
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default)]
    pub probabilities: BTreeMap<String, f64>,
    #[serde(default)]
    pub log_probabilities: BTreeMap<String, f64>,
    /// template (or `"*"`) -> word -> probability
    #[serde(default)]
    pub fills: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct TableBackendBuilder {
    backend_id: Option<String>,
    model_id: Option<String>,
    floor: Option<f64>,
    log_probs: HashMap<String, f64>,
    fills: HashMap<String, Vec<MaskFill>>,
    embeddings: HashMap<String, Vec<f64>>,
}

impl TableBackendBuilder {
    pub fn backend_id(mut self, id: impl Into<String>) -> Self {
        self.backend_id = Some(id.into());
        self
    }

    pub fn model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = Some(id.into());
        self
    }

    /// Probability assigned to strings missing from the table.
    pub fn floor(mut self, p: f64) -> Self {
        self.floor = Some(p);
        self
    }

    pub fn prob(self, text: impl Into<String>, p: f64) -> Self {
        self.log_prob(text, p.ln())
    }

    pub fn log_prob(mut self, text: impl Into<String>, lp: f64) -> Self {
        self.log_probs.insert(text.into(), lp);
        self
    }

    /// Fill candidate returned for every template without a dedicated table.
    pub fn fill(self, word: impl Into<String>, p: f64) -> Self {
        self.fill_for("*", word, p)
    }

    pub fn fill_for(mut self, template: impl Into<String>, word: impl Into<String>, p: f64) -> Self {
        self.fills
            .entry(template.into())
            .or_default()
            .push(MaskFill { word: word.into(), probability: p });
        self
    }

    pub fn embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }

    pub fn build(self) -> Result<TableBackend, BackendError> {
        let floor = self.floor.unwrap_or(DEFAULT_FLOOR);
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(BackendError::InvalidArgument(format!("floor probability {floor} not in (0, 1]")));
        }
        for (text, lp) in &self.log_probs {
            if lp.is_nan() || *lp > 0.0 {
                return Err(BackendError::InvalidArgument(format!("log-probability {lp} for {text:?} is not ≤ 0")));
            }
        }
        for (template, fills) in &self.fills {
            for f in fills {
                if !(f.probability > 0.0 && f.probability <= 1.0) {
                    return Err(BackendError::InvalidArgument(format!(
                        "fill probability {} for {:?} in template {template:?} not in (0, 1]",
                        f.probability, f.word
                    )));
                }
            }
        }
        let mut dim = None;
        for (text, v) in &self.embeddings {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(BackendError::Protocol(format!("non-finite embedding for {text:?}")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(BackendError::Protocol(format!(
                        "embedding dimension mismatch: {text:?} has {}, expected {d}",
                        v.len()
                    )))
                }
                Some(_) => {}
            }
        }

        let mut capabilities = BTreeSet::from([Capability::SequenceLogprob]);
        if !self.fills.is_empty() {
            capabilities.insert(Capability::FillMask);
        }
        if !self.embeddings.is_empty() {
            capabilities.insert(Capability::Embed);
        }
        let model_id = self.model_id.unwrap_or_else(|| "table".to_string());
        Ok(TableBackend {
            descriptor: BackendDescriptor {
                backend_id: self.backend_id.unwrap_or_else(|| format!("table:{model_id}")),
                model_id,
                capabilities,
                deterministic: true,
            },
            log_probs: self.log_probs,
            floor_log_prob: floor.ln(),
            fills: self.fills,
            embeddings: self.embeddings,
            calls: AtomicUsize::new(0),
        })
    }
}

impl TableBackend {
    pub fn builder() -> TableBackendBuilder {
        TableBackendBuilder::default()
    }

    pub fn from_table_file(file: TableFile) -> Result<Self, BackendError> {
        let mut b = Self::builder();
        if let Some(m) = file.model_id {
            b = b.model_id(m);
        }
        if let Some(f) = file.floor {
            b = b.floor(f);
        }
        for (k, p) in file.probabilities {
            b = b.prob(k, p);
        }
        for (k, lp) in file.log_probabilities {
            b = b.log_prob(k, lp);
        }
        for (template, words) in file.fills {
            for (w, p) in words {
                b = b.fill_for(template.clone(), w, p);
            }
        }
        for (k, v) in file.embeddings {
            b = b.embedding(k, v);
        }
        b.build()
    }

    pub fn from_json_path(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidArgument(format!("cannot read table {}: {e}", path.display())))?;
        let file: TableFile = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Protocol(format!("table {}: {e}", path.display())))?;
        Self::from_table_file(file)
    }

    /// Number of `sequence_logprob` evaluations served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn embedding_dimension(&self) -> Option<usize> {
        self.embeddings.values().next().map(Vec::len)
    }
}

impl LanguageModel for TableBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let lp = self.log_probs.get(text).copied().unwrap_or(self.floor_log_prob);
        Ok(SequenceLogProb::new(lp))
    }

    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        if !self.descriptor.supports(Capability::FillMask) {
            return Err(self.unsupported(Capability::FillMask));
        }
        check_single_slot(template)?;
        if top_k == 0 {
            return Err(BackendError::InvalidArgument("top_k must be positive".into()));
        }
        let fills = self.fills.get(template).or_else(|| self.fills.get("*")).cloned().unwrap_or_default();
        Ok(rank_fills(fills, top_k))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if !self.descriptor.supports(Capability::Embed) {
            return Err(self.unsupported(Capability::Embed));
        }
        self.embeddings.get(text).cloned().ok_or_else(|| BackendError::UnknownInput(text.to_string()))
    }
}
