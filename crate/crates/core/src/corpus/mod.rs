//! Text and preference-pair corpora: ingestion, de-duplication,
//! moderation filtering and train/test splitting.

mod ingest;
mod moderation;
mod split;

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{
    ingest_pairs, ingest_texts, read_jsonl_pairs, read_jsonl_texts, write_pairs_jsonl, write_rejections_jsonl,
    write_texts_jsonl, FieldMapping, InputFormat, Ingested, Rejection,
};
pub use moderation::{
    moderation_filter, FailurePolicy, ModerationClient, ModerationError, ModerationOptions, ModerationOutcome,
    Moderatable, PassThrough, RemoteModeration,
};
pub use split::{split, Side, SplitAssignment};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed input at line {line} (byte offset {byte_offset}): {reason}")]
    Malformed { path: PathBuf, line: u64, byte_offset: u64, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text_id: String,
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt: String,
    /// Human-preferred response.
    pub chosen: String,
    pub rejected: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_rejected: Option<String>,
}

impl PreferencePair {
    /// Text id under which the chosen response is scored.
    pub fn chosen_id(&self) -> String {
        chosen_text_id(&self.pair_id)
    }

    pub fn rejected_id(&self) -> String {
        rejected_text_id(&self.pair_id)
    }
}

pub fn chosen_text_id(pair_id: &str) -> String {
    format!("{pair_id}:chosen")
}

pub fn rejected_text_id(pair_id: &str) -> String {
    format!("{pair_id}:rejected")
}

/// Expands pairs into the two scored texts per pair.
pub fn pair_response_texts(pairs: &[PreferencePair]) -> Vec<TextRecord> {
    pairs
        .iter()
        .flat_map(|p| {
            [(p.chosen_id(), &p.chosen), (p.rejected_id(), &p.rejected)].map(|(id, text)| TextRecord {
                text_id: id,
                text: text.clone(),
                source: p.source.clone(),
                extra: BTreeMap::new(),
            })
        })
        .collect()
}

/// Collapses whitespace runs to one space and trims; case preserved.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Records that de-duplicate and split by a prompt-like key.
pub trait PromptKeyed {
    fn record_id(&self) -> &str;
    fn prompt_key(&self) -> &str;
}

impl PromptKeyed for PreferencePair {
    fn record_id(&self) -> &str {
        &self.pair_id
    }
    fn prompt_key(&self) -> &str {
        &self.prompt
    }
}

impl PromptKeyed for TextRecord {
    fn record_id(&self) -> &str {
        &self.text_id
    }
    fn prompt_key(&self) -> &str {
        &self.text
    }
}

/// Keeps the first record per whitespace-normalized prompt. Returns the
/// kept records (original order) and the number removed.
pub fn dedup<T: PromptKeyed>(records: Vec<T>) -> (Vec<T>, usize) {
    let mut seen = HashSet::new();
    let before = records.len();
    let kept: Vec<T> = records.into_iter().filter(|r| seen.insert(normalize_whitespace(r.prompt_key()))).collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, prompt: &str) -> PreferencePair {
        PreferencePair {
            pair_id: id.into(),
            prompt: prompt.into(),
            chosen: "c".into(),
            rejected: "r".into(),
            source: "t".into(),
            topic: None,
            demographics: None,
            model_chosen: None,
            model_rejected: None,
        }
    }

    #[test]
    fn dedup_whitespace_normalized() {
        let (kept, removed) = dedup(vec![pair("1", "a"), pair("2", "a "), pair("3", "b")]);
        assert_eq!(kept.len(), 2);
        assert_eq!(removed, 1);
        assert_eq!(kept[0].pair_id, "1");
        let (same, removed) = dedup(vec![pair("1", "a"), pair("2", "A")]);
        assert_eq!((same.len(), removed), (2, 0));
    }

    #[test]
    fn dedup_planted_duplicates() {
        let mut records: Vec<_> = (0..9000).map(|i| pair(&i.to_string(), &format!("prompt {i}"))).collect();
        for i in 0..1000 {
            records.push(pair(&format!("dup{i}"), &format!("  prompt   {}\t", i * 7)));
        }
        let (kept, removed) = dedup(records);
        assert_eq!(kept.len(), 9000);
        assert_eq!(removed, 1000);
    }

    #[test]
    fn pair_expansion_ids() {
        let texts = pair_response_texts(&[pair("p1", "q")]);
        assert_eq!(texts[0].text_id, "p1:chosen");
        assert_eq!(texts[1].text_id, "p1:rejected");
    }
}
