use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::{PreferencePair, TextRecord};

#[derive(Debug, Error)]
pub enum ModerationError {
    #[error("moderation request failed: {0}")]
    Transport(String),
    #[error("moderation response malformed: {0}")]
    Protocol(String),
}

/// Decides whether a piece of text is unsafe.
pub trait ModerationClient: Send + Sync {
    fn name(&self) -> &str;
    fn is_flagged(&self, text: &str) -> Result<bool, ModerationError>;
}

/// Flags nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl ModerationClient for PassThrough {
    fn name(&self) -> &str {
        "pass-through"
    }
    fn is_flagged(&self, _text: &str) -> Result<bool, ModerationError> {
        Ok(false)
    }
}

/// Client for a moderation endpoint that takes `{"input": text}` and
/// answers `{"results": [{"flagged": bool}]}`.
#[derive(Debug)]
pub struct RemoteModeration {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteModeration {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Result<Self, ModerationError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ModerationError::Transport(e.to_string()))?;
        Ok(Self { url: url.into(), api_key, client })
    }
}

impl ModerationClient for RemoteModeration {
    fn name(&self) -> &str {
        &self.url
    }

    fn is_flagged(&self, text: &str) -> Result<bool, ModerationError> {
        let mut req = self.client.post(&self.url).json(&json!({ "input": text }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| ModerationError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ModerationError::Transport(format!("HTTP {}", resp.status())));
        }
        let v: Value = resp.json().map_err(|e| ModerationError::Protocol(e.to_string()))?;
        v.pointer("/results/0/flagged")
            .and_then(Value::as_bool)
            .ok_or_else(|| ModerationError::Protocol(format!("no results[0].flagged in {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    /// Keep records whose check kept failing, with a warning.
    #[default]
    KeepWithWarning,
    Drop,
}

#[derive(Debug, Clone, Copy)]
pub struct ModerationOptions {
    /// Extra attempts per text after the first failure.
    pub retries: u32,
    pub on_failure: FailurePolicy,
}

impl Default for ModerationOptions {
    fn default() -> Self {
        Self { retries: 2, on_failure: FailurePolicy::KeepWithWarning }
    }
}

#[derive(Debug)]
pub struct ModerationOutcome<T> {
    pub kept: Vec<T>,
    pub flagged: Vec<String>,
    /// Records whose check failed, with the last error.
    pub failed: Vec<(String, String)>,
}

/// Records whose texts go through moderation.
pub trait Moderatable {
    fn moderation_id(&self) -> &str;
    fn moderation_texts(&self) -> Vec<&str>;
}

impl Moderatable for PreferencePair {
    fn moderation_id(&self) -> &str {
        &self.pair_id
    }
    fn moderation_texts(&self) -> Vec<&str> {
        vec![&self.prompt, &self.chosen, &self.rejected]
    }
}

impl Moderatable for TextRecord {
    fn moderation_id(&self) -> &str {
        &self.text_id
    }
    fn moderation_texts(&self) -> Vec<&str> {
        vec![&self.text]
    }
}

fn check_with_retries<C: ModerationClient + ?Sized>(client: &C, text: &str, retries: u32) -> Result<bool, ModerationError> {
    let mut last = None;
    for _ in 0..=retries {
        match client.is_flagged(text) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Removes records any of whose texts the client flags as unsafe.
pub fn moderation_filter<T, C>(records: Vec<T>, client: &C, options: ModerationOptions) -> ModerationOutcome<T>
where
    T: Moderatable,
    C: ModerationClient + ?Sized,
{
    let mut out = ModerationOutcome { kept: Vec::new(), flagged: Vec::new(), failed: Vec::new() };
    'records: for rec in records {
        for text in rec.moderation_texts() {
            match check_with_retries(client, text, options.retries) {
                Ok(true) => {
                    out.flagged.push(rec.moderation_id().to_string());
                    continue 'records;
                }
                Ok(false) => {}
                Err(e) => {
                    let id = rec.moderation_id().to_string();
                    match options.on_failure {
                        FailurePolicy::KeepWithWarning => {
                            log::warn!("moderation of {id:?} failed ({e}); keeping record");
                            out.failed.push((id, e.to_string()));
                            out.kept.push(rec);
                        }
                        FailurePolicy::Drop => out.failed.push((id, e.to_string())),
                    }
                    continue 'records;
                }
            }
        }
        out.kept.push(rec);
    }
    out
}
