//! JSON-over-HTTP client for an external inference server.
//!
//! Sequence scoring posts `{"model", "text", "echo": true, "logprobs": true}`
//! and expects per-token log-probabilities back, either as a top-level
//! `token_logprobs` array or in completions shape
//! (`choices[0].logprobs.token_logprobs`). The client sums them.
//!
//! First-token policy: when `document_start` is configured the marker is
//! prepended and its own token(s) are skipped, so every scored token is
//! conditioned on it. Otherwise a `null` first entry (the server could not
//! score it) is dropped and the result is flagged.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::{
    check_single_slot, rank_fills, BackendDescriptor, BackendError, Capability, LanguageModel, MaskFill,
    SequenceLogProb,
};

pub const ENV_ENDPOINT: &str = "HUMT_ENDPOINT";
pub const ENV_FILL_MASK_ENDPOINT: &str = "HUMT_FILL_MASK_ENDPOINT";
pub const ENV_EMBED_ENDPOINT: &str = "HUMT_EMBED_ENDPOINT";
pub const ENV_MODEL: &str = "HUMT_MODEL";
pub const ENV_API_KEY: &str = "HUMT_API_KEY";
pub const ENV_DOCUMENT_START: &str = "HUMT_DOCUMENT_START";
pub const ENV_MAX_IN_FLIGHT: &str = "HUMT_MAX_IN_FLIGHT";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub logprob_url: Option<String>,
    pub fill_mask_url: Option<String>,
    pub embed_url: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
    pub document_start: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub deterministic: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            logprob_url: None,
            fill_mask_url: None,
            embed_url: None,
            model: "gpt2".to_string(),
            api_key: None,
            document_start: None,
            max_attempts: 5,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(10),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            deterministic: true,
        }
    }
}

impl RemoteConfig {
    /// Reads endpoints and credentials from `HUMT_*` environment variables.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut cfg = Self {
            logprob_url: var(ENV_ENDPOINT),
            fill_mask_url: var(ENV_FILL_MASK_ENDPOINT),
            embed_url: var(ENV_EMBED_ENDPOINT),
            api_key: var(ENV_API_KEY),
            document_start: var(ENV_DOCUMENT_START),
            ..Self::default()
        };
        if let Some(m) = var(ENV_MODEL) {
            cfg.model = m;
        }
        if let Some(n) = var(ENV_MAX_IN_FLIGHT).and_then(|v| v.parse().ok()) {
            cfg.max_in_flight = n;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RemoteStats {
    /// Logical queries issued by callers (retries excluded).
    pub queries: u64,
    /// HTTP attempts, including retries.
    pub attempts: u64,
    pub retries: u64,
    pub peak_in_flight: usize,
}

#[derive(Debug)]
struct Limiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut cur = self.current.lock().expect("limiter poisoned");
        while *cur >= self.max {
            cur = self.cv.wait(cur).expect("limiter poisoned");
        }
        *cur += 1;
        self.peak.fetch_max(*cur, Ordering::Relaxed);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut cur = self.0.current.lock().expect("limiter poisoned");
        *cur -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    limiter: Limiter,
    embed_dim: OnceLock<usize>,
    queries: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let mut capabilities = BTreeSet::new();
        if config.logprob_url.is_some() {
            capabilities.insert(Capability::SequenceLogprob);
        }
        if config.fill_mask_url.is_some() {
            capabilities.insert(Capability::FillMask);
        }
        if config.embed_url.is_some() {
            capabilities.insert(Capability::Embed);
        }
        if capabilities.is_empty() {
            return Err(BackendError::InvalidArgument(format!(
                "remote backend needs at least one endpoint (set {ENV_ENDPOINT})"
            )));
        }
        if config.max_in_flight == 0 || config.max_attempts == 0 {
            return Err(BackendError::InvalidArgument("max_in_flight and max_attempts must be ≥ 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidArgument(format!("http client: {e}")))?;
        let descriptor = BackendDescriptor {
            backend_id: format!("remote:{}", config.model),
            model_id: config.model.clone(),
            capabilities,
            deterministic: config.deterministic,
        };
        Ok(Self {
            limiter: Limiter {
                max: config.max_in_flight,
                current: Mutex::new(0),
                cv: Condvar::new(),
                peak: AtomicUsize::new(0),
            },
            config,
            descriptor,
            client,
            embed_dim: OnceLock::new(),
            queries: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> RemoteStats {
        RemoteStats {
            queries: self.queries.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            peak_in_flight: self.limiter.peak.load(Ordering::Relaxed),
        }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let mut backoff = self.config.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                self.retries.fetch_add(1, Ordering::Relaxed);
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(self.config.max_backoff);
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let outcome = {
                let _permit = self.limiter.acquire();
                let mut req = self.client.post(url).json(body);
                if let Some(key) = &self.config.api_key {
                    req = req.bearer_auth(key);
                }
                req.send().and_then(|resp| {
                    let status = resp.status();
                    resp.text().map(|text| (status, text))
                })
            };
            match outcome {
                Ok((status, text)) if status.is_success() => {
                    return serde_json::from_str(&text)
                        .map_err(|e| BackendError::Protocol(format!("malformed JSON from {url}: {e}")));
                }
                Ok((status, text)) if status.as_u16() == 429 || status.is_server_error() => {
                    last_error = format!("HTTP {status}: {}", truncate_for_log(&text));
                }
                Ok((status, text)) => {
                    return Err(BackendError::Protocol(format!("HTTP {status} from {url}: {}", truncate_for_log(&text))));
                }
                Err(e) => last_error = e.to_string(),
            }
            log::debug!("attempt {attempt} to {url} failed: {last_error}");
        }
        Err(BackendError::Transport { attempts: self.config.max_attempts, message: last_error })
    }
}

fn truncate_for_log(s: &str) -> String {
    s.chars().take(200).collect()
}

fn token_array(v: &Value) -> Option<&Vec<Value>> {
    v.get("token_logprobs")
        .or_else(|| v.pointer("/choices/0/logprobs/token_logprobs"))
        .and_then(Value::as_array)
}

fn token_strings(v: &Value) -> Option<Vec<String>> {
    let arr = v.get("tokens").or_else(|| v.pointer("/choices/0/logprobs/tokens"))?.as_array()?;
    arr.iter().map(|t| t.as_str().map(str::to_owned)).collect()
}

/// Sums the per-token log-probabilities of a scoring response.
pub(crate) fn sum_token_logprobs(response: &Value, document_start: Option<&str>) -> Result<SequenceLogProb, BackendError> {
    let entries = token_array(response)
        .ok_or_else(|| BackendError::Protocol("response carries no token_logprobs array".into()))?;
    if entries.is_empty() {
        return Err(BackendError::Protocol("empty token_logprobs array".into()));
    }
    let skip = match document_start {
        Some(marker) => match token_strings(response) {
            Some(tokens) => {
                let mut acc = String::new();
                let mut n = 0;
                for t in &tokens {
                    if acc.len() >= marker.len() {
                        break;
                    }
                    acc.push_str(t);
                    n += 1;
                }
                if acc != marker {
                    return Err(BackendError::Protocol(format!(
                        "document-start marker {marker:?} does not align with leading tokens"
                    )));
                }
                n
            }
            None => 1,
        },
        None => 0,
    };
    let mut first_token_dropped = false;
    let mut total = 0.0;
    let mut scored = 0usize;
    for (i, entry) in entries.iter().enumerate().skip(skip) {
        match entry {
            Value::Null if i == 0 => first_token_dropped = true,
            Value::Number(n) => {
                let lp = n.as_f64().ok_or_else(|| BackendError::Protocol(format!("token {i}: bad number")))?;
                if lp.is_nan() || lp > 1e-9 {
                    return Err(BackendError::Protocol(format!("token {i}: log-probability {lp} > 0")));
                }
                total += lp.min(0.0);
                scored += 1;
            }
            other => return Err(BackendError::Protocol(format!("token {i}: unexpected log-probability {other}"))),
        }
    }
    if scored == 0 {
        return Err(BackendError::Protocol("no scorable tokens in response".into()));
    }
    Ok(SequenceLogProb { log_prob: total, first_token_dropped })
}

fn parse_fills(response: &Value) -> Result<Vec<MaskFill>, BackendError> {
    let arr = response
        .as_array()
        .or_else(|| response.get("fills").and_then(Value::as_array))
        .ok_or_else(|| BackendError::Protocol("fill-mask response is not a list".into()))?;
    arr.iter()
        .map(|item| {
            let word = item
                .get("token_str")
                .or_else(|| item.get("word"))
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Protocol(format!("fill without word: {item}")))?;
            let p = item
                .get("score")
                .or_else(|| item.get("probability"))
                .and_then(Value::as_f64)
                .ok_or_else(|| BackendError::Protocol(format!("fill without probability: {item}")))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(BackendError::Protocol(format!("fill probability {p} not in (0, 1]")));
            }
            Ok(MaskFill { word: word.to_string(), probability: p })
        })
        .collect()
}

fn parse_embedding(response: &Value) -> Result<Vec<f64>, BackendError> {
    let arr = response
        .get("embedding")
        .or_else(|| response.pointer("/data/0/embedding"))
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("embedding response has no vector".into()))?;
    arr.iter()
        .map(|x| x.as_f64().filter(|v| v.is_finite()).ok_or_else(|| BackendError::Protocol(format!("bad component {x}"))))
        .collect()
}

impl LanguageModel for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        let url = self.config.logprob_url.as_deref().ok_or_else(|| self.unsupported(Capability::SequenceLogprob))?;
        let marker = self.config.document_start.as_deref();
        let full = format!("{}{text}", marker.unwrap_or(""));
        let body = json!({ "model": self.config.model, "text": full, "echo": true, "logprobs": true });
        sum_token_logprobs(&self.post(url, &body)?, marker)
    }

    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        let url = self.config.fill_mask_url.as_deref().ok_or_else(|| self.unsupported(Capability::FillMask))?;
        check_single_slot(template)?;
        if top_k == 0 {
            return Err(BackendError::InvalidArgument("top_k must be positive".into()));
        }
        let body = json!({ "model": self.config.model, "text": template, "top_k": top_k });
        Ok(rank_fills(parse_fills(&self.post(url, &body)?)?, top_k))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let url = self.config.embed_url.as_deref().ok_or_else(|| self.unsupported(Capability::Embed))?;
        let body = json!({ "model": self.config.model, "input": text });
        let v = parse_embedding(&self.post(url, &body)?)?;
        let dim = *self.embed_dim.get_or_init(|| v.len());
        if v.len() != dim {
            return Err(BackendError::Protocol(format!("embedding dimension {} differs from {dim}", v.len())));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_completions_shape_and_drops_null_first() {
        let v = json!({"choices":[{"logprobs":{"token_logprobs":[null,-1.0,-2.5]}}]});
        let s = sum_token_logprobs(&v, None).unwrap();
        assert_eq!(s.log_prob, -3.5);
        assert!(s.first_token_dropped);
    }

    #[test]
    fn skips_document_start_tokens() {
        let v = json!({"tokens":["<|endoftext|>","He"," said"],"token_logprobs":[null,-3.0,-1.0]});
        let s = sum_token_logprobs(&v, Some("<|endoftext|>")).unwrap();
        assert_eq!(s.log_prob, -4.0);
        assert!(!s.first_token_dropped);
    }

    #[test]
    fn rejects_null_in_middle_and_positive() {
        assert!(sum_token_logprobs(&json!({"token_logprobs":[-1.0,null]}), None).is_err());
        assert!(sum_token_logprobs(&json!({"token_logprobs":[0.5]}), None).is_err());
        assert!(sum_token_logprobs(&json!({"foo":1}), None).is_err());
    }

    #[test]
    fn parses_hf_fill_shape() {
        let v = json!([{"token_str":"friend","score":0.4},{"token_str":"man","score":0.6}]);
        let fills = parse_fills(&v).unwrap();
        assert_eq!(fills.len(), 2);
        assert!(parse_fills(&json!([{"word":"x","score":1.5}])).is_err());
    }

    #[test]
    fn needs_an_endpoint() {
        assert!(RemoteBackend::new(RemoteConfig::default()).is_err());
    }
}
