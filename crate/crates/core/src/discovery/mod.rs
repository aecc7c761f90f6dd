//! Implicit-speaker discovery and topic clustering.
//!
//! A masked model fills the slot in `"[MASK] said <text>"`; tallying the
//! top fills over a corpus shows who the texts sound like. Discovered words
//! and prompts can then be grouped with seeded k-means over backend
//! embeddings.

mod kmeans;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans, Clustering, DEFAULT_MAX_ITER};

use crate::backend::{BackendError, Capability, LanguageModel, MASK_SLOT};
use crate::tone::{truncate, DEFAULT_TRUNCATION};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: BackendError,
    },
}

pub const DEFAULT_FILL_K: usize = 15;
pub const DEFAULT_VOCAB_TOP: usize = 200;
pub const DEFAULT_EXEMPLARS: usize = 5;

fn require(backend: &dyn LanguageModel, capability: Capability) -> Result<(), DiscoveryError> {
    if backend.descriptor().supports(capability) {
        Ok(())
    } else {
        Err(DiscoveryError::Backend { context: "capability check".into(), source: backend.unsupported(capability) })
    }
}

/// `"[MASK] said <text>"` with `text` cut to `limit` characters.
pub fn speaker_template(text: &str, limit: usize) -> String {
    format!("{MASK_SLOT} said {}", truncate(text, limit))
}

/// Normalizes a raw fill to a tally word: leading space markers (`Ġ`, `▁`,
/// whitespace) removed, lowercased. Sub-word pieces (`##…`) and fills with
/// non-alphanumeric characters yield `None`.
pub fn normalize_fill(raw: &str) -> Option<String> {
    let word = raw.trim_start_matches(|c: char| c == 'Ġ' || c == '▁' || c.is_whitespace()).trim_end();
    if word.is_empty() || word.starts_with("##") || !word.chars().all(char::is_alphanumeric) {
        return None;
    }
    Some(word.to_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerOptions {
    pub fill_k: usize,
    pub vocab_top: usize,
    pub truncation_limit: usize,
    pub jobs: usize,
}

impl Default for SpeakerOptions {
    fn default() -> Self {
        Self { fill_k: DEFAULT_FILL_K, vocab_top: DEFAULT_VOCAB_TOP, truncation_limit: DEFAULT_TRUNCATION, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerCount {
    pub word: String,
    /// Number of texts whose top fills include the word.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedText {
    pub text_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub fill_k: usize,
    pub vocab_top: usize,
    pub texts_seen: usize,
    pub skipped: Vec<SkippedText>,
    /// Most frequent first; ties by word.
    pub words: Vec<SpeakerCount>,
}

fn fills_for(
    backend: &dyn LanguageModel,
    text: &str,
    options: &SpeakerOptions,
) -> Result<BTreeSet<String>, BackendError> {
    let fills = backend.fill_mask(&speaker_template(text, options.truncation_limit), options.fill_k)?;
    Ok(fills.iter().take(options.fill_k).filter_map(|f| normalize_fill(&f.word)).collect())
}

/// Tallies each text's top `fill_k` speaker fills and returns the
/// `vocab_top` most frequent words. A word counts at most once per text.
/// Texts whose query fails are skipped and listed in the report.
pub fn implicit_speakers<S: AsRef<str> + Sync>(
    texts: &[(S, S)],
    backend: &dyn LanguageModel,
    options: &SpeakerOptions,
) -> Result<SpeakerTable, DiscoveryError> {
    if options.fill_k == 0 || options.vocab_top == 0 || options.jobs == 0 {
        return Err(DiscoveryError::InvalidArgument("fill_k, vocab_top and jobs must be ≥ 1".into()));
    }
    require(backend, Capability::FillMask)?;

    let chunk = texts.len().div_ceil(options.jobs).max(1);
    let partials: Vec<(BTreeMap<String, usize>, Vec<SkippedText>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = texts
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut tally = BTreeMap::new();
                    let mut skipped = Vec::new();
                    for (id, text) in part {
                        match fills_for(backend, text.as_ref(), options) {
                            Ok(words) => {
                                for w in words {
                                    *tally.entry(w).or_insert(0) += 1;
                                }
                            }
                            Err(e) => {
                                log::warn!("skipping {}: {e}", id.as_ref());
                                skipped.push(SkippedText { text_id: id.as_ref().to_string(), reason: e.to_string() });
                            }
                        }
                    }
                    (tally, skipped)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("speaker worker panicked")).collect()
    });

    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (part, skip) in partials {
        for (w, c) in part {
            *tally.entry(w).or_insert(0) += c;
        }
        skipped.extend(skip);
    }
    let mut words: Vec<SpeakerCount> = tally.into_iter().map(|(word, count)| SpeakerCount { word, count }).collect();
    words.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
    words.truncate(options.vocab_top);
    Ok(SpeakerTable { fill_k: options.fill_k, vocab_top: options.vocab_top, texts_seen: texts.len(), skipped, words })
}

fn embed_all<S: AsRef<str>>(backend: &dyn LanguageModel, items: &[S]) -> Result<Vec<Vec<f64>>, DiscoveryError> {
    require(backend, Capability::Embed)?;
    items
        .iter()
        .map(|s| {
            backend
                .embed(s.as_ref())
                .map_err(|source| DiscoveryError::Backend { context: format!("embedding {:?}", s.as_ref()), source })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordClusters {
    pub words: Vec<String>,
    pub clustering: Clustering,
}

/// Clusters discovered speaker words by their embeddings of the bare word.
pub fn cluster_speakers(
    table: &SpeakerTable,
    backend: &dyn LanguageModel,
    k: usize,
    seed: u64,
) -> Result<WordClusters, DiscoveryError> {
    let words: Vec<String> = table.words.iter().map(|w| w.word.clone()).collect();
    let vectors = embed_all(backend, &words)?;
    let clustering = kmeans(&vectors, k, seed, DEFAULT_MAX_ITER)?;
    Ok(WordClusters { words, clustering })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub index: usize,
    pub prompt: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub clustering: Clustering,
    /// Per cluster, the members nearest its centroid (closest first).
    pub exemplars: Vec<Vec<Exemplar>>,
}

impl TopicReport {
    /// `cluster  rank  distance  prompt`, one exemplar per line, with tabs
    /// and newlines inside prompts replaced by spaces.
    pub fn exemplars_tsv(&self) -> String {
        let mut out = String::from("cluster\trank\tdistance\tprompt\n");
        for (c, list) in self.exemplars.iter().enumerate() {
            for (rank, e) in list.iter().enumerate() {
                let prompt: String = e.prompt.chars().map(|ch| if ch == '\t' || ch == '\n' || ch == '\r' { ' ' } else { ch }).collect();
                writeln!(out, "{c}\t{}\t{}\t{prompt}", rank + 1, e.distance).unwrap();
            }
        }
        out
    }
}

/// k-means over prompt embeddings, with up to `exemplars` nearest member
/// prompts per cluster (ties by input order).
pub fn topic_clusters<S: AsRef<str>>(
    prompts: &[S],
    backend: &dyn LanguageModel,
    k: usize,
    seed: u64,
    exemplars: usize,
) -> Result<TopicReport, DiscoveryError> {
    let vectors = embed_all(backend, prompts)?;
    let clustering = kmeans(&vectors, k, seed, DEFAULT_MAX_ITER)?;
    let exemplars = (0..clustering.k())
        .map(|c| {
            let mut members: Vec<Exemplar> = clustering
                .members(c)
                .into_iter()
                .map(|i| Exemplar {
                    index: i,
                    prompt: prompts[i].as_ref().to_string(),
                    distance: kmeans::sq_dist(&vectors[i], &clustering.centroids[c]).sqrt(),
                })
                .collect();
            members.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
            members.truncate(exemplars);
            members
        })
        .collect();
    Ok(TopicReport { clustering, exemplars })
}
