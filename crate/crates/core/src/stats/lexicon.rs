//! Lexicon rates and term frequencies.
//!
//! Tokenization splits on runs of non-alphanumeric characters (Unicode
//! aware) and lowercases each token, so "I'd" becomes `["i", "d"]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hypothesis::welch_t, mean, StatsError, TestResult};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pattern {
    Exact(String),
    Prefix(String),
}

impl Pattern {
    fn matches(&self, token: &str) -> bool {
        match self {
            Pattern::Exact(w) => token == w,
            Pattern::Prefix(p) => token.starts_with(p.as_str()),
        }
    }
}

/// Word categories. File format: one category per line,
/// `name<TAB>word,word,prefix*`; blank lines and `#` comments ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    categories: Vec<(String, Vec<Pattern>)>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, StatsError> {
        let mut categories: Vec<(String, Vec<Pattern>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (name, words) = line
                .split_once('\t')
                .ok_or_else(|| StatsError::InvalidArgument(format!("lexicon line {}: missing tab", i + 1)))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(StatsError::InvalidArgument(format!("lexicon line {}: empty category", i + 1)));
            }
            if categories.iter().any(|(n, _)| n == name) {
                return Err(StatsError::InvalidArgument(format!("lexicon line {}: duplicate category {name:?}", i + 1)));
            }
            let patterns: Vec<Pattern> = words
                .split(',')
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .map(|w| match w.strip_suffix('*') {
                    Some(p) => Pattern::Prefix(p.to_string()),
                    None => Pattern::Exact(w),
                })
                .collect();
            if patterns.is_empty() {
                return Err(StatsError::InvalidArgument(format!("lexicon line {}: category {name:?} has no words", i + 1)));
            }
            categories.push((name.to_string(), patterns));
        }
        if categories.is_empty() {
            return Err(StatsError::InvalidArgument("lexicon has no categories".into()));
        }
        Ok(Self { categories })
    }

    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StatsError::InvalidArgument(format!("cannot read lexicon {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|(n, _)| n.as_str())
    }

    /// Matched tokens / total tokens per category (0 for a token-less text).
    pub fn rates(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        self.categories
            .iter()
            .map(|(_, pats)| {
                if tokens.is_empty() {
                    return 0.0;
                }
                let hits = tokens.iter().filter(|t| pats.iter().any(|p| p.matches(t))).count();
                hits as f64 / tokens.len() as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAssociation {
    pub category: String,
    pub mean_rate_top: f64,
    pub mean_rate_bottom: f64,
    /// Welch test of top-quartile vs bottom-quartile rates; `None` when
    /// undefined (see `note`).
    pub test: Option<TestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Compares lexicon category rates between the highest- and lowest-scoring
/// quarters of `texts`.
///
/// Texts are ordered by `(score, text_id)`; each group holds the
/// `⌊n/4⌋` texts at either end. Results are ranked by |t| (undefined
/// categories last); with `max_p` set, defined results above it are dropped.
pub fn quartile_lexicon_association(
    texts: &[ScoredText],
    lexicon: &Lexicon,
    max_p: Option<f64>,
) -> Result<Vec<CategoryAssociation>, StatsError> {
    if texts.len() < 8 {
        return Err(StatsError::InsufficientData(format!("{} texts; need ≥ 8", texts.len())));
    }
    if texts.iter().any(|t| !t.score.is_finite()) {
        return Err(StatsError::InvalidArgument("non-finite score".into()));
    }
    let mut order: Vec<&ScoredText> = texts.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.text_id.cmp(&b.text_id)));
    let q = texts.len() / 4;
    let bottom: Vec<Vec<f64>> = order[..q].iter().map(|t| lexicon.rates(&t.text)).collect();
    let top: Vec<Vec<f64>> = order[order.len() - q..].iter().map(|t| lexicon.rates(&t.text)).collect();
    let any_hit: Vec<bool> = {
        let mut hit = vec![false; lexicon.categories.len()];
        for t in texts {
            for (h, r) in hit.iter_mut().zip(lexicon.rates(&t.text)) {
                *h |= r > 0.0;
            }
        }
        hit
    };

    let mut out: Vec<CategoryAssociation> = lexicon
        .categories()
        .enumerate()
        .map(|(c, name)| {
            let top_rates: Vec<f64> = top.iter().map(|r| r[c]).collect();
            let bottom_rates: Vec<f64> = bottom.iter().map(|r| r[c]).collect();
            let (test, note) = if !any_hit[c] {
                (None, Some("category matches no tokens in any text".to_string()))
            } else {
                match welch_t(&top_rates, &bottom_rates) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            };
            CategoryAssociation {
                category: name.to_string(),
                mean_rate_top: mean(&top_rates),
                mean_rate_bottom: mean(&bottom_rates),
                test,
                note,
            }
        })
        .filter(|a| match (max_p, &a.test) {
            (Some(max), Some(t)) => t.p_value <= max,
            _ => true,
        })
        .collect();
    out.sort_by(|a, b| {
        let key = |x: &CategoryAssociation| x.test.map(|t| t.statistic.abs());
        match (key(a), key(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| a.category.cmp(&b.category))
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermMatch {
    /// Case-insensitive whole-token match (multi-word terms match a
    /// contiguous token run).
    Token,
    /// Case-sensitive substring match.
    Substring,
}

/// Fraction of texts containing `term`.
pub fn term_proportion<S: AsRef<str>>(texts: &[S], term: &str, mode: TermMatch) -> Result<f64, StatsError> {
    if term.is_empty() {
        return Err(StatsError::InvalidArgument("empty term".into()));
    }
    if texts.is_empty() {
        return Err(StatsError::InsufficientData("no texts".into()));
    }
    let hits = match mode {
        TermMatch::Substring => texts.iter().filter(|t| t.as_ref().contains(term)).count(),
        TermMatch::Token => {
            let needle = tokenize(term);
            if needle.is_empty() {
                return Err(StatsError::InvalidArgument(format!("term {term:?} has no word characters")));
            }
            texts.iter().filter(|t| tokenize(t.as_ref()).windows(needle.len()).any(|w| w == needle.as_slice())).count()
        }
    };
    Ok(hits as f64 / texts.len() as f64)
}
