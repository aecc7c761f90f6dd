use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ToneError;

/// How the phrase probabilities of one side are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain sum of phrase probabilities (log-sum-exp in log space).
    #[default]
    SumLiteral,
    /// Mean of phrase probabilities, i.e. the sum divided by the set size.
    MeanNormalized,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::SumLiteral => "sum_literal",
            Aggregation::MeanNormalized => "mean_normalized",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Aggregation {
    type Err = ToneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum_literal" | "sum" => Ok(Aggregation::SumLiteral),
            "mean_normalized" | "mean" => Ok(Aggregation::MeanNormalized),
            other => Err(ToneError::InvalidArgument(format!(
                "unknown aggregation {other:?} (expected sum_literal or mean_normalized)"
            ))),
        }
    }
}

/// A named perception axis: prefixes whose probability raises the score
/// (`positive_phrases`) against prefixes that lower it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    name: String,
    positive_phrases: Vec<String>,
    negative_phrases: Vec<String>,
    aggregation: Aggregation,
}

impl DimensionSpec {
    pub fn new<P, N>(name: impl Into<String>, positive: P, negative: N, aggregation: Aggregation) -> Result<Self, ToneError>
    where
        P: IntoIterator,
        P::Item: Into<String>,
        N: IntoIterator,
        N::Item: Into<String>,
    {
        let name = name.into();
        if name.trim().is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(ToneError::InvalidSpec(format!("dimension name {name:?} must be a non-empty identifier")));
        }
        let positive: Vec<String> = positive.into_iter().map(Into::into).collect();
        let negative: Vec<String> = negative.into_iter().map(Into::into).collect();
        for (side, phrases) in [("positive", &positive), ("negative", &negative)] {
            if phrases.is_empty() {
                return Err(ToneError::InvalidSpec(format!("{name}: {side} phrase set is empty")));
            }
            if phrases.iter().any(|p| p.trim().is_empty()) {
                return Err(ToneError::InvalidSpec(format!("{name}: {side} phrase set has a blank phrase")));
            }
        }
        Ok(Self { name, positive_phrases: positive, negative_phrases: negative, aggregation })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn positive_phrases(&self) -> &[String] {
        &self.positive_phrases
    }

    pub fn negative_phrases(&self) -> &[String] {
        &self.negative_phrases
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    /// Same spec with the two phrase sets exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            name: self.name.clone(),
            positive_phrases: self.negative_phrases.clone(),
            negative_phrases: self.positive_phrases.clone(),
            aggregation: self.aggregation,
        }
    }
}

fn builtin(name: &str, pos: &[&str], neg: &[&str]) -> DimensionSpec {
    DimensionSpec::new(name, pos.iter().copied(), neg.iter().copied(), Aggregation::SumLiteral)
        .expect("built-in spec is valid")
}

/// Human-like tone plus the four social-perception dimensions.
pub fn builtin_specs() -> Vec<DimensionSpec> {
    vec![
        builtin("humt", &["He said", "She said"], &["It said"]),
        builtin(
            "social",
            &[
                "My friend said",
                "My partner said",
                "My girlfriend said",
                "My boyfriend said",
                "My husband said",
                "My wife said",
            ],
            &["The stranger said"],
        ),
        builtin(
            "warmth",
            &["The friend said", "The lover said", "The mentor said", "The idol said"],
            &["The stranger said", "The enemy said", "The examiner said", "The dictator said"],
        ),
        builtin("gender", &["She said"], &["He said"]),
        // high- versus low-power speech verbs
        builtin(
            "status",
            &["He commanded", "He proclaimed", "He demanded"],
            &["He pleaded", "He mentioned", "He asked"],
        ),
    ]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(default, rename = "dimension")]
    dimensions: Vec<SpecEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecEntry {
    name: String,
    positive: Vec<String>,
    negative: Vec<String>,
    #[serde(default)]
    aggregation: Aggregation,
}

/// Immutable-after-construction set of dimension specs with unique names.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    specs: BTreeMap<String, DimensionSpec>,
    order: Vec<String>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for s in builtin_specs() {
            r.insert(s).expect("built-in names unique");
        }
        r
    }

    pub fn insert(&mut self, spec: DimensionSpec) -> Result<(), ToneError> {
        if self.specs.contains_key(spec.name()) {
            return Err(ToneError::DuplicateDimension(spec.name().to_string()));
        }
        self.order.push(spec.name().to_string());
        self.specs.insert(spec.name().to_string(), spec);
        Ok(())
    }

    /// Parses a TOML file of `[[dimension]]` tables with `name`,
    /// `positive`, `negative` and optional `aggregation`.
    pub fn parse_toml(text: &str) -> Result<Vec<DimensionSpec>, ToneError> {
        let file: SpecFile = toml::from_str(text).map_err(|e| ToneError::Config(e.to_string()))?;
        file.dimensions
            .into_iter()
            .map(|e| DimensionSpec::new(e.name, e.positive, e.negative, e.aggregation))
            .collect()
    }

    /// Adds every spec from a TOML dimension file.
    pub fn extend_from_file(&mut self, path: &Path) -> Result<(), ToneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToneError::Config(format!("cannot read {}: {e}", path.display())))?;
        for spec in Self::parse_toml(&text)? {
            self.insert(spec)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DimensionSpec, ToneError> {
        self.specs
            .get(name)
            .ok_or_else(|| ToneError::UnknownDimension { name: name.to_string(), known: self.order.clone() })
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DimensionSpec> {
        self.order.iter().map(|n| &self.specs[n])
    }

    /// Resolves a comma-separated selection; `all` selects every spec in
    /// registration order.
    pub fn select(&self, selection: &str) -> Result<Vec<DimensionSpec>, ToneError> {
        if selection.trim() == "all" {
            return Ok(self.iter().cloned().collect());
        }
        let mut out: Vec<DimensionSpec> = Vec::new();
        for name in selection.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let spec = self.get(name)?;
            if !out.iter().any(|s| s.name() == name) {
                out.push(spec.clone());
            }
        }
        if out.is_empty() {
            return Err(ToneError::InvalidArgument("no dimensions selected".into()));
        }
        Ok(out)
    }
}
