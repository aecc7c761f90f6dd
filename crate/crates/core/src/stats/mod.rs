//! Statistical procedures: Welch t-tests, matched-pair mean differences,
//! Pearson correlation, Benjamini-Hochberg adjustment, χ² independence,
//! Fleiss' κ, lexicon quartile association and term proportions.

mod agreement;
pub mod distributions;
mod hypothesis;
mod lexicon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::fleiss_kappa;
pub use hypothesis::{
    bh_adjust, chi_square_independence, correlation_matrix, matched_mean_diff, pearson_r, sign_agreement_table,
    welch_t, BhAdjusted, ChiSquareOptions, Correlation, CorrelationEntry, CorrelationReport, MeanDiffReport,
};
pub use lexicon::{
    quartile_lexicon_association, term_proportion, tokenize, CategoryAssociation, Lexicon, ScoredText, TermMatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WelchT,
    /// `statistic` holds r; the p-value comes from the t transform with n - 2 df.
    PearsonR,
    ChiSquare,
    ChiSquareYates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("both groups have zero variance (mean difference {mean_diff})")]
    DegenerateVariance { mean_diff: f64 },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("zero marginal total in contingency table")]
    ZeroMarginal,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub(crate) fn check_finite(name: &str, xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::InvalidArgument(format!("{name} contains non-finite values")));
    }
    Ok(())
}
