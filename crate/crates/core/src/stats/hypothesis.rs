use serde::{Deserialize, Serialize};

use super::distributions::{chi_square_sf, student_t_two_sided, student_t_two_sided_quantile};
use super::{check_finite, mean, variance, Method, StatsError, TestResult};

/// Welch's unequal-variance two-sample t-test, two-sided.
///
/// When both groups have zero variance the statistic is undefined; equal
/// means then yield `t = 0, p = 1` (df falls back to `n_a + n_b - 2`) and
/// different means are a [`StatsError::DegenerateVariance`].
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::InsufficientData(format!("group sizes {} and {}; need ≥ 2 each", a.len(), b.len())));
    }
    check_finite("a", a)?;
    check_finite("b", b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (variance(a) / na, variance(b) / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(TestResult { statistic: 0.0, degrees_of_freedom: na + nb - 2.0, p_value: 1.0, method: Method::WelchT });
        }
        return Err(StatsError::DegenerateVariance { mean_diff: ma - mb });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestResult { statistic: t, degrees_of_freedom: df, p_value: student_t_two_sided(t, df), method: Method::WelchT })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDiffReport {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub diff: f64,
    /// `(e^mean_a - e^mean_b) / e^mean_b`: how much more likely, relatively,
    /// group a's average score makes the positive side.
    pub percent_likelihood_diff: f64,
    pub test: TestResult,
    /// Half-width of the 95% Welch confidence interval for `diff`.
    pub ci95_halfwidth: f64,
}

/// Compares scores of the two sides of aligned pairs (e.g. chosen vs.
/// rejected responses to the same prompt).
pub fn matched_mean_diff(scores_a: &[f64], scores_b: &[f64]) -> Result<MeanDiffReport, StatsError> {
    if scores_a.len() != scores_b.len() {
        return Err(StatsError::InvalidArgument(format!(
            "column lengths differ: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let test = welch_t(scores_a, scores_b)?;
    let (ma, mb) = (mean(scores_a), mean(scores_b));
    let n = scores_a.len() as f64;
    let se = (variance(scores_a) / n + variance(scores_b) / n).sqrt();
    let ci95_halfwidth = if se == 0.0 { 0.0 } else { student_t_two_sided_quantile(0.05, test.degrees_of_freedom) * se };
    Ok(MeanDiffReport {
        n: scores_a.len(),
        mean_a: ma,
        mean_b: mb,
        diff: ma - mb,
        percent_likelihood_diff: (ma - mb).exp_m1(),
        test,
        ci95_halfwidth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
    pub test: TestResult,
}

/// Pearson's r with a two-sided p-value from `t = r √((n-2)/(1-r²))`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::InvalidArgument(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(StatsError::InsufficientData(format!("{} observations; need ≥ 3", x.len())));
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::UndefinedCorrelation("constant input".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = x.len() as f64 - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(Correlation { r, n: x.len(), test: TestResult { statistic: r, degrees_of_freedom: df, p_value: p, method: Method::PearsonR } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhAdjusted {
    /// In input order.
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
    pub alpha: f64,
}

/// Benjamini-Hochberg step-up adjustment: the adjusted value at rank `i`
/// is `min_{j >= i} (m / j) p_(j)`, capped at 1.
pub fn bh_adjust(p_values: &[f64], alpha: f64) -> Result<BhAdjusted, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidArgument(format!("p-value {p} not in [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        // m p / m can round one ulp below p
        adjusted[i] = running.min(1.0).max(p_values[i]);
    }
    let reject = adjusted.iter().map(|&a| a <= alpha).collect();
    Ok(BhAdjusted { adjusted, reject, alpha })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChiSquareOptions {
    pub yates: bool,
}

/// Pearson χ² test of independence on a 2×2 table (df = 1).
pub fn chi_square_independence(table: [[u64; 2]; 2], options: ChiSquareOptions) -> Result<TestResult, StatsError> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) || cols.contains(&0) {
        return Err(StatsError::ZeroMarginal);
    }
    let total = (rows[0] + rows[1]) as f64;
    let mut chi2 = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = rows[i] as f64 * cols[j] as f64 / total;
            let mut diff = (obs as f64 - expected).abs();
            if options.yates {
                diff = (diff - 0.5).max(0.0);
            }
            chi2 += diff * diff / expected;
        }
    }
    Ok(TestResult {
        statistic: chi2,
        degrees_of_freedom: 1.0,
        p_value: chi_square_sf(chi2, 1.0),
        method: if options.yates { Method::ChiSquareYates } else { Method::ChiSquare },
    })
}

/// Cross-tabulates binary labels against score signs:
/// rows = label (positive, negative), columns = score (> 0, ≤ 0).
pub fn sign_agreement_table(labels: &[bool], scores: &[f64]) -> Result<[[u64; 2]; 2], StatsError> {
    if labels.len() != scores.len() {
        return Err(StatsError::InvalidArgument("labels and scores differ in length".into()));
    }
    let mut t = [[0u64; 2]; 2];
    for (&l, &s) in labels.iter().zip(scores) {
        t[usize::from(!l)][usize::from(s <= 0.0)] += 1;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub a: String,
    pub b: String,
    pub r: f64,
    pub n: usize,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dimensions: Vec<String>,
    pub alpha: f64,
    /// One entry per unordered pair of distinct dimensions.
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationReport {
    /// Symmetric lookup; the diagonal is 1.
    pub fn r(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return self.dimensions.iter().any(|d| d == a).then_some(1.0);
        }
        self.entries.iter().find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a)).map(|e| e.r)
    }

    pub fn entry(&self, a: &str, b: &str) -> Option<&CorrelationEntry> {
        self.entries.iter().find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
    }
}

/// Pairwise Pearson correlations between aligned score columns with
/// Benjamini-Hochberg adjustment across all pairs.
pub fn correlation_matrix(columns: &[(String, Vec<f64>)], alpha: f64) -> Result<CorrelationReport, StatsError> {
    if columns.len() < 2 {
        return Err(StatsError::InsufficientData("need at least two dimensions".into()));
    }
    let mut raw = Vec::new();
    for i in 0..columns.len() {
        for j in i + 1..columns.len() {
            let c = pearson_r(&columns[i].1, &columns[j].1)?;
            raw.push((i, j, c));
        }
    }
    let p: Vec<f64> = raw.iter().map(|(_, _, c)| c.test.p_value).collect();
    let adj = bh_adjust(&p, alpha)?;
    let entries = raw
        .iter()
        .enumerate()
        .map(|(k, (i, j, c))| CorrelationEntry {
            a: columns[*i].0.clone(),
            b: columns[*j].0.clone(),
            r: c.r,
            n: c.n,
            p_raw: c.test.p_value,
            p_adjusted: adj.adjusted[k],
            reject: adj.reject[k],
        })
        .collect();
    Ok(CorrelationReport { dimensions: columns.iter().map(|(n, _)| n.clone()).collect(), alpha, entries })
}
