use super::StatsError;

/// Fleiss' κ for a fixed number of raters per item.
///
/// `counts[i][j]` is how many raters put item `i` in category `j`; every
/// row must sum to the same rater count n ≥ 2. When every rater picks the
/// same single category for every item, chance agreement is 1 and κ is
/// reported as 1 (perfect agreement).
pub fn fleiss_kappa(counts: &[Vec<u64>]) -> Result<f64, StatsError> {
    let Some(first) = counts.first() else {
        return Err(StatsError::InsufficientData("no items".into()));
    };
    let k = first.len();
    if k < 2 {
        return Err(StatsError::InvalidArgument("need at least two categories".into()));
    }
    if let Some(i) = counts.iter().position(|row| row.len() != k) {
        return Err(StatsError::InvalidArgument(format!("item {i} has {} categories, expected {k}", counts[i].len())));
    }
    let n: u64 = first.iter().sum();
    if n < 2 {
        return Err(StatsError::InvalidArgument(format!("{n} rater(s) per item; need ≥ 2")));
    }
    if let Some(i) = counts.iter().position(|row| row.iter().sum::<u64>() != n) {
        return Err(StatsError::InvalidArgument(format!(
            "item {i} has {} ratings, expected {n}",
            counts[i].iter().sum::<u64>()
        )));
    }

    let items = counts.len() as f64;
    let nf = n as f64;
    let mut category_totals = vec![0.0; k];
    let mut p_bar = 0.0;
    for row in counts {
        let mut sq = 0.0;
        for (j, &c) in row.iter().enumerate() {
            category_totals[j] += c as f64;
            sq += (c * c) as f64;
        }
        p_bar += (sq - nf) / (nf * (nf - 1.0));
    }
    p_bar /= items;
    let p_e: f64 = category_totals.iter().map(|t| (t / (items * nf)).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
