//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerics.

#![allow(dead_code)]

use humt_core::tone::{Aggregation, DimensionSpec};
use humt_core::TableBackend;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// ln Γ(x) for x > 0 by upward recurrence and the Stirling series.
pub fn lgamma(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 15.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    shift + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Two-sided Student-t p-value by integrating the density.
///
/// With x = tan θ the tail integral becomes a smooth integral over
/// θ ∈ [atan|t|, π/2).
pub fn t_two_sided_quadrature(t: f64, df: f64) -> f64 {
    let c = (lgamma((df + 1.0) / 2.0) - lgamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let g = move |theta: f64| {
        let x = theta.tan();
        let sec2 = 1.0 / theta.cos().powi(2);
        let v = c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) * sec2;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    2.0 * simpson(&g, t.abs().atan(), std::f64::consts::FRAC_PI_2, 200_000)
}

/// χ² survival with one degree of freedom, as P(|Z| > √x) by integrating
/// the standard normal density.
pub fn chi2_sf_one_quadrature(x: f64) -> f64 {
    let z = x.sqrt();
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    2.0 * simpson(&phi, z, z + 40.0, 400_000)
}

/// χ² survival for even degrees of freedom: e^{-x/2} Σ_{i<k/2} (x/2)^i / i!.
pub fn chi2_sf_even(x: f64, df: u32) -> f64 {
    assert!(df.is_multiple_of(2));
    let h = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..df / 2 {
        term *= h / i as f64;
        sum += term;
    }
    (-h).exp() * sum
}

/// Benjamini-Hochberg by the definition: adjusted p for the value at
/// ascending rank i is min over ranks j ≥ i of m p_(j) / j, capped at 1.
pub fn bh_bruteforce(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut sorted: Vec<(usize, f64)> = p.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut out = vec![0.0; m];
    for (i, &(idx, _)) in sorted.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &(_, pj)) in sorted.iter().enumerate().skip(i) {
            best = best.min(m as f64 * pj / (j + 1) as f64);
        }
        out[idx] = best.min(1.0);
    }
    out
}

/// Fleiss' κ by enumerating every ordered pair of distinct raters.
pub fn fleiss_bruteforce(counts: &[Vec<u64>]) -> f64 {
    let k = counts[0].len();
    let mut agree_sum = 0.0;
    let mut totals = vec![0u64; k];
    let mut all = 0u64;
    for row in counts {
        let raters: Vec<usize> = row.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize)).collect();
        let n = raters.len();
        let mut agree = 0u64;
        for a in 0..n {
            for b in 0..n {
                if a != b && raters[a] == raters[b] {
                    agree += 1;
                }
            }
        }
        agree_sum += agree as f64 / (n * (n - 1)) as f64;
        for &c in &raters {
            totals[c] += 1;
        }
        all += n as u64;
    }
    let p_bar = agree_sum / counts.len() as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / all as f64).powi(2)).sum();
    (p_bar - p_e) / (1.0 - p_e)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Tone score computed in probability space from the raw table values:
/// ln(agg p+) - ln(agg p-), with compensated sums.
pub fn eq1_direct(pos: &[f64], neg: &[f64], mode: Aggregation) -> f64 {
    let (sp, sn) = (compensated_sum(pos), compensated_sum(neg));
    match mode {
        Aggregation::SumLiteral => sp.ln() - sn.ln(),
        Aggregation::MeanNormalized => (sp / pos.len() as f64).ln() - (sn / neg.len() as f64).ln(),
    }
}

pub struct RandomTable {
    pub backend: TableBackend,
    pub spec: DimensionSpec,
    pub texts: Vec<String>,
    /// [text][phrase] probabilities for the positive and negative sides.
    pub pos: Vec<Vec<f64>>,
    pub neg: Vec<Vec<f64>>,
}

/// A random dimension (1-6 phrases per side) and texts whose
/// phrase-prefixed probabilities are log-uniform in [1e-12, 1).
pub fn random_table(seed: u64, n_texts: usize, mode: Aggregation) -> RandomTable {
    let mut rng = StdRng::seed_from_u64(seed);
    let np = rng.random_range(1..=6);
    let nn = rng.random_range(1..=6);
    let pos_phrases: Vec<String> = (0..np).map(|i| format!("P{seed}x{i} said")).collect();
    let neg_phrases: Vec<String> = (0..nn).map(|i| format!("N{seed}x{i} said")).collect();
    let spec = DimensionSpec::new("random", pos_phrases.clone(), neg_phrases.clone(), mode).unwrap();
    let mut b = TableBackend::builder();
    let mut texts = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in 0..n_texts {
        let text = format!("text {t} of table {seed}");
        for (phrases, out) in [(&pos_phrases, &mut pos), (&neg_phrases, &mut neg)] {
            let mut ps = Vec::new();
            for ph in phrases {
                let p = 10f64.powf(-12.0 * rng.random::<f64>());
                b = b.prob(format!("{ph} {text}"), p);
                ps.push(p);
            }
            out.push(ps);
        }
        texts.push(text);
    }
    RandomTable { backend: b.build().unwrap(), spec, texts, pos, neg }
}
