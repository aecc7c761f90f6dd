#![allow(clippy::excessive_precision)]

mod common;

use humt_core::stats::distributions::{chi_square_sf, student_t_two_sided, student_t_two_sided_quantile};
use humt_core::stats::{
    bh_adjust, chi_square_independence, fleiss_kappa, matched_mean_diff, pearson_r, welch_t, ChiSquareOptions,
};
use proptest::prelude::*;

use common::{bh_bruteforce, chi2_sf_even, fleiss_bruteforce, t_two_sided_quadrature};

// (t, df, two-sided p) from mpmath at 40 digits
const T_FIXTURES: &[(f64, f64, f64)] = &[
    (-3.6742346141747673, 4.0, 0.021311641128756723622),
    (0.5, 3.3, 0.64853507639955839006),
    (2.1, 10.0, 0.062077244202218572854),
    (1.0, 1.0, 0.5),
    (4.0, 7.5, 0.0045061103501851778412),
    (0.01, 200.0, 0.99203125515328111873),
    (10.0, 2.5, 0.0044414957673074247731),
    (2.576, 1000.0, 0.01013762393360783315),
];

// (x, df, upper tail) from mpmath
const CHI2_FIXTURES: &[(f64, f64, f64)] = &[
    (20.0, 1.0, 7.7442164310440836377e-6),
    (5.050505050505051, 1.0, 0.024618761380815170303),
    (0.5, 1.0, 0.47950012218695346232),
    (3.84, 1.0, 0.050043521248705103189),
    (12.3, 4.0, 0.015254394655769612904),
    (0.001, 1.0, 0.97477287936996038828),
];

#[test]
fn t_p_values_match_high_precision_fixtures() {
    for &(t, df, p) in T_FIXTURES {
        let got = student_t_two_sided(t, df);
        assert!((got - p).abs() <= 1e-12 * p.max(1e-3), "t={t} df={df}: {got} vs {p}");
    }
}

#[test]
fn t_p_values_match_quadrature() {
    for &(t, df, _) in T_FIXTURES {
        let q = t_two_sided_quadrature(t, df);
        let got = student_t_two_sided(t, df);
        assert!((got - q).abs() < 1e-8, "t={t} df={df}: {got} vs quadrature {q}");
    }
}

#[test]
fn chi_square_tail_fixtures() {
    for &(x, df, p) in CHI2_FIXTURES {
        let got = chi_square_sf(x, df);
        assert!((got - p).abs() <= 1e-12 * p.max(1e-3), "x={x} df={df}: {got} vs {p}");
    }
    for df in [2u32, 4, 6, 10] {
        for x in [0.1, 1.0, 3.3, 9.0, 25.0] {
            let exact = chi2_sf_even(x, df);
            assert!((chi_square_sf(x, df as f64) - exact).abs() < 1e-13, "x={x} df={df}");
        }
    }
}

#[test]
fn quantile_inverts_p_value() {
    for df in [1.0, 2.5, 9.0, 60.0] {
        for p in [0.5, 0.05, 0.001] {
            let t = student_t_two_sided_quantile(p, df);
            assert!((student_t_two_sided(t, df) - p).abs() < 1e-10);
        }
    }
}

#[test]
fn welch_matches_scipy() {
    // scipy.stats.ttest_ind(equal_var=False)
    let r = welch_t(&[0.12, 0.35, -0.2, 0.5, 0.41, 0.05, 0.33], &[-0.1, 0.02, 0.15, -0.3, 0.07]).unwrap();
    assert!((r.statistic - 2.1037804112185765).abs() < 1e-9);
    assert!((r.degrees_of_freedom - 9.9865546259078).abs() < 1e-9);
    assert!((r.p_value - 0.06172069042040972).abs() < 1e-6);
    let r = welch_t(
        &[2.1, 2.4, 1.9, 2.2, 2.0, 2.3, 2.5, 1.8],
        &[1.5, 1.9, 1.2, 2.6, 0.9, 1.1, 1.7, 2.0, 1.4, 1.3],
    )
    .unwrap();
    assert!((r.statistic - 3.253874390139599).abs() < 1e-9);
    assert!((r.degrees_of_freedom - 13.580642489612226).abs() < 1e-9);
    assert!((r.p_value - 0.005971496429451439).abs() < 1e-6);
}

#[test]
fn pearson_matches_scipy() {
    let c = pearson_r(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2.0, 1.0, 4.0, 3.0, 7.0, 5.0]).unwrap();
    assert!((c.r - 0.7917946548886297).abs() < 1e-9);
    assert!((c.test.p_value - 0.06051140336275659).abs() < 1e-6);
    let c = pearson_r(&[0.3, 1.2, -0.5, 2.2, 0.9, 1.7, -1.1, 0.4], &[0.1, 1.0, -0.2, 1.9, 1.1, 1.2, -0.7, 0.9]).unwrap();
    assert!((c.r - 0.9591047100028867).abs() < 1e-9);
    assert!((c.test.p_value - 0.00016578424788911284).abs() < 1e-6);
}

#[test]
fn chi_square_matches_scipy() {
    let plain = chi_square_independence([[12, 5], [4, 14]], ChiSquareOptions { yates: false }).unwrap();
    assert!((plain.statistic - 8.241314069487442).abs() < 1e-9);
    assert!((plain.p_value - 0.004094747651176815).abs() < 1e-6);
    let yates = chi_square_independence([[12, 5], [4, 14]], ChiSquareOptions { yates: true }).unwrap();
    assert!((yates.statistic - 6.407580301857583).abs() < 1e-9);
    assert!((yates.p_value - 0.011363416602876389).abs() < 1e-6);
    let y2 = chi_square_independence([[8, 2], [3, 7]], ChiSquareOptions { yates: true }).unwrap();
    assert!((y2.statistic - 3.2323232323232323).abs() < 1e-9);
    assert!((y2.p_value - 0.07219819770165774).abs() < 1e-6);
}

#[test]
fn bh_fixtures() {
    let r = bh_adjust(&[0.0001, 0.0005, 0.002], 0.001).unwrap();
    for (got, want) in r.adjusted.iter().zip([0.0003, 0.00075, 0.002]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(r.reject, [true, true, false]);
    // statsmodels multipletests(method="fdr_bh")
    let p = [0.01, 0.04, 0.03, 0.005, 0.2, 0.04];
    let r = bh_adjust(&p, 0.05).unwrap();
    for (got, want) in r.adjusted.iter().zip([0.03, 0.048, 0.048, 0.03, 0.2, 0.048]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(r.reject, [true, true, true, true, false, true]);
}

fn wikipedia_fleiss() -> Vec<Vec<u64>> {
    vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ]
}

#[test]
fn fleiss_reference_example() {
    let counts = wikipedia_fleiss();
    let k = fleiss_kappa(&counts).unwrap();
    assert!((k - fleiss_bruteforce(&counts)).abs() < 1e-12);
    // statsmodels.stats.inter_rater.fleiss_kappa
    assert!((k - 0.20993070442195522).abs() < 1e-12);
}

#[test]
fn percent_difference_small_gap() {
    let r = matched_mean_diff(&[0.07, 0.08, 0.09], &[0.03, 0.04, 0.05]).unwrap();
    assert!((r.percent_likelihood_diff - 0.040810774192388226).abs() < 1e-12);
}

proptest! {
    #[test]
    fn cauchy_closed_form(t in -50.0f64..50.0) {
        let exact = 1.0 - 2.0 * t.abs().atan() / std::f64::consts::PI;
        prop_assert!((student_t_two_sided(t, 1.0) - exact).abs() < 1e-13);
    }

    #[test]
    fn bh_matches_definition(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let r = bh_adjust(&p, 0.05).unwrap();
        let want = bh_bruteforce(&p);
        for (g, w) in r.adjusted.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bh_monotone_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let r = bh_adjust(&p, 0.05).unwrap();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in idx.windows(2) {
            prop_assert!(r.adjusted[w[0]] <= r.adjusted[w[1]]);
        }
        for (a, raw) in r.adjusted.iter().zip(&p) {
            prop_assert!(a >= raw && *a <= 1.0);
        }
    }

    #[test]
    fn welch_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 2..20),
        b in prop::collection::vec(-10.0f64..10.0, 2..20),
    ) {
        let (Ok(ab), Ok(ba)) = (welch_t(&a, &b), welch_t(&b, &a)) else { return Ok(()) };
        prop_assert!((ab.statistic + ba.statistic).abs() < 1e-9 * (1.0 + ab.statistic.abs()));
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((ab.degrees_of_freedom - ba.degrees_of_freedom).abs() < 1e-9 * ab.degrees_of_freedom);
    }

    #[test]
    fn pearson_affine_invariant(
        xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
        scale in 0.1f64..10.0,
        shift in -100.0f64..100.0,
        flip in any::<bool>(),
    ) {
        let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
        let Ok(base) = pearson_r(&x, &y) else { return Ok(()) };
        prop_assume!(base.r.abs() < 0.999999);
        let s = if flip { -scale } else { scale };
        let x2: Vec<f64> = x.iter().map(|v| s * v + shift).collect();
        let moved = pearson_r(&x2, &y).unwrap();
        let want = if flip { -base.r } else { base.r };
        prop_assert!((moved.r - want).abs() < 1e-9);
        prop_assert!((moved.test.p_value - base.test.p_value).abs() < 1e-6);
    }

    #[test]
    fn fleiss_matches_pairs_and_relabeling(
        rows in prop::collection::vec(prop::collection::vec(0u64..4, 3), 2..12),
        perm in Just([2usize, 0, 1]),
    ) {
        // force a fixed rater count by topping up the last category
        let n = 5u64;
        let counts: Vec<Vec<u64>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                let s: u64 = r.iter().sum();
                if s > n { r = vec![n, 0, 0]; } else { r[2] += n - s; }
                r
            })
            .collect();
        let Ok(k) = fleiss_kappa(&counts) else { return Ok(()) };
        let relabeled: Vec<Vec<u64>> = counts.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let mut shuffled = relabeled.clone();
        shuffled.reverse();
        let k2 = fleiss_kappa(&shuffled).unwrap();
        prop_assert!((k - k2).abs() < 1e-12);
        let bf = fleiss_bruteforce(&counts);
        if bf.is_finite() {
            prop_assert!((k - bf).abs() < 1e-12);
        }
    }

    // below df 2 the integrand has an endpoint singularity Simpson cannot resolve
    #[test]
    fn t_p_value_quadrature_random(t in -8.0f64..8.0, df in 2.0f64..80.0) {
        let q = t_two_sided_quadrature(t, df);
        prop_assert!((student_t_two_sided(t, df) - q).abs() < 1e-8);
    }
}
