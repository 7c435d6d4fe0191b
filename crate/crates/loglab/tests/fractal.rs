use loglab::fractal::*;
use proptest::prelude::*;

#[test]
fn trivial_trees() {
    let full = sample_retained(2, 1.0, 3, 2, 1).unwrap();
    assert_eq!(full.finest().len(), 4 * 64);
    assert!(has_crossing(&full, 0, ConnectivityMode::HalfOpen));
    let empty = sample_retained(3, 0.0, 2, 1, 1).unwrap();
    assert!(empty.levels[0].is_empty());
    assert!(!has_crossing(&empty, 0, ConnectivityMode::Closed));
}

#[test]
fn memory_guard() {
    assert!(sample_retained(10, 1.0, 6, 1, 0).is_err());
}

#[test]
fn expected_count_at_depth_three() {
    let samples = 10_000;
    let counts: Vec<f64> = (0..samples).map(|s| sample_retained(2, 0.5, 3, 1, s).unwrap().finest().len() as f64).collect();
    let m = counts.iter().sum::<f64>() / samples as f64;
    let var = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let se = (var / samples as f64).sqrt();
    assert!((m - 4.0).abs() < 3.0 * se, "mean {m} (se {se})");
}

#[test]
fn survival_fixed_points() {
    assert_eq!(survival_probability(3, 1.0), 1.0);
    assert_eq!(survival_probability(2, 0.25), 0.0);
    assert_eq!(survival_probability(3, 0.1), 0.0);
    let s = survival_probability(2, 0.5);
    let q = 1.0 - s;
    assert!((q - (0.5 + 0.5 * q).powi(4)).abs() < 1e-12);
    assert!((q - 0.0874).abs() < 1e-3);
}

/// Exact depth-1 closed-mode crossing probability in d=2 by enumerating the
/// 2^4 child configurations.
fn depth_one_oracle(p: f64) -> f64 {
    let mut total = 0.0;
    for mask in 0u32..16 {
        let on = |x: u32, y: u32| mask >> (x + 2 * y) & 1 == 1;
        let k = mask.count_ones() as i32;
        let w = p.powi(k) * (1.0 - p).powi(4 - k);
        let crosses = (0..2).any(|y0| on(0, y0) && (0..2).any(|y1| on(1, y1)));
        if crosses {
            total += w;
        }
    }
    p * total
}

#[test]
fn depth_one_crossing_rate() {
    let oracle = depth_one_oracle(0.5);
    assert!((oracle - 0.28125).abs() < 1e-15);
    let est = crossing_rate(2, 0.5, 1, 1, 20_000, 3, ConnectivityMode::Closed).unwrap();
    assert!((est.crossing_rate - oracle).abs() < 3.0 * est.stderr, "{est:?}");
    assert!(est.ci_lo <= est.crossing_rate && est.crossing_rate <= est.ci_hi);
}

#[test]
fn truncated_survival_decreases() {
    let samples = 4000;
    let mut prev = 1.0;
    for n in [2, 5, 8] {
        let rate = (0..samples).filter(|&s| survives_to_depth(2, 0.6, n, s)).count() as f64 / samples as f64;
        assert!(rate <= prev + 1e-12);
        prev = rate;
    }
    assert!(prev >= survival_probability(2, 0.6) - 0.05);
}

#[test]
fn pc_at_depth_zero_is_half() {
    let est = estimate_pc(2, 0, 4000, 1e-3, 9).unwrap();
    assert!(est.ci.0 <= 0.5 && 0.5 <= est.ci.1, "{est:?}");
    assert!((est.pc_estimate - 0.5).abs() < 0.05);
    assert!(est.curve.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn pc_guard() {
    assert!(estimate_pc(2, 7, 10, 0.01, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn parents_are_retained(d in 1usize..4, p in 0.0f64..1.0, n in 0u32..4, seed in any::<u64>()) {
        let t = sample_retained(d, p, n, 2, seed).unwrap();
        prop_assert!(t.parents_consistent());
    }

    #[test]
    fn half_open_implies_closed(p in 0.3f64..0.9, n in 1u32..4, seed in any::<u64>()) {
        let t = sample_retained(2, p, n, 2, seed).unwrap();
        if has_crossing(&t, 0, ConnectivityMode::HalfOpen) {
            prop_assert!(has_crossing(&t, 0, ConnectivityMode::Closed));
        }
    }

    #[test]
    fn crossing_monotone_in_p(p in 0.0f64..1.0, dp in 0.0f64..0.5, n in 0u32..4, seed in any::<u64>()) {
        let lo = sample_retained(2, p, n, 1, seed).unwrap();
        let hi = sample_retained(2, (p + dp).min(1.0), n, 1, seed).unwrap();
        for (a, b) in lo.levels.iter().zip(&hi.levels) {
            prop_assert!(a.is_subset(b));
        }
        if has_crossing(&lo, 0, ConnectivityMode::Closed) {
            prop_assert!(has_crossing(&hi, 0, ConnectivityMode::Closed));
        }
    }

    #[test]
    fn pav_is_monotone(v in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
        let f = isotonic_increasing(&v);
        prop_assert_eq!(f.len(), v.len());
        prop_assert!(f.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let (s0, s1): (f64, f64) = (v.iter().sum(), f.iter().sum());
        prop_assert!((s0 - s1).abs() < 1e-9);
    }
}
