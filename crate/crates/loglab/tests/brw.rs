use loglab::brw::*;
use loglab::paths::*;
use std::f64::consts::LN_2;

fn point_chain(d: usize, n: u32, x: &[i64]) -> Vec<Path> {
    (0..=n).map(|_| Path::from_vertices(d, 0, LatticeKind::Unit, Family::PBase, &[x.to_vec()]).unwrap()).collect()
}

#[test]
fn brw_value_basics() {
    let noise = BoxNoise::new(4);
    let x = [0.3, 0.7];
    assert_eq!(brw_value(&x, 0, &noise), noise.value(0, &[0, 0]));
    assert_eq!(brw_value(&x, 6, &noise), brw_value(&[0.3001, 0.7001], 6, &noise));
    for n in 1..8 {
        let diff = brw_value(&x, n, &noise) - brw_value(&x, n - 1, &noise);
        assert!((diff - noise.value(n, &box_of(&x, n))).abs() < 1e-12);
    }
}

#[test]
fn brw_variance_at_level_nine() {
    let x = [0.123, 0.456, 0.789];
    let samples = 100_000;
    let vals: Vec<f64> = (0..samples).map(|s| brw_value(&x, 9, &BoxNoise::new(s as u64))).collect();
    let m = vals.iter().sum::<f64>() / samples as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
    // Var of the sample variance for a Gaussian is 2σ⁴/(N-1).
    let target = 10.0 * LN_2;
    let se = target * (2.0 / (samples - 1) as f64).sqrt();
    assert!((var - target).abs() < 3.0 * se, "var {var} vs {target} (se {se})");
}

#[test]
fn noise_keys_look_independent() {
    let samples = 2000;
    let bound = 4.0 / (samples as f64).sqrt();
    for key in 0..50i64 {
        let (mut sxy, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in 0..samples {
            let noise = BoxNoise::new(s);
            let a = noise.value(2, &[key, 0]);
            let b = noise.value(2, &[key, 1]);
            sx += a;
            sy += b;
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        let n = samples as f64;
        let r = (sxy / n - sx * sy / n / n) / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
        assert!(r.abs() < bound, "key {key}: r = {r}");
    }
}

#[test]
fn extreme_alphas() {
    let chain = point_chain(2, 3, &[0, 0]);
    for s in 0..100_000u64 {
        let noise = BoxNoise::new(s);
        assert!(is_k_good(&chain, -1e6, 0, 3, &noise).unwrap().is_good);
        let v = is_k_good(&chain, 1e6, 0, 3, &noise).unwrap();
        assert!(!v.is_good);
        assert_eq!(v.first_failure, Some((0, 0)));
    }
}

#[test]
fn single_vertex_good_rate_matches_tail() {
    let chain = point_chain(2, 3, &[0, 0]);
    let alpha = 0.5;
    let samples = 100_000;
    let hits = (0..samples).filter(|&s| is_k_good(&chain, alpha, 3, 3, &BoxNoise::new(s as u64)).unwrap().is_good).count();
    let p = good_probability(alpha);
    let rate = hits as f64 / samples as f64;
    let se = (p * (1.0 - p) / samples as f64).sqrt();
    assert!((rate - p).abs() < 3.0 * se, "rate {rate} vs {p}");
}

#[test]
fn verdict_is_deterministic() {
    let spec = ChainSpec::new(110, 10, 1, ChainFamily::P);
    let chain = sample_refined_chain(&spec, 3).unwrap();
    let noise = BoxNoise::new(8);
    let a = is_k_good(&chain, -0.5, 0, 1, &noise).unwrap();
    assert_eq!(a, is_k_good(&chain, -0.5, 0, 1, &noise).unwrap());
    assert_eq!(a.is_good, a.first_failure.is_none());
}

#[test]
fn moments_with_certain_goodness_are_one() {
    let spec = ChainSpec::new(110, 10, 1, ChainFamily::P);
    let r = weighted_count_moments(&spec, 0, -1e6, 40, 5, None).unwrap();
    assert_eq!(r.ratio_estimate, 1.0);
    assert_eq!(r.direct_estimate, 1.0);
    assert_eq!(r.stderr, 0.0);
}

#[test]
fn moments_depth_two_exponent_bound() {
    let spec = ChainSpec::new(110, 10, 2, ChainFamily::P);
    let r = weighted_count_moments(&spec, 1, 0.0, 24, 11, Some(0.1)).unwrap();
    assert!(r.ratio_estimate.is_finite() && r.ratio_estimate >= 1.0);
    assert_eq!(r.bound_violations, 0);
    assert!(r.target_bound.is_some());
}

#[test]
fn identical_pair_weight() {
    let spec = ChainSpec::new(110, 10, 1, ChainFamily::P);
    let chain = sample_refined_chain(&spec, 21).unwrap();
    let p = &chain[1];
    let shared = shared_boxes(p, p, 0, 1);
    assert_eq!(shared.len(), box_count(p, 0, 1));
}

#[test]
fn search_trivial_and_reverified() {
    let spec = ChainSpec::new(110, 10, 1, ChainFamily::P);
    let r = good_path_search(&spec, 0, -1e6, 5, 2).unwrap();
    assert!(r.found);
    assert_eq!(r.tried, 1);
    let s = good_path_search(&spec, 1, -0.3, 200, 7).unwrap();
    if let Some(chain) = s.exemplar {
        assert!(is_k_good(&chain, -0.3, 1, 1, &BoxNoise::new(7)).unwrap().is_good);
        assert_eq!(sample_refined_chain(&spec, s.exemplar_seed.unwrap()).unwrap(), chain);
    }
}

#[test]
fn search_success_rate_matches_box_counts() {
    let spec = ChainSpec::new(110, 2, 1, ChainFamily::P);
    let attempts = 10_000;
    let mut hits = 0usize;
    let mut expect = 0.0;
    let mut var = 0.0;
    for s in 0..attempts {
        let seed = 1000 + s as u64;
        let chain = sample_refined_chain(&spec, search_chain_seed(seed, 0)).unwrap();
        let q = 0.5f64.powi(box_count(&chain[1], 1, 1) as i32);
        expect += q;
        var += q * (1.0 - q);
        if good_path_search(&spec, 1, 0.0, 1, seed).unwrap().found {
            hits += 1;
        }
    }
    let se = var.sqrt();
    assert!((hits as f64 - expect).abs() < 3.0 * se, "hits {hits} vs expected {expect} (se {se})");
}
