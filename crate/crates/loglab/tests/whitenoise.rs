use loglab::geometry::{intersection_ratio, BoxRegion};
use loglab::gaussian::normal_tail;
use loglab::paths::*;
use loglab::quad::integrate;
use loglab::rng::stream;
use loglab::whitenoise::*;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::LN_2;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn variance_identity() {
    for d in [2, 3, 8, 64] {
        for n in 1..=12 {
            let c = cov_hn(0.0, &CovarianceSpec::full(d, n).unwrap()).unwrap();
            assert!((c - n as f64 * LN_2).abs() < 1e-8);
        }
    }
}

#[test]
fn far_points_uncorrelated() {
    let spec = CovarianceSpec::full(3, 6).unwrap();
    assert_eq!(cov_hn(2.0, &spec).unwrap(), 0.0);
    assert_eq!(cov_hn(5.0, &spec).unwrap(), 0.0);
}

#[test]
fn log_correlation_d3() {
    let spec = CovarianceSpec::full(3, 8).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        let u = 2f64.powf(-6.0 + 4.0 * i as f64 / 20.0);
        worst = worst.max((cov_hn(u, &spec).unwrap() - (1.0 / u).ln()).abs());
    }
    assert!(worst < 3.0, "C = {worst}");
}

#[test]
fn table_matches_quadrature() {
    for d in [1, 2, 3, 8, 110] {
        let table = CovTable::get(d).unwrap();
        for &(lo, hi) in &[(2f64.powi(-10), 1.0), (0.01, 0.3), (0.125, 0.5)] {
            let spec = CovarianceSpec::new(d, lo, hi).unwrap();
            for i in 0..60 {
                let u = 2.2 * (i as f64 / 60.0).powi(2);
                let a = cov_hn(u, &spec).unwrap();
                assert!((a - table.cov_spec(u, &spec)).abs() < 1e-7, "d={d} u={u}");
            }
        }
    }
}

#[test]
fn quadrature_oracle_d1() {
    // In d = 1 the ratio is 1 - u/(2t), so the band integral is elementary.
    let (lo, hi) = (0.02, 0.7);
    let spec = CovarianceSpec::new(1, lo, hi).unwrap();
    for u in [0.001, 0.03, 0.2, 1.0] {
        let a: f64 = lo.max(u / 2.0);
        let exact = if a >= hi { 0.0 } else { (hi / a).ln() - u / 2.0 * (1.0 / a - 1.0 / hi) };
        assert!((cov_hn(u, &spec).unwrap() - exact).abs() < 1e-10);
    }
    let direct = integrate(|t| intersection_ratio(0.1, t, 1).unwrap() / t, lo, hi, 1e-12, 1e-12).unwrap();
    assert!((cov_hn(0.1, &spec).unwrap() - direct).abs() < 1e-9);
}

#[test]
fn single_point_variance() {
    let sampler = PointSampler::new(vec![vec![0.2, 0.4]], CovarianceSpec::full(2, 5).unwrap()).unwrap();
    let draws = 100_000;
    let vals: Vec<f64> = (0..draws).map(|s| sampler.sample(s)[0]).collect();
    let m = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let target = 5.0 * LN_2;
    assert!((var - target).abs() < 3.0 * target * (2.0 / draws as f64).sqrt(), "var {var}");
}

#[test]
fn gram_properties() {
    let spec = CovarianceSpec::full(3, 4).unwrap();
    let pts = vec![vec![0.0, 0.0, 0.0], vec![2.5, 0.0, 0.0], vec![0.1, 0.2, 0.0]];
    let g = gram_matrix(&pts, &spec).unwrap();
    assert_eq!(g[1], 0.0);
    assert_eq!(g[3], 0.0);
    let shift = [0.37, -1.2, 4.4];
    let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
    let h = gram_matrix(&moved, &spec).unwrap();
    for (a, b) in g.iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
    let f = sample_field_points(&pts, 4, 3).unwrap();
    assert_eq!(f.values.len(), 3);
    assert_eq!(f, sample_field_points(&pts, 4, 3).unwrap());
}

#[test]
fn duplicate_points_rejected() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    assert!(sample_field_points(&pts, 3, 0).is_err());
    // Not positive semidefinite: pivot 2 fails, its strongest partner is 0.
    let a = [1.0, 0.0, 0.99, 0.0, 1.0, 0.0, 0.99, 0.0, 0.5];
    assert_eq!(cholesky(&a, 3).unwrap_err(), (2, 0));
}

#[test]
fn random_gram_matrices_factorize() {
    let mut rng = stream(17, 1);
    for (case, d) in (0..50).map(|i| (i, [2usize, 3, 8][i % 3])) {
        let pts: Vec<Vec<f64>> = (0..100).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
        let s = PointSampler::new(pts, CovarianceSpec::full(d, 6).unwrap()).unwrap_or_else(|e| panic!("case {case}: {e}"));
        assert!(s.factor.jitter <= MAX_JITTER);
    }
}

#[test]
fn grid_variance_matches() {
    let n = 6;
    let g = GridSampler::new(GridSpec { extent: 1.0 / 16.0, resolution: 2f64.powi(-9) }, n).unwrap();
    let target = n as f64 * LN_2;
    assert!((g.spectral_variance(n) / target - 1.0).abs() < 1e-9);
    let size = g.size();
    let centre = (size / 2) * size + size / 2;
    let mut squares = Vec::new();
    for s in 0..200 {
        let (a, b) = g.sample_levels(s, &[n]).unwrap();
        squares.push(a[0][centre].powi(2));
        squares.push(b[0][centre].powi(2));
    }
    let m = squares.len() as f64;
    let var = squares.iter().sum::<f64>() / m;
    let se = target * (2.0 / m).sqrt();
    assert!((var - target).abs() < 3.0 * se, "var {var} (se {se})");
    assert!(g.discretization_error(n).unwrap() < 0.05);
}

#[test]
fn grid_bands_sum_to_field() {
    let g = GridSampler::new(GridSpec { extent: 0.25, resolution: 2f64.powi(-5) }, 3).unwrap();
    let (full, _) = g.sample_levels(4, &[3]).unwrap();
    let mut sum = vec![0.0; full[0].len()];
    for j in 0..3 {
        let (a, _) = g.sample_band(4, j).unwrap();
        for (s, v) in sum.iter_mut().zip(a) {
            *s += v;
        }
    }
    for (a, b) in full[0].iter().zip(&sum) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn grid_guards_and_zero_field() {
    assert!(sample_field_grid_2d(4, 1.0, 0.1, 0).is_err());
    let z = sample_field_grid_2d(0, 0.5, 0.125, 0).unwrap();
    assert!(z.values.iter().all(|&v| v == 0.0));
    let f = sample_field_grid_2d(3, 0.5, 0.125, 9).unwrap();
    assert_eq!(f.values.len(), 25);
    assert!(f.discretization_error.unwrap() >= 0.0);
}

#[test]
fn snapshot_roundtrip() {
    let f = sample_field_points(&[vec![0.1, 0.2], vec![0.5, 0.5]], 3, 12).unwrap();
    let mut buf = Vec::new();
    f.write_snapshot(&mut buf).unwrap();
    assert_eq!(FieldSample::read_snapshot(buf.as_slice()).unwrap(), f);
    let tail = &buf[buf.len() - 8..];
    assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), f.values[1]);
}

fn single(d: usize, x: Vec<i64>, scale: u32) -> Path {
    Path::from_vertices(d, scale, LatticeKind::EighthScaled, Family::PRefined, &[x]).unwrap()
}

#[test]
fn path_average_trivial_cases() {
    let region = BoxRegion::new(vec![0.0, 0.0, 0.0], 0.5);
    let inside = single(3, vec![0, 0, 0], 2);
    let v = path_average_variance(&inside, &region, 2, 2000, 1).unwrap();
    assert!((v.variance_estimate - LN_2).abs() < 1e-12 && v.stderr == 0.0);
    let outside = single(3, vec![64, 0, 0], 2);
    assert_eq!(path_average_variance(&outside, &region, 2, 2000, 1).unwrap().variance_estimate, 0.0);
}

#[test]
fn path_average_two_vertices() {
    // Two vertices 3/8 apart at level 1, balls of radius ≤ 1/4; the box edge cuts the balls.
    let d = 2;
    let p = Path::from_vertices(d, 1, LatticeKind::EighthScaled, Family::PRefined, &[vec![0, 0], vec![3, 0]]).unwrap();
    let region = BoxRegion::new(vec![0.1, 0.0], 0.5);
    let v = path_average_variance(&p, &region, 1, 40_000, 3).unwrap();
    assert!(v.variance_estimate >= LN_2 - 4.0 * v.stderr && v.variance_estimate <= 2.0 * LN_2 + 4.0 * v.stderr);
    // Inclusion–exclusion oracle: each ball is inside the box except the
    // second one's right cap beyond x = 0.6; overlap of the two balls exact.
    let second_x = 0.375;
    let (a, b) = (0.125f64, 0.25f64);
    let mut oracle = 0.0;
    let gl = loglab::quad::gauss_legendre(6, a.ln(), b.ln());
    for (s, w) in gl {
        let t = s.exp();
        // Fraction of the second disc left of x = 0.6.
        let cut = (0.6 - second_x) / t;
        let inside_second = if cut >= 1.0 { 1.0 } else { 1.0 - ((cut.acos() - cut * (1.0 - cut * cut).sqrt()) / std::f64::consts::PI) };
        let overlap = intersection_ratio(0.375, t, 2).unwrap();
        oracle += w * (1.0 + inside_second - overlap);
    }
    assert!((v.variance_estimate - oracle).abs() < 4.0 * v.stderr.max(1e-6), "{} vs {oracle}", v.variance_estimate);
}

fn s_chain(seed: u64) -> Vec<Path> {
    let spec = ChainSpec::new(23, 2, 1, ChainFamily::S).with_branching(Branching::Override(1));
    sample_refined_chain(&spec, seed).unwrap()
}

fn shifted(p: &Path, off: i64) -> Path {
    let den = p.denominator() as i64;
    let v: Vec<Vec<i64>> = p.vertices().map(|v| {
        let mut w = v.to_vec();
        w[5] += off * den;
        w
    }).collect();
    Path::from_vertices(p.d, p.scale, p.kind, p.family, &v).unwrap()
}

#[test]
fn g2i_disjoint_and_identical() {
    let p = s_chain(1);
    let q: Vec<Path> = p.iter().map(|x| shifted(x, 10)).collect();
    let a = g2i_audit(&p, &q, 1, 1, 200, 0).unwrap();
    assert_eq!((a.lhs, a.rhs_sum, a.ratio), (0.0, 0, None));
    let s = g2i_audit(&p, &p, 1, 1, 2000, 0).unwrap();
    assert_eq!(s.rhs_sum, p[0].len() + p[1].len());
    assert!(s.lhs > 0.0 && s.ratio.unwrap().is_finite());
}

#[test]
fn g2i_random_pairs_finite() {
    let mut max_ratio: f64 = 0.0;
    for i in 0..10 {
        let a = g2i_audit(&s_chain(100 + i), &s_chain(200 + i), 1, 1, 300, i).unwrap();
        if let Some(r) = a.ratio {
            max_ratio = max_ratio.max(r);
        } else {
            assert!(a.lhs < 1e-12 || a.rhs_sum == 0);
        }
    }
    assert!(max_ratio.is_finite());
}

#[test]
fn increment_constant_is_stable() {
    let us: Vec<f64> = (1..=20).map(|i| 2f64.powi(-12) * i as f64).collect();
    let c2 = increment_distance_constant(2, 1, &[5, 6, 7, 8], &us).unwrap();
    let c3 = increment_distance_constant(3, 1, &[5, 6, 7, 8], &us).unwrap();
    assert!(c2 > 0.0 && c3 > 0.0);
    assert!((c2 / c3 - 1.0).abs() < 0.2, "{c2} vs {c3}");
}

fn probe_near(chain: &[Path], j: u32, i: usize) -> Probe {
    Probe { level: j, point: chain[j as usize].position(i) }
}

#[test]
fn good_conditions_trivial() {
    let chain = s_chain(3);
    let probes = vec![probe_near(&chain, 1, 0), probe_near(&chain, 1, 5)];
    let all_a = GoodConditions { alpha: 1.0, beta: -1e6, k: 0, n: 1 };
    let o = good_conditions_check(&chain, all_a, &probes, 2).unwrap();
    assert!(o.cond_a.iter().all(|c| c.1));
    let all_b = GoodConditions { alpha: -1e6, beta: 1.0, k: 0, n: 1 };
    let o = good_conditions_check(&chain, all_b, &probes, 2).unwrap();
    assert!(o.cond_b.iter().all(|&b| b));
    let far = Probe { level: 1, point: vec![9.0; 23] };
    assert!(good_conditions_check(&chain, all_b, &[far], 2).is_err());
}

#[test]
fn condition_a_rate_and_repulsion() {
    let chain = s_chain(4);
    let beta = 0.8;
    let probes = vec![probe_near(&chain, 1, 2)];
    let conds = GoodConditions { alpha: 0.0, beta, k: 0, n: 1 };
    let model = GoodConditionsModel::build(&chain, conds, &probes, 4000, 6).unwrap();
    let idx = model.averages.iter().position(|&(c, j)| c == 0 && j == 1).unwrap();
    let v = model.average_variance[idx];
    let p = normal_tail(beta * v.sqrt());
    let seeds = 10_000;
    let na = model.averages.len();
    let (mut hits, mut cond_sum, mut all_sum) = (0usize, 0.0, 0.0);
    for s in 0..seeds {
        let x = model.sample(s);
        let good = x[idx] >= beta * v;
        all_sum += x[na];
        if good {
            hits += 1;
            cond_sum += x[na];
        }
        assert_eq!(model.evaluate(s).cond_a[idx].1, good);
    }
    let rate = hits as f64 / seeds as f64;
    assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / seeds as f64).sqrt(), "rate {rate} vs {p}");
    let cross = model.covariance[idx * (na + 1) + na];
    assert!(cross >= 0.0);
    let probe_sd = model.covariance[na * (na + 1) + na].sqrt();
    let cond_mean = cond_sum / hits.max(1) as f64;
    let all_mean = all_sum / seeds as f64;
    assert!(cond_mean >= all_mean - 4.0 * probe_sd / (hits.max(1) as f64).sqrt());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn band_additivity(a in 0.001f64..0.3, r1 in 1.1f64..3.0, r2 in 1.1f64..3.0, u in 0.0f64..1.5, d in 1usize..5) {
        let b = (a * r1).min(1.0);
        let c = (b * r2).min(1.0);
        let lo = cov_hn(u, &CovarianceSpec::new(d, a, b).unwrap()).unwrap();
        let hi = cov_hn(u, &CovarianceSpec::new(d, b, c).unwrap()).unwrap();
        let all = cov_hn(u, &CovarianceSpec::new(d, a, c).unwrap()).unwrap();
        prop_assert!((lo + hi - all).abs() < 1e-8);
    }

    #[test]
    fn covariance_decreases_with_distance(u in 0.0f64..2.0, du in 0.0f64..0.5) {
        let spec = CovarianceSpec::full(2, 5).unwrap();
        let t = CovTable::get(2).unwrap();
        prop_assert!(t.cov_spec(u + du, &spec) <= t.cov_spec(u, &spec) + 1e-9);
    }

    #[test]
    fn gram_translation_invariant(seed in any::<u64>()) {
        let mut rng = stream(seed, 0);
        let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 5.0).collect();
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let spec = CovarianceSpec::full(3, 5).unwrap();
        let (g, h) = (gram_matrix(&pts, &spec).unwrap(), gram_matrix(&moved, &spec).unwrap());
        for (i, (a, b)) in g.iter().zip(&h).enumerate() {
            let (r, c) = (i / 6, i % 6);
            prop_assert!((a - b).abs() < 1e-9, "{} {}", r, dist(&pts[r], &pts[c]));
        }
    }
}
