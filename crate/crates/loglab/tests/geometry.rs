use loglab::geometry::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn lens_ratio_d2(u: f64) -> f64 {
    (2.0 * (u / 2.0).acos() - (u / 2.0) * (4.0 - u * u).sqrt()) / PI
}

// Two caps of height 1 - u/2 in the unit ball, over 4π/3.
fn lens_ratio_d3(u: f64) -> f64 {
    1.0 - 0.75 * u + u * u * u / 16.0
}

#[test]
fn volume_examples() {
    assert!((ball_volume(2, 1.0).unwrap() - PI).abs() < 1e-13);
    assert!((ball_volume(1, 1.0).unwrap() - 2.0).abs() < 1e-13);
    let ln_fact_50: f64 = (1..=50).map(|k| (k as f64).ln()).sum();
    let want = 50.0 * PI.ln() - ln_fact_50;
    assert!((ln_ball_volume(100, 1.0).unwrap() - want).abs() < 1e-10);
    assert!(ball_volume(100, 1.0).unwrap() > 0.0);
    assert!(ln_ball_volume(100_000, 3.0).unwrap().is_finite());
    assert!(ball_volume(0, 1.0).is_err());
    assert!(ball_volume(3, 0.0).is_err());
}

#[test]
fn intersection_examples() {
    assert_eq!(intersection_ratio(0.0, 1.0, 7).unwrap(), 1.0);
    assert_eq!(intersection_ratio(2.5, 1.0, 3).unwrap(), 0.0);
    assert!((intersection_ratio(1.0, 1.0, 2).unwrap() - 0.391_002).abs() < 1e-6);
    for i in 1..40 {
        let u = i as f64 / 20.0;
        assert!((intersection_ratio(u, 1.0, 2).unwrap() - lens_ratio_d2(u)).abs() < 1e-9, "u={u}");
        assert!((intersection_ratio(u, 1.0, 3).unwrap() - lens_ratio_d3(u)).abs() < 1e-9, "u={u}");
        assert!((intersection_ratio(u, 1.0, 1).unwrap() - (1.0 - u / 2.0)).abs() < 1e-15);
    }
    assert!(intersection_ratio(-0.1, 1.0, 3).is_err());
    assert!(intersection_ratio(0.1, 0.0, 3).is_err());
}

#[test]
fn ratio_monotone_on_grid() {
    for d in [1, 2, 3, 8, 64, 256] {
        let mut prev = 1.0;
        for i in 0..100 {
            let u = 2.0 * i as f64 / 99.0;
            let r = intersection_ratio(u, 1.0, d).unwrap();
            assert!(r <= prev + 1e-9, "d={d} u={u}");
            assert!((0.0..=1.0).contains(&r));
            prev = r;
        }
    }
}

#[test]
fn surface_ratio_examples() {
    assert!((surface_to_volume_ratio(2).unwrap() - 2.0 / PI).abs() < 1e-12);
    assert!((surface_to_volume_ratio(3).unwrap() - 0.75).abs() < 1e-12);
    let r = surface_to_volume_ratio(400).unwrap() / 20.0;
    assert!((0.3..=0.5).contains(&r), "{r}");
    assert!(surface_to_volume_ratio(1).is_err());
}

#[test]
fn floor_at_inverse_sqrt_d_is_stable() {
    for t in [1.0, 2.0, 5.0] {
        for tau in [0.5, 1.0] {
            let at = |d: usize| intersection_ratio(t * tau / (d as f64).sqrt(), t, d).unwrap();
            let (r16, r64, r256) = (at(16), at(64), at(256));
            assert!(r16 > 0.0 && r64 > 0.0);
            assert!(r256 >= 0.5 * r16, "t={t} tau={tau}: {r16} {r256}");
        }
    }
}

#[test]
fn gaussian_decay_constant_fits() {
    let ds: Vec<usize> = (3..=8).map(|k| 1usize << k).collect();
    let us: Vec<f64> = (1..40).map(|i| i as f64 / 20.0).collect();
    let c = fit_gaussian_decay_constant(&ds, &us).unwrap();
    assert!(matches!(c, Some(c) if c > 0.0), "{c:?}");
}

#[test]
fn union_volume_examples() {
    let region = BoxRegion::new(vec![0.5, 0.5, 0.5], 0.5);
    let one = vec![vec![0.5, 0.5, 0.5]];
    let t = 0.05;
    let v = ball_volume(3, t).unwrap();
    let mut inside = 0;
    for seed in 0..200 {
        let e = union_ball_region_volume(&one, t, &region, 200, seed).unwrap();
        if (e.estimate - v).abs() <= 4.0 * e.stderr + 1e-15 {
            inside += 1;
        }
    }
    assert!(inside >= 198);
    let far = vec![vec![5.0, 5.0, 5.0]];
    assert_eq!(union_ball_region_volume(&far, 1.0, &region, 500, 1).unwrap().estimate, 0.0);
    let twice = vec![vec![0.9, 0.5, 0.5], vec![0.9, 0.5, 0.5]];
    let a = union_ball_region_volume(&twice[..1], 0.3, &region, 20000, 2).unwrap();
    let b = union_ball_region_volume(&twice, 0.3, &region, 20000, 2).unwrap();
    assert!((a.estimate - b.estimate).abs() <= 4.0 * (a.stderr.hypot(b.stderr)));
    // Half of a ball centered on a face lies inside the cube.
    let face = vec![vec![1.0, 0.5, 0.5]];
    let h = union_ball_region_volume(&face, 0.2, &region, 40000, 3).unwrap();
    let want = 0.5 * ball_volume(3, 0.2).unwrap();
    assert!((h.estimate - want).abs() <= 4.0 * h.stderr);
    assert!(union_ball_region_volume(&[], 1.0, &region, 10, 1).is_err());
}

proptest! {
    #[test]
    fn ratio_depends_on_u_over_t(u in 0.0f64..3.0, t in 0.1f64..4.0, d in 1usize..40) {
        let a = intersection_ratio(u * t, t, d).unwrap();
        let b = intersection_ratio(u, 1.0, d).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ratio_decreases_with_dimension(u in 0.01f64..1.99, d in 1usize..60) {
        let a = intersection_ratio(u, 1.0, d).unwrap();
        let b = intersection_ratio(u, 1.0, d + 1).unwrap();
        prop_assert!(b <= a + 1e-10);
    }
}
