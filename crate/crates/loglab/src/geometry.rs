//! Euclidean balls: volumes, pairwise intersection ratios and Monte Carlo
//! volumes of unions of balls clipped to a box.

use crate::error::{domain, Result};
use crate::quad;
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub const RATIO_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub d: usize,
    pub t: f64,
}

impl BallSpec {
    pub fn new(d: usize, t: f64) -> Result<Self> {
        if d == 0 || !(t > 0.0) {
            return domain(format!("ball needs d >= 1 and t > 0 (got d={d}, t={t})"));
        }
        Ok(BallSpec { d, t })
    }

    pub fn volume(&self) -> f64 {
        ln_ball_volume_unchecked(self.d, self.t).exp()
    }
}

/// Axis-aligned cube `center + [-half_width, half_width]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub center: Vec<f64>,
    pub half_width: f64,
}

impl BoxRegion {
    pub fn new(center: Vec<f64>, half_width: f64) -> Self {
        BoxRegion { center, half_width }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.center).all(|(a, c)| (a - c).abs() <= self.half_width)
    }
}

fn ln_ball_volume_unchecked(d: usize, t: f64) -> f64 {
    let h = d as f64 / 2.0;
    h * std::f64::consts::PI.ln() - ln_gamma(1.0 + h) + d as f64 * t.ln()
}

pub fn ln_ball_volume(d: usize, t: f64) -> Result<f64> {
    BallSpec::new(d, t)?;
    Ok(ln_ball_volume_unchecked(d, t))
}

pub fn ball_volume(d: usize, t: f64) -> Result<f64> {
    Ok(ln_ball_volume(d, t)?.exp())
}

/// vol_{d-1}(B_1) / vol_d(B_1).
pub fn surface_to_volume_ratio(d: usize) -> Result<f64> {
    if d < 2 {
        return domain(format!("surface_to_volume_ratio needs d >= 2 (got {d})"));
    }
    Ok(ln_slice_factor(d).exp())
}

pub(crate) fn ln_slice_factor(d: usize) -> f64 {
    let lo = if d == 1 { 0.0 } else { ln_ball_volume_unchecked(d - 1, 1.0) };
    lo - ln_ball_volume_unchecked(d, 1.0)
}

/// vol(B_t(x) ∩ B_t(y)) / vol(B_t(0)) for |x - y| = u.
pub fn intersection_ratio(u: f64, t: f64, d: usize) -> Result<f64> {
    if d == 0 || !(t > 0.0) || !(u >= 0.0) {
        return domain(format!("intersection_ratio needs u >= 0, t > 0, d >= 1 (got u={u}, t={t}, d={d})"));
    }
    if u == 0.0 {
        return Ok(1.0);
    }
    let s = u / t;
    if s >= 2.0 {
        return Ok(0.0);
    }
    let a = s / 2.0;
    if d == 1 {
        return Ok(1.0 - a);
    }
    let e = (d as f64 - 1.0) / 2.0;
    let slice = quad::integrate(|r: f64| (1.0 - r * r).max(0.0).powf(e), a, 1.0, RATIO_TOL, 0.0)?;
    let v = 2.0 * ln_slice_factor(d).exp() * slice;
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

fn sample_in_ball<R: Rng>(rng: &mut R, center: &[f64], t: f64, out: &mut [f64]) {
    let d = center.len();
    let mut norm2 = 0.0;
    for o in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *o = g;
        norm2 += g * g;
    }
    let radius = t * rng.gen::<f64>().powf(1.0 / d as f64) / norm2.sqrt();
    for (o, c) in out.iter_mut().zip(center) {
        *o = c + *o * radius;
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Monte Carlo estimate of vol(∪ B_t(c_i) ∩ region) / vol(B_t(0)), together
/// with its standard error. Working in units of a single ball volume keeps
/// the estimator finite for any d.
///
/// Each sample draws a ball uniformly, a point uniformly in it, and scores
/// `N · 1[point ∈ region] / multiplicity(point)`.
pub fn union_ball_region_fraction<F>(centers: &[Vec<f64>], t: f64, samples: usize, seed: u64, mut accept: F) -> VolumeEstimate
where
    F: FnMut(&[f64]) -> bool,
{
    if centers.is_empty() || samples == 0 {
        return VolumeEstimate { estimate: 0.0, stderr: 0.0 };
    }
    let d = centers[0].len();
    let n = centers.len() as f64;
    let t2 = t * t;
    let mut rng = rng::stream(seed, 0x756e_696f_6e);
    let mut p = vec![0.0; d];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let i = rng.gen_range(0..centers.len());
        sample_in_ball(&mut rng, &centers[i], t, &mut p);
        if !accept(&p) {
            continue;
        }
        let mult = centers.iter().filter(|c| dist2(c, &p) < t2).count().max(1);
        let w = n / mult as f64;
        s1 += w;
        s2 += w * w;
    }
    let m = samples as f64;
    let mean = s1 / m;
    let var = if samples > 1 { ((s2 / m - mean * mean) * m / (m - 1.0)).max(0.0) } else { 0.0 };
    VolumeEstimate { estimate: mean, stderr: (var / m).sqrt() }
}

/// Monte Carlo estimate of vol(∪_i B_t(c_i) ∩ region).
pub fn union_ball_region_volume(centers: &[Vec<f64>], t: f64, region: &BoxRegion, samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if centers.is_empty() {
        return domain("union_ball_region_volume needs at least one center");
    }
    let d = centers[0].len();
    if centers.iter().any(|c| c.len() != d) || region.center.len() != d {
        return domain("centers and region must share one dimension");
    }
    let v = ball_volume(d, t)?;
    let f = union_ball_region_fraction(centers, t, samples, seed, |p| region.contains(p));
    Ok(VolumeEstimate { estimate: f.estimate * v, stderr: f.stderr * v })
}

/// Largest c on a fine grid such that
/// `ln ratio(u,1,d) <= ln(1/c) - c·d·u²` holds at every supplied (d,u).
pub fn fit_gaussian_decay_constant(ds: &[usize], us: &[f64]) -> Result<Option<f64>> {
    let mut table = Vec::new();
    for &d in ds {
        for &u in us {
            let r = intersection_ratio(u, 1.0, d)?;
            table.push((d as f64 * u * u, if r > 0.0 { r.ln() } else { f64::NEG_INFINITY }));
        }
    }
    let ok = |c: f64| table.iter().all(|&(du2, lr)| lr <= -c.ln() - c * du2);
    let mut best = None;
    for i in 1..=1000 {
        let c = i as f64 / 1000.0;
        if ok(c) {
            best = Some(c);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn closed_form_volumes() {
        assert!((ball_volume(2, 1.0).unwrap() - PI).abs() < 1e-12);
        assert!((ball_volume(1, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((ball_volume(3, 2.0).unwrap() - 4.0 / 3.0 * PI * 8.0).abs() < 1e-10);
        assert!(ball_volume(0, 1.0).is_err());
        assert!(ball_volume(3, 0.0).is_err());
    }

    #[test]
    fn slice_ratio_low_dims() {
        assert!((surface_to_volume_ratio(2).unwrap() - 2.0 / PI).abs() < 1e-12);
        assert!((surface_to_volume_ratio(3).unwrap() - 0.75).abs() < 1e-12);
        assert!(surface_to_volume_ratio(1).is_err());
    }

    #[test]
    fn ratio_edges() {
        assert_eq!(intersection_ratio(0.0, 1.0, 7).unwrap(), 1.0);
        assert_eq!(intersection_ratio(2.5, 1.0, 3).unwrap(), 0.0);
        assert_eq!(intersection_ratio(2.0, 1.0, 3).unwrap(), 0.0);
        assert!((intersection_ratio(1.0, 1.0, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dist2_is_squared_distance() {
        assert!((dist2(&[0.0, 3.0], &[4.0, 0.0]) - 25.0).abs() < 1e-12);
    }
}
