//! Scalar Gaussian tails, numerical checks of the orthant, repulsion and
//! domination inequalities, and the scalar recursions.

use crate::error::{domain, LabError, Result};
use crate::quad;
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;
use std::f64::consts::{PI, SQRT_2};

/// Constant of the two-sided tail bound `c x^{-1} e^{-x²/2} <= P[N >= x] <= c^{-1} x^{-1} e^{-x²/2}` on [1/2, 8].
pub const TAIL_C4: f64 = 0.17;

pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn ln_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// ln P[N(0,1) >= x], accurate far into the upper tail.
pub fn ln_normal_tail(x: f64) -> f64 {
    if x < 25.0 {
        return normal_tail(x).ln();
    }
    // Laplace continued fraction Q(x) = φ(x) / (x + 1/(x + 2/(x + 3/(x + …)))).
    let mut cf = x;
    for k in (1..=80).rev() {
        cf = x + k as f64 / cf;
    }
    ln_normal_pdf(x) - cf.ln()
}

/// Two-sided bound check at one point.
pub fn tail_bound_holds(x: f64, c4: f64) -> bool {
    let g = (-0.5 * x * x).exp() / x;
    let q = normal_tail(x);
    c4 * g <= q && q <= g / c4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BivariateSpec {
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub t: f64,
}

impl BivariateSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.var_x) || !unit(self.var_y) {
            return domain(format!("variances must lie in (0,1] (got {}, {})", self.var_x, self.var_y));
        }
        if !(self.cov_xy >= 0.0) || self.cov_xy > (self.var_x * self.var_y).sqrt() * (1.0 + 1e-12) {
            return domain(format!("covariance {} outside [0, sqrt(var_x var_y)]", self.cov_xy));
        }
        if !(self.t >= 1.0) {
            return domain(format!("threshold must be >= 1 (got {})", self.t));
        }
        Ok(())
    }

    pub fn correlation(&self) -> f64 {
        (self.cov_xy / (self.var_x * self.var_y).sqrt()).min(1.0)
    }
}

/// P[X >= t, Y >= t] / (P[X >= t] P[Y >= t]).
pub fn orthant_ratio(spec: &BivariateSpec) -> Result<f64> {
    spec.validate()?;
    let a = spec.t / spec.var_x.sqrt();
    let b = spec.t / spec.var_y.sqrt();
    let rho = spec.correlation();
    if rho == 0.0 {
        return Ok(1.0);
    }
    let (lqa, lqb) = (ln_normal_tail(a), ln_normal_tail(b));
    if rho >= 1.0 - 1e-12 {
        return Ok((-lqa.min(lqb)).exp());
    }
    let sr = (1.0 - rho * rho).sqrt();
    // Upper cutoff where the integrand is below e^{-60} of its largest possible value.
    let budget = 60.0 - lqb + (a + 2.0).ln();
    let len = -a + (a * a + 2.0 * budget).sqrt();
    let lpa = ln_normal_pdf(a);
    let f = |s: f64| {
        let z = a + s;
        (ln_normal_pdf(z) - lpa + ln_normal_tail((b - rho * z) / sr) - lqb).exp()
    };
    let integral = quad::integrate(f, 0.0, len, 0.0, 1e-10)?;
    Ok((lpa - lqa).exp() * integral)
}

/// Monte Carlo estimate of P[X >= t, Y >= t] with its standard error.
pub fn orthant_probability_mc(spec: &BivariateSpec, samples: usize, seed: u64) -> Result<(f64, f64)> {
    spec.validate()?;
    let (sx, sy, rho) = (spec.var_x.sqrt(), spec.var_y.sqrt(), spec.correlation());
    let sr = (1.0 - rho * rho).max(0.0).sqrt();
    let mut rng = rng::stream(seed, 0x6f72_7468);
    let mut hits = 0u64;
    for _ in 0..samples {
        let g1: f64 = rng.sample(StandardNormal);
        let g2: f64 = rng.sample(StandardNormal);
        if sx * g1 >= spec.t && sy * (rho * g1 + sr * g2) >= spec.t {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
}

/// P[X >= t, Y >= t] by quadrature.
pub fn orthant_probability(spec: &BivariateSpec) -> Result<f64> {
    let r = orthant_ratio(spec)?;
    let a = spec.t / spec.var_x.sqrt();
    let b = spec.t / spec.var_y.sqrt();
    Ok(r * (ln_normal_tail(a) + ln_normal_tail(b)).exp())
}

/// Smallest C with `ln ratio <= C t² cov / (var_x var_y)` over the specs.
/// `None` when the fit is not finite and positive.
pub fn fit_correlation_constant(specs: &[BivariateSpec]) -> Result<Option<f64>> {
    let mut c: f64 = 0.0;
    for s in specs {
        if s.cov_xy <= 0.0 {
            continue;
        }
        let lr = orthant_ratio(s)?.ln();
        c = c.max(lr / (s.t * s.t * s.cov_xy / (s.var_x * s.var_y)));
    }
    Ok((c.is_finite() && c > 0.0).then_some(c))
}

/// Density of X at t given X + Y >= (m+1)σ²θ (X ~ N(0,σ²), Y ~ N(0,mσ²)),
/// divided by the N(σ²θ, σ²) density at t.
pub fn repulsion_ratio(sigma2: f64, m: f64, theta: f64, t: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2 <= 1.0) || !(m > 0.0) || !(theta > 0.0) || !t.is_finite() {
        return domain("repulsion_ratio needs sigma2 in (0,1], m > 0, theta > 0, finite t");
    }
    let s = sigma2.sqrt();
    let c = (m + 1.0) * sigma2 * theta;
    let ln_num = ln_normal_pdf(t / s) - s.ln() + ln_normal_tail((c - t) / (s * m.sqrt())) - ln_normal_tail(c / (s * (m + 1.0).sqrt()));
    let ln_den = ln_normal_pdf((t - sigma2 * theta) / s) - s.ln();
    Ok((ln_num - ln_den).exp())
}

/// Largest θ in (0,1] with (1-θ)θ^Δ >= 1-p; `None` when none exists.
pub fn domination_theta(p: f64, delta: u32) -> Option<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return None;
    }
    if p == 1.0 {
        return Some(1.0);
    }
    let f = |th: f64| (1.0 - th) * th.powi(delta as i32);
    let target = 1.0 - p;
    let peak = delta as f64 / (delta as f64 + 1.0);
    if f(peak) < target {
        return None;
    }
    // f decreases on [peak, 1] from f(peak) >= target to 0.
    let (mut lo, mut hi) = (peak, 1.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceKind {
    A,
    B,
}

/// First `n` terms of the kind-A or kind-B recursion started at `a`.
pub fn sequence_iterate(kind: SequenceKind, a: f64, b: f64, n: usize) -> Result<Vec<f64>> {
    if !(a > 1.0) || !(b > 0.0) || n == 0 || n > 1_000_000 {
        return domain("sequence_iterate needs a > 1, b > 0, 1 <= n <= 10^6");
    }
    let mut out = Vec::with_capacity(n);
    let mut x = a;
    for i in 0..n {
        if !(x <= 1e300) {
            return Err(LabError::Overflow(format!("term {} exceeds 1e300", i + 1)));
        }
        out.push(x);
        let p = x.powi(11);
        x = match kind {
            SequenceKind::A => a * (1.0 + p / b).powi(2),
            SequenceKind::B => (1.0 + (p - 1.0) / b).powi(2),
        };
    }
    Ok(out)
}
