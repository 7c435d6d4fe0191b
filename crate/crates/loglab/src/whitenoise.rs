//! The white-noise field h_n: band covariances, exact joint sampling at
//! point sets, an FFT grid sampler for d = 2, path averages of the noise and
//! the good-path conditions built on them.
//!
//! Kernel normalization: 𝔎 = vol(B₁)^{-1/2}·1_{B₁}, so the covariance of the
//! band (t_lo, t_hi] at distance u is ∫ t^{-1}·ratio(u/t) dt.

use crate::error::{domain, LabError, Result};
use crate::geometry::{self, intersection_ratio, union_ball_region_fraction, BoxRegion};
use crate::paths::{intersection_count, LatticeKind, Path};
use crate::quad::{gauss_legendre, integrate};
use crate::rng::{derive_seed, stream};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

/// Largest covariance matrix the point samplers will factorize.
pub const MAX_JOINT_SIZE: usize = 4000;
/// Largest diagonal jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-10;
/// Largest number of grid points accepted by the grid sampler.
pub const MAX_GRID_POINTS: usize = 1 << 22;

const TAG_POINTS: u64 = 0xF1E1;
const TAG_GRID: u64 = 0x6121;
const TAG_MC: u64 = 0x3C3C;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub d: usize,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl CovarianceSpec {
    /// Band (t_lo, t_hi]; an empty band (t_lo = t_hi) is allowed.
    pub fn new(d: usize, t_lo: f64, t_hi: f64) -> Result<Self> {
        if d == 0 || !(t_lo > 0.0) || !(t_lo <= t_hi) || !(t_hi <= 1.0) {
            return domain(format!("band needs 0 < t_lo <= t_hi <= 1 and d >= 1 (got d={d}, ({t_lo}, {t_hi}]))"));
        }
        Ok(CovarianceSpec { d, t_lo, t_hi })
    }

    /// Band (2^{-n}, 1] of h_n.
    pub fn full(d: usize, n: u32) -> Result<Self> {
        Self::new(d, 2f64.powi(-(n as i32)), 1.0)
    }

    /// Band (2^{-hi}, 2^{-lo}] of h_hi − h_lo.
    pub fn levels(d: usize, lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return domain(format!("level band needs lo <= hi (got {lo}, {hi})"));
        }
        Self::new(d, 2f64.powi(-(hi as i32)), 2f64.powi(-(lo as i32)))
    }
}

/// Covariance of band increments at distance u, by quadrature in log t.
pub fn cov_hn(u: f64, spec: &CovarianceSpec) -> Result<f64> {
    if !(u >= 0.0) {
        return domain(format!("distance must be nonnegative (got {u})"));
    }
    if u >= 2.0 * spec.t_hi || spec.t_lo == spec.t_hi {
        return Ok(0.0);
    }
    if u == 0.0 {
        return Ok((spec.t_hi / spec.t_lo).ln());
    }
    let lo = spec.t_lo.max(0.5 * u).ln();
    let hi = spec.t_hi.ln();
    let mut failure = None;
    let v = integrate(
        |s| match intersection_ratio(u, s.exp(), spec.d) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                0.0
            }
        },
        lo,
        hi,
        1e-10,
        1e-12,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Tabulated G(s) = ∫_s^2 ratio(σ)/σ dσ for fast covariance evaluation:
/// cov(u; t_lo, t_hi) = G(u/t_hi) − G(u/t_lo).
///
/// G(s) = ln 2 − ln s + H(s) with H(s) = ∫_s^2 (ratio(σ) − 1)/σ dσ smooth on
/// [0, 2]; H is stored at uniform nodes with its exact derivative and
/// evaluated by cubic Hermite interpolation.
#[derive(Clone, Debug)]
pub struct CovTable {
    pub d: usize,
    step: f64,
    h: Vec<f64>,
    dh: Vec<f64>,
}

const TABLE_NODES: usize = 8192;

impl CovTable {
    pub fn build(d: usize) -> Result<CovTable> {
        if d == 0 {
            return domain("covariance table needs d >= 1");
        }
        let n = TABLE_NODES;
        let step = 2.0 / n as f64;
        let mut h = vec![0.0; n + 1];
        let mut dh = vec![0.0; n + 1];
        dh[0] = geometry::ln_slice_factor(d).exp();
        for i in 1..=n {
            let s = i as f64 * step;
            dh[i] = (1.0 - intersection_ratio(s, 1.0, d)?) / s;
        }
        for i in (0..n).rev() {
            let a = i as f64 * step;
            let mut seg = 0.0;
            for (x, w) in gauss_legendre(10, a, a + step) {
                seg += w * (intersection_ratio(x, 1.0, d)? - 1.0) / x;
            }
            h[i] = h[i + 1] + seg;
        }
        Ok(CovTable { d, step, h, dh })
    }

    /// Shared table for dimension d, built once per process.
    pub fn get(d: usize) -> Result<Arc<CovTable>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CovTable>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().expect("table cache").get(&d) {
            return Ok(t.clone());
        }
        let t = Arc::new(CovTable::build(d)?);
        cache.lock().expect("table cache").insert(d, t.clone());
        Ok(t)
    }

    fn smooth_part(&self, s: f64) -> f64 {
        let x = s / self.step;
        let i = (x.floor() as usize).min(self.h.len() - 2);
        let f = x - i as f64;
        let (h0, h1) = (self.h[i], self.h[i + 1]);
        // dH/ds = (1 - ratio(s))/s.
        let (m0, m1) = (self.dh[i] * self.step, self.dh[i + 1] * self.step);
        let f2 = f * f;
        let f3 = f2 * f;
        (2.0 * f3 - 3.0 * f2 + 1.0) * h0 + (f3 - 2.0 * f2 + f) * m0 + (-2.0 * f3 + 3.0 * f2) * h1 + (f3 - f2) * m1
    }

    /// G(s) for s > 0.
    pub fn g(&self, s: f64) -> f64 {
        if s >= 2.0 {
            0.0
        } else {
            LN_2 - s.ln() + self.smooth_part(s)
        }
    }

    pub fn cov(&self, u: f64, t_lo: f64, t_hi: f64) -> f64 {
        if t_lo >= t_hi || u >= 2.0 * t_hi {
            return 0.0;
        }
        if u == 0.0 {
            return (t_hi / t_lo).ln();
        }
        self.g(u / t_hi) - self.g(u / t_lo)
    }

    pub fn cov_spec(&self, u: f64, spec: &CovarianceSpec) -> f64 {
        self.cov(u, spec.t_lo, spec.t_hi)
    }
}

/// Lower-triangular Cholesky factor, row-major, with the jitter used.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    pub n: usize,
    pub jitter: f64,
    l: Vec<f64>,
}

impl CholeskyFactor {
    /// L·z.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n).map(|i| self.l[i * n..i * n + i + 1].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[i * self.n + j]
        }
    }
}

fn cholesky_once(a: &[f64], n: usize, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            if i == j {
                s += jitter;
            }
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Cholesky factorization of a symmetric n×n matrix, retrying with diagonal
/// jitter 1e-14, 1e-13, ... up to `MAX_JITTER`. On failure returns the
/// failing pivot and the earlier index with the largest correlation to it.
pub fn cholesky(a: &[f64], n: usize) -> std::result::Result<CholeskyFactor, (usize, usize)> {
    let mut jitter = 0.0;
    let last = loop {
        let row = match cholesky_once(a, n, jitter) {
            Ok(l) => return Ok(CholeskyFactor { n, jitter, l }),
            Err(row) => row,
        };
        jitter = if jitter == 0.0 { 1e-14 } else { jitter * 10.0 };
        if jitter > MAX_JITTER * 1.0000001 {
            break row;
        }
    };
    let partner = (0..last)
        .max_by(|&p, &q| {
            let c = |j: usize| a[last * n + j].abs() / (a[j * n + j] * a[last * n + last]).sqrt().max(f64::MIN_POSITIVE);
            c(p).total_cmp(&c(q))
        })
        .unwrap_or(last);
    Err((last, partner))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldLayout {
    Points { points: Vec<Vec<f64>> },
    /// Row-major `size × size` grid with nodes at (i·resolution, j·resolution).
    Grid { size: usize, extent: f64, resolution: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub d: usize,
    pub n: u32,
    pub band: (f64, f64),
    pub seed: u64,
    pub layout: FieldLayout,
    pub values: Vec<f64>,
    /// Largest deviation of the discrete covariance from the exact one.
    pub discretization_error: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    d: usize,
    n: u32,
    band: (f64, f64),
    seed: u64,
    layout: FieldLayout,
    discretization_error: Option<f64>,
    count: usize,
}

impl FieldSample {
    /// Writes an 8-byte little-endian header length, the JSON header and
    /// then the values as little-endian float64.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = SnapshotHeader {
            d: self.d,
            n: self.n,
            band: self.band,
            seed: self.seed,
            layout: self.layout.clone(),
            discretization_error: self.discretization_error,
            count: self.values.len(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> std::io::Result<FieldSample> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let h: SnapshotHeader = serde_json::from_slice(&json).map_err(std::io::Error::other)?;
        let mut values = Vec::with_capacity(h.count);
        let mut buf = [0u8; 8];
        for _ in 0..h.count {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(FieldSample { d: h.d, n: h.n, band: h.band, seed: h.seed, layout: h.layout, values, discretization_error: h.discretization_error })
    }
}

/// Gram matrix of band increments at the given points.
pub fn gram_matrix(points: &[Vec<f64>], spec: &CovarianceSpec) -> Result<Vec<f64>> {
    let n = points.len();
    if points.iter().any(|p| p.len() != spec.d) {
        return domain("point dimension differs from the covariance dimension");
    }
    let table = CovTable::get(spec.d)?;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let u = geometry::dist2(&points[i], &points[j]).sqrt();
            let c = table.cov_spec(u, spec);
            a[i * n + j] = c;
            a[j * n + i] = c;
        }
    }
    Ok(a)
}

/// Exact joint sampler of band increments at a fixed point set.
#[derive(Clone, Debug)]
pub struct PointSampler {
    pub points: Vec<Vec<f64>>,
    pub spec: CovarianceSpec,
    pub factor: CholeskyFactor,
}

impl PointSampler {
    pub fn new(points: Vec<Vec<f64>>, spec: CovarianceSpec) -> Result<PointSampler> {
        let n = points.len();
        if n == 0 {
            return domain("need at least one point");
        }
        if n > MAX_JOINT_SIZE {
            return Err(LabError::SizeGuard(format!("{n} points exceed the joint sampling limit {MAX_JOINT_SIZE}")));
        }
        for i in 0..n {
            for j in 0..i {
                if points[i] == points[j] {
                    return domain(format!("points {j} and {i} coincide"));
                }
            }
        }
        let a = gram_matrix(&points, &spec)?;
        let factor = cholesky(&a, n).map_err(|(row, partner)| LabError::Factorization {
            row,
            partner,
            distance: geometry::dist2(&points[row], &points[partner]).sqrt(),
        })?;
        Ok(PointSampler { points, spec, factor })
    }

    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, TAG_POINTS);
        let z: Vec<f64> = (0..self.factor.n).map(|_| rng.sample(StandardNormal)).collect();
        self.factor.apply(&z)
    }
}

/// One exact sample of h_n at the points.
pub fn sample_field_points(points: &[Vec<f64>], n: u32, seed: u64) -> Result<FieldSample> {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    if n == 0 {
        return Ok(FieldSample { d, n, band: (1.0, 1.0), seed, layout: FieldLayout::Points { points: points.to_vec() }, values: vec![0.0; points.len()], discretization_error: None });
    }
    let spec = CovarianceSpec::full(d, n)?;
    let s = PointSampler::new(points.to_vec(), spec)?;
    let values = s.sample(seed);
    Ok(FieldSample { d, n, band: (spec.t_lo, spec.t_hi), seed, layout: FieldLayout::Points { points: points.to_vec() }, values, discretization_error: None })
}

/// Log-spaced sub-nodes per dyadic band in the grid sampler.
pub const GRID_SUBNODES: usize = 8;

fn fast_size(min: usize) -> usize {
    let mut best = usize::MAX;
    let mut p2 = 1usize;
    while p2 < 2 * min {
        let mut p3 = p2;
        while p3 < 2 * min {
            let mut p5 = p3;
            while p5 < 2 * min {
                if p5 >= min && p5 < best {
                    best = p5;
                }
                p5 *= 5;
            }
            p3 *= 3;
        }
        p2 *= 2;
    }
    best
}

/// Radius in cells and representative time of sub-node `k` of band j.
fn subnode(j: u32, k: usize, resolution: f64) -> (f64, f64) {
    let t = 2f64.powf(-(j as f64) - (k as f64 + 0.5) / GRID_SUBNODES as f64);
    (t, t / resolution)
}

fn disc_rows(rho: f64) -> Vec<i64> {
    let r = rho.floor() as i64;
    (-r..=r).map(|b| ((rho * rho - (b * b) as f64).max(0.0)).sqrt().floor() as i64).collect()
}

/// Discrete covariance at a lag of `lag` cells along one axis, relative to the
/// variance convention (each sub-node contributes ln2/m at lag 0).
fn discrete_cov(levels: std::ops::Range<u32>, lag: i64, resolution: f64) -> f64 {
    let delta = LN_2 / GRID_SUBNODES as f64;
    let mut total = 0.0;
    for j in levels {
        for k in 0..GRID_SUBNODES {
            let (_, rho) = subnode(j, k, resolution);
            let rows = disc_rows(rho);
            let cells: i64 = rows.iter().map(|w| 2 * w + 1).sum();
            let overlap: i64 = rows.iter().map(|w| (2 * w + 1 - lag).max(0)).sum();
            total += delta * overlap as f64 / cells as f64;
        }
    }
    total
}

/// Uniform 2-D grid on [0, extent]².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent: f64,
    pub resolution: f64,
}

impl GridSpec {
    pub fn size(&self) -> usize {
        (self.extent / self.resolution).round() as usize + 1
    }
}

/// FFT sampler of h_n on a 2-D grid.
///
/// Each dyadic band (2^{-j-1}, 2^{-j}] is split into log-spaced sub-nodes;
/// sub-node t contributes discrete white noise on cells of side `resolution`
/// summed over the disc of radius t and scaled so its variance is exactly
/// ln2/m. The periodic domain is wide enough that no disc wraps onto the
/// grid, so the grid covariance is that of the unwrapped construction. Band j
/// is sampled in Fourier space with its exact power spectrum from an
/// independent noise keyed by (seed, j); the real and imaginary parts of the
/// result are two independent replicas.
pub struct GridSampler {
    pub grid: GridSpec,
    pub max_level: u32,
    size: usize,
    period: usize,
    amplitude: Vec<Vec<f64>>,
    fft_inv: Arc<dyn rustfft::Fft<f64>>,
}

impl GridSampler {
    pub fn new(grid: GridSpec, max_level: u32) -> Result<GridSampler> {
        if !(grid.extent > 0.0) || !(grid.resolution > 0.0) {
            return domain("grid needs positive extent and resolution");
        }
        if grid.resolution > 2f64.powi(-(max_level as i32)) * (1.0 + 1e-12) {
            return domain(format!("resolution {} is coarser than 2^-{max_level}; kernel under-resolved", grid.resolution));
        }
        let size = grid.size();
        if size * size > MAX_GRID_POINTS {
            return Err(LabError::SizeGuard(format!("{size}² grid points exceed {MAX_GRID_POINTS}")));
        }
        let reach = (1.0 / grid.resolution).floor() as usize;
        let period = fast_size(size + 2 * reach + 1);
        if period * period > 1 << 24 {
            return Err(LabError::SizeGuard(format!("periodic domain {period}² too large; reduce extent or refine less")));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(period);
        let fft_inv = planner.plan_fft_inverse(period);
        let delta = LN_2 / GRID_SUBNODES as f64;
        let mut amplitude = Vec::new();
        for j in 0..max_level {
            let mut power = vec![0.0; period * period];
            for k in 0..GRID_SUBNODES {
                let (_, rho) = subnode(j, k, grid.resolution);
                let rows = disc_rows(rho);
                let r = rows.len() as i64 / 2;
                let cells: i64 = rows.iter().map(|w| 2 * w + 1).sum();
                let mut buf = vec![Complex::new(0.0, 0.0); period * period];
                let p = period as i64;
                for (bi, w) in rows.iter().enumerate() {
                    let b = (bi as i64 - r).rem_euclid(p) as usize;
                    for a in -w..=*w {
                        buf[b * period + a.rem_euclid(p) as usize].re = 1.0;
                    }
                }
                fft2(&mut buf, period, &fwd);
                let c2 = delta / cells as f64;
                for (pw, z) in power.iter_mut().zip(&buf) {
                    *pw += c2 * z.norm_sqr();
                }
            }
            amplitude.push(power.into_iter().map(f64::sqrt).collect());
        }
        Ok(GridSampler { grid, max_level, size, period, amplitude, fft_inv })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn band_noise(&self, seed: u64, j: u32, acc: &mut [Complex<f64>]) {
        let mut rng = stream(derive_seed(seed, TAG_GRID, j as u64), TAG_GRID);
        // FFT of complex unit white noise on P² cells: iid complex normals with E|·|² = 2P².
        let scale = self.period as f64;
        for (z, a) in acc.iter_mut().zip(&self.amplitude[j as usize]) {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z += Complex::new(re, im) * (a * scale);
        }
    }

    fn to_grid(&self, spectrum: &[Complex<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut buf = spectrum.to_vec();
        fft2(&mut buf, self.period, &self.fft_inv);
        let norm = 1.0 / (self.period * self.period) as f64;
        let mut a = Vec::with_capacity(self.size * self.size);
        let mut b = Vec::with_capacity(self.size * self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                let z = buf[y * self.period + x] * norm;
                a.push(z.re);
                b.push(z.im);
            }
        }
        (a, b)
    }

    /// Fields h_n for each requested n (ascending, ≤ max_level), for two
    /// independent replicas sharing the seed. Row-major, index y·size + x.
    pub fn sample_levels(&self, seed: u64, levels: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if levels.windows(2).any(|w| w[0] > w[1]) || levels.iter().any(|&n| n > self.max_level) {
            return domain("levels must be ascending and at most max_level");
        }
        let mut acc = vec![Complex::new(0.0, 0.0); self.period * self.period];
        let (mut ra, mut rb) = (Vec::new(), Vec::new());
        let mut next = 0u32;
        for &n in levels {
            while next < n {
                self.band_noise(seed, next, &mut acc);
                next += 1;
            }
            let (a, b) = self.to_grid(&acc);
            ra.push(a);
            rb.push(b);
        }
        Ok((ra, rb))
    }

    /// Band j alone, replica pair.
    pub fn sample_band(&self, seed: u64, j: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        if j >= self.max_level {
            return domain("band index beyond max_level");
        }
        let mut acc = vec![Complex::new(0.0, 0.0); self.period * self.period];
        self.band_noise(seed, j, &mut acc);
        Ok(self.to_grid(&acc))
    }

    /// Pointwise variance of h_n implied by the band spectra.
    pub fn spectral_variance(&self, n: u32) -> f64 {
        let p2 = (self.period * self.period) as f64;
        self.amplitude[..n as usize].iter().map(|a| a.iter().map(|x| x * x).sum::<f64>() / p2).sum()
    }

    /// Largest |discrete covariance − exact covariance| over axis lags.
    pub fn discretization_error(&self, n: u32) -> Result<f64> {
        let table = CovTable::get(2)?;
        let mut worst: f64 = 0.0;
        let mut lag = 0i64;
        while (lag as f64) * self.grid.resolution < 2.0 && (lag as usize) < 4 * self.size {
            let u = lag as f64 * self.grid.resolution;
            let exact = table.cov(u, 2f64.powi(-(n as i32)), 1.0);
            worst = worst.max((discrete_cov(0..n, lag, self.grid.resolution) - exact).abs());
            lag = if lag < 8 { lag + 1 } else { lag + lag / 4 };
        }
        Ok(worst)
    }
}

fn fft2(buf: &mut [Complex<f64>], p: usize, fft: &Arc<dyn rustfft::Fft<f64>>) {
    fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); p];
    for x in 0..p {
        for y in 0..p {
            col[y] = buf[y * p + x];
        }
        fft.process(&mut col);
        for y in 0..p {
            buf[y * p + x] = col[y];
        }
    }
}

/// Approximate sample of h_n on a 2-D grid over [0, extent]².
pub fn sample_field_grid_2d(n: u32, extent: f64, resolution: f64, seed: u64) -> Result<FieldSample> {
    let grid = GridSpec { extent, resolution };
    let size = grid.size();
    let layout = FieldLayout::Grid { size, extent, resolution };
    let band = (2f64.powi(-(n as i32)), 1.0);
    if n == 0 {
        return Ok(FieldSample { d: 2, n, band, seed, layout, values: vec![0.0; size * size], discretization_error: Some(0.0) });
    }
    let sampler = GridSampler::new(grid, n)?;
    let (mut a, _) = sampler.sample_levels(seed, &[n])?;
    Ok(FieldSample { d: 2, n, band, seed, layout, values: a.pop().expect("one level"), discretization_error: Some(sampler.discretization_error(n)?) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub variance_estimate: f64,
    pub stderr: f64,
}

/// Gauss–Legendre nodes in log t used for the path-average band integrals.
pub const BAND_NODES: usize = 6;

/// Time band (2^{-3j}, 2^{-3j+1}] of the path average at level j.
pub fn path_average_band(j: u32) -> (f64, f64) {
    (2f64.powi(-3 * j as i32), 2f64.powi(-3 * j as i32 + 1))
}

fn near(points: &[Vec<f64>], target: &[f64], r: f64) -> bool {
    let r2 = r * r;
    points.iter().any(|p| geometry::dist2(p, target) < r2)
}

/// Vertices of `p` whose t-ball can meet the box.
fn centers_near_box(p: &Path, region: &BoxRegion, t: f64) -> Vec<Vec<f64>> {
    let reach = region.half_width + t;
    p.positions().into_iter().filter(|v| v.iter().zip(&region.center).all(|(a, c)| (a - c).abs() <= reach)).collect()
}

/// E[𝒲_j(x, P_j)²] = ∫_band t^{-1} vol(B_t(P_j) ∩ box)/vol(B_t(0)) dt.
pub fn path_average_variance(path: &Path, region: &BoxRegion, j: u32, mc_samples: usize, seed: u64) -> Result<VarianceEstimate> {
    if j < 1 {
        return domain("path averages need j >= 1");
    }
    if region.center.len() != path.d {
        return domain("box and path dimensions differ");
    }
    let (a, b) = path_average_band(j);
    let mut v = 0.0;
    let mut var = 0.0;
    for (i, (s, w)) in gauss_legendre(BAND_NODES, a.ln(), b.ln()).into_iter().enumerate() {
        let t = s.exp();
        let centers = centers_near_box(path, region, t);
        let f = union_ball_region_fraction(&centers, t, mc_samples, derive_seed(seed, TAG_MC, i as u64), |y| region.contains(y));
        v += w * f.estimate;
        var += (w * f.stderr).powi(2);
    }
    Ok(VarianceEstimate { variance_estimate: v, stderr: var.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2iAudit {
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs_sum: usize,
    /// lhs / rhs_sum; `None` when rhs_sum = 0.
    pub ratio: Option<f64>,
}

/// vol(B_t(P) ∩ B_t(Q)) / vol(B_t(0)) by Monte Carlo over the P balls that
/// come within 2t of Q.
pub fn pair_overlap_fraction(p: &[Vec<f64>], q: &[Vec<f64>], t: f64, samples: usize, seed: u64) -> geometry::VolumeEstimate {
    let reach2 = 4.0 * t * t;
    let active_p: Vec<Vec<f64>> = p.iter().filter(|a| q.iter().any(|b| geometry::dist2(a, b) < reach2)).cloned().collect();
    let active_q: Vec<Vec<f64>> = q.iter().filter(|b| active_p.iter().any(|a| geometry::dist2(a, b) < reach2)).cloned().collect();
    union_ball_region_fraction(&active_p, t, samples, seed, |y| near(&active_q, y, t))
}

/// Σ_{j=k}^n ∫_band vol(B_t(P_j) ∩ B_t(Q_j))/vol(B_t) dt/t against Σ_{j=⌊k/2⌋}^n |P_j ∩ Q_j|.
pub fn g2i_audit(pchain: &[Path], qchain: &[Path], k: u32, n: u32, mc_samples: usize, seed: u64) -> Result<G2iAudit> {
    if k > n || pchain.len() <= n as usize || qchain.len() <= n as usize || k < 1 {
        return domain("g2i_audit needs 1 <= k <= n and chains reaching scale n");
    }
    let mut lhs = 0.0;
    let mut var = 0.0;
    for j in k..=n {
        let (pp, qp) = (pchain[j as usize].positions(), qchain[j as usize].positions());
        let (a, b) = path_average_band(j);
        for (i, (s, w)) in gauss_legendre(BAND_NODES, a.ln(), b.ln()).into_iter().enumerate() {
            let f = pair_overlap_fraction(&pp, &qp, s.exp(), mc_samples, derive_seed(seed, j as u64, i as u64));
            lhs += w * f.estimate;
            var += (w * f.stderr).powi(2);
        }
    }
    let mut rhs = 0;
    for j in k / 2..=n {
        rhs += intersection_count(&pchain[j as usize], &qchain[j as usize])?;
    }
    Ok(G2iAudit { lhs, lhs_stderr: var.sqrt(), rhs_sum: rhs, ratio: (rhs > 0).then(|| lhs / rhs as f64) })
}

/// Fitted C in E[(Δ(z₁) − Δ(z₂))²] ≤ C·2^{j+1}|z₁ − z₂| over a scan, where
/// Δ = h_j − h_{3k}; the increment variance is 2(cov(0) − cov(u)).
pub fn increment_distance_constant(d: usize, k: u32, js: &[u32], us: &[f64]) -> Result<f64> {
    let table = CovTable::get(d)?;
    let mut c: f64 = 0.0;
    for &j in js {
        if j <= 3 * k {
            return domain("increment levels need j > 3k");
        }
        let (lo, hi) = (2f64.powi(-(j as i32)), 2f64.powi(-3 * k as i32));
        for &u in us {
            if u > 0.0 {
                let v = 2.0 * (table.cov(0.0, lo, hi) - table.cov(u, lo, hi));
                c = c.max(v / (2f64.powi(j as i32 + 1) * u));
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodConditions {
    pub alpha: f64,
    pub beta: f64,
    pub k: u32,
    pub n: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub level: u32,
    pub point: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodConditionsOutcome {
    /// ((center index, level j), condition (a) holds).
    pub cond_a: Vec<((usize, u32), bool)>,
    pub cond_b: Vec<bool>,
}

impl GoodConditionsOutcome {
    pub fn all_good(&self) -> bool {
        self.cond_a.iter().all(|c| c.1) && self.cond_b.iter().all(|&b| b)
    }
}

/// Joint Gaussian model of all path averages 𝒲_j(x, P_j) and probe
/// increments h_j(y) − h_{3k}(y) of one chain.
///
/// Path averages at distinct (x, j) use disjoint space-time regions and are
/// independent; probe covariances come from the band table; path-average to
/// probe covariances are Monte Carlo volume integrals.
#[derive(Clone, Debug)]
pub struct GoodConditionsModel {
    pub conds: GoodConditions,
    pub centers: Vec<Vec<f64>>,
    pub averages: Vec<(usize, u32)>,
    pub average_variance: Vec<f64>,
    pub probes: Vec<Probe>,
    /// Full covariance over [averages..., probes...], row-major.
    pub covariance: Vec<f64>,
    active: Vec<usize>,
    factor: Option<CholeskyFactor>,
}

fn lattice_r(p: &Path) -> f64 {
    match p.kind {
        LatticeKind::RScaled { r } => r as f64,
        _ => 1.0,
    }
}

impl GoodConditionsModel {
    pub fn build(chain: &[Path], conds: GoodConditions, probes: &[Probe], mc_samples: usize, seed: u64) -> Result<GoodConditionsModel> {
        let GoodConditions { k, n, .. } = conds;
        if k > n || chain.len() <= n as usize {
            return domain("good conditions need k <= n and a chain reaching scale n");
        }
        let d = chain[0].d;
        let base = &chain[0];
        let centers: Vec<Vec<f64>> = base.positions().into_iter().filter(|v| v.iter().all(|c| (c - c.round()).abs() < 1e-12)).collect();
        if centers.is_empty() {
            return domain("scale-0 path has no unit-lattice vertices");
        }
        for pr in probes {
            let j = pr.level;
            if j < 6 * k || j > n || j <= 3 * k || pr.point.len() != d {
                return domain(format!("probe level {j} outside [6k, n] with j > 3k, or wrong dimension"));
            }
            let radius = 2.0 / lattice_r(&chain[j as usize]) * 8f64.powi(-(j as i32));
            if !near(&chain[j as usize].positions(), &pr.point, radius * (1.0 + 1e-12)) {
                return Err(LabError::Geometry(format!("probe at level {j} is farther than {radius:e} from P_{j}")));
            }
        }
        let mut averages = Vec::new();
        for (ci, _) in centers.iter().enumerate() {
            for j in k.max(1)..=n {
                averages.push((ci, j));
            }
        }
        let total = averages.len() + probes.len();
        if total > MAX_JOINT_SIZE {
            return Err(LabError::SizeGuard(format!("{total} observables exceed {MAX_JOINT_SIZE}")));
        }
        let mut cov = vec![0.0; total * total];
        let mut average_variance = Vec::with_capacity(averages.len());
        for (i, &(ci, j)) in averages.iter().enumerate() {
            let region = BoxRegion::new(centers[ci].clone(), 0.5);
            let v = path_average_variance(&chain[j as usize], &region, j, mc_samples, derive_seed(seed, 0xA0 + j as u64, ci as u64))?;
            average_variance.push(v.variance_estimate);
            cov[i * total + i] = v.variance_estimate;
        }
        let table = CovTable::get(d)?;
        let na = averages.len();
        for (a, pa) in probes.iter().enumerate() {
            for (b, pb) in probes.iter().enumerate().take(a + 1) {
                let lo = 2f64.powi(-(pa.level.min(pb.level) as i32));
                let hi = 2f64.powi(-3 * k as i32);
                let u = geometry::dist2(&pa.point, &pb.point).sqrt();
                let c = table.cov(u, lo, hi);
                cov[(na + a) * total + na + b] = c;
                cov[(na + b) * total + na + a] = c;
            }
        }
        for (i, &(ci, j)) in averages.iter().enumerate() {
            let region = BoxRegion::new(centers[ci].clone(), 0.5);
            let (wa, wb) = path_average_band(j);
            for (a, pr) in probes.iter().enumerate() {
                let (za, zb) = (2f64.powi(-(pr.level as i32)), 2f64.powi(-3 * k as i32));
                let (lo, hi) = (wa.max(za), wb.min(zb));
                if lo >= hi {
                    continue;
                }
                let mut c = 0.0;
                for (q, (s, w)) in gauss_legendre(BAND_NODES, lo.ln(), hi.ln()).into_iter().enumerate() {
                    let t = s.exp();
                    if !region.contains(&pr.point) && pr.point.iter().zip(&region.center).any(|(y, x)| (y - x).abs() > 0.5 + t) {
                        continue;
                    }
                    let centers_p = centers_near_box(&chain[j as usize], &region, t);
                    let f = union_ball_region_fraction(std::slice::from_ref(&pr.point), t, mc_samples, derive_seed(seed, 0xC0 + i as u64, (a * BAND_NODES + q) as u64), |y| {
                        region.contains(y) && near(&centers_p, y, t)
                    });
                    c += w * f.estimate;
                }
                cov[i * total + na + a] = c;
                cov[(na + a) * total + i] = c;
            }
        }
        let active: Vec<usize> = (0..total).filter(|&i| cov[i * total + i] > 0.0).collect();
        let m = active.len();
        let factor = if m == 0 {
            None
        } else {
            let mut sub = vec![0.0; m * m];
            for (x, &i) in active.iter().enumerate() {
                for (y, &j) in active.iter().enumerate() {
                    sub[x * m + y] = cov[i * total + j];
                }
            }
            Some(cholesky(&sub, m).map_err(|(row, partner)| LabError::Factorization { row: active[row], partner: active[partner], distance: f64::NAN })?)
        };
        Ok(GoodConditionsModel { conds, centers, averages, average_variance, probes: probes.to_vec(), covariance: cov, active, factor })
    }

    /// Joint sample of [averages..., probes...].
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let total = self.averages.len() + self.probes.len();
        let mut out = vec![0.0; total];
        if let Some(f) = &self.factor {
            let mut rng = stream(seed, TAG_POINTS);
            let z: Vec<f64> = (0..f.n).map(|_| rng.sample(StandardNormal)).collect();
            for (v, &i) in f.apply(&z).into_iter().zip(&self.active) {
                out[i] = v;
            }
        }
        out
    }

    pub fn evaluate(&self, seed: u64) -> GoodConditionsOutcome {
        let v = self.sample(seed);
        let na = self.averages.len();
        let GoodConditions { alpha, beta, k, .. } = self.conds;
        let cond_a = self.averages.iter().enumerate().map(|(i, &key)| (key, v[i] >= beta * self.average_variance[i])).collect();
        let cond_b = self.probes.iter().enumerate().map(|(a, p)| v[na + a] >= alpha * (p.level as f64 - 3.0 * k as f64)).collect();
        GoodConditionsOutcome { cond_a, cond_b }
    }
}

/// Builds the joint model with 4000 Monte Carlo samples per volume and
/// evaluates both conditions on one white-noise draw.
pub fn good_conditions_check(chain: &[Path], conds: GoodConditions, probes: &[Probe], seed: u64) -> Result<GoodConditionsOutcome> {
    let model = GoodConditionsModel::build(chain, conds, probes, 4000, seed)?;
    Ok(model.evaluate(derive_seed(seed, TAG_POINTS, 0)))
}
