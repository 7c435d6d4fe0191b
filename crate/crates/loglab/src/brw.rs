//! Branching random walk over dyadic boxes, k-good path predicates and the
//! first/second moment pipeline for weighted good-path counts.

use crate::error::{domain, Result};
use crate::gaussian::{ln_normal_tail, normal_tail};
use crate::paths::{boxes_touching, intersection_count, sample_refined_chain, ChainSpec, Path, ScaledPoint};
use crate::rng::{derive_seed, normal_from_words, KeyHasher};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

const DOMAIN_NOISE: u64 = 0xB0C5;
const TAG_P: u64 = 0x50;
const TAG_Q: u64 = 0x51;
const TAG_NOISE: u64 = 0x52;

/// Lazily evaluated Gaussian values a_{j,B} keyed by (seed, level, box corner).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxNoise {
    pub master_seed: u64,
    pub variance: f64,
}

impl BoxNoise {
    pub fn new(master_seed: u64) -> BoxNoise {
        BoxNoise { master_seed, variance: std::f64::consts::LN_2 }
    }

    pub fn value(&self, level: u32, corner: &[i64]) -> f64 {
        let mut h = KeyHasher::new(self.master_seed, DOMAIN_NOISE);
        h.absorb(level as u64).absorb_slice(corner);
        let (w1, w2) = h.words();
        self.variance.sqrt() * normal_from_words(w1, w2)
    }
}

/// Level-j box of a real point: componentwise floor(x·2^j).
pub fn box_of(x: &[f64], j: u32) -> Vec<i64> {
    let s = 2f64.powi(j as i32);
    x.iter().map(|c| (c * s).floor() as i64).collect()
}

/// Level-j box of an exact lattice point.
pub fn box_of_point(p: &ScaledPoint, j: u32) -> Vec<i64> {
    let den = p.kind.denominator(p.scale);
    let mul = 1i128 << j;
    p.coords.iter().map(|&c| ((c as i128 * mul).div_euclid(den)) as i64).collect()
}

/// R_n(x) = Σ_{j=0}^n a_{j, B_j(x)}.
pub fn brw_value(x: &[f64], n: u32, noise: &BoxNoise) -> f64 {
    (0..=n).map(|j| noise.value(j, &box_of(x, j))).sum()
}

pub fn brw_value_at(p: &ScaledPoint, n: u32, noise: &BoxNoise) -> f64 {
    (0..=n).map(|j| noise.value(j, &box_of_point(p, j))).sum()
}

/// P[N(0, log 2) >= α].
pub fn good_probability(alpha: f64) -> f64 {
    normal_tail(alpha / std::f64::consts::LN_2.sqrt())
}

pub fn ln_good_probability(alpha: f64) -> f64 {
    ln_normal_tail(alpha / std::f64::consts::LN_2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodPathVerdict {
    pub is_good: bool,
    /// (level m, vertex index) of the first failing box.
    pub first_failure: Option<(u32, usize)>,
}

/// Checks a_{m, B_m(x)} >= α for every m in [k, n] and every vertex x of P_n.
pub fn is_k_good(chain: &[Path], alpha: f64, k: u32, n: u32, noise: &BoxNoise) -> Result<GoodPathVerdict> {
    if k > n || chain.len() <= n as usize {
        return domain(format!("is_k_good needs k <= n and a chain reaching scale n (k={k}, n={n}, chain={})", chain.len()));
    }
    let p = &chain[n as usize];
    let den = p.denominator();
    let mut checked: HashSet<(u32, Vec<i64>)> = HashSet::new();
    for m in k..=n {
        let mul = 1i128 << m;
        for (i, v) in p.vertices().enumerate() {
            let b: Vec<i64> = v.iter().map(|&c| ((c as i128 * mul).div_euclid(den)) as i64).collect();
            if checked.contains(&(m, b.clone())) {
                continue;
            }
            if noise.value(m, &b) < alpha {
                return Ok(GoodPathVerdict { is_good: false, first_failure: Some((m, i)) });
            }
            checked.insert((m, b));
        }
    }
    Ok(GoodPathVerdict { is_good: true, first_failure: None })
}

/// Σ_{j=k}^n |B_j(p) ∩ B_j(q)| together with the shared boxes.
pub fn shared_boxes(p: &Path, q: &Path, k: u32, n: u32) -> Vec<(u32, Vec<i64>)> {
    let mut out = Vec::new();
    for j in k..=n {
        let bp = boxes_touching(p, j);
        let bq = boxes_touching(q, j);
        let mut common: Vec<Vec<i64>> = bp.intersection(&bq).cloned().collect();
        common.sort();
        out.extend(common.into_iter().map(|b| (j, b)));
    }
    out
}

/// Σ_{j=k}^n |B_j(p)|.
pub fn box_count(p: &Path, k: u32, n: u32) -> usize {
    (k..=n).map(|j| boxes_touching(p, j).len()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentParams {
    pub chain: ChainSpec,
    pub k: u32,
    pub alpha: f64,
    pub pairs: usize,
    pub seed: u64,
    pub good_probability: f64,
    pub canonical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentsReport {
    pub params: MomentParams,
    /// Mean of 𝔭^{-Σ|B_j(P) ∩ B_j(Q)|}.
    pub ratio_estimate: f64,
    pub stderr: f64,
    /// Mean of the indicator-product estimator on the same pairs.
    pub direct_estimate: f64,
    pub direct_stderr: f64,
    /// Mean of 100 Σ_{j>=⌊k/4⌋} Y_j.
    pub bound_rhs: f64,
    pub bound_violations: usize,
    /// Target bound (1-c)/(1-c(1+2^{-⌊k/4⌋})) for the supplied c, when finite.
    pub target_bound: Option<f64>,
    pub exponent_histogram: BTreeMap<usize, usize>,
    /// Histogram of Y_j = |P_j ∩ Q_j| per level.
    pub intersection_histograms: Vec<BTreeMap<usize, usize>>,
}

/// Per-pair record of the moment pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub exponent: usize,
    pub intersections: Vec<usize>,
    pub weight: f64,
    pub direct: f64,
}

/// Target bound (1-c)/(1-c(1+2^{-⌊k/4⌋})); `None` when the denominator is not positive.
pub fn target_bound(c1: f64, k: u32) -> Option<f64> {
    let den = 1.0 - c1 * (1.0 + 2f64.powi(-((k / 4) as i32)));
    (den > 0.0).then(|| (1.0 - c1) / den)
}

/// One uniform chain pair, its box-intersection weight and the
/// indicator-product weight under an independent shared noise.
///
/// The indicator product 1[P good]1[Q good] / 𝔭^{|B(P)|+|B(Q)|} is averaged
/// exactly over boxes visited by only one of the two paths; the shared boxes
/// keep their sampled indicators. This leaves the mean unchanged.
pub fn sample_pair(spec: &ChainSpec, k: u32, alpha: f64, seed: u64, index: u64) -> Result<PairSample> {
    let n = spec.n;
    let p = sample_refined_chain(spec, derive_seed(seed, TAG_P, index))?;
    let q = sample_refined_chain(spec, derive_seed(seed, TAG_Q, index))?;
    let shared = shared_boxes(&p[n as usize], &q[n as usize], k, n);
    let intersections = (0..=n as usize).map(|j| intersection_count(&p[j], &q[j])).collect::<Result<Vec<_>>>()?;
    let lp = ln_good_probability(alpha);
    let s = shared.len();
    let weight = (-(s as f64) * lp).exp();
    let noise = BoxNoise::new(derive_seed(seed, TAG_NOISE, index));
    let all_good = shared.iter().all(|(j, b)| noise.value(*j, b) >= alpha);
    let direct = if all_good { (-2.0 * s as f64 * lp).exp() } else { 0.0 };
    Ok(PairSample { exponent: s, intersections, weight, direct })
}

fn mean_stderr(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        s1 += x;
        s2 += x * x;
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let m = s1 / n;
    let var = if n > 1.0 { ((s2 - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 };
    (m, (var / n).sqrt())
}

/// Monte Carlo estimate of E𝓝²/(E𝓝)² = E[𝔭^{-Σ_{j=k}^n |B_j(P_n) ∩ B_j(Q_n)|}].
pub fn weighted_count_moments(spec: &ChainSpec, k: u32, alpha: f64, pairs: usize, seed: u64, c1: Option<f64>) -> Result<MomentsReport> {
    if k > spec.n || pairs == 0 {
        return domain("weighted_count_moments needs k <= n and pairs >= 1");
    }
    let samples: Vec<PairSample> = (0..pairs as u64).into_par_iter().map(|i| sample_pair(spec, k, alpha, seed, i)).collect::<Result<_>>()?;
    let lo = (k / 4) as usize;
    let mut hist = BTreeMap::new();
    let mut ihist = vec![BTreeMap::new(); spec.n as usize + 1];
    let mut violations = 0;
    let mut rhs_sum = 0.0;
    for s in &samples {
        *hist.entry(s.exponent).or_insert(0) += 1;
        for (j, &y) in s.intersections.iter().enumerate() {
            *ihist[j].entry(y).or_insert(0) += 1;
        }
        let rhs: usize = 100 * s.intersections[lo..].iter().sum::<usize>();
        rhs_sum += rhs as f64;
        if s.exponent > rhs {
            violations += 1;
        }
    }
    let (m, se) = mean_stderr(samples.iter().map(|s| s.weight));
    let (dm, dse) = mean_stderr(samples.iter().map(|s| s.direct));
    Ok(MomentsReport {
        params: MomentParams { chain: *spec, k, alpha, pairs, seed, good_probability: good_probability(alpha), canonical: spec.branching.is_canonical() },
        ratio_estimate: m,
        stderr: se,
        direct_estimate: dm,
        direct_stderr: dse,
        bound_rhs: rhs_sum / pairs as f64,
        bound_violations: violations,
        target_bound: c1.and_then(|c| target_bound(c, k)),
        exponent_histogram: hist,
        intersection_histograms: ihist,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub found: bool,
    pub tried: usize,
    pub exemplar: Option<Vec<Path>>,
    pub exemplar_seed: Option<u64>,
}

/// Rejection search for a k-good chain against the fixed noise `BoxNoise::new(seed)`.
pub fn good_path_search(spec: &ChainSpec, k: u32, alpha: f64, attempts: usize, seed: u64) -> Result<SearchResult> {
    let noise = BoxNoise::new(seed);
    for i in 0..attempts {
        let cs = derive_seed(seed, TAG_P, i as u64);
        let chain = sample_refined_chain(spec, cs)?;
        if is_k_good(&chain, alpha, k, spec.n, &noise)?.is_good {
            return Ok(SearchResult { found: true, tried: i + 1, exemplar: Some(chain), exemplar_seed: Some(cs) });
        }
    }
    Ok(SearchResult { found: false, tried: attempts, exemplar: None, exemplar_seed: None })
}

/// Seed of the i-th chain tried by `good_path_search`.
pub fn search_chain_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, TAG_P, i as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic() {
        let n = BoxNoise::new(9);
        assert_eq!(n.value(3, &[1, -2]), n.value(3, &[1, -2]));
        assert_ne!(n.value(3, &[1, -2]), n.value(4, &[1, -2]));
    }

    #[test]
    fn additivity() {
        let noise = BoxNoise::new(4);
        let x = [0.3, 0.77, 0.1];
        for n in 1..6 {
            let diff = brw_value(&x, n, &noise) - brw_value(&x, n - 1, &noise);
            let direct = noise.value(n, &box_of(&x, n));
            assert!((diff - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn target_bound_values() {
        assert_eq!(target_bound(0.0, 4), Some(1.0));
        assert_eq!(target_bound(0.6, 0), None);
    }
}
