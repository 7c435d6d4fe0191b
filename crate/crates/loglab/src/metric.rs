//! The exponential metric D_n: weighted shortest paths on sampled 2-D grids,
//! distance-exponent fits, and the high-dimensional corridor upper bound.

use crate::error::{domain, LabError, Result};
use crate::paths::{sample_refined_chain, Branching, ChainFamily, ChainSpec, Path};
use crate::rng::{derive_seed, stream};
use crate::whitenoise::{CovarianceSpec, GridSampler, GridSpec, PointSampler, MAX_JOINT_SIZE};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const TAG_FIELD: u64 = 0x4D45;
const TAG_BOOT: u64 = 0x4254;
const TAG_PATH: u64 = 0x5041;
const TAG_PATH_NOISE: u64 = 0x504E;

/// Grid graph on a `size × size` node array with edge weight
/// spacing·(e^{ξh(u)} + e^{ξh(v)})/2 between nearest neighbours.
#[derive(Clone, Debug)]
pub struct WeightedGrid {
    pub size: usize,
    pub spacing: f64,
    pub xi: f64,
    node_weight: Vec<f64>,
}

impl WeightedGrid {
    /// `field` is row-major with index y·size + x.
    pub fn new(field: &[f64], size: usize, spacing: f64, xi: f64) -> Result<WeightedGrid> {
        if field.len() != size * size || size == 0 {
            return domain("field length must be size²");
        }
        if !(spacing > 0.0) || !(xi >= 0.0) {
            return domain("spacing must be positive and xi nonnegative");
        }
        let node_weight: Vec<f64> = field.iter().map(|h| (xi * h).exp()).collect();
        if node_weight.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(LabError::Overflow("edge weight e^{xi h} not finite and positive".into()));
        }
        Ok(WeightedGrid { size, spacing, xi, node_weight })
    }

    pub fn node(&self, x: usize, y: usize) -> usize {
        y * self.size + x
    }

    pub fn edge_weight(&self, a: usize, b: usize) -> f64 {
        self.spacing * 0.5 * (self.node_weight[a] + self.node_weight[b])
    }

    fn neighbours(&self, v: usize) -> impl Iterator<Item = usize> {
        let (x, y, s) = (v % self.size, v / self.size, self.size);
        let mut out = [usize::MAX; 4];
        if x > 0 {
            out[0] = v - 1;
        }
        if x + 1 < s {
            out[1] = v + 1;
        }
        if y > 0 {
            out[2] = v - s;
        }
        if y + 1 < s {
            out[3] = v + s;
        }
        out.into_iter().filter(|&u| u != usize::MAX)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

/// Dijkstra distance from any node of `src` to the nearest node of `dst`.
pub fn lfpp_distance(grid: &WeightedGrid, src: &[usize], dst: &[usize]) -> Result<f64> {
    let n = grid.size * grid.size;
    if src.is_empty() || dst.is_empty() || src.iter().chain(dst).any(|&v| v >= n) {
        return domain("source and target sets must be nonempty grid nodes");
    }
    let mut target = vec![false; n];
    for &v in dst {
        target[v] = true;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in src {
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    while let Some(Entry(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        if target[v] {
            return Ok(d);
        }
        for u in grid.neighbours(v) {
            let nd = d + grid.edge_weight(v, u);
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Entry(nd, u));
            }
        }
    }
    Err(LabError::Unreachable)
}

/// Lower median (element ⌊(m−1)/2⌋ of the sorted values).
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

/// Least-squares slope of ys against xs; exactly 0 when all ys are equal.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let y0 = ys[0];
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().map(|y| y - y0).sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xm) * ((y - y0) - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    num / den
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub xi: f64,
    pub levels: Vec<u32>,
    pub medians: Vec<f64>,
    pub slope: f64,
    /// (1 + slope)/ξ; `None` at ξ = 0.
    pub q_estimate: Option<f64>,
    /// 95% bootstrap interval of the slope.
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub xi: f64,
    pub n: u32,
    pub replica: usize,
    pub distance_pp: f64,
    pub distance_ss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfppStudy {
    pub resolution_level: u32,
    pub replicas: usize,
    pub point_to_point: Vec<ExponentFit>,
    pub set_to_set: Vec<ExponentFit>,
    /// 95% bootstrap interval of (pp slope − ss slope) per ξ.
    pub slope_difference_ci: Vec<(f64, f64)>,
    /// 95% bootstrap intervals of Q(ξ_i) − Q(ξ_{i+1}) (point-to-point) over consecutive positive ξ.
    pub q_difference_ci: Vec<(f64, f64)>,
    pub records: Vec<DistanceRecord>,
    pub discretization_error: f64,
}

/// Bootstrap resamples used for slope intervals.
pub const BOOTSTRAP: usize = 1000;

fn percentile_interval(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    let at = |q: f64| v[((q * (m - 1) as f64).round() as usize).min(m - 1)];
    (at(0.025), at(0.975))
}

/// Distances on [0,1]² at fixed resolution 2^{-n_max}: point-to-point between
/// (1/4, 1/2) and (3/4, 1/2), set-to-set between the slabs x ≤ 0.1 and
/// x ≥ 0.9. Fields are shared across ξ and nested across n (h_n is the sum
/// of the first n bands of one sample).
pub fn lfpp_study(xis: &[f64], levels: &[u32], replicas: usize, seed: u64) -> Result<LfppStudy> {
    if levels.len() < 3 || levels.windows(2).any(|w| w[0] >= w[1]) {
        return domain("need at least three ascending levels");
    }
    if replicas < 2 {
        return domain("need at least two replicas");
    }
    let n_max = *levels.last().expect("levels");
    let grid = GridSpec { extent: 1.0, resolution: 2f64.powi(-(n_max as i32)) };
    let sampler = GridSampler::new(grid, n_max)?;
    let size = sampler.size();
    let spacing = grid.resolution;
    let q = (size - 1) / 4;
    let mid = (size - 1) / 2;
    let src_pp = vec![mid * size + q];
    let dst_pp = vec![mid * size + 3 * q];
    let slab = ((size - 1) as f64 * 0.1).floor() as usize;
    let src_ss: Vec<usize> = (0..size).flat_map(|y| (0..=slab).map(move |x| y * size + x)).collect();
    let dst_ss: Vec<usize> = (0..size).flat_map(|y| (size - 1 - slab..size).map(move |x| y * size + x)).collect();
    let pairs = replicas.div_ceil(2);
    // distances[replica][xi][level] = (pp, ss)
    let per_pair: Vec<Vec<Vec<Vec<(f64, f64)>>>> = (0..pairs)
        .into_par_iter()
        .map(|p| -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
            let (a, b) = sampler.sample_levels(derive_seed(seed, TAG_FIELD, p as u64), levels)?;
            let mut out = Vec::new();
            for fields in [a, b] {
                let mut by_xi = Vec::new();
                for &xi in xis {
                    let mut by_level = Vec::new();
                    for f in &fields {
                        let g = WeightedGrid::new(f, size, spacing, xi)?;
                        by_level.push((lfpp_distance(&g, &src_pp, &dst_pp)?, lfpp_distance(&g, &src_ss, &dst_ss)?));
                    }
                    by_xi.push(by_level);
                }
                out.push(by_xi);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let dist: Vec<Vec<Vec<(f64, f64)>>> = per_pair.into_iter().flatten().take(replicas).collect();
    let xs: Vec<f64> = levels.iter().map(|&n| n as f64).collect();
    let slope_of = |idx: &[usize], xi_i: usize, ss: bool| -> f64 {
        let ys: Vec<f64> = (0..levels.len())
            .map(|l| {
                let v: Vec<f64> = idx.iter().map(|&r| if ss { dist[r][xi_i][l].1 } else { dist[r][xi_i][l].0 }).collect();
                lower_median(&v).log2()
            })
            .collect();
        ls_slope(&xs, &ys)
    };
    let all: Vec<usize> = (0..replicas).collect();
    let mut rng = stream(seed, TAG_BOOT);
    let boots: Vec<Vec<usize>> = (0..BOOTSTRAP).map(|_| (0..replicas).map(|_| rng.gen_range(0..replicas)).collect()).collect();
    let mut fits_pp = Vec::new();
    let mut fits_ss = Vec::new();
    let mut diff_ci = Vec::new();
    let mut boot_pp: Vec<Vec<f64>> = Vec::new();
    for (xi_i, &xi) in xis.iter().enumerate() {
        let mk = |ss: bool| -> (ExponentFit, Vec<f64>) {
            let medians: Vec<f64> = (0..levels.len())
                .map(|l| lower_median(&all.iter().map(|&r| if ss { dist[r][xi_i][l].1 } else { dist[r][xi_i][l].0 }).collect::<Vec<_>>()))
                .collect();
            let slope = slope_of(&all, xi_i, ss);
            let bs: Vec<f64> = boots.iter().map(|b| slope_of(b, xi_i, ss)).collect();
            let ci = percentile_interval(bs.clone());
            let q_estimate = (xi > 0.0).then(|| (1.0 + slope) / xi);
            (ExponentFit { xi, levels: levels.to_vec(), medians, slope, q_estimate, ci }, bs)
        };
        let (pp, bpp) = mk(false);
        let (ss, bss) = mk(true);
        diff_ci.push(percentile_interval(bpp.iter().zip(&bss).map(|(a, b)| a - b).collect()));
        fits_pp.push(pp);
        fits_ss.push(ss);
        boot_pp.push(bpp);
    }
    let mut q_diff = Vec::new();
    let pos: Vec<usize> = (0..xis.len()).filter(|&i| xis[i] > 0.0).collect();
    for w in pos.windows(2) {
        let (i, j) = (w[0], w[1]);
        let d: Vec<f64> = boot_pp[i].iter().zip(&boot_pp[j]).map(|(a, b)| (1.0 + a) / xis[i] - (1.0 + b) / xis[j]).collect();
        q_diff.push(percentile_interval(d));
    }
    let mut records = Vec::new();
    for (r, by_xi) in dist.iter().enumerate() {
        for (xi_i, by_level) in by_xi.iter().enumerate() {
            for (l, &(pp, ss)) in by_level.iter().enumerate() {
                records.push(DistanceRecord { xi: xis[xi_i], n: levels[l], replica: r, distance_pp: pp, distance_ss: ss });
            }
        }
    }
    Ok(LfppStudy {
        resolution_level: n_max,
        replicas,
        point_to_point: fits_pp,
        set_to_set: fits_ss,
        slope_difference_ci: diff_ci,
        q_difference_ci: q_diff,
        records,
        discretization_error: sampler.discretization_error(n_max)?,
    })
}

/// Point-to-point and set-to-set exponent fits at one ξ.
pub fn exponent_fit(xi: f64, levels: &[u32], replicas: usize, seed: u64) -> Result<(ExponentFit, ExponentFit)> {
    if replicas < 50 {
        return domain("exponent_fit needs at least 50 replicas");
    }
    let mut s = lfpp_study(&[xi], levels, replicas, seed)?;
    Ok((s.point_to_point.remove(0), s.set_to_set.remove(0)))
}

/// How the corridor experiment samples the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorridorMode {
    /// Fresh field per path.
    Independent,
    /// One joint field over all paths (at most 20 paths).
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorResult {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub xi: f64,
    pub mode: CorridorMode,
    pub path_vertices: usize,
    pub nodes_per_path: usize,
    pub costs: Vec<f64>,
    pub min_cost: f64,
}

/// Node budget per path in the corridor experiment.
pub const CORRIDOR_NODES: usize = 1000;

/// Indices of up to `budget` equally spaced vertices, endpoints included.
pub fn node_indices(len: usize, budget: usize) -> Vec<usize> {
    if len <= budget {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..budget).map(|i| ((i as u128 * (len - 1) as u128) / (budget - 1) as u128) as usize).collect();
    v.dedup();
    v
}

/// Trapezoid cost Σ (e^{ξh_a} + e^{ξh_b})/2 · (b − a)·spacing over consecutive nodes.
pub fn trapezoid_cost(nodes: &[usize], values: &[f64], xi: f64, spacing: f64) -> f64 {
    nodes.windows(2).zip(values.windows(2)).map(|(i, h)| 0.5 * ((xi * h[0]).exp() + (xi * h[1]).exp()) * (i[1] - i[0]) as f64 * spacing).sum()
}

fn corridor_spec(d: usize, m: usize, n: u32) -> Result<ChainSpec> {
    let q = d / 10;
    let spec = ChainSpec::new(d, m, n, ChainFamily::Zigzag);
    if q >= 11 {
        return Ok(spec);
    }
    let b = crate::paths::max_tube_count(d).saturating_sub(10);
    if b == 0 {
        return domain(format!("d = {d} leaves no room for zigzag refinements"));
    }
    Ok(spec.with_branching(Branching::Override(b.min(4))))
}

/// Path-integral costs of sampled zigzag corridors at scale n.
///
/// Each path P_n is sampled from the zigzag family (refinement branching
/// overridden below d = 110), h_n is sampled jointly at up to
/// `CORRIDOR_NODES` equally spaced vertices by exact covariance, and the cost
/// is the trapezoid rule over arc length with lattice spacing (1/𝔯)8^{-n}.
/// At ξ = 0 the cost is exactly (|P_n| − 1)·spacing. Path i and its field
/// depend only on (seed, i), so the running minimum is a prefix property.
pub fn corridor_upper_bound(d: usize, m: usize, xi: f64, n: u32, path_samples: usize, seed: u64, mode: CorridorMode) -> Result<CorridorResult> {
    if path_samples == 0 || !(xi >= 0.0) {
        return domain("corridor needs path_samples >= 1 and xi >= 0");
    }
    let spec = corridor_spec(d, m, n)?;
    let chains: Vec<Path> = (0..path_samples)
        .map(|i| sample_refined_chain(&spec, derive_seed(seed, TAG_PATH, i as u64)).map(|mut c| c.pop().expect("chain")))
        .collect::<Result<_>>()?;
    let len = chains[0].len();
    let r = crate::paths::r_of(d) as f64;
    let spacing = 8f64.powi(-(n as i32)) / r;
    let budget = match mode {
        CorridorMode::Independent => CORRIDOR_NODES,
        CorridorMode::Shared => {
            if path_samples > 20 {
                return Err(LabError::SizeGuard("shared corridor mode is limited to 20 paths".into()));
            }
            (MAX_JOINT_SIZE / path_samples).min(CORRIDOR_NODES)
        }
    };
    let nodes = node_indices(len, budget);
    let cov = CovarianceSpec::full(d, n)?;
    let costs: Vec<f64> = if xi == 0.0 || n == 0 {
        chains.iter().map(|_| trapezoid_cost(&nodes, &vec![0.0; nodes.len()], xi, spacing)).collect()
    } else {
        match mode {
            CorridorMode::Independent => chains
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let pts: Vec<Vec<f64>> = nodes.iter().map(|&v| p.position(v)).collect();
                    let s = PointSampler::new(pts, cov)?;
                    let h = s.sample(derive_seed(seed, TAG_PATH_NOISE, i as u64));
                    Ok(trapezoid_cost(&nodes, &h, xi, spacing))
                })
                .collect::<Result<_>>()?,
            CorridorMode::Shared => {
                let mut pts: Vec<Vec<f64>> = Vec::new();
                let mut owner = Vec::new();
                for (i, p) in chains.iter().enumerate() {
                    for &v in &nodes {
                        let x = p.position(v);
                        if let Some(j) = pts.iter().position(|q| *q == x) {
                            owner.push((i, j));
                        } else {
                            owner.push((i, pts.len()));
                            pts.push(x);
                        }
                    }
                }
                let s = PointSampler::new(pts, cov)?;
                let h = s.sample(derive_seed(seed, TAG_PATH_NOISE, u64::MAX));
                (0..path_samples)
                    .map(|i| {
                        let vals: Vec<f64> = owner.iter().filter(|o| o.0 == i).map(|o| h[o.1]).collect();
                        trapezoid_cost(&nodes, &vals, xi, spacing)
                    })
                    .collect()
            }
        }
    };
    let min_cost = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CorridorResult { d, m, n, xi, mode, path_vertices: len, nodes_per_path: nodes.len(), costs, min_cost })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub levels: Vec<u32>,
    /// log₂ slope of the minimum cost per repetition.
    pub slopes: Vec<f64>,
    pub mean_slope: f64,
    /// Two-sided 95% Student-t interval of the mean slope.
    pub ci: (f64, f64),
    pub min_costs: Vec<Vec<f64>>,
}

/// Repeats the corridor experiment over the levels and fits log₂(min cost) against n.
pub fn corridor_slope(d: usize, m: usize, xi: f64, levels: &[u32], path_samples: usize, repetitions: usize, seed: u64, mode: CorridorMode) -> Result<SlopeReport> {
    if levels.len() < 2 || repetitions < 2 {
        return domain("slope report needs two levels and two repetitions");
    }
    let xs: Vec<f64> = levels.iter().map(|&n| n as f64).collect();
    let mut slopes = Vec::new();
    let mut min_costs = Vec::new();
    for rep in 0..repetitions {
        let rs = derive_seed(seed, 0x5245, rep as u64);
        let mins: Vec<f64> = levels.iter().map(|&n| corridor_upper_bound(d, m, xi, n, path_samples, derive_seed(rs, n as u64, 0), mode).map(|c| c.min_cost)).collect::<Result<_>>()?;
        slopes.push(ls_slope(&xs, &mins.iter().map(|c| c.log2()).collect::<Vec<_>>()));
        min_costs.push(mins);
    }
    let k = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / k;
    let sd = (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let tq = StudentsT::new(0.0, 1.0, k - 1.0).map_err(|e| LabError::Domain(e.to_string()))?.inverse_cdf(0.975);
    let half = tq * sd / k.sqrt();
    Ok(SlopeReport { levels: levels.to_vec(), slopes, mean_slope: mean, ci: (mean - half, mean + half), min_costs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_constant_is_zero() {
        let ys = [0.8f64.log2(); 4];
        assert_eq!(ls_slope(&[5.0, 6.0, 7.0, 8.0], &ys), 0.0);
        assert!((ls_slope(&[1.0, 2.0, 3.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lower_median_even() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
    }

    #[test]
    fn nodes_keep_endpoints() {
        let v = node_indices(26601, 1000);
        assert_eq!(v[0], 0);
        assert_eq!(*v.last().unwrap(), 26600);
        assert!(v.len() <= 1000);
        assert_eq!(node_indices(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
