//! Fractal (Mandelbrot) percolation: retained-box sampling, crossings,
//! threshold estimation and the Galton–Watson survival oracle.
//!
//! Retention of a box is decided by a uniform keyed on (seed, level, box),
//! so samples at different p are coupled and monotone in p.

use crate::error::{LabError, Result};
use crate::rng::{derive_seed, uniform_from_word, KeyHasher};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

const DOMAIN_KEEP: u64 = 0xF2AC;
const TAG_SAMPLE: u64 = 0x70;

/// Largest expected number of retained boxes `sample_retained` will build.
pub const MAX_EXPECTED_BOXES: f64 = 5e7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityMode {
    /// Boxes sharing any boundary point are adjacent.
    Closed,
    /// Only face-sharing boxes are adjacent.
    HalfOpen,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetainedTree {
    pub d: usize,
    pub depth: u32,
    pub window: i64,
    /// `levels[j]` holds the retained level-j boxes (side 2^{-j}).
    pub levels: Vec<HashSet<Vec<i64>>>,
}

impl RetainedTree {
    pub fn parent(b: &[i64]) -> Vec<i64> {
        b.iter().map(|c| c.div_euclid(2)).collect()
    }

    /// Every retained box below level 0 has a retained parent.
    pub fn parents_consistent(&self) -> bool {
        (1..self.levels.len()).all(|j| self.levels[j].iter().all(|b| self.levels[j - 1].contains(&Self::parent(b))))
    }

    pub fn finest(&self) -> &HashSet<Vec<i64>> {
        &self.levels[self.depth as usize]
    }
}

pub fn retention_uniform(seed: u64, level: u32, b: &[i64]) -> f64 {
    let mut h = KeyHasher::new(seed, DOMAIN_KEEP);
    h.absorb(level as u64).absorb_slice(b);
    uniform_from_word(h.finish())
}

fn children(b: &[i64], d: usize) -> impl Iterator<Item = Vec<i64>> + '_ {
    (0..1u64 << d).map(move |mask| b.iter().enumerate().map(|(i, c)| 2 * c + ((mask >> i) & 1) as i64).collect())
}

pub fn expected_retained(d: usize, p: f64, n: u32, window: i64) -> f64 {
    (window as f64).powi(d as i32) * p * (2f64.powi(d as i32) * p).powi(n as i32)
}

pub fn sample_retained(d: usize, p: f64, n: u32, window: i64, seed: u64) -> Result<RetainedTree> {
    if d == 0 || !(0.0..=1.0).contains(&p) || window < 1 {
        return Err(LabError::Domain("sample_retained needs d >= 1, p in [0,1], window >= 1".into()));
    }
    let expect = expected_retained(d, p, n, window);
    if expect > MAX_EXPECTED_BOXES {
        return Err(LabError::SizeGuard(format!("expected {expect:.3e} retained boxes exceeds {MAX_EXPECTED_BOXES:e}")));
    }
    let mut level0 = HashSet::new();
    let mut idx = vec![0i64; d];
    loop {
        if retention_uniform(seed, 0, &idx) < p {
            level0.insert(idx.clone());
        }
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < window {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    let mut levels = vec![level0];
    for j in 1..=n {
        let mut next = HashSet::new();
        for b in &levels[j as usize - 1] {
            for c in children(b, d) {
                if retention_uniform(seed, j, &c) < p {
                    next.insert(c);
                }
            }
        }
        levels.push(next);
    }
    Ok(RetainedTree { d, depth: n, window, levels })
}

/// 1 - q with q the minimal fixed point of q = (1 - p + p q)^{2^d}.
pub fn survival_probability(d: usize, p: f64) -> f64 {
    let m = 2f64.powi(d as i32);
    if p * m <= 1.0 {
        return 0.0;
    }
    let mut q = 0.0f64;
    for _ in 0..1_000_000 {
        let next = (1.0 - p + p * q).powf(m);
        let done = (next - q).abs() < 1e-15;
        q = next;
        if done {
            break;
        }
    }
    (1.0 - q).max(0.0)
}

/// Whether the tree grown from one retained root box reaches depth n.
pub fn survives_to_depth(d: usize, p: f64, n: u32, seed: u64) -> bool {
    fn dfs(d: usize, p: f64, n: u32, seed: u64, level: u32, b: &[i64]) -> bool {
        if level == n {
            return true;
        }
        children(b, d).any(|c| retention_uniform(seed, level + 1, &c) < p && dfs(d, p, n, seed, level + 1, &c))
    }
    dfs(d, p, n, seed, 0, &vec![0; d])
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

fn neighbour_offsets(d: usize, mode: ConnectivityMode) -> Vec<Vec<i64>> {
    match mode {
        ConnectivityMode::HalfOpen => (0..d)
            .flat_map(|i| {
                [1i64, -1].into_iter().map(move |s| {
                    let mut v = vec![0; d];
                    v[i] = s;
                    v
                })
            })
            .collect(),
        ConnectivityMode::Closed => {
            let total = 3usize.pow(d as u32);
            (0..total)
                .map(|mut code| {
                    (0..d)
                        .map(|_| {
                            let v = (code % 3) as i64 - 1;
                            code /= 3;
                            v
                        })
                        .collect::<Vec<i64>>()
                })
                .filter(|v| v.iter().any(|&c| c != 0))
                .collect()
        }
    }
}

/// Whether some connected cluster of depth-n boxes touches both faces of
/// the window orthogonal to `axis`.
pub fn has_crossing(tree: &RetainedTree, axis: usize, mode: ConnectivityMode) -> bool {
    let boxes: Vec<&Vec<i64>> = tree.finest().iter().collect();
    if boxes.is_empty() || axis >= tree.d {
        return false;
    }
    let far = tree.window * (1i64 << tree.depth) - 1;
    let index: HashMap<&[i64], usize> = boxes.iter().enumerate().map(|(i, b)| (b.as_slice(), i)).collect();
    let mut uf = UnionFind::new(boxes.len());
    let offsets = neighbour_offsets(tree.d, mode);
    let mut probe = vec![0i64; tree.d];
    for (i, b) in boxes.iter().enumerate() {
        for off in &offsets {
            for ((p, c), o) in probe.iter_mut().zip(b.iter()).zip(off) {
                *p = c + o;
            }
            if let Some(&j) = index.get(probe.as_slice()) {
                if j > i {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut low = HashSet::new();
    for (i, b) in boxes.iter().enumerate() {
        if b[axis] == 0 {
            low.insert(uf.find(i));
        }
    }
    boxes.iter().enumerate().any(|(i, b)| b[axis] == far && low.contains(&uf.find(i)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub d: usize,
    pub p: f64,
    pub n: u32,
    pub samples: usize,
    pub crossing_rate: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Wilson score interval at z = 1.96.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96f64;
    let nf = n as f64;
    let ph = successes as f64 / nf;
    let den = 1.0 + z * z / nf;
    let centre = (ph + z * z / (2.0 * nf)) / den;
    let half = z * (ph * (1.0 - ph) / nf + z * z / (4.0 * nf * nf)).sqrt() / den;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn sample_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, TAG_SAMPLE, i as u64)
}

fn count_crossings(d: usize, p: f64, n: u32, window: i64, samples: usize, seed: u64, mode: ConnectivityMode) -> Result<usize> {
    let mut hits = 0;
    for i in 0..samples {
        let t = sample_retained(d, p, n, window, sample_seed(seed, i))?;
        if has_crossing(&t, 0, mode) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Crossing frequency along axis 0 over coupled samples.
pub fn crossing_rate(d: usize, p: f64, n: u32, window: i64, samples: usize, seed: u64, mode: ConnectivityMode) -> Result<CrossingEstimate> {
    let hits = count_crossings(d, p, n, window, samples, seed, mode)?;
    let rate = hits as f64 / samples.max(1) as f64;
    let (lo, hi) = wilson_interval(hits, samples);
    Ok(CrossingEstimate { d, p, n, samples, crossing_rate: rate, stderr: (rate * (1.0 - rate) / samples.max(1) as f64).sqrt(), ci_lo: lo, ci_hi: hi })
}

/// Pool-adjacent-violators fit of a nondecreasing sequence.
pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat(v).take(n)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcEstimate {
    pub d: usize,
    pub n: u32,
    pub samples: usize,
    pub pc_estimate: f64,
    pub ci: (f64, f64),
    /// Evaluated (p, smoothed crossing rate) pairs, sorted by p.
    pub curve: Vec<(f64, f64)>,
}

/// Depth-n threshold proxy: the p at which the crossing frequency (window 1,
/// closed mode) crosses 1/2, by bisection on the isotonic fit of all
/// evaluated points. The interval brackets the p where the Wilson bounds cross 1/2.
pub fn estimate_pc(d: usize, n: u32, samples: usize, tol: f64, seed: u64) -> Result<PcEstimate> {
    if d <= 4 && n > 6 {
        return Err(LabError::SizeGuard(format!("estimate_pc limited to n <= 6 for d <= 4 (n = {n})")));
    }
    let mut evals: Vec<(f64, usize)> = Vec::new();
    let eval = |p: f64, evals: &mut Vec<(f64, usize)>| -> Result<()> {
        if !evals.iter().any(|e| e.0 == p) {
            let hits = count_crossings(d, p, n, 1, samples, seed, ConnectivityMode::Closed)?;
            evals.push((p, hits));
            evals.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(())
    };
    let smoothed = |evals: &[(f64, usize)], f: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        let vals: Vec<f64> = evals.iter().map(|e| f(e.1)).collect();
        evals.iter().map(|e| e.0).zip(isotonic_increasing(&vals)).collect()
    };
    let bisect = |f: &dyn Fn(usize) -> f64, evals: &mut Vec<(f64, usize)>| -> Result<f64> {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            eval(mid, evals)?;
            let curve = smoothed(evals, f);
            let at = curve.iter().find(|c| c.0 == mid).expect("evaluated").1;
            if at >= 0.5 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let rate = move |h: usize| h as f64 / samples as f64;
    let upper = move |h: usize| wilson_interval(h, samples).1;
    let lower = move |h: usize| wilson_interval(h, samples).0;
    let pc = bisect(&rate, &mut evals)?;
    let ci_lo = bisect(&upper, &mut evals)?;
    let ci_hi = bisect(&lower, &mut evals)?;
    Ok(PcEstimate { d, n, samples, pc_estimate: pc, ci: (ci_lo, ci_hi), curve: smoothed(&evals, &rate) })
}
