//! Multiscale self-avoiding paths: oriented base families, zigzag bases,
//! interpolation onto the (1/r)-lattice, tube sub-paths, refinement and
//! chain sampling, plus intersection and containment statistics.
//!
//! All path geometry is exact integer arithmetic. A vertex with integer
//! coordinates `c` at scale `j` sits at `c / denominator(kind, j)`.

use crate::error::{domain, LabError, Result};
use crate::rng::{index_from_word, KeyHasher};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;

const DOMAIN_BASE: u64 = 0xBA5E;
const DOMAIN_REFINE: u64 = 0x2EF1_7E;

/// Number of vertices of a tube sub-path.
pub const TUBE_LEN: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatticeKind {
    Unit,
    EighthScaled,
    RScaled { r: u32 },
}

impl LatticeKind {
    pub fn denominator(&self, scale: u32) -> i128 {
        let base: i128 = match self {
            LatticeKind::Unit | LatticeKind::EighthScaled => 1,
            LatticeKind::RScaled { r } => *r as i128,
        };
        base * 8i128.pow(scale)
    }

    fn refined(&self) -> LatticeKind {
        match self {
            LatticeKind::Unit => LatticeKind::EighthScaled,
            k => *k,
        }
    }

    fn tag(&self) -> u64 {
        match self {
            LatticeKind::Unit | LatticeKind::EighthScaled => 0,
            LatticeKind::RScaled { r } => 1 + *r as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PBase,
    PRefined,
    SBase,
    SRefined,
    Zigzag,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaledPoint {
    pub coords: Vec<i64>,
    pub scale: u32,
    pub kind: LatticeKind,
}

impl ScaledPoint {
    pub fn position(&self) -> Vec<f64> {
        let den = self.kind.denominator(self.scale) as f64;
        self.coords.iter().map(|&c| c as f64 / den).collect()
    }
}

/// Ordered nearest-neighbour vertex list, stored flat.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub d: usize,
    pub scale: u32,
    pub kind: LatticeKind,
    pub family: Family,
    coords: Vec<i64>,
}

impl Path {
    pub fn from_vertices(d: usize, scale: u32, kind: LatticeKind, family: Family, vertices: &[Vec<i64>]) -> Result<Path> {
        if vertices.iter().any(|v| v.len() != d) {
            return domain("vertex dimension mismatch");
        }
        Ok(Path { d, scale, kind, family, coords: vertices.concat() })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn vertex(&self, i: usize) -> &[i64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn vertices(&self) -> impl Iterator<Item = &[i64]> {
        self.coords.chunks_exact(self.d)
    }

    pub fn point(&self, i: usize) -> ScaledPoint {
        ScaledPoint { coords: self.vertex(i).to_vec(), scale: self.scale, kind: self.kind }
    }

    pub fn denominator(&self) -> i128 {
        self.kind.denominator(self.scale)
    }

    pub fn positions(&self) -> Vec<Vec<f64>> {
        let den = self.denominator() as f64;
        self.vertices().map(|v| v.iter().map(|&c| c as f64 / den).collect()).collect()
    }

    pub fn position(&self, i: usize) -> Vec<f64> {
        let den = self.denominator() as f64;
        self.vertex(i).iter().map(|&c| c as f64 / den).collect()
    }

    /// Keeps the first `n` vertices.
    pub fn truncated(&self, n: usize) -> Path {
        let mut p = self.clone();
        p.coords.truncate(n.min(self.len()) * self.d);
        p
    }

    pub fn is_nearest_neighbour(&self) -> bool {
        (1..self.len()).all(|i| unit_step(self.vertex(i - 1), self.vertex(i)).is_some())
    }

    pub fn is_self_avoiding(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.len());
        self.vertices().all(|v| seen.insert(v))
    }

    pub fn to_record(&self, m: usize) -> PathRecord {
        PathRecord { family: self.family, d: self.d, m, j: self.scale, vertices: self.vertices().map(|v| v.to_vec()).collect() }
    }
}

/// JSONL corpus record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    pub family: Family,
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub j: u32,
    pub vertices: Vec<Vec<i64>>,
}

/// (axis, ±1) when `b - a` is a unit coordinate vector.
fn unit_step(a: &[i64], b: &[i64]) -> Option<(usize, i64)> {
    let mut found = None;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let diff = y - x;
        if diff != 0 {
            if found.is_some() || diff.abs() != 1 {
                return None;
            }
            found = Some((k, diff));
        }
    }
    found
}

pub fn q_of(d: usize) -> usize {
    d / 10
}

pub fn r_of(d: usize) -> usize {
    let mut r = (d as f64).sqrt() as usize;
    while r * r > d {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= d {
        r += 1;
    }
    r
}

/// Vertex count after `j` refinements of a path with `l0` vertices.
pub fn length_law(l0: usize, j: u32) -> usize {
    (0..j).fold(l0, |l, _| 10 * (l - 1) + 1)
}

pub fn base_path(d: usize, m: usize, seq: &[usize]) -> Result<Path> {
    if d < 1 || m < 1 || seq.len() != m {
        return domain(format!("base_path needs M = seq.len() >= 1 (M={m}, len={})", seq.len()));
    }
    if let Some(&bad) = seq.iter().find(|&&i| i < 1 || i > d) {
        return domain(format!("direction index {bad} outside [1, {d}]"));
    }
    let mut cur = vec![0i64; d];
    let mut coords = Vec::with_capacity(m * d);
    for &i in seq {
        cur[i - 1] += 1;
        coords.extend_from_slice(&cur);
    }
    Ok(Path { d, scale: 0, kind: LatticeKind::Unit, family: Family::PBase, coords })
}

/// Zigzag base: starts at e_{i1} and moves
/// e1, e_{i2}, e1, …, e_{iM}, e1, e1, −e_{iM}, e1, …, −e_{i2}, e1.
pub fn zigzag_base_path(d: usize, m: usize, seq: &[usize]) -> Result<Path> {
    if d < 4 || m < 1 || seq.len() != m {
        return domain(format!("zigzag_base_path needs d >= 4 and M = seq.len() (d={d}, M={m})"));
    }
    if let Some(&bad) = seq.iter().find(|&&i| i < 2 || i > d) {
        return domain(format!("direction index {bad} outside [2, {d}]"));
    }
    let mut steps: Vec<(usize, i64)> = vec![(0, 1)];
    for &i in &seq[1..] {
        steps.push((i - 1, 1));
        steps.push((0, 1));
    }
    steps.push((0, 1));
    for &i in seq[1..].iter().rev() {
        steps.push((i - 1, -1));
        steps.push((0, 1));
    }
    let mut cur = vec![0i64; d];
    cur[seq[0] - 1] = 1;
    let mut coords = Vec::with_capacity((steps.len() + 1) * d);
    coords.extend_from_slice(&cur);
    for (a, s) in steps {
        cur[a] += s;
        coords.extend_from_slice(&cur);
    }
    Ok(Path { d, scale: 0, kind: LatticeKind::Unit, family: Family::Zigzag, coords })
}

/// Replaces each unit edge by `r` collinear steps on the (1/r)-lattice.
pub fn interpolate_base(path: &Path, r: usize) -> Result<Path> {
    if path.kind != LatticeKind::Unit || r == 0 {
        return domain("interpolate_base needs a unit-lattice path and r >= 1");
    }
    let d = path.d;
    let r64 = r as i64;
    let mut coords = Vec::with_capacity(((path.len().max(1) - 1) * r + 1) * d);
    for (i, v) in path.vertices().enumerate() {
        if i == 0 {
            coords.extend(v.iter().map(|c| c * r64));
            continue;
        }
        let prev = path.vertex(i - 1);
        let Some((a, s)) = unit_step(prev, v) else {
            return domain(format!("edge {} is not a unit step", i - 1));
        };
        for k in 1..=r64 {
            let start = coords.len();
            coords.extend(prev.iter().map(|c| c * r64));
            coords[start + a] += s * k;
        }
    }
    let family = if path.family == Family::PBase || path.family == Family::Zigzag { Family::SBase } else { path.family };
    Ok(Path { d, scale: 0, kind: LatticeKind::RScaled { r: r as u32 }, family, coords })
}

/// Sparse integer vector with at most four nonzero entries, sorted by axis.
#[derive(Clone, Copy, Debug)]
struct Sparse {
    len: u8,
    e: [(u32, i64); 4],
}

impl Sparse {
    fn new(entries: &[(usize, i64)]) -> Sparse {
        let mut s = Sparse { len: 0, e: [(0, 0); 4] };
        for &(a, v) in entries {
            s.add(a as u32, v);
        }
        s
    }

    fn entries(&self) -> &[(u32, i64)] {
        &self.e[..self.len as usize]
    }

    fn add(&mut self, axis: u32, v: i64) {
        if v == 0 {
            return;
        }
        let n = self.len as usize;
        if let Some(k) = self.e[..n].iter().position(|x| x.0 == axis) {
            self.e[k].1 += v;
            if self.e[k].1 == 0 {
                self.e.copy_within(k + 1..n, k);
                self.len -= 1;
            }
            return;
        }
        let pos = self.e[..n].iter().position(|x| x.0 > axis).unwrap_or(n);
        self.e.copy_within(pos..n, pos + 1);
        self.e[pos] = (axis, v);
        self.len += 1;
    }

    /// Lexicographic order of the dense vectors.
    fn dense_cmp(&self, o: &Sparse) -> Ordering {
        let (a, b) = (self.entries(), o.entries());
        let (mut i, mut j) = (0, 0);
        loop {
            let ka = a.get(i).map(|x| x.0).unwrap_or(u32::MAX);
            let kb = b.get(j).map(|x| x.0).unwrap_or(u32::MAX);
            if ka == u32::MAX && kb == u32::MAX {
                return Ordering::Equal;
            }
            let (va, vb, axis) = if ka < kb {
                (a[i].1, 0, ka)
            } else if kb < ka {
                (0, b[j].1, kb)
            } else {
                (a[i].1, b[j].1, ka)
            };
            if va != vb {
                return va.cmp(&vb);
            }
            if ka <= axis {
                i += 1;
            }
            if kb <= axis {
                j += 1;
            }
        }
    }
}

impl PartialEq for Sparse {
    fn eq(&self, o: &Sparse) -> bool {
        self.entries() == o.entries()
    }
}

impl Eq for Sparse {}

type TubeCandidate = [Sparse; TUBE_LEN];

fn candidate_cmp(a: &TubeCandidate, b: &TubeCandidate) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.dense_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Maps the abstract coordinates of the tube constructions to real axes.
/// Abstract 1 is the start axis (or the edge axis for a free start),
/// abstract 2 is the edge axis when it differs from the start axis, and the
/// remaining abstract coordinates take the remaining axes in ascending order.
struct AxisMap {
    fixed: [usize; 2],
    nfixed: usize,
    sorted: [usize; 2],
}

impl AxisMap {
    fn new(fixed: &[usize]) -> AxisMap {
        let mut f = [usize::MAX; 2];
        f[..fixed.len()].copy_from_slice(fixed);
        let mut s = f;
        s[..fixed.len()].sort_unstable();
        AxisMap { fixed: f, nfixed: fixed.len(), sorted: s }
    }

    fn axis(&self, k: usize) -> usize {
        if k <= self.nfixed {
            return self.fixed[k - 1];
        }
        let mut a = k - self.nfixed - 1;
        for &ex in &self.sorted[..self.nfixed] {
            if a >= ex {
                a += 1;
            }
        }
        a
    }
}

/// Largest candidate count supported by every tube case in dimension `d`.
pub fn max_tube_count(d: usize) -> usize {
    (d.saturating_sub(1)) / 2
}

/// Tube sub-paths for the edge `x → x + 8·sign·e_axis`, as sparse offsets
/// from `x` in sub-lattice units, sorted lexicographically.
/// `start` is the fixed first vertex `x + zs·e_za` when given.
fn tube_candidates(d: usize, axis: usize, sign: i64, start: Option<(usize, i64)>, count: usize) -> Result<Vec<TubeCandidate>> {
    let need = |n: usize| -> Result<()> {
        if n > d {
            return Err(LabError::Geometry(format!("{count} tube paths need dimension {n} > {d}")));
        }
        Ok(())
    };
    let mut out: Vec<TubeCandidate> = Vec::with_capacity(count);
    let mut push = |verts: Vec<Vec<(usize, i64)>>| {
        let mut c = [Sparse::new(&[]); TUBE_LEN];
        for (slot, v) in c.iter_mut().zip(&verts) {
            *slot = Sparse::new(v);
        }
        debug_assert_eq!(verts.len(), TUBE_LEN);
        out.push(c);
    };
    match start {
        None => {
            need(2 * count + 1)?;
            let m = AxisMap::new(&[axis]);
            let e1 = m.axis(1);
            for t in 1..=count {
                let (u, w) = (m.axis(2 * t), m.axis(2 * t + 1));
                let mut v: Vec<Vec<(usize, i64)>> = (0..=8).map(|k| vec![(e1, sign * k), (u, 1)]).collect();
                v.push(vec![(e1, 8 * sign), (u, 1), (w, 1)]);
                v.push(vec![(e1, 8 * sign), (w, 1)]);
                push(v);
            }
        }
        Some((za, zs)) if za == axis => {
            let m = AxisMap::new(&[za]);
            let e1 = m.axis(1);
            if sign == zs {
                need(2 * count + 1)?;
                for t in 1..=count {
                    let (u, w) = (m.axis(2 * t), m.axis(2 * t + 1));
                    let mut v = vec![vec![(e1, zs)]];
                    v.extend((1..=8).map(|k| vec![(e1, zs * k), (u, 1)]));
                    v.push(vec![(e1, 8 * zs), (u, 1), (w, 1)]);
                    v.push(vec![(e1, 8 * zs), (w, 1)]);
                    push(v);
                }
            } else {
                need(count + 1)?;
                for t in 2..=count + 1 {
                    let u = m.axis(t);
                    let mut v = vec![vec![(e1, zs)], vec![(e1, zs), (u, 1)]];
                    v.extend((0..=8).map(|k| vec![(e1, sign * k), (u, 1)]));
                    push(v);
                }
            }
        }
        Some((za, zs)) => {
            need(count + 2)?;
            let m = AxisMap::new(&[za, axis]);
            let (e1, e2) = (m.axis(1), m.axis(2));
            for t in 3..=count + 2 {
                let u = m.axis(t);
                let mut v = vec![vec![(e1, zs)], vec![(e1, zs), (u, 1)]];
                if zs > 0 {
                    v.extend((1..=8).map(|k| vec![(e1, 1), (e2, sign * k), (u, 1)]));
                    v.push(vec![(e2, 8 * sign), (u, 1)]);
                } else {
                    v.extend((0..=8).map(|k| vec![(e2, sign * k), (u, 1)]));
                }
                push(v);
            }
        }
    }
    out.sort_by(candidate_cmp);
    Ok(out)
}

/// Explicit tube sub-paths for the edge
/// `x → y` given at the sub-scale (`y = x ± 8 e_i`), optionally pinned to
/// start at `z` with `|z − x|₁ = 1`. Returned in lexicographic order.
pub fn tube_paths(x: &ScaledPoint, y: &ScaledPoint, z: Option<&ScaledPoint>, count: usize) -> Result<Vec<Path>> {
    let d = x.coords.len();
    if y.coords.len() != d || y.scale != x.scale || y.kind != x.kind {
        return Err(LabError::Geometry("x and y must share dimension, scale and lattice".into()));
    }
    let (axis, sign) = eight_step(&x.coords, &y.coords).ok_or_else(|| LabError::Geometry("y must equal x ± 8 e_i".into()))?;
    let start = match z {
        None => None,
        Some(z) => Some(unit_step(&x.coords, &z.coords).ok_or_else(|| LabError::Geometry("z must be a lattice neighbour of x".into()))?),
    };
    let cands = tube_candidates(d, axis, sign, start, count)?;
    Ok(cands
        .iter()
        .map(|c| {
            let mut coords = Vec::with_capacity(TUBE_LEN * d);
            for s in c {
                let at = coords.len();
                coords.extend_from_slice(&x.coords);
                for &(a, v) in s.entries() {
                    coords[at + a as usize] += v;
                }
            }
            Path { d, scale: x.scale, kind: x.kind, family: Family::PRefined, coords }
        })
        .collect())
}

fn eight_step(a: &[i64], b: &[i64]) -> Option<(usize, i64)> {
    let mut found = None;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let diff = y - x;
        if diff != 0 {
            if found.is_some() || diff.abs() != 8 {
                return None;
            }
            found = Some((k, diff.signum()));
        }
    }
    found
}

/// Number of refinements retained per edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    /// ⌊d/10⌋ − 10, defined for d ≥ 110.
    Canonical,
    /// Desk-scale override; outputs are flagged non-canonical.
    Override(usize),
}

impl Branching {
    pub fn resolve(&self, d: usize) -> Result<usize> {
        let b = match *self {
            Branching::Canonical => {
                let q = q_of(d);
                if q < 11 {
                    return Err(LabError::Refinement(format!("canonical branching needs d >= 110 (d = {d}); pass an override")));
                }
                q - 10
            }
            Branching::Override(b) => b,
        };
        if b == 0 {
            return Err(LabError::Refinement("branching must be positive".into()));
        }
        if b + 10 > max_tube_count(d) {
            return Err(LabError::Refinement(format!("branching {b} needs d >= {} (d = {d})", 2 * b + 21)));
        }
        Ok(b)
    }

    pub fn is_canonical(&self) -> bool {
        matches!(self, Branching::Canonical)
    }
}

/// Per-edge index into the retained subset of tube paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementChoice {
    pub indices: Vec<usize>,
}

fn refine_impl<F>(path: &Path, branching: usize, mut choose: F) -> Result<Path>
where
    F: FnMut(usize, &[i64], &[i64]) -> usize,
{
    let d = path.d;
    let l = path.len();
    if l < 2 {
        return domain("refinement needs at least one edge");
    }
    let count = branching + 10;
    let mut out = Vec::with_capacity((10 * (l - 1) + 1) * d);
    let mut prev: Option<(TubeCandidate, usize, i64)> = None;
    let mut x8 = vec![0i64; d];
    for i in 0..l - 1 {
        let (x, y) = (path.vertex(i), path.vertex(i + 1));
        let (axis, sign) = unit_step(x, y).ok_or_else(|| LabError::Geometry(format!("edge {i} is not a unit step")))?;
        for (o, c) in x8.iter_mut().zip(x) {
            *o = 8 * c;
        }
        let start = if i == 0 {
            None
        } else {
            let last = &out[out.len() - d..];
            Some(unit_step(&x8, last).ok_or_else(|| LabError::Geometry(format!("edge {i}: previous refinement does not end next to its box corner")))?)
        };
        let cands = tube_candidates(d, axis, sign, start, count)?;
        // Previous refinement, re-expressed relative to 8x.
        let shifted: Vec<Sparse> = match &prev {
            None => Vec::new(),
            Some((c, pa, ps)) => c
                .iter()
                .map(|s| {
                    let mut s = *s;
                    s.add(*pa as u32, -8 * ps);
                    s
                })
                .collect(),
        };
        let valid: Vec<&TubeCandidate> = cands.iter().filter(|c| c[1..].iter().all(|v| !shifted.contains(v))).take(branching).collect();
        if valid.len() < branching {
            return Err(LabError::Refinement(format!("edge {i}: only {} admissible tube paths", valid.len())));
        }
        let k = choose(i, x, y);
        if k >= branching {
            return Err(LabError::Refinement(format!("edge {i}: choice {k} outside [0, {branching})")));
        }
        let chosen = *valid[k];
        for (vi, s) in chosen.iter().enumerate() {
            if i > 0 && vi == 0 {
                continue;
            }
            let at = out.len();
            out.extend_from_slice(&x8);
            for &(a, v) in s.entries() {
                out[at + a as usize] += v;
            }
        }
        prev = Some((chosen, axis, sign));
    }
    let family = match path.kind {
        LatticeKind::RScaled { .. } => Family::SRefined,
        _ => Family::PRefined,
    };
    Ok(Path { d, scale: path.scale + 1, kind: path.kind.refined(), family, coords: out })
}

/// Refinement with explicit per-edge choices.
pub fn refine_path(path: &Path, choice: &RefinementChoice, branching: Branching) -> Result<Path> {
    let b = branching.resolve(path.d)?;
    if choice.indices.len() + 1 != path.len() {
        return domain(format!("{} choices for {} edges", choice.indices.len(), path.len().saturating_sub(1)));
    }
    refine_impl(path, b, |i, _, _| choice.indices[i])
}

/// Refinement whose per-edge choice is a hash of (seed, output scale,
/// lattice, edge endpoints). Equal edges at equal scales make equal choices,
/// so chains of different lengths agree on common prefixes.
pub fn refine_path_seeded(path: &Path, branching: Branching, seed: u64) -> Result<Path> {
    let b = branching.resolve(path.d)?;
    let scale = path.scale as u64 + 1;
    let tag = path.kind.tag();
    refine_impl(path, b, |_, x, y| {
        let mut h = KeyHasher::new(seed, DOMAIN_REFINE);
        h.absorb(scale).absorb(tag).absorb_slice(x).absorb_slice(y);
        index_from_word(h.finish(), b)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainFamily {
    P,
    S,
    Zigzag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub family: ChainFamily,
    pub branching: Branching,
}

impl ChainSpec {
    pub fn new(d: usize, m: usize, n: u32, family: ChainFamily) -> ChainSpec {
        ChainSpec { d, m, n, family, branching: Branching::Canonical }
    }

    pub fn with_branching(mut self, b: Branching) -> ChainSpec {
        self.branching = b;
        self
    }

    /// Vertex count of the scale-0 member of the chain.
    pub fn base_len(&self) -> usize {
        let r = r_of(self.d);
        match self.family {
            ChainFamily::P => self.m,
            ChainFamily::S => r * (self.m - 1) + 1,
            ChainFamily::Zigzag => r * (4 * self.m - 2) + 1,
        }
    }
}

/// Base direction sequence (1-based indices); entry `i` depends only on
/// (seed, i) so sequences for different M share prefixes.
pub fn base_sequence(seed: u64, d: usize, m: usize, zigzag: bool) -> Vec<usize> {
    (0..m)
        .map(|i| {
            let w = KeyHasher::new(seed, DOMAIN_BASE).absorb(i as u64).finish();
            if zigzag {
                2 + index_from_word(w, d - 1)
            } else {
                1 + index_from_word(w, d)
            }
        })
        .collect()
}

/// Samples P_0, …, P_n: a uniform base path followed by uniform refinements.
pub fn sample_refined_chain(spec: &ChainSpec, seed: u64) -> Result<Vec<Path>> {
    let d = spec.d;
    spec.branching.resolve(d)?;
    let base = match spec.family {
        ChainFamily::P => base_path(d, spec.m, &base_sequence(seed, d, spec.m, false))?,
        ChainFamily::S => interpolate_base(&base_path(d, spec.m, &base_sequence(seed, d, spec.m, false))?, r_of(d))?,
        ChainFamily::Zigzag => interpolate_base(&zigzag_base_path(d, spec.m, &base_sequence(seed, d, spec.m, true))?, r_of(d))?,
    };
    let mut chain = Vec::with_capacity(spec.n as usize + 1);
    chain.push(base);
    for _ in 0..spec.n {
        let next = refine_path_seeded(chain.last().expect("nonempty"), spec.branching, seed)?;
        chain.push(next);
    }
    Ok(chain)
}

/// Number of shared vertices.
pub fn intersection_count(p: &Path, q: &Path) -> Result<usize> {
    if p.d != q.d || p.scale != q.scale || p.kind.denominator(p.scale) != q.kind.denominator(q.scale) {
        return domain("intersection_count needs paths on one lattice and scale");
    }
    let (small, large) = if p.len() <= q.len() { (p, q) } else { (q, p) };
    let set: HashSet<&[i64]> = small.vertices().collect();
    let mut seen = HashSet::new();
    Ok(large.vertices().filter(|v| set.contains(v) && seen.insert(*v)).count())
}

/// Level-j dyadic boxes `2^{-j}(b + [0,1)^d)` meeting the path's vertices.
pub fn boxes_touching(p: &Path, j: u32) -> HashSet<Vec<i64>> {
    let den = p.denominator();
    let mul = 1i128 << j;
    p.vertices().map(|v| v.iter().map(|&c| ((c as i128 * mul).div_euclid(den)) as i64).collect()).collect()
}

/// ℓ¹ distance, in units of the finer lattice, from `p` to the axis segment
/// `[a, b]` where `a`, `b` are given at a coarser scale with integer ratio `ratio`.
pub fn l1_to_segment(p: &[i64], a: &[i64], b: &[i64], ratio: i64) -> i64 {
    let mut total = 0;
    for ((&pc, &ac), &bc) in p.iter().zip(a).zip(b) {
        let (lo, hi) = if ac <= bc { (ac * ratio, bc * ratio) } else { (bc * ratio, ac * ratio) };
        total += if pc < lo {
            lo - pc
        } else if pc > hi {
            pc - hi
        } else {
            0
        };
    }
    total
}

/// Checks that every vertex of `fine` (scale k) lies within ℓ¹ distance
/// (2/7)·8^{-j} of the segments of `coarse` (scale j), using the ancestor
/// edge of each vertex. Returns the number of violating vertices.
pub fn containment_violations(coarse: &Path, fine: &Path) -> Result<usize> {
    if fine.scale < coarse.scale || coarse.d != fine.d || coarse.len() < 2 {
        return domain("containment needs a coarser path with at least one edge");
    }
    let gap = fine.scale - coarse.scale;
    let ratio = 8i64.pow(gap);
    let block = 10usize.pow(gap);
    let edges = coarse.len() - 1;
    let mut bad = 0;
    for (v, p) in fine.vertices().enumerate() {
        let e = (v / block).min(edges - 1);
        let dist = l1_to_segment(p, coarse.vertex(e), coarse.vertex(e + 1), ratio);
        if 7 * dist > 2 * ratio {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Symmetric Hausdorff distance between finite point sets (Euclidean).
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let one_sided = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .map(|p| y.iter().map(|q| crate::geometry::dist2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
            .sqrt()
    };
    one_sided(a, b).max(one_sided(b, a))
}

/// Σ_{n=1}^{levels} 2^{-n} min{1, d_H(A ∩ B_{2^n}(0), B ∩ B_{2^n}(0))}.
pub fn local_hausdorff(a: &[Vec<f64>], b: &[Vec<f64>], levels: u32) -> f64 {
    let mut total = 0.0;
    for n in 1..=levels {
        let r2 = 4f64.powi(n as i32);
        let inside = |s: &[Vec<f64>]| s.iter().filter(|p| p.iter().map(|x| x * x).sum::<f64>() < r2).cloned().collect::<Vec<_>>();
        let (ra, rb) = (inside(a), inside(b));
        let dh = match (ra.is_empty(), rb.is_empty()) {
            (true, true) => 0.0,
            (false, false) => hausdorff(&ra, &rb),
            _ => 1.0,
        };
        total += dh.min(1.0) / 2f64.powi(n as i32);
    }
    total
}

/// Least-squares fit of ln P[X >= k] against k over k = 1.. while at least
/// `min_count` samples remain in the tail; returns exp(slope).
pub fn fit_geometric_tail(values: &[usize], min_count: usize) -> Option<f64> {
    let mut pts = Vec::new();
    let n = values.len() as f64;
    for k in 1.. {
        let c = values.iter().filter(|&&v| v >= k).count();
        if c < min_count {
            break;
        }
        pts.push((k as f64, (c as f64 / n).ln()));
    }
    if pts.len() < 2 {
        return None;
    }
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / pts.len() as f64, my / pts.len() as f64);
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2)));
    Some((sxy / sxx).exp())
}

/// Violation counts from [`audit_chain`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainAudit {
    pub self_avoidance: usize,
    pub length_law: usize,
    pub containment: usize,
    pub endpoint_sphere: usize,
}

impl ChainAudit {
    pub fn total(&self) -> usize {
        self.self_avoidance + self.length_law + self.containment + self.endpoint_sphere
    }

    pub fn merge(&mut self, o: &ChainAudit) {
        self.self_avoidance += o.self_avoidance;
        self.length_law += o.length_law;
        self.containment += o.containment;
        self.endpoint_sphere += o.endpoint_sphere;
    }
}

fn l1_norm(v: &[i64]) -> i128 {
    v.iter().map(|&c| (c as i128).abs()).sum()
}

/// Structural checks on a refined chain P_0, …, P_n: every P_j is a
/// self-avoiding nearest-neighbour path of length 𝓛_j, every later member
/// lies within ℓ¹ distance (2/7)·8^{-j} of P_j, and the endpoints of every
/// P_j lie within (2/7) in |·|₁ of the base endpoints' ℓ¹ spheres.
pub fn audit_chain(chain: &[Path]) -> Result<ChainAudit> {
    let base = chain.first().ok_or_else(|| LabError::Domain("empty chain".into()))?;
    let den0 = base.denominator();
    let ref_start = l1_norm(base.vertex(0));
    let ref_end = l1_norm(base.vertex(base.len() - 1));
    let mut a = ChainAudit::default();
    for (j, p) in chain.iter().enumerate() {
        if !(p.is_self_avoiding() && p.is_nearest_neighbour()) {
            a.self_avoidance += 1;
        }
        if p.len() != length_law(base.len(), j as u32) {
            a.length_law += 1;
        }
        // | |x|₁ − ref/den0 | ≤ 2/7, scaled by 7·den·den0.
        let den = p.denominator();
        for (v, r) in [(p.vertex(0), ref_start), (p.vertex(p.len() - 1), ref_end)] {
            if (7 * den0 * l1_norm(v) - 7 * den * r).abs() > 2 * den * den0 {
                a.endpoint_sphere += 1;
            }
        }
        for q in &chain[j + 1..] {
            a.containment += containment_violations(p, q)?;
        }
    }
    Ok(a)
}

/// Samples P-family chains with M = `m_long` and M = `m_short` from one seed
/// and counts levels where the longer chain's prefix of length 𝓛_j(m_short)
/// differs from the shorter chain.
pub fn restriction_mismatches(d: usize, m_long: usize, m_short: usize, n: u32, branching: Branching, seed: u64) -> Result<usize> {
    if m_short > m_long {
        return domain("restriction needs m_short <= m_long");
    }
    let long = sample_refined_chain(&ChainSpec::new(d, m_long, n, ChainFamily::P).with_branching(branching), seed)?;
    let short = sample_refined_chain(&ChainSpec::new(d, m_short, n, ChainFamily::P).with_branching(branching), seed)?;
    Ok(long.iter().zip(&short).filter(|(l, s)| !l.truncated(s.len()).vertices().eq(s.vertices())).count())
}

/// One (level, y, m) cell of the conditional-domination table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationRow {
    pub level: u32,
    pub y: usize,
    pub m: usize,
    pub conditioned: usize,
    pub rate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub pairs: usize,
    pub success_p: f64,
    pub rows: Vec<DominationRow>,
    pub violations: usize,
}

/// Empirical P[Y_i ≥ m | Y_{i−1} = y] over independent chain pairs against
/// P[11·Bin(2y, min(1, 50/b)) ≥ m], b the branching, with slack
/// `z`·stderr.
pub fn domination_check(spec: &ChainSpec, pairs: usize, seed: u64, z: f64) -> Result<DominationReport> {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let b = spec.branching.resolve(spec.d)?;
    let prob = (50.0 / b as f64).min(1.0);
    let n = spec.n as usize;
    let mut ys = Vec::with_capacity(pairs);
    for i in 0..pairs as u64 {
        let p = sample_refined_chain(spec, crate::rng::derive_seed(seed, 0xD0, 2 * i))?;
        let q = sample_refined_chain(spec, crate::rng::derive_seed(seed, 0xD0, 2 * i + 1))?;
        let y: Vec<usize> = p.iter().zip(&q).map(|(a, b)| intersection_count(a, b)).collect::<Result<_>>()?;
        ys.push(y);
    }
    let mut rows = Vec::new();
    for level in 1..=n {
        let mut by_y: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for y in &ys {
            by_y.entry(y[level - 1]).or_default().push(y[level]);
        }
        for (&y, next) in &by_y {
            let top = next.iter().copied().max().unwrap_or(0);
            let bin = Binomial::new(prob, 2 * y as u64).map_err(|e| LabError::Domain(e.to_string()))?;
            for m in 1..=top + 1 {
                let hits = next.iter().filter(|&&v| v >= m).count();
                let c = next.len() as f64;
                let rate = hits as f64 / c;
                let stderr = (rate * (1.0 - rate) / c).sqrt();
                let k = m.div_ceil(11) as u64;
                let bound = if k == 0 { 1.0 } else { bin.sf(k - 1) };
                rows.push(DominationRow { level: level as u32, y, m, conditioned: next.len(), rate, stderr, bound, ok: rate <= bound + z * stderr + 1e-12 });
            }
        }
    }
    let violations = rows.iter().filter(|r| !r.ok).count();
    Ok(DominationReport { pairs, success_p: prob, rows, violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_add_and_cmp() {
        let mut s = Sparse::new(&[(3, 1), (1, 2)]);
        assert_eq!(s.entries(), &[(1, 2), (3, 1)]);
        s.add(1, -2);
        assert_eq!(s.entries(), &[(3, 1)]);
        let a = Sparse::new(&[(0, 1)]);
        let b = Sparse::new(&[(1, 1)]);
        assert_eq!(a.dense_cmp(&b), Ordering::Greater);
        assert_eq!(b.dense_cmp(&Sparse::new(&[])), Ordering::Greater);
        assert_eq!(Sparse::new(&[(2, -1)]).dense_cmp(&Sparse::new(&[])), Ordering::Less);
    }

    #[test]
    fn axis_map_skips_fixed() {
        let m = AxisMap::new(&[3, 0]);
        assert_eq!((1..=6).map(|k| m.axis(k)).collect::<Vec<_>>(), vec![3, 0, 1, 2, 4, 5]);
        let m = AxisMap::new(&[2]);
        assert_eq!((1..=4).map(|k| m.axis(k)).collect::<Vec<_>>(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn r_and_q() {
        assert_eq!(r_of(110), 10);
        assert_eq!(r_of(50), 7);
        assert_eq!(r_of(49), 7);
        assert_eq!(q_of(110), 11);
        assert_eq!(length_law(10, 2), 901);
    }
}
