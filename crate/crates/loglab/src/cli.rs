//! Experiment runner: TOML configuration, validation, dispatch to the
//! library pipelines and persistence of reports.
//!
//! A config names one experiment, a seed, an output directory and a typed
//! `[params]` table:
//!
//! ```toml
//! experiment = "fractal_crossing"
//! seed = 7
//! output = "runs"
//!
//! [[params.cases]]
//! ds = [2]
//! ps = [0.5]
//! ns = [1]
//! samples = 100000
//! ```
//!
//! Every run writes a fresh UTC-timestamped directory holding `config.json`,
//! `report.json` and any CSV/JSONL data files.

use crate::paths::{Branching, ChainFamily, ChainSpec};
use crate::{brw, fractal, gaussian, geometry, metric, paths, rng, whitenoise};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

pub const EXPERIMENTS: [&str; 12] = [
    "brw_good_paths",
    "brw_moments",
    "fractal_crossing",
    "fractal_pc",
    "wn_covariance",
    "wn_good_conditions",
    "g2i_audit",
    "lfpp_exponent",
    "corridor_bound",
    "geometry_checks",
    "gaussian_checks",
    "path_stats",
];

const TOP_KEYS: [&str; 4] = ["experiment", "seed", "output", "params"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub monotone_ds: Vec<usize>,
    pub grid: usize,
    pub floor_ds: Vec<usize>,
    pub floor_ts: Vec<f64>,
    pub floor_taus: Vec<f64>,
    pub fit_ds: Vec<usize>,
    pub fit_us: usize,
    pub surface_ds: Vec<usize>,
}

impl Default for GeometryParams {
    fn default() -> Self {
        GeometryParams {
            monotone_ds: vec![1, 2, 3, 8, 64, 256],
            grid: 100,
            floor_ds: vec![16, 32, 64, 128, 256],
            floor_ts: vec![1.0, 2.0, 5.0],
            floor_taus: vec![0.5, 1.0],
            fit_ds: vec![8, 16, 32, 64, 128, 256],
            fit_us: 39,
            surface_ds: vec![2, 3, 16, 64, 256, 400],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianCheck {
    Tail,
    Orthant,
    Repulsion,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianParams {
    pub checks: Vec<GaussianCheck>,
    pub specs: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub spot_checks: usize,
    pub mc_samples: usize,
    pub spot_z: f64,
    pub repulsion_m: f64,
    pub repulsion_ts: Vec<f64>,
    pub repulsion_max: f64,
    pub sequence_a: f64,
    pub sequence_b: f64,
    pub sequence_terms: usize,
    pub sequence_b_terms: usize,
}

impl Default for GaussianParams {
    fn default() -> Self {
        GaussianParams {
            checks: vec![GaussianCheck::Tail, GaussianCheck::Orthant, GaussianCheck::Repulsion, GaussianCheck::Sequence],
            specs: 200,
            t_min: 1.0,
            t_max: 4.0,
            spot_checks: 10,
            mc_samples: 1_000_000,
            spot_z: 4.0,
            repulsion_m: 1e6,
            repulsion_ts: (-5..=3).map(f64::from).collect(),
            repulsion_max: 1.02,
            sequence_a: 2.0,
            sequence_b: 1e6,
            sequence_terms: 10_000,
            sequence_b_terms: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceCheck {
    Variance,
    LogLaw,
    Increment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceParams {
    pub checks: Vec<CovarianceCheck>,
    pub variance_ds: Vec<usize>,
    pub variance_n_max: u32,
    pub variance_tol: f64,
    pub law_ds: Vec<usize>,
    pub law_n: u32,
    pub law_points: usize,
    pub law_u_min: f64,
    pub law_u_max: f64,
    pub law_c_max: f64,
    pub increment_ds: Vec<usize>,
    pub increment_k: u32,
    pub increment_js: Vec<u32>,
}

impl Default for CovarianceParams {
    fn default() -> Self {
        CovarianceParams {
            checks: vec![CovarianceCheck::Variance, CovarianceCheck::LogLaw],
            variance_ds: vec![2, 3, 8, 64],
            variance_n_max: 12,
            variance_tol: 1e-8,
            law_ds: vec![2, 3],
            law_n: 10,
            law_points: 50,
            law_u_min: 2f64.powi(-8),
            law_u_max: 0.25,
            law_c_max: 3.0,
            increment_ds: vec![2, 3],
            increment_k: 1,
            increment_js: vec![4, 5, 6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathCheck {
    Audit,
    Restriction,
    Tail,
    Domination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathStatsParams {
    pub checks: Vec<PathCheck>,
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub family: ChainFamily,
    pub branching: Option<usize>,
    pub chains: usize,
    pub restriction_m_long: usize,
    pub restriction_chains: usize,
    pub tail_ds: Vec<usize>,
    pub tail_m: usize,
    pub tail_pairs: usize,
    pub tail_min_count: usize,
    pub domination_pairs: usize,
    pub domination_z: f64,
}

impl Default for PathStatsParams {
    fn default() -> Self {
        PathStatsParams {
            checks: vec![PathCheck::Audit, PathCheck::Restriction],
            d: 110,
            m: 10,
            n: 2,
            family: ChainFamily::P,
            branching: None,
            chains: 100,
            restriction_m_long: 12,
            restriction_chains: 20,
            tail_ds: vec![3, 5, 10],
            tail_m: 10,
            tail_pairs: 10_000,
            tail_min_count: 30,
            domination_pairs: 1000,
            domination_z: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoodPathsParams {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub k: u32,
    pub alpha: f64,
    pub attempts: usize,
    pub family: ChainFamily,
    pub branching: Option<usize>,
}

impl Default for GoodPathsParams {
    fn default() -> Self {
        GoodPathsParams { d: 110, m: 10, n: 1, k: 1, alpha: 0.0, attempts: 1000, family: ChainFamily::P, branching: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsParams {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub k: u32,
    pub alphas: Vec<f64>,
    pub pairs: usize,
    pub c1: Option<f64>,
    pub family: ChainFamily,
    pub branching: Option<usize>,
    pub agreement_z: f64,
}

impl Default for MomentsParams {
    fn default() -> Self {
        MomentsParams {
            d: 110,
            m: 10,
            n: 1,
            k: 1,
            alphas: vec![0.0, 0.5],
            pairs: 10_000,
            c1: None,
            family: ChainFamily::P,
            branching: None,
            agreement_z: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalParams {
    pub d: usize,
    pub p: f64,
    pub depth: u32,
    pub samples: usize,
    pub tol: f64,
}

impl Default for SurvivalParams {
    fn default() -> Self {
        SurvivalParams { d: 2, p: 0.6, depth: 14, samples: 100_000, tol: 0.005 }
    }
}

/// One grid of crossing-rate estimates; a trend in d is checked when `ds`
/// has several entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingCase {
    pub ds: Vec<usize>,
    pub ps: Vec<f64>,
    pub ns: Vec<u32>,
    pub samples: usize,
}

impl Default for CrossingCase {
    fn default() -> Self {
        CrossingCase { ds: vec![2], ps: vec![0.5], ns: vec![1], samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingParams {
    pub cases: Vec<CrossingCase>,
    pub window: i64,
    pub mode: fractal::ConnectivityMode,
    pub oracle_z: f64,
    pub survival: Option<SurvivalParams>,
}

impl Default for CrossingParams {
    fn default() -> Self {
        CrossingParams { cases: vec![CrossingCase::default()], window: 1, mode: fractal::ConnectivityMode::Closed, oracle_z: 3.0, survival: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcParams {
    pub d: usize,
    pub n: u32,
    pub samples: usize,
    pub tol: f64,
}

impl Default for PcParams {
    fn default() -> Self {
        PcParams { d: 2, n: 3, samples: 2000, tol: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoodConditionsParams {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub k: u32,
    pub alpha: f64,
    pub beta: f64,
    pub family: ChainFamily,
    pub branching: Option<usize>,
    pub chains: usize,
    pub fields_per_chain: usize,
    pub probe_levels: Vec<u32>,
    pub mc_samples: usize,
}

impl Default for GoodConditionsParams {
    fn default() -> Self {
        GoodConditionsParams {
            d: 23,
            m: 2,
            n: 2,
            k: 0,
            alpha: 0.0,
            beta: 0.8,
            family: ChainFamily::S,
            branching: Some(1),
            chains: 5,
            fields_per_chain: 200,
            probe_levels: vec![],
            mc_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct G2iParams {
    pub d: usize,
    pub m: usize,
    pub n: u32,
    pub k: u32,
    pub pairs: usize,
    pub mc_samples: usize,
    pub family: ChainFamily,
    pub branching: Option<usize>,
}

impl Default for G2iParams {
    fn default() -> Self {
        G2iParams { d: 23, m: 2, n: 1, k: 1, pairs: 100, mc_samples: 2000, family: ChainFamily::S, branching: Some(1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfppParams {
    pub xis: Vec<f64>,
    pub levels: Vec<u32>,
    pub replicas: usize,
    pub agreement_xis: Vec<f64>,
    pub weyl_shift: f64,
    pub weyl_tol: f64,
}

impl Default for LfppParams {
    fn default() -> Self {
        LfppParams {
            xis: vec![0.0, 0.2, 0.4, 0.5, 0.8],
            levels: vec![5, 6, 7, 8],
            replicas: 100,
            agreement_xis: vec![0.4],
            weyl_shift: 0.37,
            weyl_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorParams {
    pub d: usize,
    pub m: usize,
    pub xis: Vec<f64>,
    pub levels: Vec<u32>,
    pub path_samples: usize,
    pub repetitions: usize,
    pub mode: metric::CorridorMode,
    pub flat_slope_target: f64,
    pub flat_slope_tol: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        CorridorParams {
            d: 50,
            m: 10,
            xis: vec![5.0, 0.0],
            levels: vec![1, 2, 3],
            path_samples: 5,
            repetitions: 20,
            mode: metric::CorridorMode::Independent,
            flat_slope_target: (11.0f64 / 8.0).log2(),
            flat_slope_tol: 0.05,
        }
    }
}

/// Typed parameters, tagged by experiment name.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "experiment", content = "params", rename_all = "snake_case")]
pub enum Params {
    BrwGoodPaths(GoodPathsParams),
    BrwMoments(MomentsParams),
    FractalCrossing(CrossingParams),
    FractalPc(PcParams),
    WnCovariance(CovarianceParams),
    WnGoodConditions(GoodConditionsParams),
    G2iAudit(G2iParams),
    LfppExponent(LfppParams),
    CorridorBound(CorridorParams),
    GeometryChecks(GeometryParams),
    GaussianChecks(GaussianParams),
    PathStats(PathStatsParams),
}

impl Params {
    pub fn name(&self) -> &'static str {
        match self {
            Params::BrwGoodPaths(_) => "brw_good_paths",
            Params::BrwMoments(_) => "brw_moments",
            Params::FractalCrossing(_) => "fractal_crossing",
            Params::FractalPc(_) => "fractal_pc",
            Params::WnCovariance(_) => "wn_covariance",
            Params::WnGoodConditions(_) => "wn_good_conditions",
            Params::G2iAudit(_) => "g2i_audit",
            Params::LfppExponent(_) => "lfpp_exponent",
            Params::CorridorBound(_) => "corridor_bound",
            Params::GeometryChecks(_) => "geometry_checks",
            Params::GaussianChecks(_) => "gaussian_checks",
            Params::PathStats(_) => "path_stats",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub params: Params,
    pub seed: u64,
    pub output: PathBuf,
}

fn parse_params<T: serde::de::DeserializeOwned>(v: toml::Value) -> std::result::Result<T, String> {
    v.try_into().map_err(|e: toml::de::Error| format!("params: {}", e.message()))
}

/// Schema check without execution; all problems found are returned.
pub fn validate(bytes: &[u8]) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| vec![format!("config is not UTF-8: {e}")])?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![format!("syntax: {}", e.message())])?;
    let mut errs = Vec::new();
    for key in table.keys() {
        if !TOP_KEYS.contains(&key.as_str()) {
            errs.push(format!("{key}: unknown key (expected one of {})", TOP_KEYS.join(", ")));
        }
    }
    let name = match table.get("experiment") {
        None => {
            errs.insert(0, "missing experiment".to_string());
            return Err(errs);
        }
        Some(toml::Value::String(s)) if EXPERIMENTS.contains(&s.as_str()) => s.clone(),
        Some(other) => {
            errs.push(format!("experiment: unknown experiment {other} (expected one of {})", EXPERIMENTS.join(", ")));
            return Err(errs);
        }
    };
    let seed = match table.get("seed") {
        None => 0,
        Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => {
            errs.push(format!("seed: expected a nonnegative integer, found {other}"));
            0
        }
    };
    let output = match table.get("output") {
        None => PathBuf::from("runs"),
        Some(toml::Value::String(s)) => PathBuf::from(s),
        Some(other) => {
            errs.push(format!("output: expected a path string, found {other}"));
            PathBuf::new()
        }
    };
    let raw = match table.get("params") {
        None => toml::Value::Table(toml::Table::new()),
        Some(v @ toml::Value::Table(_)) => v.clone(),
        Some(other) => {
            errs.push(format!("params: expected a table, found {other}"));
            return Err(errs);
        }
    };
    let parsed = match name.as_str() {
        "brw_good_paths" => parse_params(raw).map(Params::BrwGoodPaths),
        "brw_moments" => parse_params(raw).map(Params::BrwMoments),
        "fractal_crossing" => parse_params(raw).map(Params::FractalCrossing),
        "fractal_pc" => parse_params(raw).map(Params::FractalPc),
        "wn_covariance" => parse_params(raw).map(Params::WnCovariance),
        "wn_good_conditions" => parse_params(raw).map(Params::WnGoodConditions),
        "g2i_audit" => parse_params(raw).map(Params::G2iAudit),
        "lfpp_exponent" => parse_params(raw).map(Params::LfppExponent),
        "corridor_bound" => parse_params(raw).map(Params::CorridorBound),
        "geometry_checks" => parse_params(raw).map(Params::GeometryChecks),
        "gaussian_checks" => parse_params(raw).map(Params::GaussianChecks),
        _ => parse_params(raw).map(Params::PathStats),
    };
    let params = match parsed {
        Ok(p) => p,
        Err(e) => {
            errs.push(e);
            return Err(errs);
        }
    };
    check_params(&params, &mut errs);
    if errs.is_empty() {
        Ok(ExperimentConfig { params, seed, output })
    } else {
        Err(errs)
    }
}

fn need(errs: &mut Vec<String>, ok: bool, field: &str, msg: &str) {
    if !ok {
        errs.push(format!("params.{field}: {msg}"));
    }
}

fn check_chain(errs: &mut Vec<String>, d: usize, m: usize, family: ChainFamily, branching: Option<usize>) {
    need(errs, d >= 2, "d", "must be at least 2");
    need(errs, m >= 2, "m", "must be at least 2");
    need(errs, family != ChainFamily::Zigzag || d >= 4, "family", "zigzag needs d >= 4");
    if let Err(e) = branching_of(branching).resolve(d) {
        errs.push(format!("params.branching: {e}"));
    }
}

fn check_params(p: &Params, errs: &mut Vec<String>) {
    match p {
        Params::GeometryChecks(g) => {
            need(errs, g.grid >= 2, "grid", "must be at least 2");
            need(errs, g.monotone_ds.iter().all(|&d| d >= 1), "monotone_ds", "dimensions must be positive");
            need(errs, g.floor_ds.len() >= 2 && g.floor_ds.iter().all(|&d| d >= 1), "floor_ds", "need two or more positive dimensions");
            need(errs, g.floor_ts.iter().all(|&t| t > 0.0), "floor_ts", "radii must be positive");
            need(errs, g.floor_taus.iter().all(|&t| t > 0.0), "floor_taus", "must be positive");
            need(errs, g.fit_ds.iter().all(|&d| d >= 1), "fit_ds", "dimensions must be positive");
            need(errs, g.fit_us >= 1, "fit_us", "must be positive");
            need(errs, g.surface_ds.iter().all(|&d| d >= 2), "surface_ds", "dimensions must be at least 2");
        }
        Params::GaussianChecks(g) => {
            need(errs, g.t_min >= 1.0 && g.t_max >= g.t_min, "t_min", "need 1 <= t_min <= t_max");
            need(errs, g.spot_checks <= g.specs, "spot_checks", "cannot exceed specs");
            need(errs, g.mc_samples >= 1 || g.spot_checks == 0, "mc_samples", "must be positive");
            need(errs, g.repulsion_m > 0.0, "repulsion_m", "must be positive");
            need(errs, g.sequence_a > 1.0 && g.sequence_b > 0.0, "sequence_a", "need a > 1 and b > 0");
            need(errs, (1..=1_000_000).contains(&g.sequence_terms), "sequence_terms", "must lie in [1, 10^6]");
            need(errs, (2..=1_000_000).contains(&g.sequence_b_terms), "sequence_b_terms", "must lie in [2, 10^6]");
        }
        Params::WnCovariance(c) => {
            need(errs, c.variance_ds.iter().all(|&d| d >= 1), "variance_ds", "dimensions must be positive");
            need(errs, c.variance_n_max >= 1, "variance_n_max", "must be positive");
            need(errs, c.law_ds.iter().all(|&d| d >= 1), "law_ds", "dimensions must be positive");
            need(errs, c.law_points >= 2, "law_points", "must be at least 2");
            need(errs, c.law_u_min > 0.0 && c.law_u_max > c.law_u_min && c.law_u_max < 2.0, "law_u_min", "need 0 < u_min < u_max < 2");
            need(errs, c.law_n >= 1, "law_n", "must be positive");
            need(errs, c.increment_js.iter().all(|&j| j > 3 * c.increment_k), "increment_js", "levels must exceed 3k");
        }
        Params::PathStats(s) => {
            check_chain(errs, s.d, s.m, s.family, s.branching);
            need(errs, s.restriction_m_long >= s.m, "restriction_m_long", "must be at least m");
            need(errs, s.tail_ds.iter().all(|&d| d >= 2), "tail_ds", "dimensions must be at least 2");
            need(errs, s.tail_m >= 2, "tail_m", "must be at least 2");
            need(errs, s.n >= 1 || !s.checks.contains(&PathCheck::Domination), "n", "domination needs n >= 1");
        }
        Params::BrwGoodPaths(g) => {
            check_chain(errs, g.d, g.m, g.family, g.branching);
            need(errs, g.k <= g.n, "k", "must not exceed n");
            need(errs, g.attempts >= 1, "attempts", "must be positive");
        }
        Params::BrwMoments(m) => {
            check_chain(errs, m.d, m.m, m.family, m.branching);
            need(errs, m.k <= m.n, "k", "must not exceed n");
            need(errs, (2..=1_000_000).contains(&m.pairs), "pairs", "must lie in [2, 10^6]");
            need(errs, !m.alphas.is_empty() && m.alphas.iter().all(|a| a.is_finite()), "alphas", "need finite values");
        }
        Params::FractalCrossing(c) => {
            need(errs, !c.cases.is_empty(), "cases", "need at least one case");
            for (i, case) in c.cases.iter().enumerate() {
                need(errs, !case.ds.is_empty() && case.ds.iter().all(|&d| d >= 1), &format!("cases[{i}].ds"), "need positive dimensions");
                need(errs, !case.ps.is_empty() && case.ps.iter().all(|&p| (0.0..=1.0).contains(&p)), &format!("cases[{i}].ps"), "probabilities must lie in [0,1]");
                need(errs, !case.ns.is_empty(), &format!("cases[{i}].ns"), "need at least one depth");
                need(errs, case.samples >= 1, &format!("cases[{i}].samples"), "must be positive");
            }
            need(errs, c.window >= 1, "window", "must be positive");
            if let Some(s) = &c.survival {
                need(errs, s.d >= 1 && (0.0..=1.0).contains(&s.p) && s.samples >= 1, "survival", "need d >= 1, p in [0,1], samples >= 1");
            }
        }
        Params::FractalPc(pc) => {
            need(errs, pc.d >= 1, "d", "must be positive");
            need(errs, pc.samples >= 1, "samples", "must be positive");
            need(errs, pc.tol > 0.0 && pc.tol < 0.5, "tol", "must lie in (0, 0.5)");
            need(errs, pc.d > 4 || pc.n <= 6, "n", "limited to 6 for d <= 4");
        }
        Params::WnGoodConditions(g) => {
            check_chain(errs, g.d, g.m, g.family, g.branching);
            need(errs, g.k <= g.n, "k", "must not exceed n");
            need(errs, g.probe_levels.iter().all(|&j| j <= g.n && j >= 6 * g.k && j > 3 * g.k), "probe_levels", "levels must lie in [6k, n] and exceed 3k");
            need(errs, g.chains >= 1 && g.fields_per_chain >= 1, "chains", "need chains and fields_per_chain positive");
        }
        Params::G2iAudit(g) => {
            check_chain(errs, g.d, g.m, g.family, g.branching);
            need(errs, g.k >= 1 && g.k <= g.n, "k", "need 1 <= k <= n");
            need(errs, g.pairs >= 1 && g.mc_samples >= 1, "pairs", "need pairs and mc_samples positive");
        }
        Params::LfppExponent(l) => {
            need(errs, l.levels.len() >= 3 && l.levels.windows(2).all(|w| w[0] < w[1]), "levels", "need three or more ascending levels");
            need(errs, l.levels.last().is_some_and(|&n| n <= 10), "levels", "finest level limited to 10");
            need(errs, l.replicas >= 50, "replicas", "at least 50 replicas are required for bootstrap intervals");
            need(errs, l.xis.iter().all(|&x| x >= 0.0 && x.is_finite()), "xis", "need finite nonnegative values");
            need(errs, l.agreement_xis.iter().all(|x| l.xis.contains(x)), "agreement_xis", "must be a subset of xis");
        }
        Params::CorridorBound(c) => {
            need(errs, c.d >= 4, "d", "corridors need d >= 4");
            need(errs, c.m >= 2, "m", "must be at least 2");
            need(errs, c.levels.len() >= 2, "levels", "need two or more levels");
            need(errs, c.repetitions >= 2, "repetitions", "need two or more repetitions");
            need(errs, c.path_samples >= 1, "path_samples", "must be positive");
            need(errs, c.mode != metric::CorridorMode::Shared || c.path_samples <= 20, "path_samples", "shared mode allows at most 20 paths");
        }
    }
}

/// Structured output of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Value,
    pub results: Value,
    /// Monte Carlo standard errors keyed like the results they belong to.
    pub stderr: Value,
    /// Outcome of the experiment's built-in checks, when it has any.
    pub passed: Option<bool>,
    pub wall_time_s: f64,
    pub version: String,
    pub algorithm_version: String,
    pub started_utc: String,
    pub run_dir: PathBuf,
    pub artifacts: Vec<String>,
}

struct DataFile {
    name: String,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    jsonl: bool,
}

struct Outcome {
    results: Value,
    stderr: Value,
    passed: Option<bool>,
    files: Vec<DataFile>,
}

impl Outcome {
    fn new(results: Value, stderr: Value, passed: Option<bool>) -> Outcome {
        Outcome { results, stderr, passed, files: Vec::new() }
    }
}

/// Floats in data files carry 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn branching_of(b: Option<usize>) -> Branching {
    b.map_or(Branching::Canonical, Branching::Override)
}

fn chain_spec(d: usize, m: usize, n: u32, family: ChainFamily, branching: Option<usize>) -> ChainSpec {
    ChainSpec::new(d, m, n, family).with_branching(branching_of(branching))
}

/// Runs the experiment and persists `config.json`, data files and `report.json`
/// into a new directory under `config.output`.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let name = config.params.name();
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let outcome = execute(&config.params, config.seed).with_context(|| format!("experiment {name}"))?;
    let wall = clock.elapsed().as_secs_f64();
    let dir = create_run_dir(&config.output, name, &started)?;
    let config_json = serde_json::to_value(config)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config_json)?)?;
    let mut artifacts = vec!["config.json".to_string()];
    for f in &outcome.files {
        let path = dir.join(&f.name);
        if f.jsonl {
            fs::write(&path, f.rows.iter().map(|r| r.join("") + "\n").collect::<String>())?;
        } else {
            let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
            w.write_record(&f.header)?;
            for r in &f.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        artifacts.push(f.name.clone());
    }
    artifacts.push("report.json".to_string());
    let report = RunReport {
        config: config_json,
        results: outcome.results,
        stderr: outcome.stderr,
        passed: outcome.passed,
        wall_time_s: wall,
        version: env!("CARGO_PKG_VERSION").to_string(),
        algorithm_version: rng::ALGORITHM_VERSION.to_string(),
        started_utc: started.to_rfc3339(),
        run_dir: dir.clone(),
        artifacts,
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Creates a fresh directory; an existing run is never reused.
fn create_run_dir(root: &FsPath, name: &str, started: &chrono::DateTime<chrono::Utc>) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = started.format("%Y%m%dT%H%M%S%.6fZ");
    for attempt in 0.. {
        let dir = if attempt == 0 { root.join(format!("{name}-{stamp}")) } else { root.join(format!("{name}-{stamp}-{attempt}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn execute(params: &Params, seed: u64) -> Result<Outcome> {
    Ok(match params {
        Params::GeometryChecks(p) => geometry_checks(p)?,
        Params::GaussianChecks(p) => gaussian_checks(p, seed)?,
        Params::WnCovariance(p) => wn_covariance(p)?,
        Params::PathStats(p) => path_stats(p, seed)?,
        Params::BrwGoodPaths(p) => brw_good_paths(p, seed)?,
        Params::BrwMoments(p) => brw_moments(p, seed)?,
        Params::FractalCrossing(p) => fractal_crossing(p, seed)?,
        Params::FractalPc(p) => fractal_pc(p, seed)?,
        Params::WnGoodConditions(p) => wn_good_conditions(p, seed)?,
        Params::G2iAudit(p) => g2i(p, seed)?,
        Params::LfppExponent(p) => lfpp(p, seed)?,
        Params::CorridorBound(p) => corridor(p, seed)?,
    })
}

fn geometry_checks(p: &GeometryParams) -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut at_zero = Vec::new();
    let mut max_increase: f64 = 0.0;
    for &d in &p.monotone_ds {
        at_zero.push(json!({"d": d, "t": 1.0, "u": 0.0, "ratio": geometry::intersection_ratio(0.0, 1.0, d)?}));
        let mut prev = f64::INFINITY;
        for i in 0..p.grid {
            let u = 2.0 * i as f64 / (p.grid - 1) as f64;
            let r = geometry::intersection_ratio(u, 1.0, d)?;
            if prev.is_finite() {
                max_increase = max_increase.max(r - prev);
            }
            prev = r;
            rows.push(vec![d.to_string(), fmt_f64(1.0), fmt_f64(u), fmt_f64(r)]);
        }
    }
    let monotone_ok = max_increase <= 1e-9;

    let mut floor_rows = Vec::new();
    let mut stability = Vec::new();
    let mut floor_ok = true;
    let (d_first, d_last) = (*p.floor_ds.iter().min().expect("validated"), *p.floor_ds.iter().max().expect("validated"));
    for &t in &p.floor_ts {
        for &tau in &p.floor_taus {
            let at = |d: usize| geometry::intersection_ratio(t * tau / (d as f64).sqrt(), t, d);
            for &d in &p.floor_ds {
                let r = at(d)?;
                floor_ok &= r > 0.0;
                floor_rows.push(json!({"t": t, "tau": tau, "d": d, "ratio": r}));
            }
            let (a, b) = (at(d_first)?, at(d_last)?);
            floor_ok &= b >= 0.5 * a;
            stability.push(json!({"t": t, "tau": tau, "d_first": d_first, "d_last": d_last, "ratio_first": a, "ratio_last": b, "quotient": b / a}));
        }
    }
    let us: Vec<f64> = (1..=p.fit_us).map(|i| 2.0 * i as f64 / (p.fit_us + 1) as f64).collect();
    let c3 = geometry::fit_gaussian_decay_constant(&p.fit_ds, &us)?;
    let surface: Vec<Value> = p
        .surface_ds
        .iter()
        .map(|&d| geometry::surface_to_volume_ratio(d).map(|r| json!({"d": d, "ratio": r, "ratio_over_sqrt_d": r / (d as f64).sqrt()})))
        .collect::<crate::Result<_>>()?;
    let passed = monotone_ok && floor_ok && c3.is_some_and(|c| c > 0.0);
    let results = json!({
        "ratio_at_zero": at_zero,
        "monotone": {"max_increase": max_increase, "ok": monotone_ok},
        "floor": {"rows": floor_rows, "stability": stability, "ok": floor_ok},
        "decay_constant": c3,
        "surface_to_volume": surface,
    });
    let mut out = Outcome::new(results, json!({}), Some(passed));
    out.files.push(DataFile { name: "intersection_ratio.csv".into(), header: vec!["d", "t", "u", "ratio"], rows, jsonl: false });
    Ok(out)
}

/// Random specs with t in [t_min, t_max], variances in [0.05, 1] and
/// correlation in [0, 0.95).
pub fn random_bivariate_specs(seed: u64, count: usize, t_min: f64, t_max: f64) -> Vec<gaussian::BivariateSpec> {
    use rand::Rng;
    let mut r = rng::stream(seed, 0x5bec);
    (0..count)
        .map(|_| {
            let var_x: f64 = r.gen_range(0.05..=1.0);
            let var_y: f64 = r.gen_range(0.05..=1.0);
            let rho: f64 = r.gen_range(0.0..0.95);
            gaussian::BivariateSpec { var_x, var_y, cov_xy: rho * (var_x * var_y).sqrt(), t: r.gen_range(t_min..=t_max) }
        })
        .collect()
}

/// Spot-check specs with joint probabilities large enough for Monte Carlo.
fn spot_specs(seed: u64, count: usize) -> Vec<gaussian::BivariateSpec> {
    use rand::Rng;
    let mut r = rng::stream(seed, 0x5907);
    (0..count)
        .map(|_| {
            let var_x: f64 = r.gen_range(0.5..=1.0);
            let var_y: f64 = r.gen_range(0.5..=1.0);
            let rho: f64 = r.gen_range(0.0..0.9);
            gaussian::BivariateSpec { var_x, var_y, cov_xy: rho * (var_x * var_y).sqrt(), t: r.gen_range(1.0..=2.0) }
        })
        .collect()
}

fn gaussian_checks(p: &GaussianParams, seed: u64) -> Result<Outcome> {
    let mut results = serde_json::Map::new();
    let mut stderr = serde_json::Map::new();
    let mut passed = true;
    if p.checks.contains(&GaussianCheck::Tail) {
        let xs: Vec<f64> = (0..50).map(|i| 0.5 + 7.5 * i as f64 / 49.0).collect();
        let ok = xs.iter().all(|&x| gaussian::tail_bound_holds(x, gaussian::TAIL_C4));
        passed &= ok;
        results.insert("tail".into(), json!({"c4": gaussian::TAIL_C4, "grid_points": xs.len(), "ok": ok}));
    }
    if p.checks.contains(&GaussianCheck::Orthant) {
        let specs = random_bivariate_specs(seed, p.specs, p.t_min, p.t_max);
        let mut min_ratio = f64::INFINITY;
        for s in &specs {
            min_ratio = min_ratio.min(gaussian::orthant_ratio(s)?);
        }
        let c1 = gaussian::fit_correlation_constant(&specs)?;
        let mut spots = Vec::new();
        let mut spot_se = Vec::new();
        let mut spots_ok = true;
        for (i, s) in spot_specs(seed, p.spot_checks).iter().enumerate() {
            let quad = gaussian::orthant_probability(s)?;
            let (mc, se) = gaussian::orthant_probability_mc(s, p.mc_samples, rng::derive_seed(seed, 0x5907, i as u64))?;
            let z = if se > 0.0 { (mc - quad) / se } else { f64::INFINITY };
            spots_ok &= z.abs() <= p.spot_z;
            spots.push(json!({"spec": s, "quadrature": quad, "monte_carlo": mc, "z": z}));
            spot_se.push(se);
        }
        let ok = min_ratio >= 1.0 - 1e-12 && c1.is_some() && spots_ok;
        passed &= ok;
        results.insert(
            "orthant".into(),
            json!({"specs": specs.len(), "min_ratio": min_ratio, "fitted_c1": c1, "spot_checks": spots, "spot_checks_ok": spots_ok, "ok": ok}),
        );
        stderr.insert("orthant_spot_checks".into(), json!(spot_se));
    }
    if p.checks.contains(&GaussianCheck::Repulsion) {
        let mut rows = Vec::new();
        let mut max_ratio: f64 = 0.0;
        for &t in &p.repulsion_ts {
            let r = gaussian::repulsion_ratio(1.0, p.repulsion_m, 1.0, t)?;
            max_ratio = max_ratio.max(r);
            rows.push(json!({"t": t, "ratio": r}));
        }
        let ok = max_ratio <= p.repulsion_max;
        passed &= ok;
        results.insert("repulsion".into(), json!({"m": p.repulsion_m, "rows": rows, "max_ratio": max_ratio, "ok": ok}));
    }
    if p.checks.contains(&GaussianCheck::Sequence) {
        let a = gaussian::sequence_iterate(gaussian::SequenceKind::A, p.sequence_a, p.sequence_b, p.sequence_terms)?;
        let sup = a.iter().copied().fold(f64::MIN, f64::max);
        let a_ok = sup <= 2.0 * p.sequence_a;
        let b = gaussian::sequence_iterate(gaussian::SequenceKind::B, p.sequence_a, p.sequence_b, p.sequence_b_terms)?;
        // Terms are 1-indexed; the bound applies from the second term on.
        let worst = b.iter().enumerate().skip(1).map(|(i, &x)| x - (1.0 + 2f64.powi(-(i as i32 + 1)))).fold(f64::MIN, f64::max);
        let b_ok = worst <= 0.0;
        passed &= a_ok && b_ok;
        results.insert(
            "sequence".into(),
            json!({"a": p.sequence_a, "b": p.sequence_b, "kind_a_terms": a.len(), "kind_a_sup": sup, "kind_a_ok": a_ok,
                   "kind_b_terms": b.len(), "kind_b_worst_excess": worst, "kind_b_ok": b_ok}),
        );
    }
    Ok(Outcome::new(Value::Object(results), Value::Object(stderr), Some(passed)))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn wn_covariance(p: &CovarianceParams) -> Result<Outcome> {
    let mut results = serde_json::Map::new();
    let mut passed = true;
    let mut rows = Vec::new();
    if p.checks.contains(&CovarianceCheck::Variance) {
        let mut max_err: f64 = 0.0;
        for &d in &p.variance_ds {
            for n in 1..=p.variance_n_max {
                let v = whitenoise::cov_hn(0.0, &whitenoise::CovarianceSpec::full(d, n)?)?;
                max_err = max_err.max((v - n as f64 * std::f64::consts::LN_2).abs());
            }
        }
        let ok = max_err <= p.variance_tol;
        passed &= ok;
        results.insert("variance".into(), json!({"max_abs_error": max_err, "tol": p.variance_tol, "ok": ok}));
    }
    if p.checks.contains(&CovarianceCheck::LogLaw) {
        let us = log_grid(p.law_u_min, p.law_u_max, p.law_points);
        let mut per_d = Vec::new();
        let mut c: f64 = 0.0;
        for &d in &p.law_ds {
            let spec = whitenoise::CovarianceSpec::full(d, p.law_n)?;
            let mut cd: f64 = 0.0;
            for &u in &us {
                let v = whitenoise::cov_hn(u, &spec)?;
                let gap = v - (1.0 / u).ln();
                cd = cd.max(gap.abs());
                rows.push(vec![d.to_string(), p.law_n.to_string(), fmt_f64(u), fmt_f64(v), fmt_f64(gap)]);
            }
            c = c.max(cd);
            per_d.push(json!({"d": d, "constant": cd}));
        }
        let ok = c <= p.law_c_max;
        passed &= ok;
        results.insert("log_law".into(), json!({"n": p.law_n, "points": us.len(), "per_dimension": per_d, "constant": c, "max_allowed": p.law_c_max, "ok": ok}));
    }
    if p.checks.contains(&CovarianceCheck::Increment) {
        let us = log_grid(1e-3, 1e-1, 12);
        let mut consts = Vec::new();
        for &d in &p.increment_ds {
            consts.push(json!({"d": d, "constant": whitenoise::increment_distance_constant(d, p.increment_k, &p.increment_js, &us)?}));
        }
        results.insert("increment".into(), json!({"k": p.increment_k, "levels": p.increment_js, "constants": consts}));
    }
    let mut out = Outcome::new(Value::Object(results), json!({}), Some(passed));
    if !rows.is_empty() {
        out.files.push(DataFile { name: "log_law.csv".into(), header: vec!["d", "n", "u", "cov", "cov_minus_log"], rows, jsonl: false });
    }
    Ok(out)
}

fn path_stats(p: &PathStatsParams, seed: u64) -> Result<Outcome> {
    let spec = chain_spec(p.d, p.m, p.n, p.family, p.branching);
    let mut results = serde_json::Map::new();
    let mut stderr = serde_json::Map::new();
    let mut passed = true;
    results.insert("canonical".into(), json!(spec.branching.is_canonical()));
    if p.checks.contains(&PathCheck::Audit) {
        let mut total = paths::ChainAudit::default();
        for i in 0..p.chains {
            let c = paths::sample_refined_chain(&spec, rng::derive_seed(seed, 0xA0D1, i as u64))?;
            total.merge(&paths::audit_chain(&c)?);
        }
        let ok = total.total() == 0;
        passed &= ok;
        results.insert("audit".into(), json!({"chains": p.chains, "violations": total, "ok": ok}));
    }
    if p.checks.contains(&PathCheck::Restriction) {
        let mut mismatches = 0;
        for i in 0..p.restriction_chains {
            mismatches += paths::restriction_mismatches(p.d, p.restriction_m_long, p.m, p.n, spec.branching, rng::derive_seed(seed, 0x2E57, i as u64))?;
        }
        let ok = mismatches == 0;
        passed &= ok;
        results.insert("restriction".into(), json!({"m_long": p.restriction_m_long, "m_short": p.m, "chains": p.restriction_chains, "mismatched_levels": mismatches, "ok": ok}));
    }
    if p.checks.contains(&PathCheck::Tail) {
        let mut rows = Vec::new();
        let mut ok = true;
        for &d in &p.tail_ds {
            let vals: Vec<usize> = (0..p.tail_pairs as u64)
                .map(|i| {
                    let a = paths::base_path(d, p.tail_m, &paths::base_sequence(rng::derive_seed(seed, d as u64, 2 * i), d, p.tail_m, false))?;
                    let b = paths::base_path(d, p.tail_m, &paths::base_sequence(rng::derive_seed(seed, d as u64, 2 * i + 1), d, p.tail_m, false))?;
                    paths::intersection_count(&a, &b)
                })
                .collect::<crate::Result<_>>()?;
            let rate = paths::fit_geometric_tail(&vals, p.tail_min_count);
            ok &= rate.is_some_and(|r| r < 1.0);
            let mean = vals.iter().sum::<usize>() as f64 / vals.len() as f64;
            rows.push(json!({"d": d, "pairs": vals.len(), "mean_intersections": mean, "geometric_rate": rate}));
        }
        passed &= ok;
        results.insert("tail".into(), json!({"m": p.tail_m, "rows": rows, "ok": ok}));
    }
    if p.checks.contains(&PathCheck::Domination) {
        let r = paths::domination_check(&spec, p.domination_pairs, seed, p.domination_z)?;
        let ok = r.violations == 0;
        passed &= ok;
        stderr.insert("domination".into(), json!(r.rows.iter().map(|row| row.stderr).collect::<Vec<_>>()));
        results.insert("domination".into(), json!({"report": r, "ok": ok}));
    }
    Ok(Outcome::new(Value::Object(results), Value::Object(stderr), Some(passed)))
}

fn brw_good_paths(p: &GoodPathsParams, seed: u64) -> Result<Outcome> {
    let spec = chain_spec(p.d, p.m, p.n, p.family, p.branching);
    let r = brw::good_path_search(&spec, p.k, p.alpha, p.attempts, seed)?;
    let mut out = Outcome::new(
        json!({"found": r.found, "tried": r.tried, "exemplar_seed": r.exemplar_seed, "canonical": spec.branching.is_canonical(),
               "good_probability": brw::good_probability(p.alpha)}),
        json!({}),
        None,
    );
    if let Some(chain) = &r.exemplar {
        let rows = chain.iter().map(|path| Ok(vec![serde_json::to_string(&path.to_record(p.m))?])).collect::<Result<_>>()?;
        out.files.push(DataFile { name: "exemplar.jsonl".into(), header: vec![], rows, jsonl: true });
    }
    Ok(out)
}

fn brw_moments(p: &MomentsParams, seed: u64) -> Result<Outcome> {
    let spec = chain_spec(p.d, p.m, p.n, p.family, p.branching);
    let mut reports = Vec::new();
    let mut se = Vec::new();
    let mut passed = true;
    for &alpha in &p.alphas {
        let r = brw::weighted_count_moments(&spec, p.k, alpha, p.pairs, seed, p.c1)?;
        let combined = r.stderr.hypot(r.direct_stderr);
        let z = if combined > 0.0 { (r.ratio_estimate - r.direct_estimate) / combined } else { 0.0 };
        let ok = z.abs() <= p.agreement_z && r.bound_violations == 0;
        passed &= ok;
        se.push(json!({"alpha": alpha, "ratio": r.stderr, "direct": r.direct_stderr}));
        reports.push(json!({"alpha": alpha, "report": r, "agreement_z": z, "ok": ok}));
    }
    Ok(Outcome::new(json!({"canonical": spec.branching.is_canonical(), "moments": reports}), json!(se), Some(passed)))
}

fn fractal_crossing(p: &CrossingParams, seed: u64) -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut ests = Vec::new();
    let mut passed = true;
    let mut oracle = Vec::new();
    let mut trend = Vec::new();
    for case in &p.cases {
        let mut ds = case.ds.clone();
        ds.sort_unstable();
        let mut grid = Vec::new();
        for &d in &ds {
            for &prob in &case.ps {
                for &n in &case.ns {
                    let e = fractal::crossing_rate(d, prob, n, p.window, case.samples, seed, p.mode)?;
                    rows.push(vec![d.to_string(), fmt_f64(prob), n.to_string(), case.samples.to_string(), fmt_f64(e.crossing_rate), fmt_f64(e.ci_lo), fmt_f64(e.ci_hi)]);
                    if d == 2 && n == 1 && p.window == 1 && p.mode == fractal::ConnectivityMode::Closed {
                        let exact = prob * (1.0 - (1.0 - prob).powi(2)).powi(2);
                        let z = if e.stderr > 0.0 { (e.crossing_rate - exact) / e.stderr } else { 0.0 };
                        let ok = z.abs() <= p.oracle_z;
                        passed &= ok;
                        oracle.push(json!({"p": prob, "samples": case.samples, "exact": exact, "estimate": e.crossing_rate, "z": z, "ok": ok}));
                    }
                    grid.push(e);
                }
            }
        }
        if ds.len() > 1 {
            for &prob in &case.ps {
                for &n in &case.ns {
                    let line: Vec<&fractal::CrossingEstimate> = grid.iter().filter(|e| e.p == prob && e.n == n).collect();
                    let increasing = line.windows(2).all(|w| w[1].ci_lo > w[0].ci_hi);
                    passed &= increasing;
                    trend.push(json!({"p": prob, "n": n, "ds": ds, "rates": line.iter().map(|e| e.crossing_rate).collect::<Vec<_>>(),
                                      "ci": line.iter().map(|e| (e.ci_lo, e.ci_hi)).collect::<Vec<_>>(), "increasing_beyond_ci": increasing}));
                }
            }
        }
        ests.extend(grid);
    }
    let mut results = json!({"estimates": ests, "oracle": oracle, "trend_in_d": trend});
    if let Some(s) = &p.survival {
        let hits = (0..s.samples).filter(|&i| fractal::survives_to_depth(s.d, s.p, s.depth, fractal::sample_seed(seed ^ 0x5u64, i))).count();
        let mc = hits as f64 / s.samples as f64;
        let exact = fractal::survival_probability(s.d, s.p);
        let ok = (mc - exact).abs() <= s.tol;
        passed &= ok;
        results["survival"] = json!({"d": s.d, "p": s.p, "depth": s.depth, "samples": s.samples, "truncated_rate": mc,
                                     "stderr": (mc * (1.0 - mc) / s.samples as f64).sqrt(), "fixed_point": exact, "ok": ok});
    }
    let se: Vec<f64> = ests.iter().map(|e| e.stderr).collect();
    let checks = !oracle.is_empty() || !trend.is_empty() || p.survival.is_some();
    let mut out = Outcome::new(results, json!({"crossing_rate": se}), checks.then_some(passed));
    out.files.push(DataFile { name: "crossing.csv".into(), header: vec!["d", "p", "n", "samples", "crossing_rate", "ci_lo", "ci_hi"], rows, jsonl: false });
    Ok(out)
}

fn fractal_pc(p: &PcParams, seed: u64) -> Result<Outcome> {
    let e = fractal::estimate_pc(p.d, p.n, p.samples, p.tol, seed)?;
    let rows = e.curve.iter().map(|&(q, r)| vec![fmt_f64(q), fmt_f64(r)]).collect();
    let mut out = Outcome::new(json!(e), json!({}), None);
    out.files.push(DataFile { name: "pc_curve.csv".into(), header: vec!["p", "smoothed_crossing_rate"], rows, jsonl: false });
    Ok(out)
}

fn wn_good_conditions(p: &GoodConditionsParams, seed: u64) -> Result<Outcome> {
    let spec = chain_spec(p.d, p.m, p.n, p.family, p.branching);
    let conds = whitenoise::GoodConditions { alpha: p.alpha, beta: p.beta, k: p.k, n: p.n };
    let (mut good, mut a_hits, mut a_total, mut b_hits, mut b_total, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for c in 0..p.chains {
        let chain = paths::sample_refined_chain(&spec, rng::derive_seed(seed, 0x6C, c as u64))?;
        let mut probes = Vec::new();
        for &j in &p.probe_levels {
            let path = &chain[j as usize];
            probes.push(whitenoise::Probe { level: j, point: path.position(0) });
            probes.push(whitenoise::Probe { level: j, point: path.position(path.len() - 1) });
        }
        let model = whitenoise::GoodConditionsModel::build(&chain, conds, &probes, p.mc_samples, rng::derive_seed(seed, 0x6D, c as u64))?;
        for f in 0..p.fields_per_chain {
            let o = model.evaluate(rng::derive_seed(seed, 0x6E + c as u64, f as u64));
            total += 1;
            good += o.all_good() as usize;
            a_total += o.cond_a.len();
            a_hits += o.cond_a.iter().filter(|x| x.1).count();
            b_total += o.cond_b.len();
            b_hits += o.cond_b.iter().filter(|&&x| x).count();
        }
    }
    let rate = good as f64 / total as f64;
    let frac = |h: usize, t: usize| if t == 0 { None } else { Some(h as f64 / t as f64) };
    Ok(Outcome::new(
        json!({"samples": total, "all_good_rate": rate, "condition_a_rate": frac(a_hits, a_total), "condition_b_rate": frac(b_hits, b_total),
               "canonical": spec.branching.is_canonical()}),
        json!({"all_good_rate": (rate * (1.0 - rate) / total as f64).sqrt()}),
        None,
    ))
}

fn g2i(p: &G2iParams, seed: u64) -> Result<Outcome> {
    let spec = chain_spec(p.d, p.m, p.n, p.family, p.branching);
    let mut audits = Vec::new();
    for i in 0..p.pairs as u64 {
        let a = paths::sample_refined_chain(&spec, rng::derive_seed(seed, 0x621, 2 * i))?;
        let b = paths::sample_refined_chain(&spec, rng::derive_seed(seed, 0x621, 2 * i + 1))?;
        audits.push(whitenoise::g2i_audit(&a, &b, p.k, p.n, p.mc_samples, rng::derive_seed(seed, 0x622, i))?);
    }
    let ratios: Vec<f64> = audits.iter().filter_map(|a| a.ratio).collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let finite = ratios.iter().all(|r| r.is_finite());
    let lhs_se: Vec<f64> = audits.iter().map(|a| a.lhs_stderr).collect();
    Ok(Outcome::new(
        json!({"pairs": p.pairs, "pairs_with_overlap": ratios.len(), "max_ratio": max_ratio, "all_finite": finite, "audits": audits}),
        json!({"lhs": lhs_se}),
        Some(finite),
    ))
}

/// Relative deviation of D(h + c)/D(h) from e^{ξc} on one field.
pub fn weyl_scaling_error(level: u32, xi: f64, shift: f64, seed: u64) -> Result<f64> {
    let res = 2f64.powi(-(level as i32));
    let f = whitenoise::sample_field_grid_2d(level, 1.0, res, seed)?;
    let size = (f.values.len() as f64).sqrt().round() as usize;
    let shifted: Vec<f64> = f.values.iter().map(|v| v + shift).collect();
    let a = metric::WeightedGrid::new(&f.values, size, res, xi)?;
    let b = metric::WeightedGrid::new(&shifted, size, res, xi)?;
    let (s, t) = (a.node(size / 4, size / 2), a.node(3 * size / 4, size / 2));
    let (da, db) = (metric::lfpp_distance(&a, &[s], &[t])?, metric::lfpp_distance(&b, &[s], &[t])?);
    Ok((db / da / (xi * shift).exp() - 1.0).abs())
}

fn lfpp(p: &LfppParams, seed: u64) -> Result<Outcome> {
    let study = metric::lfpp_study(&p.xis, &p.levels, p.replicas, seed)?;
    let mut passed = true;
    let zero_slopes: Vec<Value> = study
        .point_to_point
        .iter()
        .zip(&study.set_to_set)
        .filter(|(a, _)| a.xi == 0.0)
        .map(|(a, b)| {
            let ok = a.slope == 0.0 && b.slope == 0.0;
            passed &= ok;
            json!({"pp_slope": a.slope, "ss_slope": b.slope, "ok": ok})
        })
        .collect();
    let mut agreement = Vec::new();
    for &x in &p.agreement_xis {
        let i = p.xis.iter().position(|&y| y == x).expect("validated");
        let (lo, hi) = study.slope_difference_ci[i];
        let ok = lo <= 0.0 && 0.0 <= hi;
        passed &= ok;
        agreement.push(json!({"xi": x, "pp_slope": study.point_to_point[i].slope, "ss_slope": study.set_to_set[i].slope, "difference_ci": [lo, hi], "ok": ok}));
    }
    let q_ok = study.q_difference_ci.iter().all(|&(lo, _)| lo > 0.0);
    passed &= q_ok;
    let level = *p.levels.last().expect("validated");
    let mut weyl = Vec::new();
    for &xi in p.xis.iter().filter(|&&x| x > 0.0) {
        let err = weyl_scaling_error(level, xi, p.weyl_shift, seed)?;
        let ok = err <= p.weyl_tol;
        passed &= ok;
        weyl.push(json!({"xi": xi, "shift": p.weyl_shift, "relative_error": err, "ok": ok}));
    }
    let rows = study
        .records
        .iter()
        .map(|r| vec![fmt_f64(r.xi), r.n.to_string(), r.replica.to_string(), fmt_f64(r.distance_pp), fmt_f64(r.distance_ss)])
        .collect();
    let results = json!({
        "resolution_level": study.resolution_level,
        "replicas": study.replicas,
        "point_to_point": study.point_to_point,
        "set_to_set": study.set_to_set,
        "slope_difference_ci": study.slope_difference_ci,
        "q_difference_ci": study.q_difference_ci,
        "discretization_error": study.discretization_error,
        "zero_xi": zero_slopes,
        "agreement": agreement,
        "q_nonincreasing": q_ok,
        "weyl": weyl,
    });
    let cis = json!({"pp_slope_ci": study.point_to_point.iter().map(|f| f.ci).collect::<Vec<_>>()});
    let mut out = Outcome::new(results, cis, Some(passed));
    out.files.push(DataFile { name: "distances.csv".into(), header: vec!["xi", "n", "replica", "distance_pp", "distance_ss"], rows, jsonl: false });
    Ok(out)
}

fn corridor(p: &CorridorParams, seed: u64) -> Result<Outcome> {
    let mut passed = true;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (i, &xi) in p.xis.iter().enumerate() {
        let r = metric::corridor_slope(p.d, p.m, xi, &p.levels, p.path_samples, p.repetitions, rng::derive_seed(seed, 0xC0, i as u64), p.mode)?;
        let (check, ok) = if xi == 0.0 {
            let dev = r.mean_slope - p.flat_slope_target;
            (json!({"kind": "flat_slope", "target": p.flat_slope_target, "deviation": dev, "tol": p.flat_slope_tol}), dev.abs() <= p.flat_slope_tol)
        } else {
            (json!({"kind": "negative_slope", "ci_upper": r.ci.1}), r.ci.1 < 0.0)
        };
        passed &= ok;
        for (rep, costs) in r.min_costs.iter().enumerate() {
            for (&n, &c) in p.levels.iter().zip(costs) {
                rows.push(vec![fmt_f64(xi), n.to_string(), rep.to_string(), fmt_f64(c)]);
            }
        }
        reports.push(json!({"xi": xi, "report": r, "check": check, "ok": ok}));
    }
    let mut out = Outcome::new(json!({"d": p.d, "m": p.m, "mode": p.mode, "slopes": reports}), json!({}), Some(passed));
    out.files.push(DataFile { name: "corridor.csv".into(), header: vec!["xi", "n", "repetition", "min_cost"], rows, jsonl: false });
    Ok(out)
}
