//! Seeded parameter sweeps, CSV output and trend-shape checks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{abcg_init, run_amnd_observed, GameParams, GameState, Stage};
use crate::content::{generate_demand, DemandConfig};
use crate::delay::{evaluate, DelayReport, Instance};
use crate::error::{Error, Result};
use crate::scenario::{generate_scenario, Counts, Scenario, SystemParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    A,
    T1Frac,
    Delta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::A => "a",
            Axis::T1Frac => "t1_frac",
            Axis::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Algorithm {
    Abcg,
    Amnd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Abcg => "ABCG",
            Algorithm::Amnd => "AMND",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub system: SystemParams,
    pub counts: Counts,
    pub demand: DemandConfig,
    pub game: GameParams,
    pub axis: Axis,
    pub grid: Vec<f64>,
    /// Zipf exponents overlaid at every grid point; ignored on the delta axis.
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub output: Option<PathBuf>,
    /// Record wall-clock time per run; off keeps the CSV reproducible.
    pub timing: bool,
}

pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|j| j as f64 / 10.0).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            system: SystemParams::default(),
            counts: Counts::default(),
            demand: DemandConfig::default(),
            game: GameParams::default(),
            axis: Axis::A,
            grid: default_grid(),
            deltas: vec![0.6, 1.0, 1.4],
            seeds: vec![1],
            algorithms: vec![Algorithm::Abcg, Algorithm::Amnd],
            output: None,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.grid.is_empty() {
            return bad("empty sweep grid".into());
        }
        if self.algorithms.is_empty() {
            return bad("no algorithm selected".into());
        }
        if self.axis != Axis::Delta && self.deltas.is_empty() {
            return bad("no delta values".into());
        }
        for &v in &self.grid {
            let ok = match self.axis {
                Axis::A | Axis::T1Frac => v > 0.0 && v < 1.0,
                Axis::Delta => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return bad(format!("grid value {v} outside the valid range of {}", self.axis.name()));
            }
        }
        if self.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("delta values must be finite and nonnegative".into());
        }
        self.system.validate()
    }

    /// `(axis value, delta)` pairs in grid order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self.axis {
            Axis::Delta => self.grid.iter().map(|&d| (d, d)).collect(),
            _ => self
                .grid
                .iter()
                .flat_map(|&x| self.deltas.iter().map(move |&d| (x, d)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub axis_value: f64,
    pub delta: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(rename = "F")]
    pub f: f64,
    pub hrd_total_s: f64,
    pub hrd_backhaul_s: f64,
    pub csd_total_s: f64,
    pub csd_local_s: f64,
    pub csd_offload_s: f64,
    pub n_local_csd: usize,
    pub n_edge_csd: usize,
    pub n_backhauled_files: usize,
    pub accepted_moves: usize,
    pub runtime_ms: f64,
}

pub const CSV_HEADER: [&str; 16] = [
    "axis",
    "axis_value",
    "delta",
    "seed",
    "algorithm",
    "F",
    "hrd_total_s",
    "hrd_backhaul_s",
    "csd_total_s",
    "csd_local_s",
    "csd_offload_s",
    "n_local_csd",
    "n_edge_csd",
    "n_backhauled_files",
    "accepted_moves",
    "runtime_ms",
];

fn row(
    axis: Axis,
    (x, delta): (f64, f64),
    seed: u64,
    algorithm: Algorithm,
    r: &DelayReport,
    accepted_moves: usize,
    runtime_ms: f64,
) -> SweepRow {
    SweepRow {
        axis,
        axis_value: x,
        delta,
        seed,
        algorithm,
        f: r.f,
        hrd_total_s: r.hrd_total_s,
        hrd_backhaul_s: r.hrd_backhaul_s,
        csd_total_s: r.csd_total_s,
        csd_local_s: r.csd_local_s,
        csd_offload_s: r.csd_offload_s,
        n_local_csd: r.n_local_csd,
        n_edge_csd: r.n_edge_csd,
        n_backhauled_files: r.n_backhauled_files,
        accepted_moves,
        runtime_ms,
    }
}

/// Scenario and demand of one sweep point. Deployment and channel draws
/// depend on the seed only; request and cache draws reuse the seed's demand
/// stream at every delta.
pub fn build_instance(cfg: &ExperimentConfig, deployment: &Scenario, point: (f64, f64), seed: u64) -> Result<Instance> {
    let (x, delta) = point;
    let p = &cfg.system;
    let scenario = match cfg.axis {
        Axis::A => deployment.with_partitioning(x, p.t1_frac)?,
        Axis::T1Frac => deployment.with_partitioning(p.a, x)?,
        Axis::Delta => deployment.clone(),
    };
    let demand = generate_demand(&scenario, &cfg.demand, delta, seed)?;
    Instance::new(scenario, demand)
}

/// Called with every intermediate state of every run in a sweep.
pub type Observer<'a> = dyn Fn(&Instance, Stage, &GameState) + Sync + 'a;

/// Run every algorithm at one point and seed.
pub fn run_point(cfg: &ExperimentConfig, inst: &Instance, point: (f64, f64), seed: u64) -> Result<Vec<SweepRow>> {
    run_point_observed(cfg, inst, point, seed, &|_, _, _| {})
}

pub fn run_point_observed(
    cfg: &ExperimentConfig,
    inst: &Instance,
    point: (f64, f64),
    seed: u64,
    observe: &Observer<'_>,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &alg in &cfg.algorithms {
        let start = Instant::now();
        let st = match alg {
            Algorithm::Abcg => {
                let st = abcg_init(inst, &cfg.game)?;
                observe(inst, Stage::Initial, &st);
                st
            }
            Algorithm::Amnd => run_amnd_observed(inst, &cfg.game, |stage, st| observe(inst, stage, st))?,
        };
        let elapsed = if cfg.timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let report = evaluate(inst, &st.partition, &st.allocation)?;
        out.push(row(cfg.axis, point, seed, alg, &report, st.accepted_moves, elapsed));
    }
    Ok(out)
}

fn canonical_order(a: &SweepRow, b: &SweepRow) -> std::cmp::Ordering {
    (a.axis, a.axis_value, a.delta, a.seed, a.algorithm)
        .partial_cmp(&(b.axis, b.axis_value, b.delta, b.seed, b.algorithm))
        .expect("sweep keys are finite")
}

/// One row per grid point, delta, seed and algorithm, canonically sorted.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    run_sweep_observed(cfg, &|_, _, _| {})
}

pub fn run_sweep_observed(cfg: &ExperimentConfig, observe: &Observer<'_>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let points = cfg.points();
    let jobs: Vec<(u64, (f64, f64))> = cfg
        .seeds
        .iter()
        .flat_map(|&s| points.iter().map(move |&p| (s, p)))
        .collect();
    let deployments: BTreeMap<u64, Scenario> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let params = SystemParams { seed, ..cfg.system.clone() };
            generate_scenario(&params, cfg.counts).map(|s| (seed, s))
        })
        .collect::<Result<_>>()?;
    let chunks: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(seed, point)| {
            let inst = build_instance(cfg, &deployments[&seed], point, seed)?;
            run_point_observed(cfg, &inst, point, seed, observe)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<SweepRow> = chunks.into_iter().flatten().collect();
    rows.sort_by(canonical_order);
    Ok(rows)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Precondition("no rows to write".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.axis.name().to_string(),
            fmt_f(r.axis_value),
            fmt_f(r.delta),
            r.seed.to_string(),
            r.algorithm.name().to_string(),
            fmt_f(r.f),
            fmt_f(r.hrd_total_s),
            fmt_f(r.hrd_backhaul_s),
            fmt_f(r.csd_total_s),
            fmt_f(r.csd_local_s),
            fmt_f(r.csd_offload_s),
            r.n_local_csd.to_string(),
            r.n_edge_csd.to_string(),
            r.n_backhauled_files.to_string(),
            r.accepted_moves.to_string(),
            fmt_f(r.runtime_ms),
        ])?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn emit_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidParams(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn load_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F,
    HrdTotal,
    HrdBackhaul,
    CsdTotal,
    CsdLocal,
    CsdOffload,
}

impl Metric {
    pub fn of(self, r: &SweepRow) -> f64 {
        match self {
            Metric::F => r.f,
            Metric::HrdTotal => r.hrd_total_s,
            Metric::HrdBackhaul => r.hrd_backhaul_s,
            Metric::CsdTotal => r.csd_total_s,
            Metric::CsdLocal => r.csd_local_s,
            Metric::CsdOffload => r.csd_offload_s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::F => "F",
            Metric::HrdTotal => "hrd_total_s",
            Metric::HrdBackhaul => "hrd_backhaul_s",
            Metric::CsdTotal => "csd_total_s",
            Metric::CsdLocal => "csd_local_s",
            Metric::CsdOffload => "csd_offload_s",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Some interior point lies strictly below both endpoints.
    UShape,
    /// Spearman correlation with the axis at least 0.8.
    Increasing,
    /// Spearman correlation with the axis at most -0.8.
    Decreasing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub metric: Metric,
    pub shape: Shape,
    /// `(axis value, mean metric)` in ascending axis order.
    pub points: Vec<(f64, f64)>,
    /// Spearman rho for monotone shapes; interior minimum over the smaller
    /// endpoint for the U shape.
    pub statistic: f64,
    pub pass: bool,
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean of `metric` per axis value over the rows of `algorithm`.
pub fn averaged(rows: &[SweepRow], algorithm: Algorithm, metric: Metric) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.algorithm == algorithm) {
        // Sort key that orders nonnegative floats like the floats themselves.
        let e = acc.entry(r.axis_value.to_bits()).or_insert((r.axis_value, 0.0, 0));
        e.1 += metric.of(r);
        e.2 += 1;
    }
    let mut pts: Vec<(f64, f64)> = acc.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

pub fn trend_check(rows: &[SweepRow], algorithm: Algorithm, metric: Metric, shape: Shape) -> Result<TrendReport> {
    let points = averaged(rows, algorithm, metric);
    if points.len() < 5 {
        return Err(Error::Precondition(format!(
            "trend check needs at least 5 grid points, got {}",
            points.len()
        )));
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (statistic, pass) = match shape {
        Shape::UShape => {
            let interior = ys[1..ys.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min);
            let ends = ys[0].min(ys[ys.len() - 1]);
            (interior / ends, interior < ys[0] && interior < ys[ys.len() - 1])
        }
        Shape::Increasing | Shape::Decreasing => {
            let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
            let rho = spearman(&xs, &ys);
            let pass = match shape {
                Shape::Increasing => rho >= 0.8,
                _ => rho <= -0.8,
            };
            (rho, pass)
        }
    };
    Ok(TrendReport {
        metric,
        shape,
        points,
        statistic,
        pass,
    })
}
