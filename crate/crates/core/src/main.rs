use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mecsim::allocation::AllocationRule;
use mecsim::association::{abcg_init, audit_run, run_amnd, write_move_log, GameState, OffloadRule};
use mecsim::content::{generate_demand, CachePolicy};
use mecsim::delay::{evaluate, DelayReport, Instance};
use mecsim::experiment::{
    emit_csv, load_csv, run_sweep, trend_check, write_csv, Algorithm, Axis, ExperimentConfig, Metric, Shape,
    SweepRow,
};
use mecsim::io::{load_scenario, save_scenario, write_scenario};
use mecsim::scenario::{generate_scenario, SystemParams};
use mecsim::Error;

#[derive(Parser)]
#[command(name = "mecsim", version, about = "User association and resource allocation simulator for cache- and compute-enabled small cells")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a scenario file.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Zipf exponent for the request draw; defaults to the first configured delta.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run one algorithm and print its delay report.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value = "amnd")]
        algorithm: AlgArg,
        /// Write the per-move log as CSV.
        #[arg(long)]
        move_log: Option<PathBuf>,
    },
    /// Run a parameter sweep and write CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Run AMND, then check Nash stability, constraints and per-SBS oracle optima.
    Audit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Check trend shapes on a sweep CSV (or a fresh sweep).
    Trend {
        #[command(flatten)]
        common: Common,
        /// Read rows from this CSV instead of running a sweep.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long, value_enum)]
        shape: Option<ShapeArg>,
        #[arg(long, value_enum, default_value = "amnd")]
        algorithm: AlgArg,
    },
}

#[derive(Args)]
struct Input {
    /// Use this scenario file instead of generating one.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
}

/// Overrides applied on top of the config file.
#[derive(Args, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    t1_frac: Option<f64>,
    #[arg(long)]
    bandwidth_hz: Option<f64>,
    #[arg(long)]
    n_mbs: Option<usize>,
    #[arg(long)]
    isd_m: Option<f64>,
    #[arg(long)]
    sbs_per_cell: Option<usize>,
    #[arg(long)]
    n_hrd: Option<usize>,
    #[arg(long)]
    n_csd: Option<usize>,
    #[arg(long)]
    n_files: Option<usize>,
    #[arg(long)]
    file_size_bytes: Option<f64>,
    #[arg(long)]
    requests_per_hrd: Option<usize>,
    #[arg(long, value_enum)]
    cache_policy: Option<CacheArg>,
    #[arg(long)]
    storage_bytes: Option<f64>,
    #[arg(long, value_enum)]
    axis: Option<AxisArg>,
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    algorithms: Option<Vec<AlgArg>>,
    #[arg(long)]
    outer_iterations: Option<usize>,
    #[arg(long)]
    move_iterations: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    #[arg(long, value_enum)]
    offload_rule: Option<OffloadArg>,
    /// Skip the exhaustive sweep that ends every game.
    #[arg(long)]
    no_polish: bool,
    /// Record wall-clock runtime per run in the CSV.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgArg {
    Abcg,
    Amnd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    A,
    #[value(alias = "t1_frac")]
    T1Frac,
    Delta,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheArg {
    PopularFirst,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    ClosedForm,
    EqualShare,
}

#[derive(Clone, Copy, ValueEnum)]
enum OffloadArg {
    FasterAndFits,
    LocalWhenSlowerAndFits,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    F,
    HrdTotal,
    HrdBackhaul,
    CsdTotal,
    CsdLocal,
    CsdOffload,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    UShape,
    Increasing,
    Decreasing,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Self {
        match a {
            AlgArg::Abcg => Algorithm::Abcg,
            AlgArg::Amnd => Algorithm::Amnd,
        }
    }
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::F => Metric::F,
            MetricArg::HrdTotal => Metric::HrdTotal,
            MetricArg::HrdBackhaul => Metric::HrdBackhaul,
            MetricArg::CsdTotal => Metric::CsdTotal,
            MetricArg::CsdLocal => Metric::CsdLocal,
            MetricArg::CsdOffload => Metric::CsdOffload,
        }
    }
}

impl From<ShapeArg> for Shape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::UShape => Shape::UShape,
            ShapeArg::Increasing => Shape::Increasing,
            ShapeArg::Decreasing => Shape::Decreasing,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        if let Some(p) = &self.output {
            c.output = Some(p.clone());
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        set!(seeds => seeds);
        set!(a => system.a);
        set!(t1_frac => system.t1_frac);
        set!(bandwidth_hz => system.bandwidth_hz);
        set!(n_mbs => system.n_mbs);
        set!(isd_m => system.isd_m);
        set!(sbs_per_cell => counts.sbs_per_cell);
        set!(n_hrd => counts.n_hrd);
        set!(n_csd => counts.n_csd);
        set!(n_files => demand.n_files);
        set!(file_size_bytes => demand.file_size_bytes);
        set!(requests_per_hrd => demand.requests_per_hrd);
        set!(storage_bytes => demand.storage_bytes);
        set!(grid => grid);
        set!(deltas => deltas);
        set!(outer_iterations => game.outer_iterations);
        set!(move_iterations => game.move_iterations);
        if let Some(p) = self.patience {
            c.game.patience = Some(p);
        }
        if let Some(p) = self.cache_policy {
            c.demand.cache_policy = match p {
                CacheArg::PopularFirst => CachePolicy::PopularFirst,
                CacheArg::Sampled => CachePolicy::Sampled,
            };
        }
        if let Some(x) = self.axis {
            c.axis = match x {
                AxisArg::A => Axis::A,
                AxisArg::T1Frac => Axis::T1Frac,
                AxisArg::Delta => Axis::Delta,
            };
        }
        if let Some(v) = &self.algorithms {
            c.algorithms = v.iter().map(|&a| a.into()).collect();
        }
        if let Some(r) = self.rule {
            c.game.rule = match r {
                RuleArg::ClosedForm => AllocationRule::ClosedForm,
                RuleArg::EqualShare => AllocationRule::EqualShare,
            };
        }
        if let Some(r) = self.offload_rule {
            c.game.offload_rule = match r {
                OffloadArg::FasterAndFits => OffloadRule::FasterAndFits,
                OffloadArg::LocalWhenSlowerAndFits => OffloadRule::LocalWhenSlowerAndFits,
            };
        }
        if self.no_polish {
            c.game.polish = false;
        }
        if self.timing {
            c.timing = true;
        }
        c.system.seed = c.seeds.first().copied().unwrap_or(c.system.seed);
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParams(_) | Error::Precondition(_) | Error::Parse { .. } => 1,
        Error::Io { .. } | Error::Csv(_) => 3,
        _ => 2,
    }
}

fn instance(cfg: &ExperimentConfig, input: &Input) -> Result<Instance, Error> {
    if let Some(path) = &input.scenario {
        let (s, d) = load_scenario(path)?;
        return Instance::new(s, d);
    }
    let delta = input.delta.or(cfg.deltas.first().copied()).unwrap_or(1.0);
    let seed = cfg.system.seed;
    let s = generate_scenario(&SystemParams { seed, ..cfg.system.clone() }, cfg.counts)?;
    let d = generate_demand(&s, &cfg.demand, delta, seed)?;
    Instance::new(s, d)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_report(out: &mut dyn Write, alg: Algorithm, st: &GameState, r: &DelayReport) -> io::Result<()> {
    writeln!(out, "algorithm          {}", alg.name())?;
    writeln!(out, "F                  {:.9e}", r.f)?;
    writeln!(out, "hrd_total_s        {:.9e}", r.hrd_total_s)?;
    writeln!(out, "hrd_backhaul_s     {:.9e}", r.hrd_backhaul_s)?;
    writeln!(out, "csd_total_s        {:.9e}", r.csd_total_s)?;
    writeln!(out, "csd_local_s        {:.9e}", r.csd_local_s)?;
    writeln!(out, "csd_offload_s      {:.9e}", r.csd_offload_s)?;
    writeln!(out, "n_local_csd        {}", r.n_local_csd)?;
    writeln!(out, "n_edge_csd         {}", r.n_edge_csd)?;
    writeln!(out, "n_backhauled_files {}", r.n_backhauled_files)?;
    writeln!(out, "n_cached_hits      {}", r.n_cached_hits)?;
    writeln!(out, "accepted_moves     {}", st.accepted_moves)?;
    writeln!(out, "feasible           {}", st.all_feasible())?;
    if !st.fallback_hrds.is_empty() {
        writeln!(out, "fallback_hrds      {:?}", st.fallback_hrds)?;
    }
    writeln!(out, "hrd_sbs            {:?}", st.partition.hrd_of)?;
    let csd: Vec<String> = st
        .partition
        .csd_of
        .iter()
        .map(|c| c.map_or("local".to_string(), |n| n.to_string()))
        .collect();
    writeln!(out, "csd_sbs            [{}]", csd.join(", "))
}

fn run(cmd: Cmd) -> Result<u8, Error> {
    let stdout_err = |e| io_err(Path::new("<stdout>"), e);
    match cmd {
        Cmd::Gen { common, delta } => {
            let cfg = common.config()?;
            let inst = instance(
                &cfg,
                &Input {
                    scenario: None,
                    delta,
                },
            )?;
            match &cfg.output {
                Some(p) => save_scenario(p, &inst.scenario, &inst.demand)?,
                None => print!("{}", write_scenario(&inst.scenario, &inst.demand)),
            }
            Ok(0)
        }
        Cmd::Run {
            common,
            input,
            algorithm,
            move_log,
        } => {
            let cfg = common.config()?;
            let inst = instance(&cfg, &input)?;
            let alg: Algorithm = algorithm.into();
            let st = match alg {
                Algorithm::Abcg => abcg_init(&inst, &cfg.game)?,
                Algorithm::Amnd => run_amnd(&inst, &cfg.game)?,
            };
            let report = evaluate(&inst, &st.partition, &st.allocation)?;
            if let Some(p) = move_log {
                let f = File::create(&p).map_err(|e| io_err(&p, e))?;
                write_move_log(&st.log, BufWriter::new(f))?;
            }
            let mut out = output(cfg.output.as_deref())?;
            print_report(&mut *out, alg, &st, &report).map_err(stdout_err)?;
            Ok(if st.all_feasible() { 0 } else { 2 })
        }
        Cmd::Sweep { common } => {
            let cfg = common.config()?;
            let rows = run_sweep(&cfg)?;
            match &cfg.output {
                Some(p) => emit_csv(&rows, p)?,
                None => write_csv(&rows, io::stdout().lock())?,
            }
            Ok(0)
        }
        Cmd::Audit { common, input, tol } => {
            let cfg = common.config()?;
            let inst = instance(&cfg, &input)?;
            let st = run_amnd(&inst, &cfg.game)?;
            let audit = audit_run(&inst, &st.partition, &st.allocation, cfg.game.rule, tol)?;
            let mut out = output(cfg.output.as_deref())?;
            let mut w = || -> io::Result<()> {
                writeln!(out, "F {:.9e}", st.objective)?;
                writeln!(out, "improving_moves {}", audit.improving_moves.len())?;
                for m in &audit.improving_moves {
                    writeln!(out, "  {:?} {:?} dV={:.3e}", m.kind, m.mv, m.delta_v)?;
                }
                writeln!(out, "constraint_violations {}", audit.violations.len())?;
                for v in &audit.violations {
                    writeln!(
                        out,
                        "  C{} sbs={} device={:?} file={:?} excess={:.3e}",
                        v.constraint, v.sbs, v.device, v.file, v.excess
                    )?;
                }
                writeln!(out, "sbs value oracle relative_gap")?;
                for g in &audit.oracle {
                    match (g.oracle, g.relative_gap()) {
                        (Some(o), Some(r)) => writeln!(out, "  {} {:.9e} {:.9e} {:.3e}", g.sbs, g.value, o, r)?,
                        _ => writeln!(out, "  {} {:.9e} none -", g.sbs, g.value)?,
                    }
                }
                let clean = audit.clean(tol);
                writeln!(out, "{}", if clean { "PASS" } else { "FAIL" })
            };
            w().map_err(stdout_err)?;
            Ok(if audit.clean(tol) { 0 } else { 2 })
        }
        Cmd::Trend {
            common,
            csv,
            metric,
            shape,
            algorithm,
        } => {
            let cfg = common.config()?;
            let rows: Vec<SweepRow> = match &csv {
                Some(p) => load_csv(p)?,
                None => run_sweep(&cfg)?,
            };
            let axis = rows.first().map_or(cfg.axis, |r| r.axis);
            let checks: Vec<(Metric, Shape)> = match (metric, shape) {
                (Some(m), Some(s)) => vec![(m.into(), s.into())],
                (None, None) => default_checks(axis),
                _ => {
                    return Err(Error::InvalidParams(
                        "--metric and --shape go together".into(),
                    ))
                }
            };
            let mut all = true;
            for (m, s) in checks {
                let r = trend_check(&rows, algorithm.into(), m, s)?;
                all &= r.pass;
                let ys: Vec<String> = r.points.iter().map(|p| format!("{:.4e}", p.1)).collect();
                println!(
                    "{} {} {:?} statistic={:.4} [{}]",
                    if r.pass { "PASS" } else { "FAIL" },
                    m.name(),
                    s,
                    r.statistic,
                    ys.join(" ")
                );
            }
            Ok(if all { 0 } else { 2 })
        }
    }
}

fn default_checks(axis: Axis) -> Vec<(Metric, Shape)> {
    match axis {
        Axis::A => vec![
            (Metric::HrdTotal, Shape::UShape),
            (Metric::HrdBackhaul, Shape::UShape),
            (Metric::CsdLocal, Shape::Decreasing),
            (Metric::CsdOffload, Shape::Increasing),
            (Metric::CsdTotal, Shape::Decreasing),
        ],
        Axis::T1Frac => vec![
            (Metric::HrdBackhaul, Shape::Increasing),
            (Metric::HrdTotal, Shape::Increasing),
            (Metric::CsdLocal, Shape::Decreasing),
            (Metric::CsdOffload, Shape::Increasing),
            (Metric::CsdTotal, Shape::Decreasing),
        ],
        Axis::Delta => vec![(Metric::HrdTotal, Shape::Decreasing)],
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
