use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use slowfast::ergodics::EmpiricalMeasure;
use slowfast::experiments::{
    run_averaging_study, run_cost_study, run_hypcheck, run_laplace_study, run_lipschitz_study, run_measure_study,
    run_mixing_study, run_rate_eval, run_viable_pair_study, ExperimentPlan, LaplaceFunctional, ResultTable,
    StudyKind,
};
use slowfast::io::{histogram_table, measure_table, num, sidecar_path, trajectory_table, Metadata, Stored, Table};
use slowfast::model::ModelSpec;
use slowfast::occupation::build_occupation;
use slowfast::path::PathSpec;
use slowfast::presets::preset;
use slowfast::simulator::{run_pair, ControlSignal, SimParams};
use slowfast::spectral::SpectralField;
use slowfast::Error;

/// Worker-pool size override.
const WORKERS_ENV: &str = "SLOWFAST_WORKERS";

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Slow-fast stochastic reaction-diffusion studies")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Model file, or `preset:<name>` for a bundled model.
    config: String,
    /// Master seed; defaults to the config's [rng] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Restrict to one schedule entry.
    #[arg(long)]
    entry: Option<usize>,
    /// Also write `<out>.gp` with plotting column hints.
    #[arg(long)]
    gnuplot_stub: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum HChoice {
    Zero,
    Quadratic,
    Linear,
}

#[derive(Subcommand)]
enum Verb {
    /// Hypothesis constants and the regime check.
    Hypcheck(Common),
    /// Trajectories of the slow-fast pair at one schedule entry.
    Simulate(Common),
    /// Invariant measure of the frozen fast process at the initial slow field.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Modes reported in the variance table.
        #[arg(long, default_value_t = 8)]
        modes: usize,
    },
    /// Averaging study: slow path against the averaged path.
    Average(Common),
    /// Viable-pair study: occupation-measure marginals against the invariant measures.
    Occupation(Common),
    /// Action functional of a path, its feedback control and the Picard replay.
    Rate {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV with columns t, x0, x1, ... (default: shifted averaged path).
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also run the cost-convergence study along the schedule.
        #[arg(long)]
        cost: bool,
    },
    /// Laplace-principle study.
    Laplace {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "quadratic")]
        h: HChoice,
    },
    /// Ergodic-average convergence rate and, optionally, measure Lipschitz checks.
    Mixing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        lipschitz_pairs: usize,
    },
    /// Histogram of a stored empirical measure.
    DumpMeasure {
        /// Binary measure file written by `measure`.
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        mode: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long)]
        gnuplot_stub: bool,
    },
}

enum Failure {
    Usage(String),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Toml(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Invalid(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Assertion(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<bool, Failure>;

fn load(config: &str) -> slowfast::Result<ModelSpec> {
    match config.strip_prefix("preset:") {
        Some(name) => preset(name),
        None => ModelSpec::load(Path::new(config)),
    }
}

fn plan(kind: StudyKind, c: &Common) -> slowfast::Result<ExperimentPlan> {
    let mut p = ExperimentPlan::new(kind, load(&c.config)?)?.with_entry(c.entry);
    if let Some(s) = c.seed {
        p = p.with_seed(s);
    }
    if let Some(r) = c.replicas {
        p = p.with_replicas(r);
    }
    Ok(p)
}

fn out_path(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

struct Run {
    started: SystemTime,
    args: Vec<String>,
}

impl Run {
    fn write_table(&self, table: &Table, path: &Path, seed: u64, extra: Value, gnuplot: bool) -> slowfast::Result<()> {
        table.write(path)?;
        Metadata::new(&table.schema, seed, self.started, self.args.clone(), extra).write(&sidecar_path(path))?;
        if gnuplot {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            std::fs::write(path.with_extension("gp"), table.gnuplot_hints(&name))?;
        }
        Ok(())
    }

    fn emit(&self, result: &ResultTable, c: &Common, p: &ExperimentPlan, default: &str) -> Outcome {
        let path = out_path(c, default);
        self.write_table(&result.table, &path, p.seed, result.summary.clone(), c.gnuplot_stub)?;
        let ok = result.ok();
        eprintln!("{}: {} -> {}", default.trim_end_matches(".csv"), if ok { "pass" } else { "FAIL" }, path.display());
        Ok(ok)
    }
}

fn read_path(file: &Path) -> slowfast::Result<PathSpec> {
    let t = Table::read(file)?;
    let times = t.column("t").ok_or_else(|| Error::Config("path table lacks a `t` column".into()))?;
    let modes: Vec<Vec<f64>> = (0..).map_while(|k| t.column(&format!("x{k}"))).collect();
    if times.len() < 2 || modes.is_empty() {
        return Err(Error::Config("path table needs at least two rows and an x0 column".into()));
    }
    let dt = times[1] - times[0];
    let fields = (0..times.len()).map(|i| SpectralField::new(modes.iter().map(|m| m[i]).collect())).collect();
    PathSpec::new(dt, fields)
}

fn simulate(run: &Run, c: &Common) -> Outcome {
    let p = plan(StudyKind::Averaging, c)?;
    let spec = &p.spec;
    let model = spec.model()?;
    let entries = p.entries()?;
    let (e, entry) = match c.entry {
        Some(_) => entries[0],
        None => *entries.last().expect("non-empty schedule"),
    };
    let params = SimParams::new(entry.epsilon, entry.delta, entry.dt).with_blowup_threshold(spec.run.blowup_threshold);
    let (x0, y0) = (spec.initial_slow()?, spec.initial_fast()?);
    let base = out_path(c, "trajectory.csv");
    let replicas = c.replicas.unwrap_or(1);
    let mut finite = true;
    for r in 0..replicas {
        let key = p.key().with_entry(e as u64).with_replica(r as u64);
        let rec = run_pair(&model, params, &x0, &y0, spec.run.horizon, spec.run.record_dt, &ControlSignal::Zero, key)?;
        let path = if replicas == 1 { base.clone() } else { sibling(&base, &format!(".r{r}.csv")) };
        let table = trajectory_table(&rec)?;
        finite &= !table.has_nan();
        run.write_table(&table, &path, p.seed, json!({ "entry": e, "replica": r, "params": rec.params }), c.gnuplot_stub)?;
        rec.save(&path.with_extension("bin"))?;
        if let Ok(occ) = build_occupation(&rec, entry.window) {
            occ.save(&sibling(&path, ".occupation.bin"))?;
        }
    }
    eprintln!("simulate: {replicas} trajectories at epsilon = {} -> {}", entry.epsilon, base.display());
    Ok(finite)
}

fn measure(run: &Run, c: &Common, modes: usize) -> Outcome {
    let p = plan(StudyKind::Measure, c)?;
    let (result, mu) = run_measure_study(&p, modes)?;
    let ok = run.emit(&result, c, &p, "measure.csv")?;
    let path = out_path(c, "measure.csv");
    mu.save(&sibling(&path, ".measure.bin"))?;
    run.write_table(&measure_table(&mu)?, &sibling(&path, ".samples.csv"), p.seed, json!({}), false)?;
    Ok(ok)
}

fn rate(run: &Run, c: &Common, path: Option<&Path>, tol: f64, cost: bool) -> Outcome {
    let p = plan(StudyKind::RateEval, c)?;
    let target = path.map(read_path).transpose()?;
    let report = run_rate_eval(&p, target, tol)?;
    let out = out_path(c, "rate.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    let value = report.result.value;
    let mut ok = !value.is_nan()
        && report.result.diagnostics.identity_pass
        && report.picard_error.is_none_or(|e| e <= 5.0 * tol);
    eprintln!("rate: S = {} -> {}", num(value), out.display());
    if cost {
        let cp = plan(StudyKind::Cost, c)?;
        let result = run_cost_study(&cp)?;
        let cost_out = sibling(&out, ".cost.csv");
        run.write_table(&result.table, &cost_out, cp.seed, result.summary.clone(), c.gnuplot_stub)?;
        ok &= result.ok();
    }
    Ok(ok)
}

fn dump_measure(run: &Run, file: &Path, out: Option<PathBuf>, mode: usize, bins: usize, gnuplot: bool) -> Outcome {
    let mu = EmpiricalMeasure::load(file)?;
    let table = histogram_table(&mu, mode, bins)?;
    let out = out.unwrap_or_else(|| file.with_extension("hist.csv"));
    run.write_table(&table, &out, mu.provenance().key.master_seed, json!({ "source": file, "mode": mode }), gnuplot)?;
    Ok(!table.has_nan())
}

fn dispatch(verb: Verb, run: &Run) -> Outcome {
    match verb {
        Verb::Hypcheck(c) => {
            let p = plan(StudyKind::Hypcheck, &c)?;
            let result = run_hypcheck(&p)?;
            let report = serde_json::to_string_pretty(&result.summary).map_err(Error::from)?;
            match &c.out {
                Some(path) => std::fs::write(path, report)?,
                None => println!("{report}"),
            }
            Ok(result.pass)
        }
        Verb::Simulate(c) => simulate(run, &c),
        Verb::Measure { common, modes } => measure(run, &common, modes),
        Verb::Average(c) => {
            let p = plan(StudyKind::Averaging, &c)?;
            run.emit(&run_averaging_study(&p)?, &c, &p, "average.csv")
        }
        Verb::Occupation(c) => {
            let p = plan(StudyKind::ViablePair, &c)?;
            run.emit(&run_viable_pair_study(&p)?, &c, &p, "occupation.csv")
        }
        Verb::Rate { common, path, tol, cost } => rate(run, &common, path.as_deref(), tol, cost),
        Verb::Laplace { common, h } => {
            let p = plan(StudyKind::Laplace, &common)?;
            let h = match h {
                HChoice::Zero => LaplaceFunctional::Zero,
                HChoice::Quadratic => LaplaceFunctional::from_spec(&p.spec),
                HChoice::Linear => {
                    LaplaceFunctional::ClippedLinear { scale: p.spec.study.h_scale, cap: p.spec.study.h_cap }
                }
            };
            run.emit(&run_laplace_study(&p, &h)?, &common, &p, "laplace.csv")
        }
        Verb::Mixing { common, lipschitz_pairs } => {
            let p = plan(StudyKind::Mixing, &common)?;
            let mut ok = run.emit(&run_mixing_study(&p)?, &common, &p, "mixing.csv")?;
            if lipschitz_pairs > 0 {
                let result = run_lipschitz_study(&p, lipschitz_pairs)?;
                let path = sibling(&out_path(&common, "mixing.csv"), ".lipschitz.csv");
                run.write_table(&result.table, &path, p.seed, result.summary.clone(), common.gnuplot_stub)?;
                ok &= result.ok();
            }
            Ok(ok)
        }
        Verb::DumpMeasure { file, out, mode, bins, gnuplot_stub } => {
            dump_measure(run, &file, out, mode, bins, gnuplot_stub)
        }
    }
}

fn configure_workers() -> Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_workers() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let run = Run { started: SystemTime::now(), args: std::env::args().collect() };
    match dispatch(cli.verb, &run) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Assertion(msg)) => {
            eprintln!("assertion failed: {msg}");
            ExitCode::from(2)
        }
    }
}
