use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use activelab::generators::{self, LowerBoundStrongSpec, LowerBoundWeakSpec, SmoothFamily};
use activelab::harness::{
    self, quantile_table, Algorithm, EvalMethod, Evaluation, LambdaChoice, RunOutput, RunRecord, RunSpec,
    SweepConfig, CSV_HEADER, PLOT_HEADER,
};
use activelab::{Error, EtaSpec, Marginal, NoiseParams, Problem};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "activelab", version, about = "Membership-query active classification experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Root seed for problem generation and learner randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; results go to stdout when unset.
    #[arg(long, global = true, env = "ACTIVELAB_OUT")]
    out: Option<PathBuf>,
    /// Use max(1, ln n) in place of the declared Hölder constant.
    #[arg(long, global = true)]
    lambda_surrogate: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Emit a problem document.
    Generate(GenerateArgs),
    /// Run one learner on one budget.
    Run(RunArgs),
    /// Run a budget × seed grid and write per-run records.
    Sweep(SweepArgs),
    /// Audit stored label sets against a problem.
    Audit(AuditArgs),
    /// Fit the rate exponent from stored records.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    Constant,
    Affine,
    Sinusoid,
    LbStrong,
    LbWeak,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Value of the constant family.
    #[arg(long, default_value_t = 0.75)]
    c: f64,
    /// Affine gradient; one value is repeated on every axis.
    #[arg(long, value_delimiter = ',', default_value = "0.4")]
    slope: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    center: f64,
    #[arg(long, default_value_t = 0.1)]
    amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    frequency: f64,
    /// Bump height scale of the lower-bound families.
    #[arg(long, default_value_t = 0.125)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Bump scale; calibrated against the Hölder constant when unset.
    #[arg(long)]
    bump_scale: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgArg {
    Subroutine,
    Adaptive,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Self {
        match a {
            AlgArg::Subroutine => Algorithm::Subroutine,
            AlgArg::Adaptive => Algorithm::Adaptive,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalArg {
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Args, Debug)]
struct LearnerArgs {
    /// Problem document; defaults to the affine control with slope 0.4 in d = 1.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "subroutine")]
    alg: AlgArg,
    /// Smoothness handed to the subroutine; defaults to the declared value.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, value_enum, default_value = "auto")]
    eval: EvalArg,
    #[arg(long, default_value_t = 200_000)]
    mc_samples: u64,
    /// Record wall-clock time (records are then no longer reproducible byte for byte).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    learner: LearnerArgs,
    #[arg(long)]
    n: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Sweep document; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    learner: LearnerArgs,
    /// Comma-separated budgets; `2^k` is accepted.
    #[arg(long, value_delimiter = ',', default_value = "2^10,2^11,2^12,2^13")]
    budgets: Vec<String>,
    /// Comma-separated seeds or a half-open range `a..b`.
    #[arg(long, default_value = "0..5")]
    seeds: String,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Output of `run` (record plus label sets).
    #[arg(long)]
    regions: PathBuf,
    /// Margin Δ of the weak inclusions.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long)]
    grid_depth: Option<u8>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Records written by `sweep`.
    #[arg(long)]
    records: PathBuf,
}

fn default_problem() -> anyhow::Result<Problem> {
    let params = NoiseParams { alpha: 1.0, beta: 1.0, delta0: 0.0, lambda: 1.0, c1: Some(1.0), c3: 5.0 };
    Ok(Problem::new(1, EtaSpec::Affine { center_value: 0.5, gradient: vec![0.4] }, Marginal::Uniform, params)?)
}

fn load_problem(path: &Option<PathBuf>) -> anyhow::Result<Problem> {
    match path {
        None => default_problem(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Problem::from_json(&text)?)
        }
    }
}

fn parse_budget(s: &str) -> anyhow::Result<u64> {
    let s = s.trim();
    if let Some(k) = s.strip_prefix("2^") {
        let k: u32 = k.parse().with_context(|| format!("bad budget {s}"))?;
        return 1u64.checked_shl(k).filter(|_| k < 64).with_context(|| format!("budget {s} overflows"));
    }
    s.parse().with_context(|| format!("bad budget {s}"))
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed {t}"))).collect()
}

fn lambda_choice(g: &Global) -> LambdaChoice {
    if g.lambda_surrogate {
        LambdaChoice::LogSurrogate
    } else {
        LambdaChoice::Declared
    }
}

fn evaluation(l: &LearnerArgs) -> Evaluation {
    let method = match l.eval {
        EvalArg::Auto => EvalMethod::Auto,
        EvalArg::Exact => EvalMethod::Exact,
        EvalArg::MonteCarlo => EvalMethod::MonteCarlo,
    };
    Evaluation { method, samples: l.mc_samples }
}

/// Writes `body` to `<out>/<name>` or to stdout.
fn emit(out: &Option<PathBuf>, name: &str, body: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(body.as_bytes())?;
            if !body.ends_with('\n') {
                o.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn generate(g: &Global, a: &GenerateArgs) -> anyhow::Result<()> {
    let problem = match a.family {
        Family::Constant => {
            generators::make_smooth_problem(&SmoothFamily::Constant { value: a.c }, a.d, a.alpha, a.lambda)?
        }
        Family::Affine => {
            let gradient = if a.slope.len() == 1 { vec![a.slope[0]; a.d] } else { a.slope.clone() };
            let fam = SmoothFamily::Affine { center_value: a.center, gradient };
            generators::make_smooth_problem(&fam, a.d, a.alpha, a.lambda)?
        }
        Family::Sinusoid => {
            let fam = SmoothFamily::Sinusoid { amplitude: a.amplitude, frequency: a.frequency };
            generators::make_smooth_problem(&fam, a.d, a.alpha, a.lambda)?
        }
        Family::LbStrong => {
            let spec =
                LowerBoundStrongSpec { d: a.d, alpha: a.alpha, delta: a.delta, sigma: None, c: a.bump_scale, seed: g.seed };
            generators::make_lb_strong(&spec, a.lambda.unwrap_or(1.0))?
        }
        Family::LbWeak => {
            let spec = LowerBoundWeakSpec {
                d: a.d,
                alpha: a.alpha,
                beta: a.beta,
                delta: a.delta,
                sigma: None,
                c: a.bump_scale,
                seed: g.seed,
            };
            generators::make_lb_weak(&spec, a.lambda.unwrap_or(2.0))?
        }
    };
    if let EtaSpec::LowerBoundStrong { delta, c, .. } | EtaSpec::LowerBoundWeak { delta, c, .. } = &problem.eta {
        if (delta - a.delta).abs() > 0.0 {
            eprintln!("delta snapped from {} to {delta}", a.delta);
        }
        eprintln!("bump scale C = {c}");
    }
    emit(&g.out, "problem.json", &problem.to_json())
}

fn run(g: &Global, a: &RunArgs) -> anyhow::Result<bool> {
    let l = &a.learner;
    let spec = RunSpec {
        problem: load_problem(&l.problem)?,
        algorithm: l.alg.into(),
        n: a.n,
        seed: g.seed,
        delta: l.delta,
        alpha: l.alpha,
        lambda: lambda_choice(g),
        evaluation: evaluation(l),
        timing: l.timing,
    };
    let out = with_pool(g.threads, || harness::run_once(&spec))??;
    emit(&g.out, "record.json", &serde_json::to_string_pretty(&out.record)?)?;
    if g.out.is_some() {
        emit(&g.out, "regions.json", &serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out.record.infeasible)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn sweep_config(g: &Global, a: &SweepArgs) -> anyhow::Result<SweepConfig> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: SweepConfig = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        return Ok(cfg);
    }
    let l = &a.learner;
    Ok(SweepConfig {
        problem: load_problem(&l.problem)?,
        algorithm: l.alg.into(),
        budgets: a.budgets.iter().map(|b| parse_budget(b)).collect::<anyhow::Result<_>>()?,
        seeds: parse_seeds(&a.seeds)?,
        delta: l.delta,
        alpha: l.alpha,
        lambda: lambda_choice(g),
        evaluation: evaluation(l),
        timing: l.timing,
    })
}

fn records_csv(records: &[RunRecord]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn sweep(g: &Global, a: &SweepArgs) -> anyhow::Result<()> {
    let cfg = sweep_config(g, a)?;
    let records = harness::run_sweep(&cfg, g.threads)?;
    if g.out.is_some() {
        emit(&g.out, "records.json", &serde_json::to_string_pretty(&records)?)?;
    }
    emit(&g.out, "records.csv", &records_csv(&records)?)
}

fn audit(g: &Global, a: &AuditArgs) -> anyhow::Result<()> {
    let problem = load_problem(&Some(a.problem.clone()))?;
    let text = fs::read_to_string(&a.regions).with_context(|| format!("reading {}", a.regions.display()))?;
    let run: RunOutput = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let rep = harness::check_correct(&problem, &run.s0, &run.s1, a.margin, a.grid_depth)?;
    emit(&g.out, "audit.json", &serde_json::to_string_pretty(&rep)?)
}

fn report(g: &Global, a: &ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    let records: Vec<RunRecord> =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let fit = harness::fit_rate(&records)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slope", "intercept", "band_lo", "band_hi", "budgets_fitted", "budgets_dropped"])?;
    w.write_record([
        fit.slope.to_string(),
        fit.intercept.to_string(),
        fit.band.0.to_string(),
        fit.band.1.to_string(),
        fit.points.len().to_string(),
        fit.dropped.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
    ])?;
    let rate = String::from_utf8(w.into_inner()?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLOT_HEADER)?;
    for q in quantile_table(&records) {
        w.write_record([q.n.to_string(), q.q25.to_string(), q.q50.to_string(), q.q75.to_string()])?;
    }
    let plot = String::from_utf8(w.into_inner()?)?;

    emit(&g.out, "rate.csv", &rate)?;
    emit(&g.out, "plot.csv", &plot)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InfeasibleBudget { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Generate(a) => generate(g, a).map(|_| false),
        Command::Run(a) => run(g, a),
        Command::Sweep(a) => sweep(g, a).map(|_| false),
        Command::Audit(a) => audit(g, a).map(|_| false),
        Command::Report(a) => report(g, a).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: budget too small for the first refinement depth");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
