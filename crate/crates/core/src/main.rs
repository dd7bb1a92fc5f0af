use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use udo::driver::{
    cumulative_regret, emit_trace, run_one_level, run_udo, sublinearity_report, PickerKind, RowKind, RunError,
    RunOutcome, RunSpec, SpecError,
};
use udo::evaluator::EvalError;
use udo::planner::{build_ilp, CostMatrix, CostModel, Linking, PlannerChoice};
use udo::space::Configuration;

#[derive(Parser)]
#[command(name = "udo", version, about = "Two-level delayed-feedback configuration tuner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-level tuner and write its trace.
    Run(RunArgs),
    /// Run the one-level, no-delay baseline.
    Baseline(RunArgs),
    /// Run the two-level tuner and report cumulative regret against the optimum.
    Regret(RunArgs),
    /// Print the ordering ILP for a batch of configurations in LP format.
    IlpExport(IlpArgs),
}

#[derive(Args)]
struct Common {
    /// Run specification (TOML). Without it the built-in simulator is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum feedback delay.
    #[arg(long)]
    tau: Option<u64>,
    /// Exploration constant for every level.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    rho_pick: Option<usize>,
    /// greedy, exact or auto
    #[arg(long)]
    planner: Option<PlannerChoice>,
    /// secretary or threshold
    #[arg(long, value_parser = parse_picker)]
    picker: Option<PickerKind>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Directory for trace.csv; defaults to the spec's output or stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the iteration budget.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct IlpArgs {
    #[command(flatten)]
    common: Common,
    /// A configuration as dash-separated value indices, e.g. 1-0-1-0-0-0. Repeat per request.
    #[arg(long = "request", required = true)]
    requests: Vec<String>,
    /// Use the averaged linking constraints instead of the tight ones.
    #[arg(long)]
    averaged: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_picker(s: &str) -> Result<PickerKind, String> {
    match s {
        "secretary" => Ok(PickerKind::Secretary),
        "threshold" => Ok(PickerKind::Threshold),
        _ => Err(format!("unknown picker `{s}` (expected secretary or threshold)")),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("environment failure: {0}")]
    Env(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Spec(_) => 2,
            CliError::Env(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Default(_) | RunError::Env(_) | RunError::Eval(EvalError::Env(_)) => CliError::Env(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

fn load(common: &Common) -> Result<RunSpec, CliError> {
    let mut spec = match &common.spec {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(t) = common.tau {
        spec.tau = Some(t);
    }
    if let Some(b) = common.b {
        for level in [&mut spec.heavy, &mut spec.light, &mut spec.one_level] {
            level.b = Some(b);
        }
    }
    if let Some(p) = common.picker {
        spec.picker = p;
    }
    if let Some(r) = common.rho_pick {
        spec.rho_pick = Some(r);
    }
    if let Some(p) = common.planner {
        spec.planner = p;
    }
    Ok(spec)
}

fn write_trace(outcome: &RunOutcome, spec: &RunSpec, out_dir: Option<&PathBuf>) -> Result<(), CliError> {
    let target = out_dir.map(|d| d.join("trace.csv")).or_else(|| spec.output.clone());
    match target {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let mut buf = Vec::new();
            emit_trace(&outcome.trace, &mut buf).context("formatting trace")?;
            fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("trace written to {}", path.display());
        }
        None => emit_trace(&outcome.trace, &mut io::stdout().lock()).context("writing trace")?,
    }
    Ok(())
}

fn summarize(outcome: &RunOutcome) {
    eprintln!(
        "iterations {} | best {} (mean {:.4}, default {:.4}) | clock {:.1} | reconfiguration {:.1} | failures {}",
        outcome.iterations,
        outcome.best,
        outcome.best_mean,
        outcome.default_raw,
        outcome.clock,
        outcome.reconf_cost,
        outcome.failures.len()
    );
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(args) => run_like(args, false),
        Command::Baseline(args) => run_like(args, true),
        Command::Regret(args) => regret(args),
        Command::IlpExport(args) => ilp_export(args),
    }
}

fn prepare(args: &RunArgs) -> Result<(RunSpec, udo::driver::RunConfig, Box<dyn udo::env::Benchmark>), CliError> {
    let mut spec = load(&args.common)?;
    if let Some(n) = args.iterations {
        spec.budget.iterations = Some(n);
    }
    let cfg = spec.resolve()?;
    let env = spec.build_env()?;
    Ok((spec, cfg, env))
}

fn run_like(args: RunArgs, baseline: bool) -> Result<(), CliError> {
    let (spec, cfg, mut env) = prepare(&args)?;
    let outcome = if baseline { run_one_level(&cfg, env.as_mut())? } else { run_udo(&cfg, env.as_mut())? };
    write_trace(&outcome, &spec, args.out.as_ref())?;
    summarize(&outcome);
    Ok(())
}

fn regret(args: RunArgs) -> Result<(), CliError> {
    let (spec, cfg, mut env) = prepare(&args)?;
    let space = env.space().clone();
    if env.expected(&space.default_config()).is_none() {
        return Err(anyhow!("regret needs a backend that knows its expected metric (use the simulator)").into());
    }
    let outcome = run_udo(&cfg, env.as_mut())?;
    if args.out.is_some() || spec.output.is_some() {
        write_trace(&outcome, &spec, args.out.as_ref())?;
    }
    let (opt, f_star) = udo::driver::optimum_of(env.as_ref()).ok_or_else(|| anyhow!("cannot enumerate the space"))?;
    let configs: Vec<&Configuration> =
        outcome.trace.iter().filter(|r| r.kind != RowKind::Default).map(|r| &r.config).collect();
    let series = cumulative_regret(configs, f_star, |c| env.expected(c).expect("checked above"));
    let n = series.len();
    let checkpoints: Vec<usize> = [n / 8, n / 4, n / 2, n].into_iter().filter(|&c| c > 0).collect();
    let report = sublinearity_report(&series, &checkpoints);
    let mut out = io::stdout().lock();
    let write = |out: &mut io::StdoutLock, s: String| writeln!(out, "{s}").context("writing report");
    write(&mut out, format!("optimum {opt} = {f_star:.4}"))?;
    for (c, r) in &report.ratios {
        write(&mut out, format!("regret({c})/{c} = {r:.4}"))?;
    }
    write(&mut out, format!("sublinear: {}", if report.pass { "PASS" } else { "FAIL" }))?;
    summarize(&outcome);
    Ok(())
}

fn parse_config(text: &str, len: usize) -> Result<Configuration, CliError> {
    let values = text
        .split('-')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| anyhow!("bad configuration `{text}`: {e}"))?;
    if values.len() != len {
        return Err(
            anyhow!("configuration `{text}` has {} values, the space has {len} parameters", values.len()).into()
        );
    }
    Ok(Configuration::new(values))
}

fn ilp_export(args: IlpArgs) -> Result<(), CliError> {
    let spec = load(&args.common)?;
    spec.resolve()?;
    let space = spec.space()?;
    let mut requests = Vec::new();
    for r in &args.requests {
        let c = parse_config(r, space.len())?;
        space.validate_config(&c).map_err(|e| anyhow!("configuration `{r}`: {e}"))?;
        requests.push(c);
    }
    let model = CostModel::from_space(&space);
    let costs = CostMatrix::from_configs(&space.default_config(), &requests, &model);
    let linking = if args.averaged { Linking::Averaged } else { Linking::Tight };
    let lp = build_ilp(&costs, linking).to_lp();
    match args.out {
        Some(path) => fs::write(&path, lp).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().lock().write_all(lp.as_bytes()).context("writing LP")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
