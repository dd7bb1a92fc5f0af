//! Main tuning loop, the one-level baseline, regret analysis and traces.

mod spec;

pub use spec::{
    Budget, BudgetSpec, EnvSpec, LevelConfig, LevelSpec, PickerKind, RunConfig, RunSpec, SpecError, DEFAULT_ITERATIONS,
    DEFAULT_RHO_PICK, DEFAULT_TAU,
};

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::bandit::ArmStats;
use crate::env::{Benchmark, EnvError};
use crate::evaluator::{derive_seed, EvalError, EvalRecord, EvalSettings, Evaluator, Phase};
use crate::mcts::{best_by_mean, OptimizeFailure, SearchError, Searcher};
use crate::planner::CostModel;
use crate::space::{scaled_reward, Configuration, ConfigurationSpace, MdpSpec, SpaceError};

/// Reward credited to a heavy choice whose evaluation failed.
pub const FAILURE_REWARD: f64 = -1.0;

pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER: &str = "iter,time,config,raw,reward,best_config,best_raw,cum_reconf_cost";

/// Largest space [`brute_force_optimum`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot measure the default configuration: {0}")]
    Default(EnvError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("space has {0} configurations, too many to enumerate")]
    TooLarge(u128),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Default,
    Light,
    Final,
    OneLevel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub time: f64,
    pub config: Configuration,
    pub raw: f64,
    pub reward: f64,
    pub best_config: Configuration,
    pub best_raw: f64,
    pub cum_reconf_cost: f64,
    pub kind: RowKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Configuration with the highest mean observed metric.
    pub best: Configuration,
    pub best_mean: f64,
    pub default_raw: f64,
    pub trace: Vec<TraceRow>,
    pub iterations: u64,
    pub failures: Vec<(u64, String)>,
    pub clock: f64,
    pub reconf_cost: f64,
}

/// Running best-so-far bookkeeping shared by both loops.
struct Tracker {
    trace: Vec<TraceRow>,
    observed: BTreeMap<Configuration, ArmStats>,
    best: Option<(Configuration, f64)>,
    last_improvement: u64,
}

impl Tracker {
    fn new() -> Self {
        Tracker { trace: Vec::new(), observed: BTreeMap::new(), best: None, last_improvement: 0 }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        iter: u64,
        kind: RowKind,
        config: Configuration,
        raw: f64,
        reward: f64,
        clock: f64,
        reconf: f64,
    ) {
        self.observed.entry(config.clone()).or_default().record(raw);
        if self.best.as_ref().is_none_or(|(_, b)| raw > *b) {
            self.best = Some((config.clone(), raw));
            self.last_improvement = iter;
        }
        let (best_config, best_raw) = self.best.clone().expect("set above");
        self.trace.push(TraceRow {
            iter,
            time: clock,
            config,
            raw,
            reward,
            best_config,
            best_raw,
            cum_reconf_cost: reconf,
            kind,
        });
    }

    fn record(&mut self, iter: u64, r: EvalRecord) {
        let kind = match r.phase {
            Phase::Light => RowKind::Light,
            Phase::Final => RowKind::Final,
        };
        self.push(iter, kind, r.config, r.raw, r.reward, r.clock, r.reconf_cost);
    }

    fn finish(
        self,
        default_raw: f64,
        iterations: u64,
        failures: Vec<(u64, String)>,
        env: &dyn Benchmark,
    ) -> RunOutcome {
        let (best, stats) = best_by_mean(self.observed.iter()).expect("default was measured");
        RunOutcome {
            best: best.clone(),
            best_mean: stats.mean,
            default_raw,
            trace: self.trace,
            iterations,
            failures,
            clock: env.clock(),
            reconf_cost: env.reconfiguration_cost(),
        }
    }
}

struct Stopper<'a> {
    budget: &'a Budget,
    started: Instant,
}

impl Stopper<'_> {
    /// Whether iteration `t` (1-based) may start.
    fn may_run(&self, t: u64, env: &dyn Benchmark, tracker: &Tracker) -> bool {
        let b = self.budget;
        if b.iterations.is_some_and(|n| t > n) {
            return false;
        }
        if b.sim_time.is_some_and(|s| env.clock() >= s) {
            return false;
        }
        if b.wallclock.is_some_and(|w| self.started.elapsed() >= w) {
            return false;
        }
        if b.no_improvement.is_some_and(|n| t > tracker.last_improvement + n) {
            return false;
        }
        true
    }
}

fn measure_default(env: &mut dyn Benchmark, tracker: &mut Tracker) -> Result<f64, RunError> {
    let space = env.space().clone();
    let default = space.default_config();
    let model = CostModel::from_space(&space);
    env.reconfigure(&default, &model).map_err(RunError::Default)?;
    let raw = env.evaluate(&default).map_err(RunError::Default)?;
    scaled_reward(raw, raw)?;
    tracker.push(0, RowKind::Default, default, raw, 0.0, env.clock(), env.reconfiguration_cost());
    Ok(raw)
}

/// Two-level tuning loop. Each iteration selects one heavy configuration,
/// submits it with deadline `t + tau`, lets the evaluator process due
/// requests and feeds the resolved rewards back to the heavy search.
pub fn run_udo(cfg: &RunConfig, env: &mut dyn Benchmark) -> Result<RunOutcome, RunError> {
    let space = env.space().clone();
    let mut tracker = Tracker::new();
    let default_raw = measure_default(env, &mut tracker)?;
    let heavy_mdp = MdpSpec::heavy(&space, cfg.heavy.horizon)?;
    let has_heavy = !space.legal_actions(&heavy_mdp, &heavy_mdp.start, 0).is_empty();
    let mut heavy = Searcher::new(space.clone(), heavy_mdp, cfg.heavy.search.clone(), derive_seed(cfg.seed, 0))?;
    let settings = EvalSettings {
        picker: cfg.picker,
        planner: cfg.planner,
        tau_max: cfg.tau,
        light_budget: cfg.light_budget,
        light_horizon: cfg.light.horizon,
        light_search: cfg.light.search.clone(),
        cache_capacity: None,
        seed: cfg.seed,
    };
    let mut evaluator = Evaluator::new(space.clone(), settings, default_raw)?;
    let stopper = Stopper { budget: &cfg.budget, started: Instant::now() };
    let mut failures = Vec::new();
    let mut t = 1;
    while stopper.may_run(t, env, &tracker) {
        let heavy_conf = if has_heavy { heavy.next(t)?.config } else { space.default_config() };
        evaluator.submit(heavy_conf, t, t + cfg.tau)?;
        let received = evaluator.receive(env, t)?;
        for r in evaluator.drain_log() {
            tracker.record(t, r);
        }
        let mut resolutions: Vec<(u64, f64)> = received.results.iter().map(|r| (r.issued_at, r.reward)).collect();
        for f in &received.failures {
            failures.push((t, f.error.clone()));
            resolutions.push((f.request.issued_at, FAILURE_REWARD));
        }
        resolutions.sort_by_key(|r| r.0);
        if has_heavy {
            heavy.rl_update(&resolutions, t)?;
        }
        t += 1;
    }
    Ok(tracker.finish(default_raw, t - 1, failures, env))
}

/// Baseline: one search over all parameters with immediate feedback; every
/// selection is reconfigured and benchmarked on the spot.
pub fn run_one_level(cfg: &RunConfig, env: &mut dyn Benchmark) -> Result<RunOutcome, RunError> {
    let space = env.space().clone();
    let mut tracker = Tracker::new();
    let default_raw = measure_default(env, &mut tracker)?;
    let model = CostModel::from_space(&space);
    let mdp = MdpSpec::one_level(&space, cfg.one_level.horizon)?;
    let mut search = cfg.light.search.clone();
    search.params.tau_max = 0;
    let mut searcher = Searcher::new(space.clone(), mdp, search, derive_seed(cfg.seed, 1))?;
    let stopper = Stopper { budget: &cfg.budget, started: Instant::now() };
    let mut failures = Vec::new();
    let mut t = 1;
    while stopper.may_run(t, env, &tracker) {
        let mut row = None;
        let outcome = searcher.rl_optimize(1, |c| {
            env.reconfigure(c, &model)?;
            let raw = env.evaluate(c)?;
            let reward = scaled_reward(raw, default_raw)?;
            row = Some((c.clone(), raw, reward));
            Ok::<_, RunError>(reward)
        });
        match outcome {
            Ok(_) => {}
            Err(e) => match e.kind {
                OptimizeFailure::Evaluate(RunError::Env(err)) => failures.push((t, err.to_string())),
                OptimizeFailure::Evaluate(other) => return Err(other),
                OptimizeFailure::Search(s) => return Err(s.into()),
            },
        }
        if let Some((c, raw, reward)) = row {
            tracker.push(t, RowKind::OneLevel, c, raw, reward, env.clock(), env.reconfiguration_cost());
        }
        t += 1;
    }
    Ok(tracker.finish(default_raw, t - 1, failures, env))
}

/// Exhaustive argmax of `value` over the space; ties go to the configuration
/// enumerated first.
pub fn brute_force_optimum(
    space: &ConfigurationSpace,
    mut value: impl FnMut(&Configuration) -> f64,
) -> Result<(Configuration, f64), RunError> {
    let n = space.cardinality();
    if n > BRUTE_FORCE_LIMIT {
        return Err(RunError::TooLarge(n));
    }
    let mut best: Option<(Configuration, f64)> = None;
    for c in space.enumerate().filter(|c| space.accepts(c)) {
        let v = value(&c);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((c, v));
        }
    }
    best.ok_or(RunError::TooLarge(0))
}

/// Expected metric from the backend when it knows it, else the mean of
/// `samples` measurements (which reconfigures the backend).
pub fn estimate_metric(env: &mut dyn Benchmark, config: &Configuration, samples: usize) -> Result<f64, RunError> {
    if let Some(v) = env.expected(config) {
        return Ok(v);
    }
    let model = CostModel::from_space(env.space());
    env.reconfigure(config, &model)?;
    let mut total = 0.0;
    for _ in 0..samples.max(1) {
        total += env.evaluate(config)?;
    }
    Ok(total / samples.max(1) as f64)
}

/// `series[i] = sum over the first i+1 configurations of (f_star - E f(c))`.
pub fn cumulative_regret<'a>(
    configs: impl IntoIterator<Item = &'a Configuration>,
    f_star: f64,
    mut expected: impl FnMut(&Configuration) -> f64,
) -> Vec<f64> {
    let mut acc = 0.0;
    configs
        .into_iter()
        .map(|c| {
            acc += f_star - expected(c);
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublinearityReport {
    /// `(checkpoint, regret(checkpoint) / checkpoint)`
    pub ratios: Vec<(usize, f64)>,
    pub pass: bool,
}

/// Average regret at each checkpoint; passes when the ratios strictly
/// decrease (or are all zero).
pub fn sublinearity_report(series: &[f64], checkpoints: &[usize]) -> SublinearityReport {
    let ratios: Vec<(usize, f64)> =
        checkpoints.iter().filter(|&&c| c >= 1 && c <= series.len()).map(|&c| (c, series[c - 1] / c as f64)).collect();
    let pass = ratios.len() == checkpoints.len()
        && ratios.windows(2).all(|w| w[1].1 < w[0].1 || (w[0].1 == 0.0 && w[1].1 == 0.0));
    SublinearityReport { ratios, pass }
}

/// Writes the trace as CSV with a versioned comment line and LF endings.
pub fn emit_trace(rows: &[TraceRow], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "# udo trace v{TRACE_VERSION}")?;
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.time, r.config, r.raw, r.reward, r.best_config, r.best_raw, r.cum_reconf_cost
        )?;
    }
    Ok(())
}

pub fn load_spec(path: &std::path::Path) -> Result<(RunSpec, RunConfig), SpecError> {
    let spec = RunSpec::load(path)?;
    let cfg = spec.resolve()?;
    spec.space()?;
    Ok((spec, cfg))
}

/// Convenience for tests and the CLI: noise-free optimum of a backend.
pub fn optimum_of(env: &dyn Benchmark) -> Option<(Configuration, f64)> {
    let space: Arc<ConfigurationSpace> = env.space().clone();
    env.expected(&space.default_config())?;
    brute_force_optimum(&space, |c| env.expected(c).expect("checked above")).ok()
}
