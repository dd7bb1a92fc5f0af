//! Evaluation manager for heavy configurations.
//!
//! Requests wait in a buffer until a picker releases them (never later than
//! their deadline). Released requests are deduplicated, ordered by the
//! planner, and evaluated one heavy configuration at a time: switch the
//! system, tune the light parameters with a no-delay search, then benchmark
//! the combined configuration once more for the heavy reward.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Benchmark, EnvError};
use crate::mcts::{OptimizeFailure, SearchConfig, SearchError, Searcher, SearcherCache};
use crate::planner::{plan, CostMatrix, CostModel, PlanError, PlannerChoice};
use crate::space::{scaled_reward, Configuration, ConfigurationSpace, MdpSpec, SpaceError, DEFAULT_LIGHT_HORIZON};

pub const DEFAULT_LIGHT_BUDGET: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("size threshold {rho} exceeds the maximum delay {tau_max}")]
    ThresholdAboveDelay { rho: usize, tau_max: u64 },
    #[error("request issued at {issued_at} missed its deadline {deadline} (now {now})")]
    MissedDeadline { issued_at: u64, deadline: u64, now: u64 },
    #[error("request issued at {issued_at} has deadline {deadline}, beyond the maximum delay {tau_max}")]
    BadDeadline { issued_at: u64, deadline: u64, tau_max: u64 },
    #[error("light budget must be at least one evaluation")]
    ZeroLightBudget,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRequest {
    pub heavy_conf: Configuration,
    pub issued_at: u64,
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub heavy_conf: Configuration,
    pub light_conf: Configuration,
    pub raw: f64,
    pub reward: f64,
    pub issued_at: u64,
    pub resolved_at: u64,
}

/// A request whose evaluation failed; the search still needs an answer.
#[derive(Debug)]
pub struct EvalFailure {
    pub request: EvalRequest,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Picker {
    /// Release the whole buffer once it holds `rho` requests.
    Threshold { rho: usize },
    /// Optimal-stopping rule on reconfiguration savings, forced at deadlines.
    #[default]
    Secretary,
}

/// Largest savings seen per pending request (keyed by issue step).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SavingsLedger {
    max_seen: BTreeMap<u64, f64>,
    last: BTreeMap<u64, f64>,
}

impl SavingsLedger {
    pub fn max_seen(&self, issued_at: u64) -> f64 {
        self.max_seen.get(&issued_at).copied().unwrap_or(0.0)
    }

    pub fn last(&self, issued_at: u64) -> Option<f64> {
        self.last.get(&issued_at).copied()
    }

    fn observe(&mut self, issued_at: u64, s: f64) {
        let m = self.max_seen.entry(issued_at).or_insert(0.0);
        *m = m.max(s);
        self.last.insert(issued_at, s);
    }

    fn forget(&mut self, issued_at: u64) {
        self.max_seen.remove(&issued_at);
        self.last.remove(&issued_at);
    }
}

pub fn submit(buffer: &mut Vec<EvalRequest>, heavy_conf: Configuration, issued_at: u64, deadline: u64) {
    buffer.push(EvalRequest { heavy_conf, issued_at, deadline });
}

pub fn pick_threshold(buffer: &mut Vec<EvalRequest>, rho: usize, tau_max: u64) -> Result<Vec<EvalRequest>, EvalError> {
    if rho as u64 > tau_max {
        return Err(EvalError::ThresholdAboveDelay { rho, tau_max });
    }
    if !buffer.is_empty() && buffer.len() >= rho {
        Ok(std::mem::take(buffer))
    } else {
        Ok(Vec::new())
    }
}

/// Savings from evaluating `r` right after one of `picked` instead of
/// straight from the current system state.
pub fn cost_savings(r: &Configuration, picked: &[Configuration], model: &CostModel, current: &Configuration) -> f64 {
    let Some(best) = picked.iter().map(|p| model.switch_cost(p, r)).min_by(f64::total_cmp) else {
        return 0.0;
    };
    (model.switch_cost(current, r) - best).max(0.0)
}

/// Secretary picking with an arbitrary savings function
/// `savings(request, picked_so_far)`.
pub fn pick_secretary_with<F>(
    buffer: &mut Vec<EvalRequest>,
    ledger: &mut SavingsLedger,
    t: u64,
    delta: u64,
    mut savings: F,
) -> Vec<EvalRequest>
where
    F: FnMut(&EvalRequest, &[EvalRequest]) -> f64,
{
    let (mut picked, rest): (Vec<_>, Vec<_>) = std::mem::take(buffer).into_iter().partition(|r| t >= r.deadline);
    let window = delta as f64 / std::f64::consts::E;
    for r in rest {
        let s = savings(&r, &picked);
        let elapsed = t as f64 - (r.deadline as f64 - delta as f64);
        let take = elapsed >= window && s > ledger.max_seen(r.issued_at);
        ledger.observe(r.issued_at, s);
        if take {
            picked.push(r);
        } else {
            buffer.push(r);
        }
    }
    for r in &picked {
        ledger.forget(r.issued_at);
    }
    picked
}

pub fn pick_secretary(
    buffer: &mut Vec<EvalRequest>,
    ledger: &mut SavingsLedger,
    t: u64,
    delta: u64,
    model: &CostModel,
    current: &Configuration,
) -> Vec<EvalRequest> {
    pick_secretary_with(buffer, ledger, t, delta, |r, picked| {
        let confs: Vec<Configuration> = picked.iter().map(|p| p.heavy_conf.clone()).collect();
        cost_savings(&r.heavy_conf, &confs, model, current)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Light-parameter search step.
    Light,
    /// Benchmark of the tuned configuration that produces the heavy reward.
    Final,
}

/// One benchmark run performed by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub config: Configuration,
    pub raw: f64,
    pub reward: f64,
    pub phase: Phase,
    pub clock: f64,
    pub reconf_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub picker: Picker,
    pub planner: PlannerChoice,
    pub tau_max: u64,
    pub light_budget: usize,
    pub light_horizon: usize,
    pub light_search: SearchConfig,
    /// Cap on cached light searchers; `None` keeps all of them.
    pub cache_capacity: Option<usize>,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            picker: Picker::Secretary,
            planner: PlannerChoice::Auto,
            tau_max: 10,
            light_budget: DEFAULT_LIGHT_BUDGET,
            light_horizon: DEFAULT_LIGHT_HORIZON,
            light_search: SearchConfig::default(),
            cache_capacity: None,
            seed: 0,
        }
    }
}

/// Seed for an independent random stream derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Default)]
pub struct Received {
    pub results: Vec<EvalResult>,
    pub failures: Vec<EvalFailure>,
}

pub struct Evaluator {
    settings: EvalSettings,
    space: Arc<ConfigurationSpace>,
    model: CostModel,
    buffer: Vec<EvalRequest>,
    ledger: SavingsLedger,
    cache: SearcherCache,
    searchers_made: u64,
    default_raw: f64,
    log: Vec<EvalRecord>,
}

impl Evaluator {
    pub fn new(space: Arc<ConfigurationSpace>, settings: EvalSettings, default_raw: f64) -> Result<Self, EvalError> {
        if let Picker::Threshold { rho } = settings.picker {
            if rho as u64 > settings.tau_max {
                return Err(EvalError::ThresholdAboveDelay { rho, tau_max: settings.tau_max });
            }
        }
        if settings.light_budget == 0 {
            return Err(EvalError::ZeroLightBudget);
        }
        scaled_reward(default_raw, default_raw)?;
        Ok(Evaluator {
            model: CostModel::from_space(&space),
            cache: SearcherCache::new(settings.cache_capacity),
            settings,
            space,
            buffer: Vec::new(),
            ledger: SavingsLedger::default(),
            searchers_made: 0,
            default_raw,
            log: Vec::new(),
        })
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.model
    }

    pub fn buffer(&self) -> &[EvalRequest] {
        &self.buffer
    }

    pub fn ledger(&self) -> &SavingsLedger {
        &self.ledger
    }

    pub fn cache(&self) -> &SearcherCache {
        &self.cache
    }

    /// Benchmark runs since the last call.
    pub fn drain_log(&mut self) -> Vec<EvalRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn submit(&mut self, heavy_conf: Configuration, issued_at: u64, deadline: u64) -> Result<(), EvalError> {
        if deadline < issued_at || deadline - issued_at > self.settings.tau_max {
            return Err(EvalError::BadDeadline { issued_at, deadline, tau_max: self.settings.tau_max });
        }
        self.space.validate_config(&heavy_conf)?;
        submit(&mut self.buffer, self.space.heavy_projection(&heavy_conf), issued_at, deadline);
        Ok(())
    }

    fn pick(&mut self, t: u64, current: &Configuration) -> Result<Vec<EvalRequest>, EvalError> {
        match self.settings.picker {
            Picker::Threshold { rho } => pick_threshold(&mut self.buffer, rho, self.settings.tau_max),
            Picker::Secretary => {
                Ok(pick_secretary(&mut self.buffer, &mut self.ledger, t, self.settings.tau_max, &self.model, current))
            }
        }
    }

    /// Picks, orders and evaluates pending requests at iteration `t`.
    pub fn receive(&mut self, env: &mut dyn Benchmark, t: u64) -> Result<Received, EvalError> {
        if let Some(late) = self.buffer.iter().find(|r| r.deadline < t) {
            return Err(EvalError::MissedDeadline { issued_at: late.issued_at, deadline: late.deadline, now: t });
        }
        let picked = self.pick(t, &env.current().clone())?;
        let mut out = Received::default();
        if picked.is_empty() {
            return Ok(out);
        }
        let mut uniques: Vec<Configuration> = Vec::new();
        for r in &picked {
            if !uniques.contains(&r.heavy_conf) {
                uniques.push(r.heavy_conf.clone());
            }
        }
        let costs = CostMatrix::from_configs(env.current(), &uniques, &self.model);
        let order = plan(&costs, self.settings.planner)?;
        for &u in &order.order {
            let heavy = &uniques[u];
            let requests = picked.iter().filter(|r| r.heavy_conf == *heavy);
            match self.evaluate_heavy(env, heavy) {
                Ok((light_conf, raw, reward)) => out.results.extend(requests.map(|r| EvalResult {
                    heavy_conf: heavy.clone(),
                    light_conf: light_conf.clone(),
                    raw,
                    reward,
                    issued_at: r.issued_at,
                    resolved_at: t,
                })),
                Err(e) => {
                    let msg = e.to_string();
                    out.failures.extend(requests.map(|r| EvalFailure { request: r.clone(), error: msg.clone() }));
                }
            }
        }
        out.results.sort_by_key(|r| r.issued_at);
        out.failures.sort_by_key(|f| f.request.issued_at);
        Ok(out)
    }

    fn evaluate_heavy(
        &mut self,
        env: &mut dyn Benchmark,
        heavy: &Configuration,
    ) -> Result<(Configuration, f64, f64), EvalError> {
        env.reconfigure(heavy, &self.model)?;
        let light = self.optimize_light(env, heavy)?;
        let config = self.space.combine(heavy, &light);
        let raw = env.evaluate(&config)?;
        let reward = scaled_reward(raw, self.default_raw)?;
        self.log.push(EvalRecord {
            config,
            raw,
            reward,
            phase: Phase::Final,
            clock: env.clock(),
            reconf_cost: env.reconfiguration_cost(),
        });
        Ok((light, raw, reward))
    }

    /// Tunes the light parameters for `heavy` (already applied to `env`) with
    /// the cached searcher for that heavy configuration. Returns the best
    /// light configuration seen so far as a full configuration.
    pub fn optimize_light(
        &mut self,
        env: &mut dyn Benchmark,
        heavy: &Configuration,
    ) -> Result<Configuration, EvalError> {
        let mdp = MdpSpec::light(&self.space, heavy, self.settings.light_horizon)?;
        if self.space.legal_actions(&mdp, &mdp.start, 0).is_empty() {
            return Ok(mdp.start);
        }
        let space = self.space.clone();
        let search = self.settings.light_search.clone();
        let seed = derive_seed(self.settings.seed, self.searchers_made + 1);
        let made = &mut self.searchers_made;
        let searcher = self.cache.get_or_insert_with(heavy, || {
            *made += 1;
            Searcher::new(space, mdp, search, seed)
        })?;
        let default_raw = self.default_raw;
        let log = &mut self.log;
        let outcome = searcher.rl_optimize(self.settings.light_budget, |c| {
            let raw = env.evaluate(c)?;
            let reward = scaled_reward(raw, default_raw)?;
            log.push(EvalRecord {
                config: c.clone(),
                raw,
                reward,
                phase: Phase::Light,
                clock: env.clock(),
                reconf_cost: env.reconfiguration_cost(),
            });
            Ok::<_, EvalError>(reward)
        });
        match outcome {
            Ok(o) => Ok(o.best),
            Err(e) => Err(match e.kind {
                OptimizeFailure::Search(s) => s.into(),
                OptimizeFailure::Evaluate(ev) => ev,
            }),
        }
    }
}
