//! Run specifications: a TOML document resolved into a [`RunConfig`].

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::bandit::BanditParams;
use crate::env::{Benchmark, ScriptEnv, SimEnv};
use crate::evaluator::{Picker, DEFAULT_LIGHT_BUDGET};
use crate::mcts::{Policy, SearchConfig};
use crate::planner::{PlannerChoice, EXACT_LIMIT};
use crate::space::{
    ConfigurationSpace, ParameterSpec, DEFAULT_HEAVY_HORIZON, DEFAULT_LIGHT_HORIZON, DEFAULT_ONE_LEVEL_HORIZON,
};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed run spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid run spec: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> SpecError {
    SpecError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PickerKind {
    #[default]
    Secretary,
    Threshold,
}

/// Search settings for one level; unset fields take the level's defaults.
#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub policy: Option<Policy>,
    pub b: Option<f64>,
    pub horizon: Option<usize>,
    pub rave: Option<bool>,
    pub hoo_nu: Option<f64>,
    pub hoo_rho: Option<f64>,
    pub exp3_eta: Option<f64>,
    /// Light level only: evaluations per heavy configuration.
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    /// Main-loop iterations (heavy selections; evaluations for the one-level baseline).
    pub iterations: Option<u64>,
    /// Stop once the environment clock reaches this value.
    pub sim_time: Option<f64>,
    pub wallclock_secs: Option<f64>,
    /// Stop after this many iterations without a new best metric.
    pub no_improvement: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    /// Built-in desk-scale simulator.
    Sim { seed: Option<u64>, noise_sigma: Option<f64>, eval_time: Option<f64>, heavy_switch_time: Option<f64> },
    Script {
        evaluate: Vec<String>,
        reconfigure: Option<Vec<String>>,
        timeout_secs: Option<f64>,
        /// Run before every `reload_every`-th evaluation, e.g. to restore a snapshot.
        reload: Option<Vec<String>>,
        reload_every: Option<u64>,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Sim { seed: None, noise_sigma: None, eval_time: None, heavy_switch_time: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    /// Maximum delay between selecting a heavy configuration and its reward.
    pub tau: Option<u64>,
    #[serde(default)]
    pub picker: PickerKind,
    pub rho_pick: Option<usize>,
    #[serde(default)]
    pub planner: PlannerChoice,
    /// Tuning parameters; empty means the simulator's built-in space.
    #[serde(default)]
    pub params: Vec<ParameterSpec>,
    #[serde(default)]
    pub heavy: LevelSpec,
    #[serde(default)]
    pub light: LevelSpec,
    #[serde(default)]
    pub one_level: LevelSpec,
    #[serde(default)]
    pub budget: BudgetSpec,
    #[serde(default)]
    pub env: EnvSpec,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    pub search: SearchConfig,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Budget {
    pub iterations: Option<u64>,
    pub sim_time: Option<f64>,
    pub wallclock: Option<Duration>,
    pub no_improvement: Option<u64>,
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tau: u64,
    pub picker: Picker,
    pub planner: PlannerChoice,
    pub heavy: LevelConfig,
    pub light: LevelConfig,
    pub light_budget: usize,
    pub one_level: LevelConfig,
    pub budget: Budget,
}

impl RunConfig {
    /// Defaults: delay 10, secretary picking, automatic planner, horizons
    /// 4/8/12, light budget 16, 400 iterations.
    pub fn new(seed: u64) -> Self {
        RunSpec { seed, ..Default::default() }.resolve().expect("defaults are valid")
    }
}

pub const DEFAULT_TAU: u64 = 10;
pub const DEFAULT_RHO_PICK: usize = 20;
pub const DEFAULT_ITERATIONS: u64 = 400;

fn resolve_level(spec: &LevelSpec, horizon: usize, tau: u64, what: &str) -> Result<LevelConfig, SpecError> {
    let d = BanditParams::default();
    let params = BanditParams {
        b: spec.b.unwrap_or(d.b),
        tau_max: tau,
        hoo_nu: spec.hoo_nu.unwrap_or(d.hoo_nu),
        hoo_rho: spec.hoo_rho.unwrap_or(d.hoo_rho),
        exp3_eta: spec.exp3_eta.or(d.exp3_eta),
        rave_enabled: spec.rave.unwrap_or(d.rave_enabled),
    };
    params.validate().map_err(|e| invalid(format!("{what}: {e}")))?;
    let horizon = spec.horizon.unwrap_or(horizon);
    if horizon == 0 {
        return Err(invalid(format!("{what}: horizon must be at least 1")));
    }
    Ok(LevelConfig {
        search: SearchConfig { policy: spec.policy.unwrap_or_default(), params, ..SearchConfig::default() },
        horizon,
    })
}

impl RunSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Read { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn resolve(&self) -> Result<RunConfig, SpecError> {
        let tau = self.tau.unwrap_or(DEFAULT_TAU);
        let picker = match self.picker {
            PickerKind::Secretary => {
                if self.rho_pick.is_some() {
                    return Err(invalid("rho_pick only applies to the threshold picker"));
                }
                Picker::Secretary
            }
            PickerKind::Threshold => {
                let rho = self.rho_pick.unwrap_or(DEFAULT_RHO_PICK);
                if rho == 0 {
                    return Err(invalid("rho_pick must be at least 1"));
                }
                if rho as u64 > tau {
                    return Err(invalid(format!("rho_pick {rho} exceeds the maximum delay tau {tau}")));
                }
                Picker::Threshold { rho }
            }
        };
        if self.planner == PlannerChoice::Exact && tau as usize + 1 > EXACT_LIMIT {
            return Err(invalid(format!(
                "exact planning handles at most {EXACT_LIMIT} requests per batch; tau {tau} allows {}",
                tau + 1
            )));
        }
        if self.light.budget.is_some_and(|b| b == 0) {
            return Err(invalid("light budget must be at least 1"));
        }
        for (level, name) in [(&self.heavy, "heavy"), (&self.one_level, "one_level")] {
            if level.budget.is_some() {
                return Err(invalid(format!("{name}: budget is only meaningful for the light level")));
            }
        }
        let b = &self.budget;
        if b.iterations.is_none() && b.sim_time.is_none() && b.wallclock_secs.is_none() && b.no_improvement.is_some() {
            return Err(invalid("no_improvement needs another budget to bound the run"));
        }
        if b.iterations == Some(0) {
            return Err(invalid("iteration budget must be at least 1"));
        }
        for (v, name) in [(b.sim_time, "sim_time"), (b.wallclock_secs, "wallclock_secs")] {
            if v.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if b.no_improvement == Some(0) {
            return Err(invalid("no_improvement must be at least 1"));
        }
        let unbounded = b.iterations.is_none() && b.sim_time.is_none() && b.wallclock_secs.is_none();
        let budget = Budget {
            iterations: if unbounded { Some(DEFAULT_ITERATIONS) } else { b.iterations },
            sim_time: b.sim_time,
            wallclock: b.wallclock_secs.map(Duration::from_secs_f64),
            no_improvement: b.no_improvement,
        };
        Ok(RunConfig {
            seed: self.seed,
            tau,
            picker,
            planner: self.planner,
            heavy: resolve_level(&self.heavy, DEFAULT_HEAVY_HORIZON, tau, "heavy")?,
            light: resolve_level(&self.light, DEFAULT_LIGHT_HORIZON, 0, "light")?,
            light_budget: self.light.budget.unwrap_or(DEFAULT_LIGHT_BUDGET),
            one_level: resolve_level(&self.one_level, DEFAULT_ONE_LEVEL_HORIZON, 0, "one_level")?,
            budget,
        })
    }

    pub fn space(&self) -> Result<Arc<ConfigurationSpace>, SpecError> {
        if self.params.is_empty() {
            return match self.env {
                EnvSpec::Sim { .. } => Ok(SimEnv::desk(0).space().clone()),
                EnvSpec::Script { .. } => Err(invalid("a script environment needs explicit params")),
            };
        }
        if matches!(self.env, EnvSpec::Sim { .. }) {
            return Err(invalid("the simulator defines its own parameters; remove `params` or use a script env"));
        }
        ConfigurationSpace::new(self.params.clone()).map(Arc::new).map_err(|e| invalid(e.to_string()))
    }

    pub fn build_env(&self) -> Result<Box<dyn Benchmark>, SpecError> {
        let space = self.space()?;
        match &self.env {
            EnvSpec::Sim { seed, noise_sigma, eval_time, heavy_switch_time } => {
                let mut env = SimEnv::desk(seed.unwrap_or(self.seed));
                if let Some(s) = noise_sigma {
                    if !(*s >= 0.0 && s.is_finite()) {
                        return Err(invalid("noise_sigma must be non-negative"));
                    }
                    env = env.with_noise(*s);
                }
                let (e, h) = (eval_time.unwrap_or(1.0), heavy_switch_time.unwrap_or(1.0));
                if !(e >= 0.0 && e.is_finite() && h >= 0.0 && h.is_finite()) {
                    return Err(invalid("eval_time and heavy_switch_time must be non-negative"));
                }
                Ok(Box::new(env.with_times(e, h)))
            }
            EnvSpec::Script { evaluate, reconfigure, timeout_secs, reload, reload_every } => {
                let timeout = timeout_secs.unwrap_or(600.0);
                if !(timeout > 0.0 && timeout.is_finite()) {
                    return Err(invalid("timeout_secs must be positive"));
                }
                let mut env =
                    ScriptEnv::new(space, evaluate.clone(), reconfigure.clone(), Duration::from_secs_f64(timeout))
                        .map_err(|e| invalid(e.to_string()))?;
                match (reload, reload_every) {
                    (Some(cmd), every) => {
                        env = env.with_reload(cmd.clone(), every.unwrap_or(10)).map_err(|e| invalid(e.to_string()))?
                    }
                    (None, Some(_)) => return Err(invalid("reload_every needs a reload command")),
                    (None, None) => {}
                }
                Ok(Box::new(env))
            }
        }
    }
}
