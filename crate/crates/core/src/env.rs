//! Benchmark backends: a seeded simulator and an external-script protocol.

use std::io::{Read, Write as _};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::planner::CostModel;
use crate::space::{Configuration, ConfigurationSpace, ParamKind, ParameterSpec, SpaceError};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("benchmark command exited with {code:?}: {stderr}")]
    Failed { code: Option<i32>, stderr: String },
    #[error("benchmark output is not a number: `{0}`")]
    NonNumeric(String),
    #[error("benchmark timed out after {0:?}")]
    Timeout(Duration),
    #[error("cannot run benchmark command: {0}")]
    Io(#[from] std::io::Error),
    #[error("system is configured as {current}, asked to evaluate {requested}")]
    NotConfigured { current: Configuration, requested: Configuration },
    #[error("simulator: {0}")]
    Sim(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// A system that can be reconfigured and benchmarked.
pub trait Benchmark {
    fn space(&self) -> &Arc<ConfigurationSpace>;

    /// Measures `config`. Its heavy values must match the current system state.
    fn evaluate(&mut self, config: &Configuration) -> Result<f64, EnvError>;

    /// Switches the system's heavy state to that of `to`; returns the cost
    /// charged.
    fn reconfigure(&mut self, to: &Configuration, model: &CostModel) -> Result<f64, EnvError>;

    /// Current heavy state (light values at their defaults).
    fn current(&self) -> &Configuration;

    /// Elapsed time in the backend's units.
    fn clock(&self) -> f64;

    /// Sum of all reconfiguration costs charged so far.
    fn reconfiguration_cost(&self) -> f64;

    /// Noise-free metric, when the backend knows it.
    fn expected(&self, _config: &Configuration) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub heavy: usize,
    pub light: usize,
    /// `table[heavy_value][light_value]`
    pub table: Vec<Vec<f64>>,
}

/// Additive synthetic benchmark with heavy x light interactions and Gaussian
/// noise, advancing a simulated clock.
#[derive(Debug, Clone)]
pub struct SimEnv {
    space: Arc<ConfigurationSpace>,
    seed: u64,
    base: f64,
    main: Vec<Vec<f64>>,
    interactions: Vec<Interaction>,
    noise_sigma: f64,
    eval_time: f64,
    heavy_switch_time: f64,
    clock: f64,
    reconf: f64,
    current: Configuration,
    rng: ChaCha8Rng,
}

impl SimEnv {
    pub fn new(
        space: Arc<ConfigurationSpace>,
        base: f64,
        main: Vec<Vec<f64>>,
        interactions: Vec<Interaction>,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        if main.len() != space.len() {
            return Err(EnvError::Sim(format!("{} main-effect tables for {} parameters", main.len(), space.len())));
        }
        for (p, table) in main.iter().enumerate() {
            if table.len() != space.param(p).domain.len() {
                return Err(EnvError::Sim(format!("main-effect table of `{}` has wrong length", space.param(p).name)));
            }
        }
        for it in &interactions {
            let ok = it.heavy < space.len()
                && it.light < space.len()
                && it.table.len() == space.param(it.heavy).domain.len()
                && it.table.iter().all(|row| row.len() == space.param(it.light).domain.len());
            if !ok {
                return Err(EnvError::Sim(format!("interaction {}x{} does not fit the space", it.heavy, it.light)));
            }
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(EnvError::Sim(format!("bad noise sigma {noise_sigma}")));
        }
        let current = space.default_config();
        Ok(SimEnv {
            space,
            seed,
            base,
            main,
            interactions,
            noise_sigma,
            eval_time: 1.0,
            heavy_switch_time: 1.0,
            clock: 0.0,
            reconf: 0.0,
            current,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Three index-like heavy parameters (creation costs 50, 80 and 120) and
    /// three light parameters with four values each. The best light setting
    /// depends on which indexes exist. Noise is 5% of the metric's range.
    pub fn desk(seed: u64) -> Self {
        let light = |name: &str| {
            ParameterSpec::new(name, ParamKind::Runtime, vec!["0".into(), "1".into(), "2".into(), "3".into()], 0, 0.0)
                .expect("valid light parameter")
        };
        let space = ConfigurationSpace::new(vec![
            ParameterSpec::index("idx_orders", 50.0).expect("valid"),
            ParameterSpec::index("idx_lineitem", 80.0).expect("valid"),
            ParameterSpec::index("idx_customer", 120.0).expect("valid"),
            light("work_mem"),
            light("join_order"),
            light("parallel_workers"),
        ])
        .expect("valid space");
        let main = vec![
            vec![0.0, 20.0],
            vec![0.0, 15.0],
            vec![0.0, 10.0],
            vec![0.0, 3.0, 5.0, 2.0],
            vec![0.0, 2.0, -1.0, 4.0],
            vec![0.0, -2.0, 1.0, 3.0],
        ];
        let interactions = vec![
            Interaction { heavy: 0, light: 3, table: vec![vec![0.0; 4], vec![0.0, 0.0, -6.0, 4.0]] },
            Interaction { heavy: 1, light: 4, table: vec![vec![0.0; 4], vec![0.0, 5.0, 0.0, -4.0]] },
            Interaction { heavy: 2, light: 5, table: vec![vec![0.0; 4], vec![0.0, 6.0, 0.0, 0.0]] },
        ];
        let base = 100.0;
        let mut env = SimEnv::new(Arc::new(space), base, main, interactions, 0.0, seed).expect("valid tables");
        let (lo, hi) = env
            .space
            .enumerate()
            .map(|c| env.table_value(&c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        env.noise_sigma = 0.05 * (hi - lo);
        env
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_times(mut self, eval_time: f64, heavy_switch_time: f64) -> Self {
        self.eval_time = eval_time;
        self.heavy_switch_time = heavy_switch_time;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn eval_time(&self) -> f64 {
        self.eval_time
    }

    fn table_value(&self, config: &Configuration) -> f64 {
        let mut v = self.base;
        for (p, table) in self.main.iter().enumerate() {
            v += table[config.get(p)];
        }
        for it in &self.interactions {
            v += it.table[config.get(it.heavy)][config.get(it.light)];
        }
        v
    }
}

impl Benchmark for SimEnv {
    fn space(&self) -> &Arc<ConfigurationSpace> {
        &self.space
    }

    fn evaluate(&mut self, config: &Configuration) -> Result<f64, EnvError> {
        self.space.validate_config(config)?;
        if self.space.heavy_projection(config) != self.current {
            return Err(EnvError::NotConfigured { current: self.current.clone(), requested: config.clone() });
        }
        let mut v = self.table_value(config);
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).map_err(|e| EnvError::Sim(e.to_string()))?;
            v += normal.sample(&mut self.rng);
        }
        self.clock += self.eval_time;
        Ok(v)
    }

    fn reconfigure(&mut self, to: &Configuration, model: &CostModel) -> Result<f64, EnvError> {
        self.space.validate_config(to)?;
        let target = self.space.heavy_projection(to);
        let cost = model.switch_cost(&self.current, &target) * self.heavy_switch_time;
        self.clock += cost;
        self.reconf += cost;
        self.current = target;
        Ok(cost)
    }

    fn current(&self) -> &Configuration {
        &self.current
    }

    fn clock(&self) -> f64 {
        self.clock
    }

    fn reconfiguration_cost(&self) -> f64 {
        self.reconf
    }

    fn expected(&self, config: &Configuration) -> Option<f64> {
        Some(self.table_value(config))
    }
}

/// Black-box benchmark run as external commands. The evaluate command gets
/// the path of a `name=value` file and prints the metric on its last line.
/// The optional reconfigure command gets the old and new configuration files.
/// An optional reload command (for example restoring a database snapshot)
/// runs before every `every`-th evaluation with the current configuration file.
#[derive(Debug)]
pub struct ScriptEnv {
    space: Arc<ConfigurationSpace>,
    evaluate_command: Vec<String>,
    reconfigure_command: Option<Vec<String>>,
    reload: Option<(Vec<String>, u64)>,
    evaluations: u64,
    timeout: Duration,
    current: Configuration,
    started: Instant,
    reconf: f64,
}

impl ScriptEnv {
    pub fn new(
        space: Arc<ConfigurationSpace>,
        evaluate_command: Vec<String>,
        reconfigure_command: Option<Vec<String>>,
        timeout: Duration,
    ) -> Result<Self, EnvError> {
        if evaluate_command.is_empty() {
            return Err(EnvError::Sim("empty evaluate command".into()));
        }
        if reconfigure_command.as_ref().is_some_and(|c| c.is_empty()) {
            return Err(EnvError::Sim("empty reconfigure command".into()));
        }
        let current = space.default_config();
        Ok(ScriptEnv {
            space,
            evaluate_command,
            reconfigure_command,
            reload: None,
            evaluations: 0,
            timeout,
            current,
            started: Instant::now(),
            reconf: 0.0,
        })
    }

    pub fn with_reload(mut self, command: Vec<String>, every: u64) -> Result<Self, EnvError> {
        if command.is_empty() || every == 0 {
            return Err(EnvError::Sim("reload needs a command and a positive period".into()));
        }
        self.reload = Some((command, every));
        Ok(self)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    fn write_config(&self, config: &Configuration) -> Result<tempfile::NamedTempFile, EnvError> {
        let mut file = tempfile::Builder::new().prefix("udo-config-").suffix(".conf").tempfile()?;
        file.write_all(self.space.to_name_value(config).as_bytes())?;
        file.flush()?;
        Ok(file)
    }

    fn run(&self, command: &[String], args: &[&std::path::Path]) -> Result<String, EnvError> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            stderr.read_to_string(&mut s).map(|_| s)
        });
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EnvError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let out = out_reader.join().expect("reader thread")?;
        let err = err_reader.join().expect("reader thread")?;
        if !status.success() {
            return Err(EnvError::Failed { code: status.code(), stderr: err.trim().to_string() });
        }
        Ok(out)
    }
}

/// Parses the metric from the last non-empty output line.
pub fn parse_metric(output: &str) -> Result<f64, EnvError> {
    let last = output.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    match last.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EnvError::NonNumeric(last.to_string())),
    }
}

impl Benchmark for ScriptEnv {
    fn space(&self) -> &Arc<ConfigurationSpace> {
        &self.space
    }

    fn evaluate(&mut self, config: &Configuration) -> Result<f64, EnvError> {
        self.space.validate_config(config)?;
        if self.space.heavy_projection(config) != self.current {
            return Err(EnvError::NotConfigured { current: self.current.clone(), requested: config.clone() });
        }
        let file = self.write_config(config)?;
        if let Some((cmd, every)) = &self.reload {
            if self.evaluations > 0 && self.evaluations.is_multiple_of(*every) {
                self.run(cmd, &[file.path()])?;
            }
        }
        self.evaluations += 1;
        let out = self.run(&self.evaluate_command, &[file.path()])?;
        parse_metric(&out)
    }

    fn reconfigure(&mut self, to: &Configuration, model: &CostModel) -> Result<f64, EnvError> {
        self.space.validate_config(to)?;
        let target = self.space.heavy_projection(to);
        if target == self.current {
            return Ok(0.0);
        }
        if let Some(cmd) = &self.reconfigure_command {
            let old = self.write_config(&self.current)?;
            let new = self.write_config(&target)?;
            self.run(cmd, &[old.path(), new.path()])?;
        }
        let cost = model.switch_cost(&self.current, &target);
        self.reconf += cost;
        self.current = target;
        Ok(cost)
    }

    fn current(&self) -> &Configuration {
        &self.current
    }

    fn clock(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn reconfiguration_cost(&self) -> f64 {
        self.reconf
    }
}

/// Combined time/space objective: `-disk_mb - sigma_weight * time_s`.
pub fn composite_metric(time_s: f64, disk_mb: f64, sigma_weight: f64) -> f64 {
    -disk_mb - sigma_weight * time_s
}
