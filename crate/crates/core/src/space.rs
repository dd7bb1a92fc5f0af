//! Tuning parameters, configurations and the episodic MDPs searched over them.
//!
//! Every [`Configuration`] is a full-length vector of domain indices. Heavy and
//! light "projections" are full vectors too: the projected-away half is pinned
//! to its defaults. This keeps a single key type for the search trees, the
//! planner and the benchmark backends.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard for reward normalisation when the default metric is close to zero.
pub const REWARD_EPSILON: f64 = 1.0;

pub const DEFAULT_HEAVY_HORIZON: usize = 4;
pub const DEFAULT_LIGHT_HORIZON: usize = 8;
pub const DEFAULT_ONE_LEVEL_HORIZON: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("parameter `{0}` has an empty value domain")]
    EmptyDomain(String),
    #[error("parameter `{name}`: default index {default} out of range for {len} values")]
    DefaultOutOfRange { name: String, default: usize, len: usize },
    #[error("index parameter `{0}` must have exactly two values (absent/present)")]
    IndexDomain(String),
    #[error("parameter `{0}` has a negative or non-finite cost hint")]
    BadCostHint(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("heavy/light split is not a partition of the parameter ids")]
    BadSplit,
    #[error("parameter id {0} out of range")]
    ParamOutOfRange(usize),
    #[error("value index {value} out of range for parameter {param} ({len} values)")]
    ValueOutOfRange { param: usize, value: usize, len: usize },
    #[error("action sets parameter {0} to its current value")]
    NoOpAction(usize),
    #[error("configuration has {got} entries, space has {expected} parameters")]
    LengthMismatch { got: usize, expected: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("non-finite benchmark value {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Binary create/drop decision for a physical index.
    Index,
    /// Server setting that only takes effect after a restart.
    RestartRequired,
    /// Setting that can be changed on a running system.
    Runtime,
    /// Position of a query inside a transaction template.
    QueryOrder,
}

impl ParamKind {
    pub fn is_heavy(self) -> bool {
        matches!(self, ParamKind::Index | ParamKind::RestartRequired)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub kind: ParamKind,
    pub domain: Vec<String>,
    pub default: usize,
    /// Indexed-table cardinality for indexes, a fixed switch cost otherwise.
    pub cost_hint: f64,
}

impl ParameterSpec {
    pub fn new(
        name: impl Into<String>,
        kind: ParamKind,
        domain: Vec<String>,
        default: usize,
        cost_hint: f64,
    ) -> Result<Self, SpaceError> {
        let p = ParameterSpec { name: name.into(), kind, domain, default, cost_hint };
        p.validate()?;
        Ok(p)
    }

    /// Index parameter with domain `[absent, present]`, defaulting to absent.
    pub fn index(name: impl Into<String>, cardinality: f64) -> Result<Self, SpaceError> {
        Self::new(name, ParamKind::Index, vec!["absent".into(), "present".into()], 0, cardinality)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.domain.is_empty() {
            return Err(SpaceError::EmptyDomain(self.name.clone()));
        }
        if self.default >= self.domain.len() {
            return Err(SpaceError::DefaultOutOfRange {
                name: self.name.clone(),
                default: self.default,
                len: self.domain.len(),
            });
        }
        if self.kind == ParamKind::Index && self.domain.len() != 2 {
            return Err(SpaceError::IndexDomain(self.name.clone()));
        }
        if !(self.cost_hint.is_finite() && self.cost_hint >= 0.0) {
            return Err(SpaceError::BadCostHint(self.name.clone()));
        }
        Ok(())
    }
}

/// Index and restart-bound parameters are heavy, everything else is light.
pub fn split_parameters(params: &[ParameterSpec]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    params.iter().enumerate().fold((BTreeSet::new(), BTreeSet::new()), |(mut heavy, mut light), (id, p)| {
        if p.kind.is_heavy() {
            heavy.insert(id);
        } else {
            light.insert(id);
        }
        (heavy, light)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Configuration {
    values: Vec<usize>,
}

impl Configuration {
    pub fn new(values: Vec<usize>) -> Self {
        Configuration { values }
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn get(&self, param: usize) -> usize {
        self.values[param]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn set(&mut self, param: usize, value: usize) {
        self.values[param] = value;
    }
}

impl fmt::Display for Configuration {
    /// Compact `a-b-c` rendering used in traces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action {
    pub param: usize,
    pub value: usize,
}

impl Action {
    pub fn new(param: usize, value: usize) -> Self {
        Action { param, value }
    }
}

pub type ConstraintFn = dyn Fn(&Configuration) -> bool + Send + Sync;

#[derive(Clone)]
pub struct ConfigurationSpace {
    params: Vec<ParameterSpec>,
    heavy: BTreeSet<usize>,
    light: BTreeSet<usize>,
    constraint: Option<Arc<ConstraintFn>>,
}

impl fmt::Debug for ConfigurationSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConfigurationSpace")
            .field("params", &self.params)
            .field("heavy", &self.heavy)
            .field("light", &self.light)
            .field("constrained", &self.constraint.is_some())
            .finish()
    }
}

impl ConfigurationSpace {
    /// Builds a space and classifies parameters with [`split_parameters`].
    pub fn new(params: Vec<ParameterSpec>) -> Result<Self, SpaceError> {
        let (heavy, light) = split_parameters(&params);
        Self::with_split(params, heavy, light)
    }

    pub fn with_split(
        params: Vec<ParameterSpec>,
        heavy: BTreeSet<usize>,
        light: BTreeSet<usize>,
    ) -> Result<Self, SpaceError> {
        let mut names = BTreeSet::new();
        for p in &params {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(SpaceError::DuplicateName(p.name.clone()));
            }
        }
        let n = params.len();
        if heavy.intersection(&light).next().is_some()
            || heavy.len() + light.len() != n
            || heavy.iter().chain(light.iter()).any(|&id| id >= n)
        {
            return Err(SpaceError::BadSplit);
        }
        Ok(ConfigurationSpace { params, heavy, light, constraint: None })
    }

    /// Installs a feasibility predicate; actions leading to rejected
    /// configurations are never offered.
    pub fn with_constraint(mut self, f: impl Fn(&Configuration) -> bool + Send + Sync + 'static) -> Self {
        self.constraint = Some(Arc::new(f));
        self
    }

    pub fn params(&self) -> &[ParameterSpec] {
        &self.params
    }

    pub fn param(&self, id: usize) -> &ParameterSpec {
        &self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn heavy_ids(&self) -> &BTreeSet<usize> {
        &self.heavy
    }

    pub fn light_ids(&self) -> &BTreeSet<usize> {
        &self.light
    }

    pub fn is_heavy(&self, id: usize) -> bool {
        self.heavy.contains(&id)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn default_config(&self) -> Configuration {
        Configuration::new(self.params.iter().map(|p| p.default).collect())
    }

    /// Number of configurations, saturating at `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        self.params.iter().fold(1u128, |acc, p| acc.saturating_mul(p.domain.len() as u128))
    }

    pub fn accepts(&self, config: &Configuration) -> bool {
        self.constraint.as_ref().is_none_or(|f| f(config))
    }

    pub fn validate_config(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.len() != self.params.len() {
            return Err(SpaceError::LengthMismatch { got: config.len(), expected: self.params.len() });
        }
        for (param, (&value, p)) in config.values().iter().zip(&self.params).enumerate() {
            if value >= p.domain.len() {
                return Err(SpaceError::ValueOutOfRange { param, value, len: p.domain.len() });
            }
        }
        Ok(())
    }

    pub fn apply_action(&self, config: &Configuration, action: Action) -> Result<Configuration, SpaceError> {
        let p = self.params.get(action.param).ok_or(SpaceError::ParamOutOfRange(action.param))?;
        if config.len() != self.params.len() {
            return Err(SpaceError::LengthMismatch { got: config.len(), expected: self.params.len() });
        }
        if action.value >= p.domain.len() {
            return Err(SpaceError::ValueOutOfRange { param: action.param, value: action.value, len: p.domain.len() });
        }
        if config.get(action.param) == action.value {
            return Err(SpaceError::NoOpAction(action.param));
        }
        let mut next = config.clone();
        next.set(action.param, action.value);
        Ok(next)
    }

    /// Heavy values of `config`, light values reset to their defaults.
    pub fn heavy_projection(&self, config: &Configuration) -> Configuration {
        let mut out = config.clone();
        for &id in &self.light {
            out.set(id, self.params[id].default);
        }
        out
    }

    /// Heavy values taken from `heavy`, light values from `light`.
    pub fn combine(&self, heavy: &Configuration, light: &Configuration) -> Configuration {
        let mut out = heavy.clone();
        for &id in &self.light {
            out.set(id, light.get(id));
        }
        out
    }

    fn level_ids<'a>(&'a self, level: &Level) -> Box<dyn Iterator<Item = usize> + 'a> {
        match level {
            Level::Heavy => Box::new(self.heavy.iter().copied()),
            Level::Light { .. } => Box::new(self.light.iter().copied()),
            Level::OneLevel => Box::new(0..self.params.len()),
        }
    }

    /// One action per (parameter of the MDP's level, alternative value), in
    /// parameter-then-value order. Empty once the horizon is reached.
    pub fn legal_actions(&self, mdp: &MdpSpec, state: &Configuration, steps_taken: usize) -> Vec<Action> {
        if steps_taken >= mdp.horizon {
            return Vec::new();
        }
        let mut out = Vec::new();
        for param in self.level_ids(&mdp.level) {
            let current = state.get(param);
            for value in 0..self.params[param].domain.len() {
                if value == current {
                    continue;
                }
                if self.constraint.is_some() {
                    let mut next = state.clone();
                    next.set(param, value);
                    if !self.accepts(&next) {
                        continue;
                    }
                }
                out.push(Action::new(param, value));
            }
        }
        out
    }

    /// Renders a configuration as `name=value` lines (LF-terminated).
    pub fn to_name_value(&self, config: &Configuration) -> String {
        let mut s = String::new();
        for (p, &v) in self.params.iter().zip(config.values()) {
            s.push_str(&p.name);
            s.push('=');
            s.push_str(&p.domain[v]);
            s.push('\n');
        }
        s
    }

    /// Every configuration of the space in lexicographic order.
    pub fn enumerate(&self) -> impl Iterator<Item = Configuration> + '_ {
        let sizes: Vec<usize> = self.params.iter().map(|p| p.domain.len()).collect();
        let total = self.cardinality();
        let mut current = vec![0usize; sizes.len()];
        let mut emitted: u128 = 0;
        std::iter::from_fn(move || {
            if emitted >= total {
                return None;
            }
            let out = Configuration::new(current.clone());
            emitted += 1;
            for i in (0..sizes.len()).rev() {
                current[i] += 1;
                if current[i] < sizes[i] {
                    break;
                }
                current[i] = 0;
            }
            Some(out)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level {
    Heavy,
    Light { heavy_context: Configuration },
    OneLevel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MdpSpec {
    pub level: Level,
    pub start: Configuration,
    pub horizon: usize,
}

impl MdpSpec {
    pub fn heavy(space: &ConfigurationSpace, horizon: usize) -> Result<Self, SpaceError> {
        Self::build(Level::Heavy, space.default_config(), horizon)
    }

    /// Light MDP whose start state pairs `heavy_context` with light defaults.
    pub fn light(
        space: &ConfigurationSpace,
        heavy_context: &Configuration,
        horizon: usize,
    ) -> Result<Self, SpaceError> {
        space.validate_config(heavy_context)?;
        let ctx = space.heavy_projection(heavy_context);
        Self::build(Level::Light { heavy_context: ctx.clone() }, ctx, horizon)
    }

    pub fn one_level(space: &ConfigurationSpace, horizon: usize) -> Result<Self, SpaceError> {
        Self::build(Level::OneLevel, space.default_config(), horizon)
    }

    fn build(level: Level, start: Configuration, horizon: usize) -> Result<Self, SpaceError> {
        if horizon == 0 {
            return Err(SpaceError::ZeroHorizon);
        }
        Ok(MdpSpec { level, start, horizon })
    }
}

/// Relative improvement of `raw` over the default configuration's metric.
pub fn scaled_reward(raw: f64, default_raw: f64) -> Result<f64, SpaceError> {
    if !raw.is_finite() {
        return Err(SpaceError::NonFinite(raw));
    }
    if !default_raw.is_finite() {
        return Err(SpaceError::NonFinite(default_raw));
    }
    Ok((raw - default_raw) / default_raw.abs().max(REWARD_EPSILON))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashSet, VecDeque};

    fn runtime(name: &str, n: usize) -> ParameterSpec {
        ParameterSpec::new(name, ParamKind::Runtime, (0..n).map(|i| i.to_string()).collect(), 0, 0.0).unwrap()
    }

    fn two_index_one_light() -> ConfigurationSpace {
        ConfigurationSpace::new(vec![
            ParameterSpec::index("i0", 10.0).unwrap(),
            ParameterSpec::index("i1", 10.0).unwrap(),
            runtime("mem", 3),
        ])
        .unwrap()
    }

    #[test]
    fn split_by_kind() {
        let params = vec![
            ParameterSpec::index("idx", 5.0).unwrap(),
            ParameterSpec::new("shared_buffers", ParamKind::RestartRequired, vec!["a".into(), "b".into()], 0, 10.0)
                .unwrap(),
            runtime("work_mem", 4),
            ParameterSpec::new("q_pos", ParamKind::QueryOrder, vec!["0".into(), "1".into()], 0, 0.0).unwrap(),
        ];
        let (heavy, light) = split_parameters(&params);
        assert_eq!(heavy.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(light.into_iter().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(ParameterSpec::new("x", ParamKind::Runtime, vec![], 0, 0.0), Err(SpaceError::EmptyDomain(_))));
        assert!(matches!(
            ParameterSpec::new("x", ParamKind::Runtime, vec!["a".into()], 1, 0.0),
            Err(SpaceError::DefaultOutOfRange { .. })
        ));
        assert!(matches!(
            ParameterSpec::new("x", ParamKind::Index, vec!["a".into(), "b".into(), "c".into()], 0, 1.0),
            Err(SpaceError::IndexDomain(_))
        ));
        assert!(matches!(
            ParameterSpec::new("x", ParamKind::Runtime, vec!["a".into()], 0, -1.0),
            Err(SpaceError::BadCostHint(_))
        ));
    }

    #[test]
    fn bad_split_rejected() {
        let params = vec![runtime("a", 2), runtime("b", 2)];
        let heavy: BTreeSet<usize> = [0].into();
        let light: BTreeSet<usize> = [0, 1].into();
        assert_eq!(ConfigurationSpace::with_split(params, heavy, light).unwrap_err(), SpaceError::BadSplit);
    }

    #[test]
    fn apply_action_examples() {
        let space = two_index_one_light();
        let c = Configuration::new(vec![0, 0, 2]);
        let next = space.apply_action(&c, Action::new(0, 1)).unwrap();
        assert_eq!(next.values(), &[1, 0, 2]);
        let back = space.apply_action(&next, Action::new(0, 0)).unwrap();
        assert_eq!(back, c);
        assert!(matches!(space.apply_action(&c, Action::new(2, 3)), Err(SpaceError::ValueOutOfRange { .. })));
        assert_eq!(space.apply_action(&c, Action::new(5, 0)), Err(SpaceError::ParamOutOfRange(5)));
        assert_eq!(space.apply_action(&c, Action::new(2, 2)), Err(SpaceError::NoOpAction(2)));
    }

    #[test]
    fn legal_actions_examples() {
        let space = two_index_one_light();
        let heavy = MdpSpec::heavy(&space, 4).unwrap();
        let start = space.default_config();
        assert_eq!(space.legal_actions(&heavy, &start, 0), vec![Action::new(0, 1), Action::new(1, 1)]);
        assert!(space.legal_actions(&heavy, &start, 4).is_empty());

        let three_by_four = ConfigurationSpace::new(vec![runtime("a", 4), runtime("b", 4), runtime("c", 4)]).unwrap();
        let one = MdpSpec::one_level(&three_by_four, 12).unwrap();
        assert_eq!(three_by_four.legal_actions(&one, &three_by_four.default_config(), 0).len(), 9);

        let light = MdpSpec::light(&space, &Configuration::new(vec![1, 0, 1]), 8).unwrap();
        assert_eq!(light.start.values(), &[1, 0, 0]);
        let acts = space.legal_actions(&light, &light.start, 0);
        assert!(acts.iter().all(|a| a.param == 2));
        assert_eq!(acts.len(), 2);
    }

    #[test]
    fn constraint_filters_actions() {
        // at most one index at a time
        let space = two_index_one_light().with_constraint(|c| c.get(0) + c.get(1) <= 1);
        let heavy = MdpSpec::heavy(&space, 4).unwrap();
        let s = Configuration::new(vec![1, 0, 0]);
        assert_eq!(space.legal_actions(&heavy, &s, 1), vec![Action::new(0, 0)]);
    }

    #[test]
    fn scaled_reward_examples() {
        assert_eq!(scaled_reward(2335.0, 2335.0).unwrap(), 0.0);
        let r = scaled_reward(5424.0, 2335.0).unwrap();
        assert!((r - 1.322912205567452).abs() < 1e-9);
        assert_eq!(scaled_reward(0.5, 0.0).unwrap(), 0.5);
        assert!(matches!(scaled_reward(f64::NAN, 1.0), Err(SpaceError::NonFinite(_))));
        assert!(matches!(scaled_reward(f64::INFINITY, 1.0), Err(SpaceError::NonFinite(_))));
    }

    #[test]
    fn enumerate_covers_space() {
        let space = two_index_one_light();
        let all: Vec<_> = space.enumerate().collect();
        assert_eq!(all.len(), 12);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 12);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn heavy_reachability_bounded_by_horizon() {
        let space = ConfigurationSpace::new(vec![
            ParameterSpec::index("a", 1.0).unwrap(),
            ParameterSpec::index("b", 1.0).unwrap(),
            ParameterSpec::new("r", ParamKind::RestartRequired, vec!["x".into(), "y".into(), "z".into()], 0, 1.0)
                .unwrap(),
            runtime("l", 3),
        ])
        .unwrap();
        for h in 1..=4 {
            let mdp = MdpSpec::heavy(&space, h).unwrap();
            let mut queue = VecDeque::from([(mdp.start.clone(), 0usize)]);
            let mut seen = HashSet::new();
            while let Some((s, d)) = queue.pop_front() {
                let diff = s.values().iter().zip(mdp.start.values()).filter(|(a, b)| a != b).count();
                assert!(diff <= d && d <= h);
                assert_eq!(s.get(3), 0, "light parameter moved in heavy MDP");
                for a in space.legal_actions(&mdp, &s, d) {
                    let n = space.apply_action(&s, a).unwrap();
                    if seen.insert((n.clone(), d + 1)) {
                        queue.push_back((n, d + 1));
                    }
                }
            }
        }
    }

    fn arb_space() -> impl Strategy<Value = ConfigurationSpace> {
        prop::collection::vec((0u8..4, 1usize..5), 1..200).prop_map(|specs| {
            let params = specs
                .into_iter()
                .enumerate()
                .map(|(i, (k, n))| {
                    let kind = match k {
                        0 => ParamKind::Index,
                        1 => ParamKind::RestartRequired,
                        2 => ParamKind::Runtime,
                        _ => ParamKind::QueryOrder,
                    };
                    let n = if kind == ParamKind::Index { 2 } else { n };
                    ParameterSpec::new(format!("p{i}"), kind, (0..n).map(|v| v.to_string()).collect(), 0, 1.0).unwrap()
                })
                .collect();
            ConfigurationSpace::new(params).unwrap()
        })
    }

    proptest! {
        #[test]
        fn split_is_partition(space in arb_space()) {
            let n = space.len();
            for id in 0..n {
                prop_assert!(space.heavy_ids().contains(&id) ^ space.light_ids().contains(&id));
            }
            prop_assert_eq!(space.heavy_ids().len() + space.light_ids().len(), n);
        }

        #[test]
        fn light_actions_never_touch_heavy(space in arb_space(), seed in any::<u64>()) {
            let ctx: Vec<usize> = space.params().iter().enumerate()
                .map(|(i, p)| (seed as usize).wrapping_add(i) % p.domain.len()).collect();
            let mdp = MdpSpec::light(&space, &Configuration::new(ctx), 8).unwrap();
            for a in space.legal_actions(&mdp, &mdp.start, 0) {
                prop_assert!(space.light_ids().contains(&a.param));
            }
        }

        #[test]
        fn apply_revert_identity(space in arb_space(), pick in any::<prop::sample::Index>()) {
            let mdp = MdpSpec::one_level(&space, 12).unwrap();
            let start = space.default_config();
            let actions = space.legal_actions(&mdp, &start, 0);
            prop_assume!(!actions.is_empty());
            let a = actions[pick.index(actions.len())];
            let next = space.apply_action(&start, a).unwrap();
            prop_assert_eq!(next.len(), start.len());
            let back = space.apply_action(&next, Action::new(a.param, start.get(a.param))).unwrap();
            prop_assert_eq!(back, start);
        }
    }
}
