//! Ordering a batch of heavy configurations to minimise switching cost.
//!
//! Planners work on a [`CostMatrix`]: the cost of reaching each request from
//! the current database state plus all pairwise switch costs. Plan totals
//! include the initial hop; [`Plan::internal`] excludes it.

mod ilp;

pub use ilp::{build_ilp, parse_lp, Assignment, IlpError, IlpModel, LinearConstraint, Linking, Sense};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{Configuration, ConfigurationSpace, ParamKind};

/// Largest batch the exact planner accepts.
pub const EXACT_LIMIT: usize = 15;
/// Batches up to this size use the exact planner under [`PlannerChoice::Auto`].
pub const AUTO_EXACT_THRESHOLD: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cannot plan an empty batch")]
    Empty,
    #[error("exact planning supports at most {EXACT_LIMIT} requests, got {0}; use the greedy planner")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ChangeRule {
    /// Creating costs the cardinality proxy, dropping is free.
    Index {
        create: f64,
    },
    /// Any change needs a restart; several changes share one restart.
    Restart {
        cost: f64,
    },
    Flat {
        cost: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    rules: Vec<ChangeRule>,
}

impl CostModel {
    pub fn from_space(space: &ConfigurationSpace) -> Self {
        let rules = space
            .params()
            .iter()
            .map(|p| match p.kind {
                ParamKind::Index => ChangeRule::Index { create: p.cost_hint },
                ParamKind::RestartRequired => ChangeRule::Restart { cost: p.cost_hint },
                ParamKind::Runtime | ParamKind::QueryOrder => ChangeRule::Flat { cost: p.cost_hint },
            })
            .collect();
        CostModel { rules }
    }

    /// Cost of moving the system from `from` to `to`: index creations, one
    /// restart (the most expensive one required) and flat per-parameter costs.
    pub fn switch_cost(&self, from: &Configuration, to: &Configuration) -> f64 {
        let mut total = 0.0;
        let mut restart: f64 = 0.0;
        for (p, rule) in self.rules.iter().enumerate() {
            let (a, b) = (from.get(p), to.get(p));
            if a == b {
                continue;
            }
            match *rule {
                ChangeRule::Index { create } => {
                    if b > a {
                        total += create;
                    }
                }
                ChangeRule::Restart { cost } => restart = restart.max(cost),
                ChangeRule::Flat { cost } => total += cost,
            }
        }
        total + restart
    }
}

/// Switch costs for one batch: `start[j]` from the current state to request
/// `j`, `pair[i][j]` from request `i` to request `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub start: Vec<f64>,
    pub pair: Vec<Vec<f64>>,
}

impl CostMatrix {
    pub fn from_configs(current: &Configuration, requests: &[Configuration], model: &CostModel) -> Self {
        CostMatrix {
            start: requests.iter().map(|r| model.switch_cost(current, r)).collect(),
            pair: requests.iter().map(|a| requests.iter().map(|b| model.switch_cost(a, b)).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Evaluates an order, returning per-step costs (initial hop first).
    pub fn step_costs(&self, order: &[usize]) -> Vec<f64> {
        order
            .iter()
            .enumerate()
            .map(|(k, &j)| if k == 0 { self.start[j] } else { self.pair[order[k - 1]][j] })
            .collect()
    }

    pub fn plan_for(&self, order: Vec<usize>) -> Plan {
        let step_costs = self.step_costs(&order);
        let total = step_costs.iter().sum();
        let internal = step_costs.iter().skip(1).sum();
        Plan { order, step_costs, total, internal }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Request indices in evaluation order.
    pub order: Vec<usize>,
    pub step_costs: Vec<f64>,
    /// Sum of all step costs, including the initial hop.
    pub total: f64,
    /// Sum of switches between requests only.
    pub internal: f64,
}

impl Plan {
    pub fn steps<'a, T>(&self, requests: &'a [T]) -> Vec<&'a T> {
        self.order.iter().map(|&i| &requests[i]).collect()
    }

    pub fn is_permutation_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.order.len() == n && self.order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlannerChoice {
    Greedy,
    Exact,
    #[default]
    Auto,
}

impl std::str::FromStr for PlannerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(PlannerChoice::Greedy),
            "exact" => Ok(PlannerChoice::Exact),
            "auto" => Ok(PlannerChoice::Auto),
            other => Err(format!("unknown planner `{other}` (expected greedy, exact or auto)")),
        }
    }
}

/// Inserts requests one at a time, in input order, at the position with the
/// smallest marginal cost. Position 0 follows the current state.
pub fn plan_greedy(costs: &CostMatrix) -> Result<Plan, PlanError> {
    let n = costs.len();
    if n == 0 {
        return Err(PlanError::Empty);
    }
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let mut best_pos = 0;
        let mut best_cost = f64::INFINITY;
        for pos in 0..=order.len() {
            let into = if pos == 0 { costs.start[r] } else { costs.pair[order[pos - 1]][r] };
            let marginal = match order.get(pos) {
                Some(&next) => {
                    let bypass = if pos == 0 { costs.start[next] } else { costs.pair[order[pos - 1]][next] };
                    into + costs.pair[r][next] - bypass
                }
                None => into,
            };
            if marginal < best_cost {
                best_cost = marginal;
                best_pos = pos;
            }
        }
        order.insert(best_pos, r);
    }
    Ok(costs.plan_for(order))
}

/// Minimum-cost order by dynamic programming over subsets, starting from the
/// current state.
pub fn plan_exact(costs: &CostMatrix) -> Result<Plan, PlanError> {
    let n = costs.len();
    if n == 0 {
        return Err(PlanError::Empty);
    }
    if n > EXACT_LIMIT {
        return Err(PlanError::TooLarge(n));
    }
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    for j in 0..n {
        best[(1 << j) * n + j] = costs.start[j];
    }
    for mask in 1..full {
        for last in 0..n {
            let here = best[mask * n + last];
            if mask & (1 << last) == 0 || here == f64::INFINITY {
                continue;
            }
            for next in 0..n {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let m2 = mask | (1 << next);
                let cand = here + costs.pair[last][next];
                if cand < best[m2 * n + next] {
                    best[m2 * n + next] = cand;
                    parent[m2 * n + next] = last;
                }
            }
        }
    }
    let mask = full - 1;
    let mut last = 0;
    for j in 1..n {
        if best[mask * n + j] < best[mask * n + last] {
            last = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut m = mask;
    let mut cur = last;
    loop {
        order.push(cur);
        let p = parent[m * n + cur];
        m &= !(1 << cur);
        if p == usize::MAX {
            break;
        }
        cur = p;
    }
    order.reverse();
    Ok(costs.plan_for(order))
}

pub fn plan(costs: &CostMatrix, choice: PlannerChoice) -> Result<Plan, PlanError> {
    match choice {
        PlannerChoice::Greedy => plan_greedy(costs),
        PlannerChoice::Exact => plan_exact(costs),
        PlannerChoice::Auto if costs.len() <= AUTO_EXACT_THRESHOLD => plan_exact(costs),
        PlannerChoice::Auto => plan_greedy(costs),
    }
}

/// Hamiltonian-path reduction: one request per vertex, switching along an
/// edge is free, any other switch costs 1. The start hop is free.
pub fn np_hardness_witness(adjacency: &[Vec<bool>]) -> CostMatrix {
    let n = adjacency.len();
    CostMatrix {
        start: vec![0.0; n],
        pair: (0..n).map(|i| (0..n).map(|j| if i == j || adjacency[i][j] { 0.0 } else { 1.0 }).collect()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParameterSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn worked_example() -> (ConfigurationSpace, Configuration, Vec<Configuration>) {
        let space = ConfigurationSpace::new(vec![
            ParameterSpec::index("idx_a", 20.0).unwrap(),
            ParameterSpec::index("idx_b", 20.0).unwrap(),
            ParameterSpec::new(
                "work_mem",
                ParamKind::RestartRequired,
                vec!["8MB".into(), "12MB".into(), "16MB".into()],
                0,
                10.0,
            )
            .unwrap(),
        ])
        .unwrap();
        let c = |v: [usize; 3]| Configuration::new(v.to_vec());
        (space, c([0, 0, 0]), vec![c([1, 1, 2]), c([0, 0, 1]), c([0, 1, 2])])
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_min(costs: &CostMatrix) -> f64 {
        permutations(costs.len())
            .into_iter()
            .map(|o| costs.step_costs(&o).iter().sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn switch_cost_examples() {
        let (space, _, _) = worked_example();
        let m = CostModel::from_space(&space);
        let c = |v: [usize; 3]| Configuration::new(v.to_vec());
        assert_eq!(m.switch_cost(&c([0, 0, 0]), &c([0, 0, 1])), 10.0);
        assert_eq!(m.switch_cost(&c([0, 0, 1]), &c([0, 1, 2])), 30.0);
        assert_eq!(m.switch_cost(&c([1, 1, 2]), &c([1, 1, 2])), 0.0);
        // drops are free, creation is not
        assert_eq!(m.switch_cost(&c([1, 1, 0]), &c([0, 0, 0])), 0.0);
        assert_eq!(m.switch_cost(&c([0, 0, 0]), &c([1, 1, 0])), 40.0);
    }

    #[test]
    fn worked_example_totals() {
        let (space, cur, reqs) = worked_example();
        let costs = CostMatrix::from_configs(&cur, &reqs, &CostModel::from_space(&space));
        assert_eq!(costs.plan_for(vec![0, 1, 2]).total, 90.0);
        let g = plan_greedy(&costs).unwrap();
        assert_eq!(g.total, 60.0);
        assert_eq!(g.order, vec![1, 2, 0]);
        let e = plan_exact(&costs).unwrap();
        assert_eq!(e.total, 60.0);
        let optimal: Vec<Vec<usize>> =
            permutations(3).into_iter().filter(|o| costs.plan_for(o.clone()).total == 60.0).collect();
        let mut expect = vec![vec![1, 2, 0], vec![1, 0, 2], vec![0, 2, 1], vec![2, 0, 1]];
        let mut got = optimal.clone();
        expect.sort();
        got.sort();
        assert_eq!(got, expect);
        assert!(optimal.contains(&e.order));
    }

    #[test]
    fn single_and_identical_requests() {
        let (space, cur, reqs) = worked_example();
        let model = CostModel::from_space(&space);
        let one = CostMatrix::from_configs(&cur, &reqs[..1], &model);
        assert_eq!(plan_greedy(&one).unwrap().total, model.switch_cost(&cur, &reqs[0]));
        let same = vec![reqs[2].clone(); 5];
        let costs = CostMatrix::from_configs(&cur, &same, &model);
        assert_eq!(plan_exact(&costs).unwrap().total, model.switch_cost(&cur, &reqs[2]));
        assert_eq!(plan_exact(&costs).unwrap().internal, 0.0);
    }

    #[test]
    fn size_limits() {
        let big = CostMatrix { start: vec![0.0; 16], pair: vec![vec![0.0; 16]; 16] };
        assert_eq!(plan_exact(&big), Err(PlanError::TooLarge(16)));
        let empty = CostMatrix { start: vec![], pair: vec![] };
        assert_eq!(plan_greedy(&empty), Err(PlanError::Empty));
        assert_eq!(plan(&big, PlannerChoice::Auto).unwrap().order.len(), 16);
    }

    #[test]
    fn exact_matches_enumeration_and_beats_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=7);
            let costs = CostMatrix {
                start: (0..n).map(|_| rng.random_range(0..50) as f64).collect(),
                pair: (0..n)
                    .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.random_range(0..50) as f64 }).collect())
                    .collect(),
            };
            let e = plan_exact(&costs).unwrap();
            let g = plan_greedy(&costs).unwrap();
            assert!(e.is_permutation_of(n) && g.is_permutation_of(n));
            assert_eq!(e.total, brute_min(&costs));
            assert!(g.total >= e.total);
        }
    }

    #[test]
    fn zero_costs_are_cheap() {
        let n = 400;
        let costs = CostMatrix { start: vec![0.0; n], pair: vec![vec![0.0; n]; n] };
        let g = plan(&costs, PlannerChoice::Auto).unwrap();
        assert_eq!(g.total, 0.0);
        assert!(g.is_permutation_of(n));
        let small = CostMatrix { start: vec![0.0; 12], pair: vec![vec![0.0; 12]; 12] };
        assert_eq!(plan(&small, PlannerChoice::Auto).unwrap().total, 0.0);
    }

    #[test]
    fn hamiltonian_witness_examples() {
        let graph = |n: usize, edges: &[(usize, usize)]| {
            let mut adj = vec![vec![false; n]; n];
            for &(a, b) in edges {
                adj[a][b] = true;
                adj[b][a] = true;
            }
            adj
        };
        let path = np_hardness_witness(&graph(4, &[(0, 1), (1, 2), (2, 3)]));
        assert_eq!(plan_exact(&path).unwrap().internal, 0.0);
        let star = np_hardness_witness(&graph(4, &[(0, 1), (0, 2), (0, 3)]));
        assert!(plan_exact(&star).unwrap().internal >= 1.0);
        assert_eq!(brute_min(&star), 1.0);
        let tri = np_hardness_witness(&graph(3, &[(0, 1), (1, 2), (0, 2)]));
        assert_eq!(plan_exact(&tri).unwrap().internal, 0.0);
    }
}
