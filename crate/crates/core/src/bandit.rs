//! Delay-tolerant action scoring: UCB-V, EXP3, RAVE aggregates and HOO
//! B-values, plus the in-flight bookkeeping they share.
//!
//! Feedback for a choice made at iteration `i` may arrive at any iteration
//! `now` with `now - i <= tau_max`. Until then the choice sits in a
//! [`DelayBuffer`] and contributes nothing to the statistics.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("parent has {parent} visits but child has {child}")]
    InconsistentVisits { parent: u64, child: u64 },
    #[error("feedback for iteration {issued_at} arrived at {now}, past max delay {tau_max}")]
    PastDeadline { issued_at: u64, now: u64, tau_max: u64 },
    #[error("feedback for iteration {0} has no pending issue")]
    UnknownIssue(u64),
    #[error("issue step {issued_at} precedes previous issue step {last}")]
    IssueOrder { issued_at: u64, last: u64 },
    #[error("no probability recorded for iteration {0}")]
    MissingProbability(u64),
    #[error("choice probability {0} is not positive")]
    InvalidProbability(f64),
    #[error("empty action set")]
    NoActions,
    #[error("invalid bandit parameter: {0}")]
    BadParams(&'static str),
}

/// Running moments for one arm (a state/action edge of the search tree).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArmStats {
    pub visits: u64,
    pub mean: f64,
    pub m2: f64,
    pub rave_visits: u64,
    pub rave_mean: f64,
    pub rave_m2: f64,
}

fn welford(count: &mut u64, mean: &mut f64, m2: &mut f64, x: f64) {
    *count += 1;
    let delta = x - *mean;
    *mean += delta / *count as f64;
    *m2 += delta * (x - *mean);
}

impl ArmStats {
    pub fn record(&mut self, reward: f64) {
        welford(&mut self.visits, &mut self.mean, &mut self.m2, reward);
    }

    pub fn record_rave(&mut self, reward: f64) {
        welford(&mut self.rave_visits, &mut self.rave_mean, &mut self.rave_m2, reward);
    }

    /// Population variance `m2 / visits`, zero before the first visit.
    pub fn variance(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            (self.m2 / self.visits as f64).max(0.0)
        }
    }

    pub fn rave_variance(&self) -> f64 {
        if self.rave_visits == 0 {
            0.0
        } else {
            (self.rave_m2 / self.rave_visits as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditParams {
    /// Reward range constant of the UCB-V bonus.
    pub b: f64,
    /// Maximum number of iterations between a choice and its feedback.
    pub tau_max: u64,
    pub hoo_nu: f64,
    pub hoo_rho: f64,
    /// `None` picks `sqrt(ln K / (K T))` per node.
    pub exp3_eta: Option<f64>,
    pub rave_enabled: bool,
}

impl Default for BanditParams {
    fn default() -> Self {
        BanditParams { b: 3.0, tau_max: 10, hoo_nu: 1.0, hoo_rho: 0.5, exp3_eta: None, rave_enabled: false }
    }
}

impl BanditParams {
    pub fn validate(&self) -> Result<(), BanditError> {
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(BanditError::BadParams("b must be positive"));
        }
        if !(self.hoo_rho > 0.0 && self.hoo_rho < 1.0) {
            return Err(BanditError::BadParams("hoo_rho must lie in (0, 1)"));
        }
        if !(self.hoo_nu >= 0.0 && self.hoo_nu.is_finite()) {
            return Err(BanditError::BadParams("hoo_nu must be non-negative"));
        }
        if let Some(eta) = self.exp3_eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(BanditError::BadParams("exp3_eta must be positive"));
            }
        }
        Ok(())
    }
}

/// Delayed UCB-V index of a child arm.
///
/// `mean + sqrt(2.4 var ln(v_p) / v) + 3 b ln(v_p) / v`, computed from the
/// RAVE aggregates instead of the arm's own moments when RAVE is enabled.
/// Unvisited arms score `+inf`.
pub fn ucbv_score(child: &ArmStats, parent_visits: u64, params: &BanditParams) -> Result<f64, BanditError> {
    let (visits, mean, var) = if params.rave_enabled {
        (child.rave_visits, child.rave_mean, child.rave_variance())
    } else {
        (child.visits, child.mean, child.variance())
    };
    if visits == 0 {
        return Ok(f64::INFINITY);
    }
    if parent_visits < visits {
        return Err(BanditError::InconsistentVisits { parent: parent_visits, child: visits });
    }
    let v = visits as f64;
    let ln_p = (parent_visits as f64).ln();
    Ok(mean + (2.4 * var * ln_p / v).sqrt() + 3.0 * params.b * ln_p / v)
}

/// HOO B-value: the node's optimistic bound plus a depth-shrinking diameter
/// term, capped by the best child's B-value.
pub fn hoo_bvalue(node_score: f64, depth: usize, child_bvalues: &[f64], params: &BanditParams) -> f64 {
    let own = node_score + params.hoo_nu * params.hoo_rho.powi(depth as i32);
    let best_child = child_bvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if child_bvalues.is_empty() {
        own
    } else {
        own.min(best_child)
    }
}

/// Learning rate `sqrt(ln K / (K T))`, with `K` clamped to at least two.
pub fn default_exp3_eta(actions: usize, horizon: u64) -> f64 {
    let k = actions.max(2) as f64;
    (k.ln() / (k * horizon.max(1) as f64)).sqrt()
}

/// Softmax of `eta * weights`, stabilised by subtracting the largest exponent.
/// Every entry is strictly positive.
pub fn exp3_distribution(weights: &[f64], eta: f64) -> Result<Vec<f64>, BanditError> {
    if weights.is_empty() {
        return Err(BanditError::NoActions);
    }
    let top = weights.iter().map(|w| eta * w).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = weights.iter().map(|w| (eta * w - top).exp().max(f64::MIN_POSITIVE)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

/// Importance-weighted reward sums for one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exp3Stats {
    pub cum_weighted: Vec<f64>,
    /// Issue step -> (action, probability it was chosen with).
    pub recorded_probs: BTreeMap<u64, (usize, f64)>,
}

impl Exp3Stats {
    pub fn new(actions: usize) -> Self {
        Exp3Stats { cum_weighted: vec![0.0; actions], recorded_probs: BTreeMap::new() }
    }

    pub fn distribution(&self, eta: f64) -> Result<Vec<f64>, BanditError> {
        exp3_distribution(&self.cum_weighted, eta)
    }

    pub fn record_choice(&mut self, issued_at: u64, action: usize, prob: f64) {
        self.recorded_probs.insert(issued_at, (action, prob));
    }

    pub fn apply(&mut self, issued_at: u64, reward: f64) -> Result<(), BanditError> {
        let (action, prob) =
            self.recorded_probs.remove(&issued_at).ok_or(BanditError::MissingProbability(issued_at))?;
        if prob <= 0.0 {
            return Err(BanditError::MissingProbability(issued_at));
        }
        self.apply_choice(action, prob, reward)
    }

    /// Credits `reward` to `action`, weighted by the probability it was
    /// chosen with.
    pub fn apply_choice(&mut self, action: usize, prob: f64, reward: f64) -> Result<(), BanditError> {
        if prob <= 0.0 || !prob.is_finite() {
            return Err(BanditError::InvalidProbability(prob));
        }
        self.cum_weighted[action] += reward / prob;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pending<P> {
    pub path: P,
    pub issued_at: u64,
}

/// Choices whose rewards have not arrived yet, in issue order.
#[derive(Debug, Clone)]
pub struct DelayBuffer<P> {
    entries: VecDeque<Pending<P>>,
    last_issue: Option<u64>,
}

impl<P> Default for DelayBuffer<P> {
    fn default() -> Self {
        DelayBuffer { entries: VecDeque::new(), last_issue: None }
    }
}

impl<P> DelayBuffer<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pending<P>> {
        self.entries.iter()
    }

    pub fn record_issue(&mut self, path: P, issued_at: u64) -> Result<(), BanditError> {
        if let Some(last) = self.last_issue {
            if issued_at < last {
                return Err(BanditError::IssueOrder { issued_at, last });
            }
        }
        self.last_issue = Some(issued_at);
        self.entries.push_back(Pending { path, issued_at });
        Ok(())
    }

    /// Issue steps whose feedback can no longer arrive in time at `now`.
    pub fn overdue(&self, now: u64, tau_max: u64) -> Vec<u64> {
        self.entries.iter().filter(|e| now > e.issued_at + tau_max).map(|e| e.issued_at).collect()
    }

    fn take(&mut self, issued_at: u64) -> Option<P> {
        let pos = self.entries.iter().position(|e| e.issued_at == issued_at)?;
        self.entries.remove(pos).map(|e| e.path)
    }
}

/// Resolves pending entries and hands each `(path, issued_at, reward)` to
/// `sink`, in nondecreasing issue order.
///
/// All resolutions are checked before any statistic changes: one late or
/// unknown resolution rejects the whole batch.
pub fn apply_feedback<P, F>(
    buffer: &mut DelayBuffer<P>,
    resolutions: &[(u64, f64)],
    now: u64,
    tau_max: u64,
    mut sink: F,
) -> Result<(), BanditError>
where
    F: FnMut(&P, u64, f64) -> Result<(), BanditError>,
{
    let mut sorted = resolutions.to_vec();
    sorted.sort_by_key(|&(issued_at, _)| issued_at);
    let mut needed: BTreeMap<u64, usize> = BTreeMap::new();
    for &(issued_at, _) in &sorted {
        if issued_at > now || now - issued_at > tau_max {
            return Err(BanditError::PastDeadline { issued_at, now, tau_max });
        }
        *needed.entry(issued_at).or_default() += 1;
    }
    for (&issued_at, &count) in &needed {
        if buffer.entries.iter().filter(|e| e.issued_at == issued_at).count() < count {
            return Err(BanditError::UnknownIssue(issued_at));
        }
    }
    for (issued_at, reward) in sorted {
        let path = buffer.take(issued_at).expect("checked above");
        sink(&path, issued_at, reward)?;
    }
    Ok(())
}

/// Flat K-armed delayed UCB-V. The single-node special case of the tree
/// search, used for regret experiments.
#[derive(Debug, Clone)]
pub struct DelayedUcbV {
    arms: Vec<ArmStats>,
    buffer: DelayBuffer<usize>,
    params: BanditParams,
}

impl DelayedUcbV {
    pub fn new(arms: usize, params: BanditParams) -> Result<Self, BanditError> {
        if arms == 0 {
            return Err(BanditError::NoActions);
        }
        params.validate()?;
        Ok(DelayedUcbV { arms: vec![ArmStats::default(); arms], buffer: DelayBuffer::new(), params })
    }

    pub fn arms(&self) -> &[ArmStats] {
        &self.arms
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Picks the arm with the highest index (lowest id on ties) and parks it
    /// in the delay buffer.
    pub fn select(&mut self, now: u64) -> Result<usize, BanditError> {
        let parent: u64 = self.arms.iter().map(|a| a.visits).sum();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, arm) in self.arms.iter().enumerate() {
            let s = ucbv_score(arm, parent, &self.params)?;
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        self.buffer.record_issue(best, now)?;
        Ok(best)
    }

    pub fn feedback(&mut self, resolutions: &[(u64, f64)], now: u64) -> Result<(), BanditError> {
        let arms = &mut self.arms;
        let rave = self.params.rave_enabled;
        apply_feedback(&mut self.buffer, resolutions, now, self.params.tau_max, |&arm, _, r| {
            arms[arm].record(r);
            if rave {
                arms[arm].record_rave(r);
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: f64, var: f64, visits: u64) -> ArmStats {
        ArmStats { visits, mean, m2: var * visits as f64, ..Default::default() }
    }

    #[test]
    fn unvisited_scores_infinite() {
        let p = BanditParams::default();
        assert_eq!(ucbv_score(&ArmStats::default(), 0, &p).unwrap(), f64::INFINITY);
        assert_eq!(ucbv_score(&ArmStats::default(), 17, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ucbv_reference_value() {
        // 0.5 + sqrt(2.4 * 0.25 * ln 100 / 10) + 9 ln 100 / 10, evaluated with mpmath at 30 digits
        let expected = 5.170305344364975;
        let got = ucbv_score(&stats(0.5, 0.25, 10), 100, &BanditParams::default()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn ucbv_degenerate_bonus() {
        let p = BanditParams { b: 1e-300, ..Default::default() };
        let got = ucbv_score(&stats(0.75, 0.0, 40), 40, &p).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ucbv_rejects_inconsistent_parent() {
        let p = BanditParams::default();
        assert!(matches!(ucbv_score(&stats(0.1, 0.0, 3), 0, &p), Err(BanditError::InconsistentVisits { .. })));
        assert!(matches!(ucbv_score(&stats(0.1, 0.0, 3), 2, &p), Err(BanditError::InconsistentVisits { .. })));
    }

    #[test]
    fn ucbv_uses_rave_aggregates() {
        let p = BanditParams { rave_enabled: true, ..Default::default() };
        let mut s = stats(0.0, 0.0, 5);
        assert_eq!(ucbv_score(&s, 10, &p).unwrap(), f64::INFINITY);
        s.record_rave(1.0);
        s.record_rave(1.0);
        let expected = 1.0 + 9.0 * 10f64.ln() / 2.0;
        assert!((ucbv_score(&s, 10, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn hoo_examples() {
        let p = BanditParams { hoo_nu: 1.0, hoo_rho: 0.5, ..Default::default() };
        assert_eq!(hoo_bvalue(1.0, 2, &[], &p), 1.25);
        assert_eq!(hoo_bvalue(1.0, 2, &[0.8, 0.3], &p), 0.8);
        assert_eq!(hoo_bvalue(1.0, 2, &[f64::INFINITY, 0.3], &p), 1.25);
        assert_eq!(hoo_bvalue(f64::INFINITY, 1, &[f64::INFINITY], &p), f64::INFINITY);
    }

    #[test]
    fn exp3_examples() {
        let u = exp3_distribution(&[0.0; 4], 0.3).unwrap();
        assert!(u.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let eta = 0.7;
        let two = exp3_distribution(&[2f64.ln() / eta, 0.0], eta).unwrap();
        assert!((two[0] - 2.0 / 3.0).abs() < 1e-12 && (two[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(exp3_distribution(&[123.0], 1.0).unwrap(), vec![1.0]);
        assert_eq!(exp3_distribution(&[], 1.0), Err(BanditError::NoActions));
        let extreme = exp3_distribution(&[1e6, 0.0], 1.0).unwrap();
        assert!(extreme.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn exp3_stats_uses_recorded_probability() {
        let mut s = Exp3Stats::new(3);
        s.record_choice(4, 1, 0.25);
        s.apply(4, 0.5).unwrap();
        assert_eq!(s.cum_weighted, vec![0.0, 2.0, 0.0]);
        assert_eq!(s.apply(4, 0.5), Err(BanditError::MissingProbability(4)));
    }

    #[test]
    fn feedback_moments_small() {
        let mut b = DelayedUcbV::new(1, BanditParams { tau_max: 5, ..Default::default() }).unwrap();
        for t in 0..3 {
            b.select(t).unwrap();
        }
        b.feedback(&[(0, 1.0), (1, 0.0), (2, 1.0)], 3).unwrap();
        let a = &b.arms()[0];
        assert_eq!(a.visits, 3);
        assert!((a.mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.variance() - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn zero_delay_matches_immediate_update() {
        let mut delayed = DelayedUcbV::new(1, BanditParams { tau_max: 0, ..Default::default() }).unwrap();
        let mut direct = ArmStats::default();
        for (t, r) in [0.3, 0.9, 0.1].into_iter().enumerate() {
            delayed.select(t as u64).unwrap();
            delayed.feedback(&[(t as u64, r)], t as u64).unwrap();
            direct.record(r);
        }
        assert_eq!(delayed.arms()[0], direct);
    }

    #[test]
    fn late_feedback_rejected() {
        let mut b = DelayedUcbV::new(2, BanditParams { tau_max: 3, ..Default::default() }).unwrap();
        b.select(0).unwrap();
        assert_eq!(b.feedback(&[(0, 1.0)], 4), Err(BanditError::PastDeadline { issued_at: 0, now: 4, tau_max: 3 }));
        assert_eq!(b.pending(), 1);
        b.feedback(&[(0, 1.0)], 3).unwrap();
        assert_eq!(b.feedback(&[(0, 1.0)], 3), Err(BanditError::UnknownIssue(0)));
    }

    #[test]
    fn issue_order_enforced() {
        let mut buf = DelayBuffer::new();
        buf.record_issue((), 5).unwrap();
        buf.record_issue((), 5).unwrap();
        assert!(matches!(buf.record_issue((), 4), Err(BanditError::IssueOrder { .. })));
        assert_eq!(buf.overdue(9, 3), vec![5, 5]);
        assert!(buf.overdue(8, 3).is_empty());
    }

    #[test]
    fn feedback_drained_in_issue_order() {
        let mut buf = DelayBuffer::new();
        for t in 0..4u64 {
            buf.record_issue(t, t).unwrap();
        }
        let mut seen = Vec::new();
        apply_feedback(&mut buf, &[(3, 0.0), (1, 0.0), (2, 0.0)], 4, 10, |&p, _, _| {
            seen.push(p);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn welford_matches_batch_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..60);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut s = ArmStats::default();
            xs.iter().for_each(|&x| s.record(x));
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((s.mean - mean).abs() < 1e-10);
            assert!((s.variance() - var).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn ucbv_nonincreasing_in_visits(mean in -2.0..2.0f64, var in 0.0..4.0f64, v in 1u64..500, parent in 500u64..5000) {
            let p = BanditParams::default();
            let a = ucbv_score(&stats(mean, var, v), parent, &p).unwrap();
            let b = ucbv_score(&stats(mean, var, v + 1), parent, &p).unwrap();
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn exp3_normalised_and_equivariant(ws in prop::collection::vec(-50.0..50.0f64, 1..20), eta in 0.001..2.0f64, rot in 0usize..20) {
            let p = exp3_distribution(&ws, eta).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let k = rot % ws.len();
            let mut rotated = ws.clone();
            rotated.rotate_left(k);
            let q = exp3_distribution(&rotated, eta).unwrap();
            let mut p_rot = p.clone();
            p_rot.rotate_left(k);
            for (a, b) in p_rot.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn hoo_monotone_in_children(score in -5.0..5.0f64, depth in 0usize..10, kids in prop::collection::vec(-5.0..5.0f64, 1..6), idx in any::<prop::sample::Index>(), bump in 0.0..3.0f64) {
            let p = BanditParams::default();
            let before = hoo_bvalue(score, depth, &kids, &p);
            let mut raised = kids.clone();
            raised[idx.index(kids.len())] += bump;
            prop_assert!(hoo_bvalue(score, depth, &raised, &p) >= before);
        }
    }
}
