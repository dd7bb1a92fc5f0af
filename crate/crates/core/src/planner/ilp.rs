//! Integer program for evaluation ordering, with LP-format export and a
//! parser for the same dialect.
//!
//! Variables: `e_t_r` is 1 when request `r` runs at slot `t`; `i_t_r1_r2` is
//! 1 when the switch `r1 -> r2` happens between slots `t` and `t+1`. All
//! indices are 1-based in variable names.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::CostMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IlpError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        }
    }

    fn holds(self, lhs: f64, rhs: f64) -> bool {
        const TOL: f64 = 1e-9;
        match self {
            Sense::Le => lhs <= rhs + TOL,
            Sense::Ge => lhs + TOL >= rhs,
            Sense::Eq => (lhs - rhs).abs() <= TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub name: String,
    pub terms: Vec<(String, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// How switch indicators are tied to slot assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linking {
    /// `i >= e_t^{r1} + e_{t+1}^{r2} - 1`: the indicator is forced to one
    /// exactly when both endpoints are scheduled.
    #[default]
    Tight,
    /// `i >= (e_t^{r1} + e_{t+1}^{r2}) / 2`: forces the indicator whenever
    /// either endpoint is scheduled, which overcounts switches. Kept for
    /// comparison only.
    Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlpModel {
    pub requests: usize,
    pub objective: Vec<(String, f64)>,
    pub constraints: Vec<LinearConstraint>,
    pub binaries: Vec<String>,
}

pub type Assignment = BTreeMap<String, f64>;

fn e_var(t: usize, r: usize) -> String {
    format!("e_{t}_{r}")
}

fn i_var(t: usize, r1: usize, r2: usize) -> String {
    format!("i_{t}_{r1}_{r2}")
}

/// Builds the ordering model over the pairwise costs of `costs` (the
/// initial hop is not part of the objective).
pub fn build_ilp(costs: &CostMatrix, linking: Linking) -> IlpModel {
    let n = costs.len();
    let mut objective = Vec::new();
    let mut constraints = Vec::new();
    let mut binaries = Vec::new();
    for t in 1..=n {
        for r in 1..=n {
            binaries.push(e_var(t, r));
        }
    }
    for t in 1..n {
        for r1 in 1..=n {
            for r2 in 1..=n {
                let v = i_var(t, r1, r2);
                objective.push((v.clone(), costs.pair[r1 - 1][r2 - 1]));
                binaries.push(v);
            }
        }
    }
    for t in 1..=n {
        constraints.push(LinearConstraint {
            name: format!("slot_{t}"),
            terms: (1..=n).map(|r| (e_var(t, r), 1.0)).collect(),
            sense: Sense::Eq,
            rhs: 1.0,
        });
    }
    for r in 1..=n {
        constraints.push(LinearConstraint {
            name: format!("once_{r}"),
            terms: (1..=n).map(|t| (e_var(t, r), 1.0)).collect(),
            sense: Sense::Eq,
            rhs: 1.0,
        });
    }
    for t in 1..n {
        for r1 in 1..=n {
            for r2 in 1..=n {
                let (w, rhs) = match linking {
                    Linking::Tight => (1.0, -1.0),
                    Linking::Averaged => (0.5, 0.0),
                };
                constraints.push(LinearConstraint {
                    name: format!("link_{t}_{r1}_{r2}"),
                    terms: vec![(i_var(t, r1, r2), 1.0), (e_var(t, r1), -w), (e_var(t + 1, r2), -w)],
                    sense: Sense::Ge,
                    rhs,
                });
            }
        }
    }
    IlpModel { requests: n, objective, constraints, binaries }
}

fn value(assign: &Assignment, var: &str) -> Result<f64, IlpError> {
    assign.get(var).copied().ok_or_else(|| IlpError::UnknownVariable(var.to_string()))
}

impl IlpModel {
    pub fn e_vars(&self) -> usize {
        self.binaries.iter().filter(|v| v.starts_with("e_")).count()
    }

    pub fn i_vars(&self) -> usize {
        self.binaries.iter().filter(|v| v.starts_with("i_")).count()
    }

    pub fn objective_value(&self, assign: &Assignment) -> Result<f64, IlpError> {
        self.objective.iter().try_fold(0.0, |acc, (v, c)| Ok(acc + c * value(assign, v)?))
    }

    pub fn is_feasible(&self, assign: &Assignment) -> Result<bool, IlpError> {
        for v in &self.binaries {
            let x = value(assign, v)?;
            if x != 0.0 && x != 1.0 {
                return Ok(false);
            }
        }
        for c in &self.constraints {
            let lhs = c.terms.iter().try_fold(0.0, |acc, (v, w)| Ok::<_, IlpError>(acc + w * value(assign, v)?))?;
            if !c.sense.holds(lhs, c.rhs) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Encodes `order` (0-based request indices) as slot assignments and sets
    /// every switch indicator to the smallest binary value its `>=`
    /// constraints allow.
    pub fn encode_order(&self, order: &[usize]) -> Assignment {
        let n = self.requests;
        let mut assign = Assignment::new();
        for t in 1..=n {
            for r in 1..=n {
                let on = order.get(t - 1) == Some(&(r - 1));
                assign.insert(e_var(t, r), if on { 1.0 } else { 0.0 });
            }
        }
        let mut lower: BTreeMap<&str, f64> = BTreeMap::new();
        for c in &self.constraints {
            if c.sense != Sense::Ge {
                continue;
            }
            let Some((var, coef)) = c.terms.iter().find(|(v, w)| v.starts_with("i_") && *w > 0.0) else {
                continue;
            };
            let rest: f64 =
                c.terms.iter().filter(|(v, _)| v != var).map(|(v, w)| w * assign.get(v).copied().unwrap_or(0.0)).sum();
            let bound = (c.rhs - rest) / coef;
            let slot = lower.entry(var.as_str()).or_insert(0.0);
            *slot = slot.max(bound);
        }
        for v in self.binaries.iter().filter(|v| v.starts_with("i_")) {
            let lb = lower.get(v.as_str()).copied().unwrap_or(0.0);
            assign.insert(v.clone(), if lb > 1e-9 { 1.0 } else { 0.0 });
        }
        assign
    }

    /// CPLEX LP text. Deterministic: variables appear in slot/request order.
    pub fn to_lp(&self) -> String {
        let mut s = String::new();
        writeln!(s, "\\ evaluation order for {} requests", self.requests).unwrap();
        writeln!(s, "Minimize").unwrap();
        writeln!(s, " obj:").unwrap();
        if self.objective.is_empty() {
            writeln!(s, "   0").unwrap();
        }
        for (v, c) in &self.objective {
            writeln!(s, "   {}", term(v, *c)).unwrap();
        }
        writeln!(s, "Subject To").unwrap();
        for c in &self.constraints {
            let terms: Vec<String> = c.terms.iter().map(|(v, w)| term(v, *w)).collect();
            writeln!(s, " {}: {} {} {}", c.name, terms.join(" "), c.sense.symbol(), c.rhs).unwrap();
        }
        writeln!(s, "Binaries").unwrap();
        for v in &self.binaries {
            writeln!(s, " {v}").unwrap();
        }
        writeln!(s, "End").unwrap();
        s
    }
}

fn term(var: &str, coef: f64) -> String {
    if coef < 0.0 {
        format!("- {} {var}", -coef)
    } else {
        format!("+ {coef} {var}")
    }
}

fn parse_terms(tokens: &[&str], line: usize) -> Result<Vec<(String, f64)>, IlpError> {
    let err = |msg: &str| IlpError::Parse { line, msg: msg.to_string() };
    if !tokens.len().is_multiple_of(3) {
        return Err(err("terms must be `sign coefficient variable` triples"));
    }
    tokens
        .chunks(3)
        .map(|ch| {
            let sign = match ch[0] {
                "+" => 1.0,
                "-" => -1.0,
                _ => return Err(err("expected `+` or `-`")),
            };
            let coef: f64 = ch[1].parse().map_err(|_| err("bad coefficient"))?;
            Ok((ch[2].to_string(), sign * coef))
        })
        .collect()
}

/// Parses the LP dialect written by [`IlpModel::to_lp`].
pub fn parse_lp(text: &str) -> Result<IlpModel, IlpError> {
    #[derive(PartialEq)]
    enum Section {
        Head,
        Objective,
        Constraints,
        Binaries,
        Done,
    }
    let mut section = Section::Head;
    let mut requests = None;
    let mut objective = Vec::new();
    let mut constraints = Vec::new();
    let mut binaries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('\\') {
            if let Some(n) = comment.trim().strip_prefix("evaluation order for ") {
                let n = n.trim_end_matches(" requests");
                requests = Some(n.parse().map_err(|_| IlpError::Parse { line, msg: "bad request count".into() })?);
            }
            continue;
        }
        match trimmed {
            "Minimize" => {
                section = Section::Objective;
                continue;
            }
            "Subject To" => {
                section = Section::Constraints;
                continue;
            }
            "Binaries" => {
                section = Section::Binaries;
                continue;
            }
            "End" => {
                section = Section::Done;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Objective => {
                if trimmed == "obj:" || trimmed == "0" {
                    continue;
                }
                let tokens: Vec<&str> = trimmed.split_whitespace().collect();
                objective.extend(parse_terms(&tokens, line)?);
            }
            Section::Constraints => {
                let (name, rest) = trimmed
                    .split_once(':')
                    .ok_or_else(|| IlpError::Parse { line, msg: "missing constraint name".into() })?;
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                if tokens.len() < 2 {
                    return Err(IlpError::Parse { line, msg: "truncated constraint".into() });
                }
                let rhs: f64 = tokens[tokens.len() - 1]
                    .parse()
                    .map_err(|_| IlpError::Parse { line, msg: "bad right-hand side".into() })?;
                let sense = match tokens[tokens.len() - 2] {
                    "<=" => Sense::Le,
                    ">=" => Sense::Ge,
                    "=" => Sense::Eq,
                    _ => return Err(IlpError::Parse { line, msg: "bad sense".into() }),
                };
                let terms = parse_terms(&tokens[..tokens.len() - 2], line)?;
                constraints.push(LinearConstraint { name: name.trim().to_string(), terms, sense, rhs });
            }
            Section::Binaries => binaries.push(trimmed.to_string()),
            Section::Head | Section::Done => {
                return Err(IlpError::Parse { line, msg: format!("unexpected `{trimmed}`") });
            }
        }
    }
    if section != Section::Done {
        return Err(IlpError::Parse { line: text.lines().count(), msg: "missing End".into() });
    }
    let requests =
        requests.unwrap_or_else(|| (binaries.iter().filter(|v| v.starts_with("e_")).count() as f64).sqrt() as usize);
    Ok(IlpModel { requests, objective, constraints, binaries })
}
