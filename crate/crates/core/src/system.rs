//! Control systems, rollouts on scenario trees and the transition operator
//! on state distributions.
//!
//! Systems are scalar: states, controls and noise are real numbers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dissipativity::ComparisonFunction;
use crate::error::{Error, Result};
use crate::expr::{self, Expr, Var};
use crate::metrics::MetricKind;
use crate::rv::{
    leaf_count, AdaptedProcess, Atom, DiscreteDistribution, NoiseModel, ScenarioTree,
    DEFAULT_AGGREGATION_TOL,
};

/// Layers with at least this many nodes are evaluated in parallel.
const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// `x⁺ = (u − x)² + w`.
    PaperExample,
    /// `x⁺ = x + u·w`.
    CounterexampleMultiplicative,
}

impl Builtin {
    pub const ALL: [Builtin; 2] = [Builtin::PaperExample, Builtin::CounterexampleMultiplicative];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::PaperExample => "paper-example",
            Builtin::CounterexampleMultiplicative => "counterexample-multiplicative",
        }
    }

    pub fn from_name(name: &str) -> Option<Builtin> {
        Builtin::ALL.into_iter().find(|b| b.name() == name)
    }

    /// Hand-coded with the same operation order as the equivalent expression.
    pub fn eval(self, x: f64, u: f64, w: f64) -> f64 {
        match self {
            Builtin::PaperExample => {
                let d = u - x;
                d * d + w
            }
            Builtin::CounterexampleMultiplicative => x + u * w,
        }
    }

    pub fn expression(self) -> &'static str {
        match self {
            Builtin::PaperExample => "(u - x)^2 + w",
            Builtin::CounterexampleMultiplicative => "x + u * w",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Builtin(Builtin),
    Expr(Expr),
}

impl Dynamics {
    pub fn eval(&self, x: f64, u: f64, w: f64) -> Result<f64> {
        match self {
            Dynamics::Builtin(b) => Ok(b.eval(x, u, w)),
            Dynamics::Expr(e) => Ok(e.eval(x, u, w)?),
        }
    }
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Builtin(b) => f.write_str(b.name()),
            Dynamics::Expr(e) => write!(f, "{e}"),
        }
    }
}

impl FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Builtin::from_name(s.trim()) {
            Some(b) => Ok(Dynamics::Builtin(b)),
            None => Ok(Dynamics::Expr(expr::parse(s)?)),
        }
    }
}

impl Serialize for Dynamics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dynamics {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

fn identity_alpha() -> ComparisonFunction {
    ComparisonFunction::Identity
}

/// A law-invariant stage-cost term, evaluated on the joint law of `(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CostTerm {
    /// `c · E[g(x, u)]`.
    Expectation {
        #[serde(alias = "cost_integrand")]
        integrand: Expr,
        #[serde(default = "one")]
        coefficient: f64,
    },
    /// `c · (E[u])²`.
    MeanControlSquared {
        coefficient: f64,
    },
    /// `c · (E[x])²`.
    MeanStateSquared {
        coefficient: f64,
    },
    /// `c · α(d(P_x, target)^p)`.
    MetricToTarget {
        #[serde(default = "one")]
        coefficient: f64,
        #[serde(default = "one_u32")]
        power: u32,
        #[serde(default)]
        metric: MetricKind,
        #[serde(default = "identity_alpha")]
        alpha: ComparisonFunction,
        target: DiscreteDistribution,
    },
    Constant {
        value: f64,
    },
}

impl CostTerm {
    pub fn expectation(src: &str, coefficient: f64) -> Result<Self> {
        Ok(CostTerm::Expectation {
            integrand: expr::parse(src)?,
            coefficient,
        })
    }

    pub fn metric_to_target(target: DiscreteDistribution, metric: MetricKind) -> Self {
        CostTerm::MetricToTarget {
            coefficient: 1.0,
            power: 1,
            metric,
            alpha: ComparisonFunction::Identity,
            target,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |c: f64, what: &str| {
            if c.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "non-finite {what} in cost term"
                )))
            }
        };
        match self {
            CostTerm::Expectation {
                integrand,
                coefficient,
            } => {
                if integrand.uses(Var::W) {
                    return Err(Error::InvalidArgument(
                        "cost integrand may only depend on x and u".into(),
                    ));
                }
                finite(*coefficient, "coefficient")
            }
            CostTerm::MeanControlSquared { coefficient }
            | CostTerm::MeanStateSquared { coefficient } => finite(*coefficient, "coefficient"),
            CostTerm::MetricToTarget {
                coefficient,
                metric,
                alpha,
                target,
                power,
            } => {
                finite(*coefficient, "coefficient")?;
                metric.validate()?;
                alpha.validate()?;
                if *power == 0 {
                    return Err(Error::InvalidArgument(
                        "metric power must be positive".into(),
                    ));
                }
                if target.dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: target.dim(),
                    });
                }
                Ok(())
            }
            CostTerm::Constant { value } => finite(*value, "constant"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Constraint {
    #[default]
    None,
    Box {
        lo: f64,
        hi: f64,
    },
}

impl Constraint {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Constraint::None => (f64::NEG_INFINITY, f64::INFINITY),
            Constraint::Box { lo, hi } => (lo, hi),
        }
    }

    pub fn project(&self, u: f64) -> f64 {
        let (lo, hi) = self.bounds();
        u.clamp(lo, hi)
    }
}

/// Joint `(x, u)` law sorted by value with exact duplicates merged, so stage
/// costs depend on the law only and not on node order.
pub type JointLaw = Vec<(f64, f64, f64)>;

pub fn canonical_joint(xs: &[f64], us: &[f64], ps: &[f64]) -> JointLaw {
    let mut items: Vec<(f64, f64, f64)> = xs
        .iter()
        .zip(us)
        .zip(ps)
        .map(|((&x, &u), &p)| (x + 0.0, u + 0.0, p))
        .collect();
    items.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut out: JointLaw = Vec::with_capacity(items.len());
    for (x, u, p) in items {
        match out.last_mut() {
            Some(last) if last.0 == x && last.1 == u => last.2 += p,
            _ => out.push((x, u, p)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSystem {
    pub dynamics: Dynamics,
    pub cost: Vec<CostTerm>,
    pub noise: NoiseModel,
    #[serde(default)]
    pub constraint: Constraint,
}

impl ControlSystem {
    pub fn new(
        dynamics: Dynamics,
        cost: Vec<CostTerm>,
        noise: NoiseModel,
        constraint: Constraint,
    ) -> Result<Self> {
        let sys = ControlSystem {
            dynamics,
            cost,
            noise,
            constraint,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.noise.dim(),
            });
        }
        if let Constraint::Box { lo, hi } = self.constraint {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("empty box [{lo}, {hi}]")));
            }
        }
        self.cost.iter().try_for_each(CostTerm::validate)
    }

    pub fn paper_noise() -> NoiseModel {
        NoiseModel::scalar(&[(0.5, 0.2), (-0.125, 0.8)]).expect("valid noise")
    }

    /// `x⁺ = (u − x)² + w` with cost `E[(u − x)^4] + γ (E[u])²`.
    pub fn paper_example(gamma: f64) -> Self {
        Self::paper_example_with_noise(gamma, Self::paper_noise())
    }

    pub fn paper_example_with_noise(gamma: f64, noise: NoiseModel) -> Self {
        ControlSystem {
            dynamics: Dynamics::Builtin(Builtin::PaperExample),
            cost: vec![
                CostTerm::expectation("(u - x)^4", 1.0).expect("valid integrand"),
                CostTerm::MeanControlSquared { coefficient: gamma },
            ],
            noise,
            constraint: Constraint::None,
        }
    }

    pub fn symmetric_two_point() -> DiscreteDistribution {
        DiscreteDistribution::scalar(&[(-1.0, 0.5), (1.0, 0.5)]).expect("valid distribution")
    }

    /// `x⁺ = x + u·w` with cost `d(P_x, ρ*)`.
    pub fn counterexample(
        target: DiscreteDistribution,
        noise: NoiseModel,
        metric: MetricKind,
    ) -> Self {
        ControlSystem {
            dynamics: Dynamics::Builtin(Builtin::CounterexampleMultiplicative),
            cost: vec![CostTerm::metric_to_target(target, metric)],
            noise,
            constraint: Constraint::None,
        }
    }

    pub fn counterexample_default() -> Self {
        let noise = NoiseModel::scalar(&[(-1.0, 0.5), (1.0, 0.5)]).expect("valid noise");
        Self::counterexample(Self::symmetric_two_point(), noise, MetricKind::default())
    }

    /// Default system registered under a builtin name.
    pub fn builtin(b: Builtin, gamma: f64) -> Self {
        match b {
            Builtin::PaperExample => Self::paper_example(gamma),
            Builtin::CounterexampleMultiplicative => Self::counterexample_default(),
        }
    }

    pub fn step(&self, x: f64, u: f64, w: f64) -> Result<f64> {
        self.dynamics.eval(x, u, w)
    }

    /// Stage cost of the depth-`k` node values.
    pub fn stage_cost(&self, xs: &[f64], us: &[f64], ps: &[f64]) -> Result<f64> {
        self.stage_cost_joint(&canonical_joint(xs, us, ps))
    }

    pub fn stage_cost_joint(&self, joint: &[(f64, f64, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for term in &self.cost {
            total += self.term_value(term, joint)?;
        }
        Ok(total)
    }

    /// Stage cost of a joint law given as 2-dimensional `(x, u)` atoms.
    pub fn stage_cost_dist(&self, joint: &DiscreteDistribution) -> Result<f64> {
        if joint.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: joint.dim(),
            });
        }
        let xs: Vec<f64> = joint.atoms().iter().map(|a| a.value[0]).collect();
        let us: Vec<f64> = joint.atoms().iter().map(|a| a.value[1]).collect();
        let ps: Vec<f64> = joint.atoms().iter().map(|a| a.prob).collect();
        self.stage_cost(&xs, &us, &ps)
    }

    /// Stage cost of `(X, π(X))` for `X ~ dist`.
    pub fn policy_cost(&self, dist: &DiscreteDistribution, policy: &MarkovPolicy) -> Result<f64> {
        let xs: Vec<f64> = dist.atoms().iter().map(|a| a.value[0]).collect();
        let us = xs
            .iter()
            .map(|&x| policy.eval(x))
            .collect::<Result<Vec<_>>>()?;
        let ps: Vec<f64> = dist.atoms().iter().map(|a| a.prob).collect();
        self.stage_cost(&xs, &us, &ps)
    }

    pub(crate) fn term_value(&self, term: &CostTerm, joint: &[(f64, f64, f64)]) -> Result<f64> {
        Ok(match term {
            CostTerm::Expectation {
                integrand,
                coefficient,
            } => {
                let mut s = 0.0;
                for &(x, u, p) in joint {
                    s += p * integrand.eval(x, u, 0.0)?;
                }
                coefficient * s
            }
            CostTerm::MeanControlSquared { coefficient } => {
                let m: f64 = joint.iter().map(|&(_, u, p)| p * u).sum();
                coefficient * m * m
            }
            CostTerm::MeanStateSquared { coefficient } => {
                let m: f64 = joint.iter().map(|&(x, _, p)| p * x).sum();
                coefficient * m * m
            }
            CostTerm::MetricToTarget {
                coefficient,
                power,
                metric,
                alpha,
                target,
            } => {
                let marginal = DiscreteDistribution::from_weighted(
                    joint.iter().map(|&(x, _, p)| (vec![x], p)),
                    0.0,
                )?;
                let d = metric.distance(&marginal, target)?;
                coefficient * alpha.eval(d.powi(*power as i32))
            }
            CostTerm::Constant { value } => *value,
        })
    }
}

/// Feedback law `u = π(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkovPolicy {
    Identity,
    Expr(Expr),
    /// Nearest-key lookup; keys sorted and distinct.
    Table(Vec<(f64, f64)>),
}

impl MarkovPolicy {
    pub fn expr(src: &str) -> Result<Self> {
        let e = expr::parse(src)?;
        if e.uses(Var::U) || e.uses(Var::W) {
            return Err(Error::InvalidArgument(
                "policy expressions may only use x".into(),
            ));
        }
        Ok(MarkovPolicy::Expr(e))
    }

    pub fn table(mut entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty policy table".into()));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(
                "policy table keys must be distinct".into(),
            ));
        }
        Ok(MarkovPolicy::Table(entries))
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let u = match self {
            MarkovPolicy::Identity => x,
            MarkovPolicy::Expr(e) => e
                .eval(x, 0.0, 0.0)
                .map_err(|_| Error::PolicyUndefined(vec![x]))?,
            MarkovPolicy::Table(entries) => {
                let k = entries.partition_point(|(key, _)| *key < x);
                let below = k.checked_sub(1).map(|i| entries[i]);
                let above = entries.get(k).copied();
                match (below, above) {
                    (Some(b), Some(a)) => {
                        if x - b.0 <= a.0 - x {
                            b.1
                        } else {
                            a.1
                        }
                    }
                    (Some(b), None) => b.1,
                    (None, Some(a)) => a.1,
                    (None, None) => unreachable!("table is nonempty"),
                }
            }
        };
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::PolicyUndefined(vec![x]))
        }
    }
}

impl fmt::Display for MarkovPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarkovPolicy::Identity => f.write_str("identity"),
            MarkovPolicy::Expr(e) => write!(f, "{e}"),
            MarkovPolicy::Table(entries) => {
                f.write_str("table:")?;
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for MarkovPolicy {
    type Err = Error;

    /// `identity`, `table:x1=u1,x2=u2,...` or an expression in `x`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(MarkovPolicy::Identity);
        }
        if let Some(rest) = s.strip_prefix("table:") {
            let entries = rest
                .split(',')
                .map(|kv| {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::InvalidArgument(format!("bad table entry {kv:?}")))?;
                    let parse = |t: &str| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidArgument(format!("bad table entry {kv:?}")))
                    };
                    Ok((parse(k)?, parse(v)?))
                })
                .collect::<Result<Vec<_>>>()?;
            return MarkovPolicy::table(entries);
        }
        MarkovPolicy::expr(s)
    }
}

impl Serialize for MarkovPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MarkovPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Initial state: a deterministic value or a distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Value(f64),
    Distribution(DiscreteDistribution),
}

impl InitialState {
    pub fn to_distribution(&self) -> DiscreteDistribution {
        match self {
            InitialState::Value(v) => DiscreteDistribution::point(vec![*v]),
            InitialState::Distribution(d) => d.clone(),
        }
    }
}

impl From<f64> for InitialState {
    fn from(v: f64) -> Self {
        InitialState::Value(v)
    }
}

impl From<DiscreteDistribution> for InitialState {
    fn from(d: DiscreteDistribution) -> Self {
        InitialState::Distribution(d)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InitialRepr {
    Scalar(f64),
    Vector(Vec<f64>),
    Dist(Vec<Atom>),
}

impl<'de> Deserialize<'de> for InitialState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match InitialRepr::deserialize(d)? {
            InitialRepr::Scalar(v) => Ok(InitialState::Value(v)),
            InitialRepr::Vector(v) if v.len() == 1 => Ok(InitialState::Value(v[0])),
            InitialRepr::Vector(v) => Err(D::Error::custom(format!(
                "initial state must be scalar, got {} components",
                v.len()
            ))),
            InitialRepr::Dist(atoms) => DiscreteDistribution::new(atoms)
                .map(InitialState::Distribution)
                .map_err(D::Error::custom),
        }
    }
}

impl Serialize for InitialState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            InitialState::Value(v) => s.serialize_f64(*v),
            InitialState::Distribution(d) => d.serialize(s),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Controls<'a> {
    Adapted(&'a AdaptedProcess),
    Policy(&'a MarkovPolicy),
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: AdaptedProcess,
    pub controls: AdaptedProcess,
    pub stage_costs: Vec<f64>,
}

impl Rollout {
    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

/// Rolls out from `x0` on a tree whose root layer is fanned over the atoms of
/// `x0`.
pub fn rollout(
    system: &ControlSystem,
    x0: &InitialState,
    controls: Controls<'_>,
    horizon: usize,
) -> Result<Rollout> {
    let tree = match controls {
        Controls::Adapted(u) => u.tree().clone(),
        Controls::Policy(_) => {
            let dist = x0.to_distribution();
            Arc::new(ScenarioTree::fanned(&dist, system.noise.clone(), horizon)?)
        }
    };
    let dist = x0.to_distribution();
    if dist.len() != tree.root_count() {
        return Err(Error::TreeMismatch);
    }
    let roots: Vec<f64> = dist.atoms().iter().map(|a| a.value[0]).collect();
    rollout_on(system, tree, &roots, controls, horizon)
}

/// Rolls out on an arbitrary tree with one initial value per root.
pub fn rollout_on(
    system: &ControlSystem,
    tree: Arc<ScenarioTree>,
    roots: &[f64],
    controls: Controls<'_>,
    horizon: usize,
) -> Result<Rollout> {
    if roots.len() != tree.root_count() {
        return Err(Error::TreeMismatch);
    }
    if tree.depth() < horizon || tree.noise() != &system.noise {
        return Err(Error::TreeMismatch);
    }
    if let Controls::Adapted(u) = controls {
        if !Arc::ptr_eq(u.tree(), &tree) && **u.tree() != *tree {
            return Err(Error::TreeMismatch);
        }
        if u.depths() < horizon || u.dim() != 1 {
            return Err(Error::DepthOutOfRange {
                depth: horizon.saturating_sub(1),
                available: u.depths(),
            });
        }
    }
    let (lo, hi) = system.constraint.bounds();
    let noise: Vec<f64> = system.noise.atoms().iter().map(|a| a.value[0]).collect();
    let m = noise.len();
    let mut xs: Vec<Vec<f64>> = vec![roots.to_vec()];
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let x = &xs[k];
        let u: Vec<f64> = match controls {
            Controls::Adapted(c) => c.layer(k)?.to_vec(),
            Controls::Policy(p) => x.iter().map(|&v| p.eval(v)).collect::<Result<_>>()?,
        };
        if let Some((node, &value)) = u
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= lo && **v <= hi))
        {
            return Err(Error::Infeasible {
                depth: k,
                node,
                value,
                lo,
                hi,
            });
        }
        costs.push(system.stage_cost(x, &u, tree.probs(k))?);
        let step = |i: usize| -> Result<Vec<f64>> {
            noise.iter().map(|&w| system.step(x[i], u[i], w)).collect()
        };
        let next: Vec<f64> = if x.len() >= PAR_THRESHOLD {
            (0..x.len())
                .into_par_iter()
                .map(step)
                .collect::<Result<Vec<_>>>()?
                .concat()
        } else {
            (0..x.len()).map(step).collect::<Result<Vec<_>>>()?.concat()
        };
        debug_assert_eq!(next.len(), x.len() * m);
        us.push(u);
        xs.push(next);
    }
    Ok(Rollout {
        states: AdaptedProcess::from_layers(tree.clone(), 1, xs)?,
        controls: AdaptedProcess::from_layers(tree, 1, us)?,
        stage_costs: costs,
    })
}

/// Checks that a tree with `roots` roots and the system's noise stays within
/// `cap` leaves at `horizon`.
pub fn check_tree_size(
    system: &ControlSystem,
    roots: usize,
    horizon: usize,
    cap: usize,
) -> Result<()> {
    match leaf_count(roots, system.noise.len(), horizon) {
        Some(n) if n <= cap => Ok(()),
        Some(n) => Err(Error::TreeTooLarge { leaves: n, cap }),
        None => Err(Error::TreeTooLarge {
            leaves: usize::MAX,
            cap,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionOptions {
    pub aggregation_tol: f64,
    pub atom_cap: usize,
    pub prune: bool,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        TransitionOptions {
            aggregation_tol: DEFAULT_AGGREGATION_TOL,
            atom_cap: 10_000,
            prune: false,
        }
    }
}

/// One step of the state law under a Markov policy: atoms
/// `f(x_i, π(x_i), w_j)` with probabilities `p_i q_j`, aggregated.
pub fn transition_operator(
    dist: &DiscreteDistribution,
    policy: &MarkovPolicy,
    system: &ControlSystem,
    opts: &TransitionOptions,
) -> Result<DiscreteDistribution> {
    if dist.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: dist.dim(),
        });
    }
    let mut items = Vec::with_capacity(dist.len() * system.noise.len());
    for a in dist.atoms() {
        let x = a.value[0];
        let u = policy.eval(x)?;
        for w in system.noise.atoms() {
            items.push((vec![system.step(x, u, w.value[0])?], a.prob * w.prob));
        }
    }
    let out = DiscreteDistribution::from_weighted(items, opts.aggregation_tol)?;
    if out.len() > opts.atom_cap {
        if opts.prune {
            return Ok(out.pruned(opts.atom_cap));
        }
        return Err(Error::SupportTooLarge {
            atoms: out.len(),
            cap: opts.atom_cap,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rv::pushforward;

    #[test]
    fn identity_policy_reaches_noise_law() {
        let sys = ControlSystem::paper_example(50.0);
        let r = rollout(
            &sys,
            &InitialState::Value(7.0),
            Controls::Policy(&MarkovPolicy::Identity),
            3,
        )
        .unwrap();
        let p1 = pushforward(&r.states, 1, DEFAULT_AGGREGATION_TOL).unwrap();
        assert_eq!(&p1, sys.noise.distribution());
        assert_eq!(r.states.scalar(1, 0), 0.5);
        assert_eq!(r.states.scalar(1, 1), -0.125);
    }

    #[test]
    fn zero_dynamics() {
        let mut sys = ControlSystem::paper_example(1.0);
        sys.dynamics = "0".parse().unwrap();
        let policy = MarkovPolicy::expr("3 * x + 1").unwrap();
        let r = rollout(
            &sys,
            &InitialState::Value(2.0),
            Controls::Policy(&policy),
            4,
        )
        .unwrap();
        for k in 1..=4 {
            assert!(r.states.layer(k).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn adapted_controls_and_cost() {
        let sys = ControlSystem::paper_example(50.0);
        let tree = Arc::new(ScenarioTree::new(sys.noise.clone(), 1));
        let u = AdaptedProcess::constant(tree, 1, vec![0.0]).unwrap();
        let r = rollout(&sys, &InitialState::Value(7.0), Controls::Adapted(&u), 1).unwrap();
        assert_eq!(r.stage_costs, vec![2401.0]);
        assert_eq!(r.states.scalar(1, 0), 49.5);

        let u7 = AdaptedProcess::constant(u.tree().clone(), 1, vec![7.0]).unwrap();
        let r = rollout(&sys, &InitialState::Value(7.0), Controls::Adapted(&u7), 1).unwrap();
        assert_eq!(r.states.scalar(1, 0), 0.5);
    }

    #[test]
    fn box_violation_reports_node() {
        let mut sys = ControlSystem::paper_example(1.0);
        sys.constraint = Constraint::Box { lo: -1.0, hi: 1.0 };
        let policy = MarkovPolicy::expr("4 * x").unwrap();
        let err = rollout(
            &sys,
            &InitialState::Value(0.25),
            Controls::Policy(&policy),
            3,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::Infeasible {
                    depth: 1,
                    node: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn transition_examples() {
        let sys = ControlSystem::paper_example(50.0);
        let opts = TransitionOptions::default();
        let rho_w = sys.noise.distribution().clone();
        let t = transition_operator(&rho_w, &MarkovPolicy::Identity, &sys, &opts).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(crate::metrics::wasserstein_1d(&t, &rho_w, 1).unwrap(), 0.0);
        let t7 = transition_operator(
            &DiscreteDistribution::point(vec![7.0]),
            &MarkovPolicy::Identity,
            &sys,
            &opts,
        )
        .unwrap();
        assert_eq!(&t7, sys.noise.distribution());

        let still = ControlSystem::new(
            "x".parse().unwrap(),
            vec![],
            NoiseModel::deterministic(vec![0.0]),
            Constraint::None,
        )
        .unwrap();
        let rho = DiscreteDistribution::scalar(&[(1.0, 0.25), (3.0, 0.75)]).unwrap();
        let policy = MarkovPolicy::expr("x^2").unwrap();
        assert_eq!(
            transition_operator(&rho, &policy, &still, &opts).unwrap(),
            rho
        );
    }

    #[test]
    fn atom_cap() {
        let sys = ControlSystem::counterexample_default();
        let rho = DiscreteDistribution::scalar(&[(0.0, 0.5), (10.0, 0.5)]).unwrap();
        let opts = TransitionOptions {
            atom_cap: 3,
            ..Default::default()
        };
        let policy = MarkovPolicy::expr("1").unwrap();
        assert!(matches!(
            transition_operator(&rho, &policy, &sys, &opts),
            Err(Error::SupportTooLarge { atoms: 4, cap: 3 })
        ));
        let pruned = transition_operator(
            &rho,
            &policy,
            &sys,
            &TransitionOptions {
                prune: true,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(pruned.len(), 3);
        assert!((pruned.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policies() {
        let t = MarkovPolicy::table(vec![(1.0, 10.0), (0.0, 5.0)]).unwrap();
        assert_eq!(t.eval(0.4).unwrap(), 5.0);
        assert_eq!(t.eval(0.6).unwrap(), 10.0);
        assert_eq!(t.eval(-7.0).unwrap(), 5.0);
        assert!(MarkovPolicy::table(vec![(1.0, 1.0), (1.0, 2.0)]).is_err());
        let parsed: MarkovPolicy = "table:0=5,1=10".parse().unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.to_string().parse::<MarkovPolicy>().unwrap(), t);
        assert!("x + u".parse::<MarkovPolicy>().is_err());
        assert!(matches!(
            MarkovPolicy::expr("1 / x").unwrap().eval(0.0),
            Err(Error::PolicyUndefined(_))
        ));
    }

    #[test]
    fn stage_cost_is_order_free() {
        let sys = ControlSystem::paper_example(3.0);
        let xs = [0.1, 0.7, 0.1, -2.0];
        let us = [0.3, 0.2, 0.3, 1.0];
        let ps = [0.1, 0.2, 0.3, 0.4];
        let a = sys.stage_cost(&xs, &us, &ps).unwrap();
        let b = sys
            .stage_cost(
                &[-2.0, 0.1, 0.7, 0.1],
                &[1.0, 0.3, 0.2, 0.3],
                &[0.4, 0.3, 0.2, 0.1],
            )
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn config_json_round_trip() {
        let sys = ControlSystem::paper_example(50.0);
        let json = serde_json::to_string(&sys).unwrap();
        let back: ControlSystem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sys);
        let ce = ControlSystem::counterexample_default();
        let back: ControlSystem =
            serde_json::from_str(&serde_json::to_string(&ce).unwrap()).unwrap();
        assert_eq!(back, ce);
    }
}
