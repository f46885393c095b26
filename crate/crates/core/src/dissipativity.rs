//! Dissipation inequalities in L^r and on distributions.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::metrics::MetricKind;
use crate::ocp::{self, OCPInstance, OptConfig};
use crate::rv::{AdaptedProcess, DiscreteDistribution, ScenarioTree};
use crate::stationary::StationaryPair;
use crate::system::{
    transition_operator, ControlSystem, CostTerm, InitialState, MarkovPolicy, TransitionOptions,
};

/// Comparison functions `α` (class K∞ except for [`ComparisonFunction::Zero`],
/// which is used for non-strict inequalities).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ComparisonFunction {
    Identity,
    /// `c · t^p`.
    Power {
        p: f64,
        c: f64,
    },
    /// Piecewise-linear interpolation through `points`, starting at `(0, 0)`,
    /// extrapolated linearly past the last point.
    Table {
        points: Vec<(f64, f64)>,
    },
    Zero,
}

impl ComparisonFunction {
    pub fn power(p: f64, c: f64) -> Result<Self> {
        let f = ComparisonFunction::Power { p, c };
        f.validate()?;
        Ok(f)
    }

    pub fn table(points: Vec<(f64, f64)>) -> Result<Self> {
        let f = ComparisonFunction::Table { points };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ComparisonFunction::Power { p, c }
                if !(*p >= 1.0 && *c > 0.0 && p.is_finite() && c.is_finite()) =>
            {
                Err(Error::InvalidArgument(format!(
                    "power comparison needs p ≥ 1 and c > 0, got p = {p}, c = {c}"
                )))
            }
            ComparisonFunction::Table { points } => {
                if points.len() < 2 || points[0] != (0.0, 0.0) {
                    return Err(Error::InvalidArgument(
                        "comparison table needs (0, 0) and at least one more point".into(),
                    ));
                }
                if points
                    .windows(2)
                    .any(|w| !(w[1].0 > w[0].0 && w[1].1 > w[0].1))
                {
                    return Err(Error::InvalidArgument(
                        "comparison table must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ComparisonFunction::Identity => t,
            ComparisonFunction::Power { p, c } => c * t.powf(*p),
            ComparisonFunction::Zero => 0.0,
            ComparisonFunction::Table { points } => {
                let k = points
                    .partition_point(|(x, _)| *x <= t)
                    .clamp(1, points.len() - 1);
                let (x0, y0) = points[k - 1];
                let (x1, y1) = points[k];
                y0 + (y1 - y0) * (t - x0) / (x1 - x0)
            }
        }
    }

    /// Whether the function is strictly positive away from zero, i.e. usable
    /// for strict dissipativity.
    pub fn is_strict(&self) -> bool {
        !matches!(self, ComparisonFunction::Zero)
    }

    /// Checks `α(0) = 0`, strict increase and growth on a geometric grid in
    /// `[1e-6, 1e6]`.
    pub fn check_k_infinity(&self) -> bool {
        if self.eval(0.0) != 0.0 || !self.is_strict() {
            return false;
        }
        let grid: Vec<f64> = (0..=120)
            .map(|i| 10f64.powf(-6.0 + i as f64 * 0.1))
            .collect();
        let values: Vec<f64> = grid.iter().map(|&t| self.eval(t)).collect();
        values[0] > 0.0
            && values.windows(2).all(|w| w[1] > w[0])
            && values.last().is_some_and(|v| *v >= 1e3 * values[60])
    }
}

impl fmt::Display for ComparisonFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComparisonFunction::Identity => f.write_str("identity"),
            ComparisonFunction::Power { p, c } => write!(f, "power:{p}:{c}"),
            ComparisonFunction::Zero => f.write_str("zero"),
            ComparisonFunction::Table { points } => {
                f.write_str("table:")?;
                for (i, (x, y)) in points.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}={y}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ComparisonFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized comparison function {s:?}"));
        match s.trim() {
            "identity" => Ok(ComparisonFunction::Identity),
            "zero" => Ok(ComparisonFunction::Zero),
            other => {
                if let Some(rest) = other.strip_prefix("power:") {
                    let (p, c) = rest.split_once(':').unwrap_or((rest, "1"));
                    let p = p.parse().map_err(|_| bad())?;
                    let c = c.parse().map_err(|_| bad())?;
                    ComparisonFunction::power(p, c)
                } else if let Some(rest) = other.strip_prefix("table:") {
                    let points = rest
                        .split(',')
                        .map(|kv| {
                            let (x, y) = kv.split_once('=').ok_or_else(bad)?;
                            Ok((
                                x.trim().parse().map_err(|_| bad())?,
                                y.trim().parse().map_err(|_| bad())?,
                            ))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ComparisonFunction::table(points)
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Storage `λ(k, X)` on random variables. Implementations see the depth-`k`
/// node values of `X` and of the stationary state `X^s(k)` together with the
/// node probabilities.
pub trait StorageRv: Sync {
    fn eval(&self, k: usize, x: &[f64], stationary: &[f64], probs: &[f64]) -> Result<f64>;

    /// Lower bound `M` with `λ ≥ M`.
    fn lower_bound(&self) -> f64;
}

/// Storage `Λ(P)` on distributions.
pub trait StorageDist: Sync {
    fn eval(&self, p: &DiscreteDistribution) -> Result<f64>;

    fn lower_bound(&self) -> f64;
}

/// `λ ≡ 0` and `Λ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroStorage;

impl StorageRv for ZeroStorage {
    fn eval(&self, _: usize, _: &[f64], _: &[f64], _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

impl StorageDist for ZeroStorage {
    fn eval(&self, _: &DiscreteDistribution) -> Result<f64> {
        Ok(0.0)
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// `λ(k, X) = E[(X − X^s(k))²]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredDeviation;

impl StorageRv for SquaredDeviation {
    fn eval(&self, _: usize, x: &[f64], stationary: &[f64], probs: &[f64]) -> Result<f64> {
        check_layers(x, stationary, probs)?;
        Ok(x.iter()
            .zip(stationary)
            .zip(probs)
            .map(|((a, b), p)| p * (a - b) * (a - b))
            .sum())
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// `λ(k, X) = E[g(X, X^s(k))]` for an expression `g` in which `x` is the state
/// and `w` the stationary state at the same node.
#[derive(Debug, Clone)]
pub struct ExprStorage {
    pub integrand: Expr,
    pub lower_bound: f64,
}

impl StorageRv for ExprStorage {
    fn eval(&self, _: usize, x: &[f64], stationary: &[f64], probs: &[f64]) -> Result<f64> {
        check_layers(x, stationary, probs)?;
        let mut s = 0.0;
        for ((a, b), p) in x.iter().zip(stationary).zip(probs) {
            s += p * self.integrand.eval(*a, 0.0, *b)?;
        }
        Ok(s)
    }

    fn lower_bound(&self) -> f64 {
        self.lower_bound
    }
}

/// `λ(k, X) = Λ(P_X)`.
#[derive(Debug, Clone)]
pub struct FromDist<D>(pub D);

impl<D: StorageDist> StorageRv for FromDist<D> {
    fn eval(&self, _: usize, x: &[f64], _: &[f64], probs: &[f64]) -> Result<f64> {
        let law = DiscreteDistribution::from_weighted(
            x.iter().zip(probs).map(|(&v, &p)| (vec![v], p)),
            0.0,
        )?;
        self.0.eval(&law)
    }

    fn lower_bound(&self) -> f64 {
        self.0.lower_bound()
    }
}

/// `Λ(P) = E[(X − Y)²]` with `X ~ P` and `Y ~ reference` independent.
#[derive(Debug, Clone)]
pub struct IndependentSquaredDeviation {
    pub reference: DiscreteDistribution,
}

impl StorageDist for IndependentSquaredDeviation {
    fn eval(&self, p: &DiscreteDistribution) -> Result<f64> {
        let first = |d: &DiscreteDistribution| d.expectation(|v| v[0]);
        let second = |d: &DiscreteDistribution| d.expectation(|v| v[0] * v[0]);
        Ok(second(p) - 2.0 * first(p) * first(&self.reference) + second(&self.reference))
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

fn check_layers(x: &[f64], stationary: &[f64], probs: &[f64]) -> Result<()> {
    if x.len() != probs.len() || stationary.len() != probs.len() {
        return Err(Error::TreeMismatch);
    }
    Ok(())
}

/// Ingredients of the L^r dissipation inequality at a stationary process.
pub struct LrDissipation<'a> {
    pub system: &'a ControlSystem,
    pub storage: &'a dyn StorageRv,
    pub alpha: ComparisonFunction,
    pub order: u32,
    /// `ℓ(X^s, U^s)`.
    pub stationary_cost: f64,
    pub stationary_states: &'a AdaptedProcess,
}

impl LrDissipation<'_> {
    fn layer_cost(&self, x: &[f64], u: &[f64], probs: &[f64]) -> Result<f64> {
        self.system.stage_cost(x, u, probs)
    }

    fn lambda(&self, k: usize, x: &[f64]) -> Result<f64> {
        let tree = self.stationary_states.tree();
        self.storage
            .eval(k, x, self.stationary_states.layer(k)?, tree.probs(k))
    }
}

/// `X(k+1)` from one step of the dynamics.
fn successor(system: &ControlSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let mut next = Vec::with_capacity(x.len() * system.noise.len());
    for (&xi, &ui) in x.iter().zip(u) {
        for w in system.noise.atoms() {
            next.push(system.step(xi, ui, w.value[0])?);
        }
    }
    Ok(next)
}

fn check_tree(setting: &LrDissipation<'_>, x: &AdaptedProcess, u: &AdaptedProcess) -> Result<()> {
    if !x.same_tree(setting.stationary_states) || !u.same_tree(setting.stationary_states) {
        return Err(Error::TreeMismatch);
    }
    if x.dim() != 1 || u.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: x.dim().max(u.dim()),
        });
    }
    Ok(())
}

/// `ℓ(X(k), U(k)) − ℓ(X^s, U^s) + λ(k, X(k)) − λ(k+1, X(k+1)) − α(E‖X(k) − X^s(k)‖^r)`
/// with `X(k+1)` obtained from one step of the dynamics.
pub fn lr_dissipation_residual(
    setting: &LrDissipation<'_>,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
    k: usize,
) -> Result<f64> {
    check_tree(setting, x, u)?;
    let tree = x.tree();
    if k + 1 > tree.depth() {
        return Err(Error::DepthOutOfRange {
            depth: k + 1,
            available: tree.depth() + 1,
        });
    }
    let xk = x.layer(k)?;
    let uk = u.layer(k)?;
    let probs = tree.probs(k);
    let next = successor(setting.system, xk, uk)?;
    let gap: f64 = xk
        .iter()
        .zip(setting.stationary_states.layer(k)?)
        .zip(probs)
        .map(|((a, b), p)| p * (a - b).abs().powi(setting.order as i32))
        .sum();
    Ok(
        setting.layer_cost(xk, uk, probs)? - setting.stationary_cost + setting.lambda(k, xk)?
            - setting.lambda(k + 1, &next)?
            - setting.alpha.eval(gap),
    )
}

/// Ingredients of the distributional dissipation inequality.
pub struct DistDissipation<'a> {
    pub system: &'a ControlSystem,
    pub storage: &'a dyn StorageDist,
    pub alpha: ComparisonFunction,
    pub metric: MetricKind,
    pub stationary: &'a StationaryPair,
}

/// `ℓ̂(P, π) − ℓ̂(ρ^s, π^s) + Λ(P) − Λ(T(P, π)) − α(d(P, ρ^s))`.
pub fn dist_dissipation_residual(
    setting: &DistDissipation<'_>,
    p: &DiscreteDistribution,
    policy: &MarkovPolicy,
) -> Result<f64> {
    let next = transition_operator(p, policy, setting.system, &TransitionOptions::default())?;
    let d = setting
        .metric
        .distance(p, &setting.stationary.distribution)?;
    Ok(
        setting.system.policy_cost(p, policy)? - setting.stationary.stationary_cost
            + setting.storage.eval(p)?
            - setting.storage.eval(&next)?
            - setting.alpha.eval(d),
    )
}

/// Residuals below this count as violations.
pub const VIOLATION_THRESHOLD: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleViolation {
    pub index: usize,
    pub residual: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certification {
    pub samples: usize,
    pub min_residual: f64,
    pub argmin: String,
    pub violations: Vec<SampleViolation>,
}

impl Certification {
    /// No sample fell below [`VIOLATION_THRESHOLD`].
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates `residual` on `count` samples. Sample `i` draws from its own
/// ChaCha8 stream, so the outcome depends only on `seed`.
pub fn certify_over_samples<F>(count: usize, seed: u64, residual: F) -> Result<Certification>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<(f64, String)> + Sync,
{
    if count == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample is required".into(),
        ));
    }
    let results = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            residual(&mut rng, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut min_residual = f64::INFINITY;
    let mut argmin = String::new();
    let mut violations = Vec::new();
    for (index, (r, description)) in results.into_iter().enumerate() {
        if r < min_residual || r.is_nan() {
            min_residual = r;
            argmin = description.clone();
        }
        if !(r >= VIOLATION_THRESHOLD) {
            violations.push(SampleViolation {
                index,
                residual: r,
                description,
            });
        }
    }
    Ok(Certification {
        samples: count,
        min_residual,
        argmin,
        violations,
    })
}

/// Random adapted pairs: `X(0)` uniform in `±state_scale` per root, controls
/// `U(k) = X(k) + v` with `v` uniform in `±control_spread`, states by rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSampler {
    pub max_depth: usize,
    pub state_scale: f64,
    pub control_spread: f64,
}

impl Default for LrSampler {
    fn default() -> Self {
        LrSampler {
            max_depth: 4,
            state_scale: 2.0,
            control_spread: 1.0,
        }
    }
}

impl LrSampler {
    /// Draws `(X, U)` on `tree`.
    pub fn draw(
        &self,
        system: &ControlSystem,
        tree: &Arc<ScenarioTree>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(AdaptedProcess, AdaptedProcess)> {
        let depth = tree.depth();
        let mut xs = vec![(0..tree.root_count())
            .map(|_| rng.gen_range(-self.state_scale..=self.state_scale))
            .collect::<Vec<f64>>()];
        let mut us = Vec::with_capacity(depth + 1);
        for k in 0..=depth {
            let u: Vec<f64> = xs[k]
                .iter()
                .map(|&x| x + rng.gen_range(-self.control_spread..=self.control_spread))
                .collect();
            if k < depth {
                xs.push(successor(system, &xs[k], &u)?);
            }
            us.push(u);
        }
        Ok((
            AdaptedProcess::from_layers(tree.clone(), 1, xs)?,
            AdaptedProcess::from_layers(tree.clone(), 1, us)?,
        ))
    }
}

/// Certifies the L^r inequality on random pairs drawn by `sampler`, on trees
/// fanned over the stationary law. Each sample contributes its smallest
/// residual over `k`.
pub fn certify_lr(
    system: &ControlSystem,
    storage: &dyn StorageRv,
    alpha: &ComparisonFunction,
    order: u32,
    pair: &StationaryPair,
    sampler: &LrSampler,
    count: usize,
    seed: u64,
) -> Result<Certification> {
    if sampler.max_depth == 0 {
        return Err(Error::InvalidArgument(
            "sampler depth must be positive".into(),
        ));
    }
    let stationary = (1..=sampler.max_depth)
        .map(|d| {
            let tree = Arc::new(ScenarioTree::fanned(
                &pair.distribution,
                system.noise.clone(),
                d,
            )?);
            let (x, _) = crate::stationary::stationary_process(pair, system, tree)?;
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    certify_over_samples(count, seed, |rng, _| {
        let depth = rng.gen_range(1..=sampler.max_depth);
        let xs = &stationary[depth - 1];
        let (x, u) = sampler.draw(system, xs.tree(), rng)?;
        let setting = LrDissipation {
            system,
            storage,
            alpha: alpha.clone(),
            order,
            stationary_cost: pair.stationary_cost,
            stationary_states: xs,
        };
        let mut worst = (f64::INFINITY, String::new());
        for k in 0..depth {
            let r = lr_dissipation_residual(&setting, &x, &u, k)?;
            if r < worst.0 || r.is_nan() {
                worst = (
                    r,
                    format!("depth {depth}, k = {k}, X(0) = {:?}", x.layer(0)?),
                );
            }
        }
        Ok(worst)
    })
}

/// Random `(P, π)`: up to `max_atoms` atoms uniform in `±state_scale` with
/// random weights, and a table policy `π(x) = x + v`, `v` uniform in
/// `±control_spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistSampler {
    pub max_atoms: usize,
    pub state_scale: f64,
    pub control_spread: f64,
}

impl Default for DistSampler {
    fn default() -> Self {
        DistSampler {
            max_atoms: 4,
            state_scale: 2.0,
            control_spread: 1.0,
        }
    }
}

impl DistSampler {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(DiscreteDistribution, MarkovPolicy)> {
        let n = rng.gen_range(1..=self.max_atoms.max(1));
        let values: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-self.state_scale..=self.state_scale))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let p = DiscreteDistribution::from_weighted(
            values
                .iter()
                .zip(&weights)
                .map(|(&v, &w)| (vec![v], w / total)),
            0.0,
        )?;
        let table = p
            .atoms()
            .iter()
            .map(|a| {
                (
                    a.value[0],
                    a.value[0] + rng.gen_range(-self.control_spread..=self.control_spread),
                )
            })
            .collect();
        Ok((p, MarkovPolicy::table(table)?))
    }
}

/// Certifies the distributional inequality on random `(P, π)`.
pub fn certify_dist(
    setting: &DistDissipation<'_>,
    sampler: &DistSampler,
    count: usize,
    seed: u64,
) -> Result<Certification> {
    certify_over_samples(count, seed, |rng, _| {
        let (p, policy) = sampler.draw(rng)?;
        let r = dist_dissipation_residual(setting, &p, &policy)?;
        Ok((r, format!("P = {:?}", p.atoms())))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotatedSum {
    /// `Σ_k ℓ̃(X(k), U(k))`.
    pub rotated: f64,
    /// `J_N − N ℓ^s + λ(0, X(0)) − λ(N, X(N))`.
    pub telescoped: f64,
    pub cost: f64,
    pub storage_start: f64,
    pub storage_end: f64,
}

/// Sums the rotated stage costs over `0..n` and checks them against the
/// telescoped form.
pub fn rotated_cost_sum(
    setting: &LrDissipation<'_>,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
    n: usize,
) -> Result<RotatedSum> {
    check_tree(setting, x, u)?;
    if x.depths() < n + 1 || u.depths() < n {
        return Err(Error::DepthOutOfRange {
            depth: n,
            available: x.depths().min(u.depths() + 1),
        });
    }
    let tree = x.tree();
    let lambdas = (0..=n)
        .map(|k| setting.lambda(k, x.layer(k)?))
        .collect::<Result<Vec<_>>>()?;
    let costs = (0..n)
        .map(|k| setting.layer_cost(x.layer(k)?, u.layer(k)?, tree.probs(k)))
        .collect::<Result<Vec<_>>>()?;
    let rotated: f64 = (0..n)
        .map(|k| costs[k] - setting.stationary_cost + lambdas[k] - lambdas[k + 1])
        .sum();
    let cost: f64 = costs.iter().sum();
    let telescoped = cost - n as f64 * setting.stationary_cost + lambdas[0] - lambdas[n];
    let scale = costs
        .iter()
        .chain(&lambdas)
        .fold(setting.stationary_cost.abs(), |m, v| m.max(v.abs()))
        * (n + 1) as f64;
    if (rotated - telescoped).abs() > 1e-10 * scale.max(1.0) {
        return Err(Error::IdentityViolation {
            rotated,
            telescoped,
        });
    }
    Ok(RotatedSum {
        rotated,
        telescoped,
        cost,
        storage_start: lambdas[0],
        storage_end: lambdas[n],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonStorage {
    pub horizon: usize,
    pub value: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvailableStorage {
    pub value: f64,
    pub best_horizon: usize,
    pub per_horizon: Vec<HorizonStorage>,
}

/// Lower bound on the available storage at `p0`: for each `N ≤ horizon_cap`
/// the optimizer maximizes `−Σ_k (ℓ − ℓ^s − α(d(P_X(k), ρ^s)))`; `N = 0`
/// contributes 0.
pub fn available_storage_estimate(
    system: &ControlSystem,
    p0: &DiscreteDistribution,
    alpha: &ComparisonFunction,
    metric: MetricKind,
    stationary: &StationaryPair,
    horizon_cap: usize,
    cfg: &OptConfig,
) -> Result<AvailableStorage> {
    let mut rotated = system.clone();
    rotated.cost.push(CostTerm::Constant {
        value: -stationary.stationary_cost,
    });
    if alpha.is_strict() {
        rotated.cost.push(CostTerm::MetricToTarget {
            coefficient: -1.0,
            power: 1,
            metric,
            alpha: alpha.clone(),
            target: stationary.distribution.clone(),
        });
    }
    let x0 = InitialState::Distribution(p0.clone());
    let mut per_horizon = vec![HorizonStorage {
        horizon: 0,
        value: 0.0,
        converged: true,
    }];
    for n in 1..=horizon_cap {
        let inst = OCPInstance::new(rotated.clone(), x0.clone(), n)?;
        let sol = ocp::solve(&inst, cfg)?;
        per_horizon.push(HorizonStorage {
            horizon: n,
            value: -sol.cost,
            converged: sol.diagnostics.converged,
        });
    }
    let best = per_horizon.iter().fold(
        &per_horizon[0],
        |b, h| if h.value > b.value { h } else { b },
    );
    Ok(AvailableStorage {
        value: best.value,
        best_horizon: best.horizon,
        per_horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stationary::stationary_process;

    fn paper(gamma: f64) -> (ControlSystem, StationaryPair) {
        let sys = ControlSystem::paper_example(gamma);
        let pair = StationaryPair::new(
            sys.noise.distribution().clone(),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        (sys, pair)
    }

    fn stationary_on(
        sys: &ControlSystem,
        pair: &StationaryPair,
        depth: usize,
    ) -> (AdaptedProcess, AdaptedProcess) {
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), depth).unwrap());
        stationary_process(pair, sys, tree).unwrap()
    }

    fn weighted_sum(tree: &ScenarioTree, k: usize, f: impl Fn(usize) -> f64) -> f64 {
        tree.probs(k)
            .iter()
            .enumerate()
            .map(|(i, p)| p * f(i))
            .sum()
    }

    #[test]
    fn comparison_functions() {
        assert!(ComparisonFunction::Identity.check_k_infinity());
        assert!(ComparisonFunction::power(2.0, 0.5)
            .unwrap()
            .check_k_infinity());
        assert!(!ComparisonFunction::Zero.check_k_infinity());
        assert!(ComparisonFunction::power(0.5, 1.0).is_err());
        let t = ComparisonFunction::table(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]).unwrap();
        assert_eq!(t.eval(0.5), 1.0);
        assert_eq!(t.eval(4.0), 5.0);
        assert!(t.check_k_infinity());
        assert!(ComparisonFunction::table(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 1.0)]).is_err());
        for s in ["identity", "zero", "power:2:0.5", "table:0=0,1=2,2=3"] {
            let f: ComparisonFunction = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert!("cubic".parse::<ComparisonFunction>().is_err());
    }

    #[test]
    fn residual_matches_hand_expansion() {
        let gamma = 3.0;
        let (sys, pair) = paper(gamma);
        let (xs, _) = stationary_on(&sys, &pair, 3);
        let tree = xs.tree().clone();
        let sampler = LrSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (x, u) = sampler.draw(&sys, &tree, &mut rng).unwrap();
            for (alpha, strict) in [
                (ComparisonFunction::Zero, false),
                (ComparisonFunction::Identity, true),
            ] {
                let setting = LrDissipation {
                    system: &sys,
                    storage: &SquaredDeviation,
                    alpha,
                    order: 2,
                    stationary_cost: 0.0,
                    stationary_states: &xs,
                };
                for k in 0..3 {
                    let mean_u = weighted_sum(&tree, k, |i| u.scalar(k, i));
                    let dev =
                        weighted_sum(&tree, k, |i| (x.scalar(k, i) - xs.scalar(k, i)).powi(2));
                    let expected = gamma * mean_u * mean_u + if strict { 0.0 } else { dev };
                    let r = lr_dissipation_residual(&setting, &x, &u, k).unwrap();
                    assert!(
                        (r - expected).abs() <= 1e-9 * expected.max(1.0),
                        "{r} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn residual_vanishes_on_stationary_process() {
        let (sys, pair) = paper(50.0);
        let (xs, us) = stationary_on(&sys, &pair, 3);
        let setting = LrDissipation {
            system: &sys,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Identity,
            order: 2,
            stationary_cost: 0.0,
            stationary_states: &xs,
        };
        for k in 0..3 {
            assert_eq!(lr_dissipation_residual(&setting, &xs, &us, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn unit_shift_with_free_control() {
        let (sys, pair) = paper(0.0);
        let (xs, _) = stationary_on(&sys, &pair, 2);
        let x = xs.map(|v| vec![v[0] + 1.0]).unwrap();
        let setting = LrDissipation {
            system: &sys,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Identity,
            order: 2,
            stationary_cost: 0.0,
            stationary_states: &xs,
        };
        for k in 0..2 {
            assert_eq!(lr_dissipation_residual(&setting, &x, &x, k).unwrap(), 0.0);
        }
        assert!(matches!(
            lr_dissipation_residual(&setting, &x, &x, 2),
            Err(Error::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn distributional_residuals() {
        let (sys, pair) = paper(50.0);
        let setting = DistDissipation {
            system: &sys,
            storage: &IndependentSquaredDeviation {
                reference: pair.distribution.clone(),
            },
            alpha: ComparisonFunction::Identity,
            metric: MetricKind::default(),
            stationary: &pair,
        };
        let r = dist_dissipation_residual(&setting, &pair.distribution, &MarkovPolicy::Identity)
            .unwrap();
        assert_eq!(r, 0.0);
        let delta = DiscreteDistribution::point(vec![7.0]);
        assert!(
            dist_dissipation_residual(&setting, &delta, &MarkovPolicy::Identity)
                .unwrap()
                .is_finite()
        );

        let sys = ControlSystem::counterexample_default();
        let target = ControlSystem::symmetric_two_point();
        let zero = MarkovPolicy::expr("0").unwrap();
        let pair = StationaryPair::new(target, zero.clone(), &sys).unwrap();
        assert_eq!(pair.stationary_cost, 0.0);
        let setting = DistDissipation {
            system: &sys,
            storage: &ZeroStorage,
            alpha: ComparisonFunction::Identity,
            metric: MetricKind::default(),
            stationary: &pair,
        };
        let cert = certify_dist(&setting, &DistSampler::default(), 100, 5).unwrap();
        assert!(cert.min_residual.abs() < 1e-12);
        assert!(cert.passed());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (p, _) = DistSampler::default().draw(&mut rng).unwrap();
            assert_eq!(dist_dissipation_residual(&setting, &p, &zero).unwrap(), 0.0);
        }
    }

    #[test]
    fn certification_with_and_without_storage() {
        let (sys, pair) = paper(50.0);
        let good = certify_lr(
            &sys,
            &SquaredDeviation,
            &ComparisonFunction::Identity,
            2,
            &pair,
            &LrSampler::default(),
            200,
            1,
        )
        .unwrap();
        assert!(good.passed(), "{:?}", good.violations.first());
        assert!(good.min_residual >= VIOLATION_THRESHOLD);
        let again = certify_lr(
            &sys,
            &SquaredDeviation,
            &ComparisonFunction::Identity,
            2,
            &pair,
            &LrSampler::default(),
            200,
            1,
        )
        .unwrap();
        assert_eq!(good, again);

        let far = LrSampler {
            state_scale: 10.0,
            ..LrSampler::default()
        };
        let bad = certify_lr(
            &sys,
            &ZeroStorage,
            &ComparisonFunction::Identity,
            2,
            &pair,
            &far,
            200,
            1,
        )
        .unwrap();
        assert!(!bad.passed());
        assert!(bad.min_residual < VIOLATION_THRESHOLD);
    }

    #[test]
    fn single_stationary_sample() {
        let (sys, pair) = paper(50.0);
        let (xs, us) = stationary_on(&sys, &pair, 1);
        let setting = LrDissipation {
            system: &sys,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Identity,
            order: 2,
            stationary_cost: 0.0,
            stationary_states: &xs,
        };
        let cert = certify_over_samples(1, 0, |_, _| {
            Ok((
                lr_dissipation_residual(&setting, &xs, &us, 0)?,
                "stationary".into(),
            ))
        })
        .unwrap();
        assert_eq!(cert.min_residual, 0.0);
        assert!(certify_over_samples(0, 0, |_, _| Ok((0.0, String::new()))).is_err());
    }

    #[test]
    fn rotated_sums() {
        let (sys, pair) = paper(50.0);
        let (xs, us) = stationary_on(&sys, &pair, 3);
        let setting = LrDissipation {
            system: &sys,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Zero,
            order: 2,
            stationary_cost: 0.0,
            stationary_states: &xs,
        };
        let s = rotated_cost_sum(&setting, &xs, &us, 3).unwrap();
        assert_eq!(s.rotated, 0.0);
        assert_eq!(s.telescoped, 0.0);

        let (xs1, _) = stationary_on(&sys, &pair, 1);
        let tree = xs1.tree().clone();
        let u = AdaptedProcess::constant(tree.clone(), 1, vec![0.0]).unwrap();
        let x = AdaptedProcess::from_fn(tree.clone(), 1, 2, |k, node| {
            if k == 0 {
                vec![7.0]
            } else {
                vec![49.0 + tree.noise_value(node)[0]]
            }
        })
        .unwrap();
        let setting = LrDissipation {
            stationary_states: &xs1,
            ..setting
        };
        let s = rotated_cost_sum(&setting, &x, &u, 1).unwrap();
        assert_eq!(s.cost, 2401.0);
        assert!((s.storage_start - 49.0625).abs() < 1e-12);
        assert!((s.storage_end - 2401.0).abs() < 1e-9);
        assert!((s.rotated - 49.0625).abs() < 1e-10);
    }

    #[test]
    fn rotated_sum_on_random_trajectories() {
        let (sys, pair) = paper(50.0);
        let (xs, _) = stationary_on(&sys, &pair, 4);
        let setting = LrDissipation {
            system: &sys,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Zero,
            order: 2,
            stationary_cost: 0.0,
            stationary_states: &xs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (x, u) = LrSampler::default()
                .draw(&sys, xs.tree(), &mut rng)
                .unwrap();
            let s = rotated_cost_sum(&setting, &x, &u, 4).unwrap();
            assert!((s.rotated - s.telescoped).abs() <= 1e-10 * s.cost.abs().max(1.0));
        }
    }

    #[test]
    fn available_storage() {
        let (sys, pair) = paper(50.0);
        let cfg = OptConfig::default();
        let at_rest = available_storage_estimate(
            &sys,
            &pair.distribution,
            &ComparisonFunction::Zero,
            MetricKind::default(),
            &pair,
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(at_rest.value, 0.0);
        assert_eq!(at_rest.best_horizon, 0);
        // a strict margin lets spread-out controls gain more than they pay
        let strict = available_storage_estimate(
            &sys,
            &pair.distribution,
            &ComparisonFunction::Identity,
            MetricKind::default(),
            &pair,
            2,
            &cfg,
        )
        .unwrap();
        assert!(strict.value > 0.0);
        assert!(strict
            .per_horizon
            .windows(2)
            .all(|w| w[1].horizon == w[0].horizon + 1));
        let delta = DiscreteDistribution::point(vec![7.0]);
        let from_seven = available_storage_estimate(
            &sys,
            &delta,
            &ComparisonFunction::Zero,
            MetricKind::default(),
            &pair,
            2,
            &cfg,
        )
        .unwrap();
        assert!(from_seven.value <= 49.0625);
        assert_eq!(from_seven.per_horizon.len(), 3);
        let none = available_storage_estimate(
            &sys,
            &delta,
            &ComparisonFunction::Identity,
            MetricKind::default(),
            &pair,
            0,
            &cfg,
        )
        .unwrap();
        assert_eq!(none.value, 0.0);
        assert_eq!(none.best_horizon, 0);
    }
}
