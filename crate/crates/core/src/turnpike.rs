//! Turnpike counters, their bounds and the per-time-instant hierarchy between
//! the four notions of closeness to a stationary process.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dissipativity::{ComparisonFunction, StorageRv};
use crate::error::{Error, Result};
use crate::metrics::{ky_fan_from_distances, levy_prokhorov, MetricKind, DEFAULT_BISECT_TOL};
use crate::ocp::{self, Diagnostics, OCPInstance, OptConfig};
use crate::rv::{
    lr_distance, moment_norm, node_distances, pushforward, AdaptedProcess, DiscreteDistribution,
    ScenarioTree, DEFAULT_AGGREGATION_TOL,
};
use crate::stationary::{stationary_process_on, StationaryPair};
use crate::system::{ControlSystem, InitialState};

/// Margin added to constants that must strictly exceed a storage gap.
pub const CONSTANT_MARGIN: f64 = 1e-6;

/// Slack for comparing quantities that are equal in exact arithmetic but
/// computed along different paths.
const FLOAT_SLACK: f64 = 1e-9;

fn check(states: &AdaptedProcess, stationary: &AdaptedProcess) -> Result<()> {
    if !states.same_tree(stationary) || stationary.depths() < states.depths() {
        return Err(Error::TreeMismatch);
    }
    Ok(())
}

fn count_where<F>(states: &AdaptedProcess, mut pred: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<bool>,
{
    let mut n = 0;
    for k in 0..states.depths() {
        if pred(k)? {
            n += 1;
        }
    }
    Ok(n)
}

/// `#{k : E‖X(k) − X^s(k)‖^r ≤ eps}`.
pub fn count_lr(
    states: &AdaptedProcess,
    stationary: &AdaptedProcess,
    eps: f64,
    r: u32,
) -> Result<usize> {
    check(states, stationary)?;
    count_where(
        states,
        |k| Ok(lr_distance(states, stationary, k, r)? <= eps),
    )
}

fn mass_within(pairs: &[(f64, f64)], eps: f64) -> f64 {
    pairs
        .iter()
        .filter(|(d, _)| *d <= eps)
        .map(|(_, p)| p)
        .sum()
}

/// `#{k : P(‖X(k) − X^s(k)‖ ≤ eps) ≥ 1 − eps}`.
pub fn count_prob(states: &AdaptedProcess, stationary: &AdaptedProcess, eps: f64) -> Result<usize> {
    check(states, stationary)?;
    count_where(states, |k| {
        Ok(mass_within(&node_distances(states, stationary, k)?, eps) >= 1.0 - eps)
    })
}

/// `#{k : d(P_X(k), ρ^s) ≤ eps}`.
pub fn count_dist(
    marginals: &[DiscreteDistribution],
    rho_s: &DiscreteDistribution,
    eps: f64,
    metric: MetricKind,
) -> Result<usize> {
    let mut n = 0;
    for m in marginals {
        if metric.distance(m, rho_s)? <= eps + metric.slack() {
            n += 1;
        }
    }
    Ok(n)
}

/// `#{k : |E[‖X(k)‖^r]^{1/r} − E[‖X^s(k)‖^r]^{1/r}| ≤ eps}`.
pub fn count_moment(
    states: &AdaptedProcess,
    stationary: &AdaptedProcess,
    eps: f64,
    r: u32,
) -> Result<usize> {
    check(states, stationary)?;
    count_where(states, |k| {
        Ok((moment_norm(states, k, r)? - moment_norm(stationary, k, r)?).abs() <= eps)
    })
}

/// Right-hand side `N − (δ + C)/α(ε)` of a turnpike bound.
pub fn turnpike_bound(
    n: usize,
    delta: f64,
    c: f64,
    alpha: &ComparisonFunction,
    eps: f64,
) -> Result<f64> {
    let a = alpha.eval(eps);
    if !(a > 0.0) {
        return Err(Error::DegenerateComparison(eps));
    }
    Ok(n as f64 - (delta + c) / a)
}

/// `count ≥ N − (δ + C)/α(ε)`.
pub fn bound_check(
    count: usize,
    n: usize,
    delta: f64,
    c: f64,
    alpha: &ComparisonFunction,
    eps: f64,
) -> Result<bool> {
    Ok(count as f64 >= turnpike_bound(n, delta, c, alpha, eps)?)
}

/// `t ↦ α(t^q)`, the composition used when a count in one notion is derived
/// from a count in another.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposedAlpha {
    pub alpha: ComparisonFunction,
    pub exponent: f64,
}

impl ComposedAlpha {
    pub fn eval(&self, t: f64) -> f64 {
        self.alpha.eval(t.powf(self.exponent))
    }

    fn bound(&self, n: usize, delta: f64, c: f64, eps: f64) -> Result<f64> {
        let a = self.eval(eps);
        if !(a > 0.0) {
            return Err(Error::DegenerateComparison(eps));
        }
        Ok(n as f64 - (delta + c) / a)
    }
}

/// Quantities compared at one time instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstantMetrics {
    pub k: usize,
    /// `E‖X(k) − X^s(k)‖^r`.
    pub lr_gap: f64,
    pub ky_fan: f64,
    pub levy_prokhorov: f64,
    /// `W_r(P_X(k), P_X^s(k))`.
    pub wasserstein: f64,
    /// `|m_s(X(k)) − m_s(X^s(k))|` for `s = 1..=r`.
    pub moment_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierarchyViolation {
    pub k: usize,
    pub eps: f64,
    pub implication: &'static str,
    pub observed: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierarchyReport {
    pub order: u32,
    pub eps_grid: Vec<f64>,
    pub checks: usize,
    pub instants: Vec<InstantMetrics>,
    pub violations: Vec<HierarchyViolation>,
}

fn instant_metrics(
    states: &AdaptedProcess,
    stationary: &AdaptedProcess,
    k: usize,
    r: u32,
) -> Result<(InstantMetrics, Vec<(f64, f64)>)> {
    let pairs = node_distances(states, stationary, k)?;
    let px = pushforward(states, k, DEFAULT_AGGREGATION_TOL)?;
    let ps = pushforward(stationary, k, DEFAULT_AGGREGATION_TOL)?;
    let moment_gaps = (1..=r)
        .map(|s| Ok((moment_norm(states, k, s)? - moment_norm(stationary, k, s)?).abs()))
        .collect::<Result<Vec<_>>>()?;
    let m = InstantMetrics {
        k,
        lr_gap: pairs.iter().map(|(d, p)| p * d.powi(r as i32)).sum(),
        ky_fan: ky_fan_from_distances(&pairs),
        levy_prokhorov: levy_prokhorov(&px, &ps, DEFAULT_BISECT_TOL)?,
        wasserstein: MetricKind::Wasserstein { order: r }.distance(&px, &ps)?,
        moment_gaps,
    };
    Ok((m, pairs))
}

/// Checks at every `k` and `ε`:
/// (i) `E‖Δ‖^r ≤ ε^{r+1} ⇒ P(‖Δ‖ > ε) ≤ ε`;
/// (ii) `d_KF ≤ ε ⇒ d_LP ≤ ε + bisect_tol`;
/// (iii) `E‖Δ‖^r ≤ ε ⇒ W_r ≤ ε^{1/r}`;
/// (iv) `W_r ≤ ε ⇒ |m_s − m_s^s| ≤ ε` for `s ≤ r`.
pub fn hierarchy_report(
    states: &AdaptedProcess,
    stationary: &AdaptedProcess,
    eps_grid: &[f64],
    r: u32,
) -> Result<HierarchyReport> {
    check(states, stationary)?;
    if r == 0 {
        return Err(Error::InvalidArgument("order must be positive".into()));
    }
    let per_k = (0..states.depths())
        .into_par_iter()
        .map(|k| instant_metrics(states, stationary, k, r))
        .collect::<Result<Vec<_>>>()?;
    let mut violations = Vec::new();
    let mut checks = 0;
    for (m, pairs) in &per_k {
        for &eps in eps_grid {
            let mut verify =
                |implication: &'static str, premise: bool, observed: f64, limit: f64| {
                    if premise {
                        checks += 1;
                        if observed > limit {
                            violations.push(HierarchyViolation {
                                k: m.k,
                                eps,
                                implication,
                                observed,
                                limit,
                            });
                        }
                    }
                };
            let tail = 1.0 - mass_within(pairs, eps);
            verify(
                "i",
                m.lr_gap <= eps.powi(r as i32 + 1),
                tail,
                eps + FLOAT_SLACK,
            );
            verify(
                "ii",
                m.ky_fan <= eps,
                m.levy_prokhorov,
                eps + DEFAULT_BISECT_TOL,
            );
            verify(
                "iii",
                m.lr_gap <= eps,
                m.wasserstein,
                eps.powf(1.0 / r as f64) + FLOAT_SLACK,
            );
            for gap in &m.moment_gaps {
                verify("iv", m.wasserstein <= eps, *gap, eps + FLOAT_SLACK);
            }
        }
    }
    Ok(HierarchyReport {
        order: r,
        eps_grid: eps_grid.to_vec(),
        checks,
        instants: per_k.into_iter().map(|(m, _)| m).collect(),
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountCheck {
    pub count: usize,
    pub bound: f64,
    pub holds: bool,
}

fn count_check(count: usize, bound: f64) -> CountCheck {
    CountCheck {
        count,
        bound,
        holds: count as f64 >= bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistCount {
    pub metric: MetricKind,
    pub count: usize,
    /// `None` when no derived bound applies to this metric.
    pub check: Option<CountCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub lr: CountCheck,
    pub prob: CountCheck,
    pub dist: Vec<DistCount>,
    pub moment: CountCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constants {
    /// `λ(0, X(0))`.
    pub storage_start: f64,
    pub storage_lower_bound: f64,
    /// `λ(0, X(0)) − M` plus [`CONSTANT_MARGIN`]; shared by all four bounds.
    pub c: f64,
    pub alpha: ComparisonFunction,
    /// Compositions used for the in-probability, Wasserstein and moment counts.
    pub alpha_prob: ComposedAlpha,
    pub alpha_wasserstein: ComposedAlpha,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnpikeReport {
    pub horizon: usize,
    pub order: u32,
    pub cost: f64,
    pub stationary_cost: f64,
    /// `J_N − N ℓ^s`; may be negative for a suboptimal stationary reference.
    pub delta: f64,
    pub constants: Constants,
    pub rows: Vec<EpsRow>,
    pub hierarchy: HierarchyReport,
    pub diagnostics: Diagnostics,
    pub markov_consistent: bool,
    #[serde(skip)]
    pub states: AdaptedProcess,
    #[serde(skip)]
    pub controls: AdaptedProcess,
    #[serde(skip)]
    pub stationary_states: AdaptedProcess,
    #[serde(skip)]
    pub stationary_controls: AdaptedProcess,
}

/// Everything needed to run the turnpike analysis at several horizons.
pub struct TurnpikeSetup<'a> {
    pub system: &'a ControlSystem,
    pub x0: DiscreteDistribution,
    pub pair: &'a StationaryPair,
    pub storage: &'a dyn StorageRv,
    pub alpha: ComparisonFunction,
    pub order: u32,
    pub eps_grid: Vec<f64>,
    pub metrics: Vec<MetricKind>,
    pub opt: OptConfig,
}

/// Trajectory and stationary process on one tree whose roots pair each atom
/// of `x0` with each atom of the stationary law, independently.
pub struct CoupledRun {
    pub states: AdaptedProcess,
    pub controls: AdaptedProcess,
    pub stationary_states: AdaptedProcess,
    pub stationary_controls: AdaptedProcess,
}

/// Lifts `states`/`controls` (on a tree fanned over `x0`) onto the coupled
/// tree and generates the stationary process there with `X^s(0) ~ ρ^s`.
pub fn couple(
    system: &ControlSystem,
    x0: &DiscreteDistribution,
    pair: &StationaryPair,
    states: &AdaptedProcess,
    controls: &AdaptedProcess,
) -> Result<CoupledRun> {
    let inner = pair.distribution.len();
    let depth = states.tree().depth();
    let tree = Arc::new(ScenarioTree::coupled(
        x0,
        &pair.distribution,
        system.noise.clone(),
        depth,
    )?);
    let roots: Vec<f64> = (0..tree.root_count())
        .map(|i| pair.distribution.atoms()[i % inner].value[0])
        .collect();
    let (stationary_states, stationary_controls) =
        stationary_process_on(pair, system, tree.clone(), &roots)?;
    Ok(CoupledRun {
        states: states.lift(&tree, inner)?,
        controls: controls.lift(&tree, inner)?,
        stationary_states,
        stationary_controls,
    })
}

/// Solves at `horizon`, couples with the stationary process and evaluates all
/// counts, bounds and the hierarchy.
pub fn turnpike_report(setup: &TurnpikeSetup<'_>, horizon: usize) -> Result<TurnpikeReport> {
    let inst = OCPInstance::new(
        setup.system.clone(),
        InitialState::Distribution(setup.x0.clone()),
        horizon,
    )?;
    let sol = ocp::solve(&inst, &setup.opt)?;
    let run = couple(
        setup.system,
        &setup.x0,
        setup.pair,
        &sol.states,
        &sol.controls,
    )?;
    analyze(
        setup,
        horizon,
        sol.cost,
        sol.diagnostics,
        sol.markov_consistent,
        run,
    )
}

/// Evaluates counts and bounds for a given coupled trajectory with cost `cost`.
pub fn analyze(
    setup: &TurnpikeSetup<'_>,
    horizon: usize,
    cost: f64,
    diagnostics: Diagnostics,
    markov_consistent: bool,
    run: CoupledRun,
) -> Result<TurnpikeReport> {
    let r = setup.order;
    let x = &run.states;
    let xs = &run.stationary_states;
    let tree = x.tree();
    let storage_start = setup
        .storage
        .eval(0, x.layer(0)?, xs.layer(0)?, tree.probs(0))?;
    let storage_lower_bound = setup.storage.lower_bound();
    let c = storage_start - storage_lower_bound + CONSTANT_MARGIN;
    let stationary_cost = setup.pair.stationary_cost;
    let delta = cost - horizon as f64 * stationary_cost;
    let alpha_prob = ComposedAlpha {
        alpha: setup.alpha.clone(),
        exponent: (r + 1) as f64,
    };
    let alpha_wasserstein = ComposedAlpha {
        alpha: setup.alpha.clone(),
        exponent: r as f64,
    };
    let marginals = (0..x.depths())
        .map(|k| pushforward(x, k, DEFAULT_AGGREGATION_TOL))
        .collect::<Result<Vec<_>>>()?;
    let rows = setup
        .eps_grid
        .par_iter()
        .map(|&eps| {
            let lr = count_lr(x, xs, eps, r)?;
            let prob = count_prob(x, xs, eps)?;
            let moment = count_moment(x, xs, eps, r)?;
            let wasserstein_bound = alpha_wasserstein.bound(horizon, delta, c, eps)?;
            let prob_bound = alpha_prob.bound(horizon, delta, c, eps)?;
            let dist = setup
                .metrics
                .iter()
                .map(|&metric| {
                    let count = count_dist(&marginals, &setup.pair.distribution, eps, metric)?;
                    let bound = match metric {
                        MetricKind::LevyProkhorov => Some(prob_bound),
                        MetricKind::Wasserstein { order } if order <= r => Some(wasserstein_bound),
                        _ => None,
                    };
                    Ok(DistCount {
                        metric,
                        count,
                        check: bound.map(|b| count_check(count, b)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EpsRow {
                eps,
                lr: count_check(lr, turnpike_bound(horizon, delta, c, &setup.alpha, eps)?),
                prob: count_check(prob, prob_bound),
                dist,
                moment: count_check(moment, wasserstein_bound),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hierarchy = hierarchy_report(x, xs, &setup.eps_grid, r)?;
    Ok(TurnpikeReport {
        horizon,
        order: r,
        cost,
        stationary_cost,
        delta,
        constants: Constants {
            storage_start,
            storage_lower_bound,
            c,
            alpha: setup.alpha.clone(),
            alpha_prob,
            alpha_wasserstein,
        },
        rows,
        hierarchy,
        diagnostics,
        markov_consistent,
        states: run.states,
        controls: run.controls,
        stationary_states: run.stationary_states,
        stationary_controls: run.stationary_controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::SquaredDeviation;
    use crate::stationary::stationary_process;
    use crate::system::MarkovPolicy;

    fn paper_stationary(depth: usize) -> (ControlSystem, StationaryPair, AdaptedProcess) {
        let sys = ControlSystem::paper_example(50.0);
        let pair = StationaryPair::new(
            sys.noise.distribution().clone(),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), depth).unwrap());
        let (x, _) = stationary_process(&pair, &sys, tree).unwrap();
        (sys, pair, x)
    }

    #[test]
    fn identical_processes_count_everything() {
        let (_, pair, xs) = paper_stationary(4);
        let marginals: Vec<_> = (0..5).map(|k| pushforward(&xs, k, 0.0).unwrap()).collect();
        for eps in [1e-9, 0.1, 1.0] {
            assert_eq!(count_lr(&xs, &xs, eps, 2).unwrap(), 5);
            assert_eq!(count_prob(&xs, &xs, eps).unwrap(), 5);
            assert_eq!(count_moment(&xs, &xs, eps, 2).unwrap(), 5);
            for metric in [MetricKind::default(), MetricKind::LevyProkhorov] {
                assert_eq!(
                    count_dist(&marginals, &pair.distribution, eps, metric).unwrap(),
                    5
                );
            }
        }
    }

    #[test]
    fn constant_gap() {
        let (_, _, xs) = paper_stationary(3);
        let eps = 0.1;
        let shifted = xs.map(|v| vec![v[0] + 2.0 * eps]).unwrap();
        assert_eq!(count_prob(&shifted, &xs, eps).unwrap(), 0);
        assert_eq!(count_lr(&shifted, &xs, 0.039, 2).unwrap(), 0);
        assert_eq!(count_lr(&shifted, &xs, 0.041, 2).unwrap(), 4);
        // only coincident instants count for tiny eps
        let partial = AdaptedProcess::from_fn(xs.tree().clone(), 1, 4, |k, node| {
            let v = xs.scalar(k, node);
            vec![if k == 2 { v } else { v + 1.0 }]
        })
        .unwrap();
        assert_eq!(count_lr(&partial, &xs, 1e-12, 2).unwrap(), 1);
    }

    #[test]
    fn sign_flip_keeps_moments() {
        let sys = ControlSystem::counterexample_default();
        let pair = StationaryPair::new(
            ControlSystem::symmetric_two_point(),
            MarkovPolicy::expr("0").unwrap(),
            &sys,
        )
        .unwrap();
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), 3).unwrap());
        let (xs, _) = stationary_process(&pair, &sys, tree).unwrap();
        let flipped = xs.map(|v| vec![-v[0]]).unwrap();
        assert_eq!(count_moment(&flipped, &xs, 1e-12, 2).unwrap(), 4);
        assert_eq!(count_lr(&flipped, &xs, 1.0, 2).unwrap(), 0);
        let h = hierarchy_report(&flipped, &xs, &[0.01, 0.1, 1.0], 2).unwrap();
        assert!(h.violations.is_empty());
        assert!(h
            .instants
            .iter()
            .all(|m| m.wasserstein == 0.0 && m.lr_gap == 4.0));
    }

    #[test]
    fn bounds() {
        assert!(bound_check(11, 10, 1e6, 1e6, &ComparisonFunction::Identity, 0.01).unwrap());
        assert!(bound_check(5, 10, 20.0, 30.0, &ComparisonFunction::Identity, 10.0).unwrap());
        assert!(!bound_check(4, 10, 20.0, 30.0, &ComparisonFunction::Identity, 10.0).unwrap());
        assert!(matches!(
            bound_check(5, 10, 0.0, 0.0, &ComparisonFunction::Zero, 1.0),
            Err(Error::DegenerateComparison(_))
        ));
    }

    #[test]
    fn stationary_hierarchy_is_clean() {
        let (_, _, xs) = paper_stationary(3);
        let h = hierarchy_report(&xs, &xs, &[0.05, 0.5], 2).unwrap();
        assert!(h.violations.is_empty());
        assert!(h.checks > 0);
    }

    #[test]
    fn pipeline_from_seven() {
        let sys = ControlSystem::paper_example(50.0);
        let pair = StationaryPair::new(
            sys.noise.distribution().clone(),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        let setup = TurnpikeSetup {
            system: &sys,
            x0: DiscreteDistribution::point(vec![7.0]),
            pair: &pair,
            storage: &SquaredDeviation,
            alpha: ComparisonFunction::Identity,
            order: 2,
            eps_grid: vec![0.05, 0.1, 0.5, 1.0],
            metrics: vec![
                MetricKind::Wasserstein { order: 2 },
                MetricKind::LevyProkhorov,
            ],
            opt: OptConfig::default(),
        };
        let rep = turnpike_report(&setup, 3).unwrap();
        assert!((rep.constants.storage_start - 49.0625).abs() < 1e-12);
        assert_eq!(rep.delta, rep.cost);
        assert_eq!(rep.states.tree().root_count(), 2);
        assert!(rep.hierarchy.violations.is_empty());
        for row in &rep.rows {
            assert!(row.lr.holds && row.prob.holds && row.moment.holds);
            assert!(row
                .dist
                .iter()
                .all(|d| d.check.as_ref().is_some_and(|c| c.holds)));
            assert!(row.lr.count <= 4);
        }
        for w in rep.rows.windows(2) {
            assert!(w[0].lr.count <= w[1].lr.count);
        }
    }
}
