//! Stationary pairs `(ρ, π)` with `T(ρ, π) = ρ`, the processes they generate,
//! and searches over finite candidate families.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::rv::{
    joint_pushforward, pushforward, AdaptedProcess, DiscreteDistribution, ScenarioTree,
    DEFAULT_AGGREGATION_TOL,
};
use crate::system::{
    rollout_on, transition_operator, ControlSystem, Controls, MarkovPolicy, TransitionOptions,
};

/// Tolerance used when a stationary pair must be verified before use.
pub const STATIONARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPair {
    pub distribution: DiscreteDistribution,
    pub policy: MarkovPolicy,
    pub stationary_cost: f64,
}

impl StationaryPair {
    /// Builds the pair and evaluates `ℓ(X, π(X))` for `X ~ distribution`.
    pub fn new(
        distribution: DiscreteDistribution,
        policy: MarkovPolicy,
        system: &ControlSystem,
    ) -> Result<Self> {
        let stationary_cost = system.policy_cost(&distribution, &policy)?;
        Ok(StationaryPair {
            distribution,
            policy,
            stationary_cost,
        })
    }

    /// Joint law of `(X, π(X))`.
    pub fn joint(&self) -> Result<DiscreteDistribution> {
        let items = self
            .distribution
            .atoms()
            .iter()
            .map(|a| Ok((vec![a.value[0], self.policy.eval(a.value[0])?], a.prob)))
            .collect::<Result<Vec<_>>>()?;
        DiscreteDistribution::from_weighted(items, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityCheck {
    pub stationary: bool,
    pub distance: f64,
}

/// Computes `d(T(ρ, π), ρ)` and compares it with `tol`.
pub fn verify_stationary_distribution(
    pair: &StationaryPair,
    system: &ControlSystem,
    metric: MetricKind,
    tol: f64,
) -> Result<StationarityCheck> {
    let next = transition_operator(
        &pair.distribution,
        &pair.policy,
        system,
        &TransitionOptions::default(),
    )?;
    let distance = metric.distance(&next, &pair.distribution)?;
    Ok(StationarityCheck {
        stationary: distance <= tol + metric.slack(),
        distance,
    })
}

fn require_stationary(pair: &StationaryPair, system: &ControlSystem) -> Result<()> {
    let check =
        verify_stationary_distribution(pair, system, MetricKind::default(), STATIONARY_TOL)?;
    if !check.stationary {
        return Err(Error::NotStationary {
            distance: check.distance,
            tol: STATIONARY_TOL,
        });
    }
    Ok(())
}

/// Generates `X(k+1) = f(X(k), π(X(k)), W(k))` on a tree whose roots carry
/// the atoms of the stationary law. Controls cover every depth of the tree.
pub fn stationary_process(
    pair: &StationaryPair,
    system: &ControlSystem,
    tree: Arc<ScenarioTree>,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    if tree.root_count() != pair.distribution.len() {
        return Err(Error::TreeMismatch);
    }
    let roots: Vec<f64> = pair
        .distribution
        .atoms()
        .iter()
        .map(|a| a.value[0])
        .collect();
    stationary_process_on(pair, system, tree, &roots)
}

/// Like [`stationary_process`] but with explicit per-root initial values, for
/// trees whose roots couple the stationary law with another variable. The
/// root layer must still have law `ρ`.
pub fn stationary_process_on(
    pair: &StationaryPair,
    system: &ControlSystem,
    tree: Arc<ScenarioTree>,
    roots: &[f64],
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    require_stationary(pair, system)?;
    if roots.len() != tree.root_count() {
        return Err(Error::TreeMismatch);
    }
    let initial = DiscreteDistribution::from_weighted(
        roots.iter().zip(tree.probs(0)).map(|(&x, &p)| (vec![x], p)),
        0.0,
    )?;
    let gap = MetricKind::default().distance(&initial, &pair.distribution)?;
    if gap > STATIONARY_TOL {
        return Err(Error::InvalidArgument(format!(
            "root values are at distance {gap} from the stationary law"
        )));
    }
    let horizon = tree.depth();
    let r = rollout_on(system, tree, roots, Controls::Policy(&pair.policy), horizon)?;
    let mut layers = r.controls.layers().to_vec();
    let last = r.states.layer(horizon)?;
    layers.push(
        last.iter()
            .map(|&x| pair.policy.eval(x))
            .collect::<Result<_>>()?,
    );
    let controls = AdaptedProcess::from_layers(r.states.tree().clone(), 1, layers)?;
    Ok((r.states, controls))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthCheck {
    pub depth: usize,
    pub state_distance: f64,
    /// `None` where the control process does not reach this depth.
    pub joint_distance: Option<f64>,
    pub within_tol: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessCheck {
    pub stationary: bool,
    pub depths: Vec<DepthCheck>,
}

impl ProcessCheck {
    /// True iff every depth from `from` onward is within tolerance.
    pub fn stationary_from(&self, from: usize) -> bool {
        self.depths
            .iter()
            .filter(|d| d.depth >= from)
            .all(|d| d.within_tol)
    }
}

/// Compares the law of `X(k)` and of `(X(k), U(k))` with the reference pair
/// at every depth.
pub fn verify_stationary_process(
    states: &AdaptedProcess,
    controls: &AdaptedProcess,
    reference: &StationaryPair,
    metric: MetricKind,
    tol: f64,
) -> Result<ProcessCheck> {
    if !states.same_tree(controls) {
        return Err(Error::TreeMismatch);
    }
    let joint_ref = reference.joint()?;
    let limit = tol + metric.slack();
    let depths = (0..states.depths())
        .into_par_iter()
        .map(|k| {
            let marginal = pushforward(states, k, DEFAULT_AGGREGATION_TOL)?;
            let state_distance = metric.distance(&marginal, &reference.distribution)?;
            let joint_distance = if k < controls.depths() {
                let joint = joint_pushforward(states, controls, k, DEFAULT_AGGREGATION_TOL)?;
                Some(metric.distance(&joint, &joint_ref)?)
            } else {
                None
            };
            let within_tol = state_distance <= limit && joint_distance.map_or(true, |d| d <= limit);
            Ok(DepthCheck {
                depth: k,
                state_distance,
                joint_distance,
                within_tol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProcessCheck {
        stationary: depths.iter().all(|d| d.within_tol),
        depths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoint {
    pub distribution: DiscreteDistribution,
    /// Number of applications of `T` that produced `distribution`.
    pub iterations: usize,
    pub converged: bool,
    /// Distance between `distribution` and its image.
    pub distance: f64,
}

/// Iterates `ρ ← T(ρ, π)` until the image is within `tol` of the current
/// iterate or `max_iter` images have been computed.
pub fn fixed_point_iteration(
    policy: &MarkovPolicy,
    rho0: &DiscreteDistribution,
    system: &ControlSystem,
    metric: MetricKind,
    tol: f64,
    max_iter: usize,
    opts: &TransitionOptions,
) -> Result<FixedPoint> {
    let mut current = rho0.clone();
    let mut distance = f64::INFINITY;
    for i in 0..max_iter {
        let next = transition_operator(&current, policy, system, opts)?;
        distance = metric.distance(&next, &current)?;
        if distance <= tol + metric.slack() {
            return Ok(FixedPoint {
                distribution: current,
                iterations: i,
                converged: true,
                distance,
            });
        }
        current = next;
    }
    Ok(FixedPoint {
        distribution: current,
        iterations: max_iter,
        converged: false,
        distance,
    })
}

/// Builds one candidate per policy by running [`fixed_point_iteration`] from
/// `rho0`. Policies whose iteration does not converge are skipped.
pub fn candidates_from_policies(
    system: &ControlSystem,
    policies: &[MarkovPolicy],
    rho0: &DiscreteDistribution,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<StationaryPair>> {
    let opts = TransitionOptions::default();
    let mut out = Vec::new();
    for policy in policies {
        let fp = fixed_point_iteration(
            policy,
            rho0,
            system,
            MetricKind::default(),
            tol,
            max_iter,
            &opts,
        )?;
        if fp.converged {
            out.push(StationaryPair::new(
                fp.distribution,
                policy.clone(),
                system,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub cost: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedCandidate {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarySearch {
    pub best: StationaryPair,
    /// Verified candidates by increasing cost.
    pub ranking: Vec<RankedCandidate>,
    pub excluded: Vec<ExcludedCandidate>,
}

/// Minimizes the stationary cost over the candidates that pass
/// [`verify_stationary_distribution`].
pub fn optimal_stationary_search(
    system: &ControlSystem,
    candidates: &[StationaryPair],
    metric: MetricKind,
    tol: f64,
) -> Result<StationarySearch> {
    let outcomes: Vec<std::result::Result<RankedCandidate, ExcludedCandidate>> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let exclude = |reason: String| ExcludedCandidate { index, reason };
            let check = verify_stationary_distribution(pair, system, metric, tol)
                .map_err(|e| exclude(e.to_string()))?;
            if !check.stationary {
                return Err(exclude(format!(
                    "distance {} to its image exceeds {tol}",
                    check.distance
                )));
            }
            let cost = system
                .policy_cost(&pair.distribution, &pair.policy)
                .map_err(|e| exclude(e.to_string()))?;
            if !cost.is_finite() {
                return Err(exclude(format!("stationary cost {cost} is not finite")));
            }
            Ok(RankedCandidate {
                index,
                cost,
                distance: check.distance,
            })
        })
        .collect();
    let mut ranking = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => ranking.push(r),
            Err(e) => excluded.push(e),
        }
    }
    ranking.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.index.cmp(&b.index)));
    let first = ranking.first().ok_or(Error::NoStationaryCandidate)?;
    let mut best = candidates[first.index].clone();
    best.stationary_cost = first.cost;
    Ok(StationarySearch {
        best,
        ranking,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rv::NoiseModel;
    use crate::system::{rollout, InitialState};

    fn paper_pair() -> (ControlSystem, StationaryPair) {
        let sys = ControlSystem::paper_example(50.0);
        let pair = StationaryPair::new(
            sys.noise.distribution().clone(),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        (sys, pair)
    }

    #[test]
    fn noise_law_with_identity_is_stationary() {
        let (sys, pair) = paper_pair();
        assert_eq!(pair.stationary_cost, 0.0);
        for metric in [
            MetricKind::Wasserstein { order: 1 },
            MetricKind::Wasserstein { order: 2 },
            MetricKind::LevyProkhorov,
        ] {
            let c = verify_stationary_distribution(&pair, &sys, metric, 0.0).unwrap();
            assert!(c.stationary);
            assert_eq!(c.distance, 0.0);
        }
    }

    #[test]
    fn point_mass_is_not_stationary() {
        let (sys, _) = paper_pair();
        let delta = DiscreteDistribution::point(vec![7.0]);
        let pair = StationaryPair::new(delta.clone(), MarkovPolicy::Identity, &sys).unwrap();
        let c = verify_stationary_distribution(&pair, &sys, MetricKind::default(), 1e-9).unwrap();
        // W1(ρ_W, δ_7) = 0.2 * 6.5 + 0.8 * 7.125
        assert!((c.distance - 7.0).abs() < 1e-12);
        assert!(!c.stationary);
    }

    #[test]
    fn frozen_dynamics_fix_everything() {
        let mut sys = ControlSystem::paper_example(1.0);
        sys.dynamics = "x".parse().unwrap();
        let rho = DiscreteDistribution::scalar(&[(-2.0, 0.3), (1.5, 0.7)]).unwrap();
        let policy = MarkovPolicy::expr("x^2 - 3").unwrap();
        let pair = StationaryPair::new(rho.clone(), policy.clone(), &sys).unwrap();
        let c = verify_stationary_distribution(&pair, &sys, MetricKind::default(), 0.0).unwrap();
        assert_eq!(c.distance, 0.0);
        let fp = fixed_point_iteration(
            &policy,
            &rho,
            &sys,
            MetricKind::default(),
            1e-12,
            10,
            &TransitionOptions::default(),
        )
        .unwrap();
        assert!(fp.converged);
        assert_eq!(fp.iterations, 0);
        assert_eq!(fp.distribution, rho);
    }

    #[test]
    fn fixed_point_from_point_mass() {
        let (sys, _) = paper_pair();
        let fp = fixed_point_iteration(
            &MarkovPolicy::Identity,
            &DiscreteDistribution::point(vec![7.0]),
            &sys,
            MetricKind::default(),
            1e-12,
            10,
            &TransitionOptions::default(),
        )
        .unwrap();
        assert!(fp.converged);
        assert_eq!(fp.iterations, 1);
        assert_eq!(&fp.distribution, sys.noise.distribution());
    }

    #[test]
    fn zero_control_in_multiplicative_system() {
        let sys = ControlSystem::counterexample_default();
        let rho = DiscreteDistribution::scalar(&[(0.0, 0.25), (3.0, 0.75)]).unwrap();
        let fp = fixed_point_iteration(
            &MarkovPolicy::expr("0").unwrap(),
            &rho,
            &sys,
            MetricKind::default(),
            0.0,
            3,
            &TransitionOptions::default(),
        )
        .unwrap();
        assert!(fp.converged);
        assert_eq!(fp.distribution, rho);
    }

    #[test]
    fn non_convergence_is_reported() {
        let (sys, _) = paper_pair();
        let fp = fixed_point_iteration(
            &MarkovPolicy::expr("x + 1").unwrap(),
            &DiscreteDistribution::point(vec![0.0]),
            &sys,
            MetricKind::default(),
            0.0,
            0,
            &TransitionOptions::default(),
        )
        .unwrap();
        assert!(!fp.converged);
    }

    #[test]
    fn process_follows_noise() {
        let (sys, pair) = paper_pair();
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), 4).unwrap());
        let (x, u) = stationary_process(&pair, &sys, tree.clone()).unwrap();
        assert_eq!(u.depths(), 5);
        for k in 1..=4 {
            for node in 0..tree.node_count(k) {
                assert_eq!(x.scalar(k, node), tree.noise_value(node)[0]);
            }
        }
        let check = verify_stationary_process(&x, &u, &pair, MetricKind::default(), 1e-12).unwrap();
        assert!(check.stationary);
        assert!(check
            .depths
            .iter()
            .all(|d| d.state_distance == 0.0 && d.joint_distance == Some(0.0)));
    }

    #[test]
    fn deterministic_fixed_point_gives_constant_process() {
        let mut sys = ControlSystem::paper_example(1.0);
        sys.noise = NoiseModel::scalar(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
        sys.dynamics = "x + (u - 2) * w".parse().unwrap();
        let pair = StationaryPair::new(
            DiscreteDistribution::point(vec![4.0]),
            MarkovPolicy::expr("2").unwrap(),
            &sys,
        )
        .unwrap();
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), 3).unwrap());
        let (x, _) = stationary_process(&pair, &sys, tree).unwrap();
        assert!(x.layers().iter().flatten().all(|&v| v == 4.0));
    }

    #[test]
    fn unverified_pair_is_rejected() {
        let (sys, _) = paper_pair();
        let pair = StationaryPair::new(
            DiscreteDistribution::point(vec![7.0]),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        let tree =
            Arc::new(ScenarioTree::fanned(&pair.distribution, sys.noise.clone(), 2).unwrap());
        assert!(matches!(
            stationary_process(&pair, &sys, tree),
            Err(Error::NotStationary { .. })
        ));
    }

    #[test]
    fn rollout_from_seven_settles_after_one_step() {
        let (sys, pair) = paper_pair();
        let r = rollout(
            &sys,
            &InitialState::Value(7.0),
            Controls::Policy(&MarkovPolicy::Identity),
            4,
        )
        .unwrap();
        let check =
            verify_stationary_process(&r.states, &r.controls, &pair, MetricKind::default(), 1e-9)
                .unwrap();
        assert!(!check.stationary);
        assert!(!check.depths[0].within_tol);
        assert!(check.stationary_from(1));
    }

    #[test]
    fn constant_zero_process_is_not_stationary() {
        let (sys, pair) = paper_pair();
        let tree = Arc::new(ScenarioTree::new(sys.noise.clone(), 2));
        let zero = AdaptedProcess::constant(tree, 3, vec![0.0]).unwrap();
        let check =
            verify_stationary_process(&zero, &zero, &pair, MetricKind::default(), 1e-9).unwrap();
        assert!(!check.stationary);
    }

    #[test]
    fn search_ranks_identity_first() {
        let (sys, pair) = paper_pair();
        let shifts: [f64; 4] = [-1.0, -0.5, 0.25, 1.0];
        let policies: Vec<MarkovPolicy> = shifts
            .iter()
            .map(|c| MarkovPolicy::expr(&format!("x + {c}")).unwrap())
            .collect();
        let mut candidates =
            candidates_from_policies(&sys, &policies, sys.noise.distribution(), 1e-12, 20).unwrap();
        assert_eq!(candidates.len(), shifts.len());
        for (pair, c) in candidates.iter().zip(shifts) {
            let expected = c.powi(4) + 50.0 * (c * c + c).powi(2);
            assert!((pair.stationary_cost - expected).abs() < 1e-10 * expected.max(1.0));
        }
        candidates.insert(
            0,
            StationaryPair::new(
                DiscreteDistribution::point(vec![7.0]),
                MarkovPolicy::Identity,
                &sys,
            )
            .unwrap(),
        );
        candidates.push(pair.clone());
        let s = optimal_stationary_search(&sys, &candidates, MetricKind::default(), 1e-9).unwrap();
        assert_eq!(s.best, pair);
        assert_eq!(s.ranking[0].cost, 0.0);
        assert_eq!(s.ranking.len(), 5);
        assert_eq!(s.excluded.len(), 1);
        assert_eq!(s.excluded[0].index, 0);
    }

    #[test]
    fn single_and_empty_candidate_sets() {
        let (sys, pair) = paper_pair();
        let s =
            optimal_stationary_search(&sys, &[pair.clone()], MetricKind::default(), 0.0).unwrap();
        assert_eq!(s.best, pair);
        let bad = StationaryPair::new(
            DiscreteDistribution::point(vec![7.0]),
            MarkovPolicy::Identity,
            &sys,
        )
        .unwrap();
        assert!(matches!(
            optimal_stationary_search(&sys, &[bad], MetricKind::default(), 0.0),
            Err(Error::NoStationaryCandidate)
        ));
    }
}
