//! Finite-horizon optimal control over adapted per-node controls.
//!
//! Controls are optimized node by node with L-BFGS on central
//! finite-difference gradients. Gradient components only re-simulate the
//! subtree below the perturbed node and only re-evaluate the cost terms that
//! can change there.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rv::{self, AdaptedProcess, DiscreteDistribution, ScenarioTree};
use crate::system::{self, ControlSystem, Controls, CostTerm, InitialState, Rollout};

/// Default cap on the number of scenario-tree leaves.
pub const DEFAULT_LEAF_CAP: usize = 1 << 14;

/// Tolerance of the a-posteriori Markov consistency check.
pub const MARKOV_TOL: f64 = 1e-6;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone)]
pub struct OCPInstance {
    pub system: ControlSystem,
    pub x0: InitialState,
    pub horizon: usize,
    tree: Arc<ScenarioTree>,
    roots: Vec<f64>,
}

impl OCPInstance {
    pub fn new(system: ControlSystem, x0: InitialState, horizon: usize) -> Result<Self> {
        Self::with_cap(system, x0, horizon, DEFAULT_LEAF_CAP)
    }

    pub fn with_cap(
        system: ControlSystem,
        x0: InitialState,
        horizon: usize,
        cap: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        system.validate()?;
        let dist = x0.to_distribution();
        system::check_tree_size(&system, dist.len(), horizon, cap)?;
        let tree = Arc::new(ScenarioTree::fanned(&dist, system.noise.clone(), horizon)?);
        let roots = dist.atoms().iter().map(|a| a.value[0]).collect();
        Ok(OCPInstance {
            system,
            x0,
            horizon,
            tree,
            roots,
        })
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    /// Initial value at each root of the tree.
    pub fn roots(&self) -> &[f64] {
        &self.roots
    }

    /// Number of control nodes (depths `0..N`).
    pub fn control_count(&self) -> usize {
        (0..self.horizon).map(|k| self.tree.node_count(k)).sum()
    }

    pub fn controls_from_flat(&self, flat: &[f64]) -> Result<AdaptedProcess> {
        let mut layers = Vec::with_capacity(self.horizon);
        let mut off = 0;
        for k in 0..self.horizon {
            let n = self.tree.node_count(k);
            layers.push(flat[off..off + n].to_vec());
            off += n;
        }
        AdaptedProcess::from_layers(self.tree.clone(), 1, layers)
    }

    pub fn rollout(&self, controls: &AdaptedProcess) -> Result<Rollout> {
        system::rollout_on(
            &self.system,
            self.tree.clone(),
            &self.roots,
            Controls::Adapted(controls),
            self.horizon,
        )
    }
}

/// `J_N` of the given controls.
pub fn evaluate_cost(inst: &OCPInstance, controls: &AdaptedProcess) -> Result<f64> {
    Ok(inst.rollout(controls)?.total_cost())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Convergence when `max_i |∂J/∂u_i| / p_i ≤ grad_tol · max(1, |J|)`.
    pub grad_tol: f64,
    pub fd_step: f64,
    /// Number of starts: identity policy, zero controls, then random.
    pub restarts: usize,
    pub seed: u64,
    pub memory: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iters: 1000,
            grad_tol: 1e-6,
            fd_step: 1e-6,
            restarts: 3,
            seed: 0,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartReport {
    pub start: String,
    /// `None` when the start produced a non-finite cost.
    pub cost: Option<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Probability-scaled gradient max-norm at the returned iterate.
    pub grad_norm: f64,
    pub converged: bool,
    pub starts: Vec<StartReport>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub controls: AdaptedProcess,
    pub states: AdaptedProcess,
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    pub diagnostics: Diagnostics,
    pub markov_consistent: bool,
    pub markov_violations: usize,
}

impl SolveResult {
    fn from_controls(
        inst: &OCPInstance,
        controls: AdaptedProcess,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let r = inst.rollout(&controls)?;
        let report = rv::markov_consistency_check(&r.states, &r.controls, MARKOV_TOL)?;
        Ok(SolveResult {
            cost: r.total_cost(),
            stage_costs: r.stage_costs,
            controls,
            states: r.states,
            diagnostics,
            markov_consistent: report.consistent,
            markov_violations: report.violations.len(),
        })
    }
}

struct Engine<'a> {
    inst: &'a OCPInstance,
    noise: Vec<f64>,
    offsets: Vec<usize>,
    /// Path probability of each control node, flat.
    weights: Vec<f64>,
    lo: f64,
    hi: f64,
}

/// Per-layer quantities reused by every gradient component.
struct LayerCache {
    states: Vec<Vec<f64>>,
    sum_u: Vec<f64>,
    sum_x: Vec<f64>,
    /// Current value of each metric term, indexed `[layer][term]`.
    metric: Vec<Vec<f64>>,
}

impl<'a> Engine<'a> {
    fn new(inst: &'a OCPInstance) -> Self {
        let tree = &inst.tree;
        let mut offsets = Vec::with_capacity(inst.horizon + 1);
        let mut weights = Vec::new();
        let mut off = 0;
        for k in 0..inst.horizon {
            offsets.push(off);
            off += tree.node_count(k);
            weights.extend_from_slice(tree.probs(k));
        }
        offsets.push(off);
        let (lo, hi) = inst.system.constraint.bounds();
        Engine {
            inst,
            noise: inst
                .system
                .noise
                .atoms()
                .iter()
                .map(|a| a.value[0])
                .collect(),
            offsets,
            weights,
            lo,
            hi,
        }
    }

    fn n(&self) -> usize {
        self.weights.len()
    }

    fn layer<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        &z[self.offsets[k]..self.offsets[k + 1]]
    }

    fn project(&self, z: &mut [f64]) {
        if self.lo.is_finite() || self.hi.is_finite() {
            z.iter_mut().for_each(|u| *u = u.clamp(self.lo, self.hi));
        }
    }

    fn states(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        let sys = &self.inst.system;
        let mut xs = vec![self.inst.roots.clone()];
        for k in 0..self.inst.horizon {
            let u = self.layer(z, k);
            let x = &xs[k];
            let mut next = Vec::with_capacity(x.len() * self.noise.len());
            for (xi, ui) in x.iter().zip(u) {
                for &w in &self.noise {
                    next.push(sys.step(*xi, *ui, w)?);
                }
            }
            xs.push(next);
        }
        Ok(xs)
    }

    fn cost_from_states(&self, z: &[f64], xs: &[Vec<f64>]) -> Result<f64> {
        let tree = &self.inst.tree;
        let mut total = 0.0;
        for k in 0..self.inst.horizon {
            total += self
                .inst
                .system
                .stage_cost(&xs[k], self.layer(z, k), tree.probs(k))?;
        }
        Ok(total)
    }

    fn cost(&self, z: &[f64]) -> Result<f64> {
        let xs = self.states(z)?;
        self.cost_from_states(z, &xs)
    }

    /// `J(zn) − J(z)` summed node by node, which resolves changes far below
    /// the magnitude of `J` itself.
    fn cost_diff(&self, z: &[f64], xs: &[Vec<f64>], zn: &[f64], xsn: &[Vec<f64>]) -> Result<f64> {
        let tree = &self.inst.tree;
        let mut d = 0.0;
        for k in 0..self.inst.horizon {
            let (u, un) = (self.layer(z, k), self.layer(zn, k));
            let (x, xn) = (&xs[k], &xsn[k]);
            let p = tree.probs(k);
            for term in &self.inst.system.cost {
                d += match term {
                    CostTerm::Expectation {
                        integrand,
                        coefficient,
                    } => {
                        let mut s = 0.0;
                        for i in 0..p.len() {
                            s += p[i]
                                * (integrand.eval(xn[i], un[i], 0.0)?
                                    - integrand.eval(x[i], u[i], 0.0)?);
                        }
                        coefficient * s
                    }
                    CostTerm::MeanControlSquared { coefficient } => {
                        mean_square_diff(*coefficient, p, u, un)
                    }
                    CostTerm::MeanStateSquared { coefficient } => {
                        mean_square_diff(*coefficient, p, x, xn)
                    }
                    CostTerm::MetricToTarget { .. } => {
                        self.metric_term(term, xn, p)? - self.metric_term(term, x, p)?
                    }
                    CostTerm::Constant { .. } => 0.0,
                };
            }
        }
        Ok(d)
    }

    fn cache(&self, z: &[f64]) -> Result<LayerCache> {
        let tree = &self.inst.tree;
        let states = self.states(z)?;
        let mut sum_u = Vec::new();
        let mut sum_x = Vec::new();
        let mut metric = Vec::new();
        for k in 0..self.inst.horizon {
            let p = tree.probs(k);
            sum_u.push(self.layer(z, k).iter().zip(p).map(|(u, p)| u * p).sum());
            sum_x.push(states[k].iter().zip(p).map(|(x, p)| x * p).sum());
            let mut row = Vec::new();
            for term in &self.inst.system.cost {
                if let CostTerm::MetricToTarget { .. } = term {
                    row.push(self.metric_term(term, &states[k], p)?);
                }
            }
            metric.push(row);
        }
        Ok(LayerCache {
            states,
            sum_u,
            sum_x,
            metric,
        })
    }

    fn metric_term(&self, term: &CostTerm, xs: &[f64], ps: &[f64]) -> Result<f64> {
        let joint = system::canonical_joint(xs, &vec![0.0; xs.len()], ps);
        self.inst.system.term_value(term, &joint)
    }

    /// Change of `J` when control `(k, i)` is set to `u_new`.
    fn delta(&self, z: &[f64], cache: &LayerCache, k: usize, i: usize, u_new: f64) -> Result<f64> {
        let tree = &self.inst.tree;
        let sys = &self.inst.system;
        let m = self.noise.len();
        let horizon = self.inst.horizon;
        let x = cache.states[k][i];
        let u_old = self.layer(z, k)[i];
        let p = tree.prob(k, i);
        let mut d = 0.0;
        for term in &sys.cost {
            match term {
                CostTerm::Expectation {
                    integrand,
                    coefficient,
                } => {
                    d += coefficient
                        * p
                        * (integrand.eval(x, u_new, 0.0)? - integrand.eval(x, u_old, 0.0)?);
                }
                CostTerm::MeanControlSquared { coefficient } => {
                    let ds = p * (u_new - u_old);
                    d += coefficient * ds * (2.0 * cache.sum_u[k] + ds);
                }
                _ => {}
            }
        }
        // subtree below (k, i): new states, controls unchanged
        let mut start = i * m;
        let mut cur: Vec<f64> = self
            .noise
            .iter()
            .map(|&w| sys.step(x, u_new, w))
            .collect::<Result<_>>()?;
        for j in k + 1..horizon {
            let old = &cache.states[j][start..start + cur.len()];
            let us = &self.layer(z, j)[start..start + cur.len()];
            let ps = &tree.probs(j)[start..start + cur.len()];
            let mut metric_idx = 0;
            for term in &sys.cost {
                match term {
                    CostTerm::Expectation {
                        integrand,
                        coefficient,
                    } => {
                        let mut s = 0.0;
                        for (((xn, xo), u), p) in cur.iter().zip(old).zip(us).zip(ps) {
                            s += p
                                * (integrand.eval(*xn, *u, 0.0)? - integrand.eval(*xo, *u, 0.0)?);
                        }
                        d += coefficient * s;
                    }
                    CostTerm::MeanStateSquared { coefficient } => {
                        let ds: f64 = cur
                            .iter()
                            .zip(old)
                            .zip(ps)
                            .map(|((xn, xo), p)| p * (xn - xo))
                            .sum();
                        d += coefficient * ds * (2.0 * cache.sum_x[j] + ds);
                    }
                    CostTerm::MetricToTarget { .. } => {
                        let mut layer = cache.states[j].clone();
                        layer[start..start + cur.len()].copy_from_slice(&cur);
                        d += self.metric_term(term, &layer, tree.probs(j))?
                            - cache.metric[j][metric_idx];
                        metric_idx += 1;
                    }
                    _ => {}
                }
            }
            if j + 1 < horizon {
                let mut next = Vec::with_capacity(cur.len() * m);
                for (xn, u) in cur.iter().zip(us) {
                    for &w in &self.noise {
                        next.push(sys.step(*xn, *u, w)?);
                    }
                }
                cur = next;
                start *= m;
            }
        }
        Ok(d)
    }

    fn gradient(&self, z: &[f64], h: f64) -> Result<Vec<f64>> {
        let cache = self.cache(z)?;
        let horizon = self.inst.horizon;
        let index: Vec<(usize, usize)> = (0..horizon)
            .flat_map(|k| (0..self.inst.tree.node_count(k)).map(move |i| (k, i)))
            .collect();
        index
            .par_iter()
            .map(|&(k, i)| {
                let u = self.layer(z, k)[i];
                let step = h * u.abs().max(1.0);
                let wide = self.central(z, &cache, k, i, step)?;
                let narrow = self.central(z, &cache, k, i, 0.5 * step)?;
                // Richardson extrapolation cancels the O(h²) truncation term
                Ok(match (wide, narrow) {
                    (Some(a), Some(b)) => (4.0 * b - a) / 3.0,
                    (_, Some(b)) => b,
                    (a, None) => a.unwrap_or(0.0),
                })
            })
            .collect()
    }

    /// Central difference quotient at `(k, i)` with half-width `step`,
    /// clipped to the box; `None` if the box leaves no room.
    fn central(
        &self,
        z: &[f64],
        cache: &LayerCache,
        k: usize,
        i: usize,
        step: f64,
    ) -> Result<Option<f64>> {
        let u = self.layer(z, k)[i];
        let up = (u + step).min(self.hi);
        let down = (u - step).max(self.lo);
        if up <= down {
            return Ok(None);
        }
        let dp = if up == u {
            0.0
        } else {
            self.delta(z, cache, k, i, up)?
        };
        let dm = if down == u {
            0.0
        } else {
            self.delta(z, cache, k, i, down)?
        };
        Ok(Some((dp - dm) / (up - down)))
    }

    fn scaled_norm(&self, g: &[f64], z: &[f64]) -> f64 {
        g.iter()
            .zip(&self.weights)
            .zip(z)
            .map(|((gi, p), u)| {
                let blocked = (*u <= self.lo && *gi > 0.0) || (*u >= self.hi && *gi < 0.0);
                if !blocked {
                    (gi / p).abs()
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

struct LocalResult {
    z: Vec<f64>,
    cost: f64,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
}

/// `c · (S'² − S²)` for the weighted sums `S` of `a` and `S'` of `b`.
fn mean_square_diff(c: f64, p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(a).map(|(p, v)| p * v).sum();
    let ds: f64 = p
        .iter()
        .zip(a.iter().zip(b))
        .map(|(p, (v, w))| p * (w - v))
        .sum();
    c * ds * (2.0 * s + ds)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lbfgs(engine: &Engine<'_>, z0: Vec<f64>, cfg: &OptConfig) -> Result<LocalResult> {
    let n = engine.n();
    let inv_p: Vec<f64> = engine.weights.iter().map(|p| 1.0 / p).collect();
    let mut z = z0;
    engine.project(&mut z);
    let mut xs = engine.states(&z)?;
    let f0 = engine.cost_from_states(&z, &xs)?;
    if !f0.is_finite() {
        return Err(Error::Solver("non-finite cost at start".into()));
    }
    let mut g = engine.gradient(&z, cfg.fd_step)?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stalled = 0;
    let mut iterations = 0;
    let mut gnorm = engine.scaled_norm(&g, &z);
    let mut f = f0;
    let threshold = |f: f64| cfg.grad_tol * f.abs().max(1.0);
    while iterations < cfg.max_iters && gnorm > threshold(f) {
        iterations += 1;
        let mut dir = two_loop(&g, &hist, &inv_p);
        for ((d, u), gi) in dir.iter_mut().zip(&z).zip(&g) {
            if (*u <= engine.lo && *d < 0.0) || (*u >= engine.hi && *d > 0.0) {
                *d = 0.0;
            }
            if !d.is_finite() {
                *d = -gi;
            }
        }
        if dot(&g, &dir) >= 0.0 {
            hist.clear();
            dir = g.iter().zip(&inv_p).map(|(gi, ip)| -gi * ip).collect();
        }
        let mut t = if hist.is_empty() {
            let dmax = dir.iter().fold(0.0f64, |a, d| a.max(d.abs()));
            (1.0 / dmax).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut zn: Vec<f64> = z.iter().zip(&dir).map(|(u, d)| u + t * d).collect();
            engine.project(&mut zn);
            let decrease: f64 = g
                .iter()
                .zip(zn.iter().zip(&z))
                .map(|(gi, (a, b))| gi * (a - b))
                .sum();
            let trial = engine
                .states(&zn)
                .and_then(|xsn| Ok((engine.cost_diff(&z, &xs, &zn, &xsn)?, xsn)));
            if let Ok((change, xsn)) = trial {
                if change.is_finite()
                    && change <= ARMIJO * decrease
                    && xsn.iter().flatten().all(|x| x.is_finite())
                {
                    accepted = Some((zn, change, xsn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((zn, change, xsn)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let gn = engine.gradient(&zn, cfg.fd_step)?;
        let s: Vec<f64> = zn.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 && sy.is_finite() {
            if hist.len() == cfg.memory.max(1) {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        if change >= 0.0 {
            stalled += 1;
            hist.clear();
        } else {
            stalled = 0;
        }
        z = zn;
        xs = xsn;
        f = engine.cost_from_states(&z, &xs)?;
        g = gn;
        gnorm = engine.scaled_norm(&g, &z);
        if stalled >= 5 {
            break;
        }
    }
    let f = engine.cost_from_states(&z, &xs)?;
    let converged = gnorm <= threshold(f);
    debug_assert_eq!(z.len(), n);
    Ok(LocalResult {
        z,
        cost: f,
        iterations,
        grad_norm: gnorm,
        converged,
    })
}

/// L-BFGS two-loop recursion with initial inverse Hessian `γ · diag(inv_p)`.
fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, inv_p: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let gamma = match hist.back() {
        Some((s, y, _)) => {
            let ydy: f64 = y.iter().zip(inv_p).map(|(yi, ip)| yi * yi * ip).sum();
            dot(s, y) / ydy
        }
        None => 1.0,
    };
    let mut r: Vec<f64> = q
        .iter()
        .zip(inv_p)
        .map(|(qi, ip)| gamma * qi * ip)
        .collect();
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &r);
        r.iter_mut().zip(s).for_each(|(ri, si)| *ri += si * (a - b));
    }
    r.iter_mut().for_each(|ri| *ri = -*ri);
    r
}

/// Controls of the identity policy `u = x` (projected onto the box).
fn identity_start(engine: &Engine<'_>) -> Result<Vec<f64>> {
    let inst = engine.inst;
    let mut z = Vec::with_capacity(engine.n());
    let mut x = inst.roots.clone();
    for _ in 0..inst.horizon {
        let u: Vec<f64> = x
            .iter()
            .map(|&v| inst.system.constraint.project(v))
            .collect();
        let mut next = Vec::with_capacity(x.len() * engine.noise.len());
        for (xi, ui) in x.iter().zip(&u) {
            for &w in &engine.noise {
                next.push(inst.system.step(*xi, *ui, w)?);
            }
        }
        z.extend(u);
        x = next;
    }
    Ok(z)
}

/// Local minimization from several starts; returns the best.
pub fn solve(inst: &OCPInstance, cfg: &OptConfig) -> Result<SolveResult> {
    if !(cfg.fd_step > 0.0 && cfg.grad_tol >= 0.0) {
        return Err(Error::InvalidArgument(
            "fd_step must be positive and grad_tol nonnegative".into(),
        ));
    }
    let engine = Engine::new(inst);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let identity = identity_start(&engine).unwrap_or_else(|_| vec![0.0; engine.n()]);
    let mut starts: Vec<(String, Vec<f64>)> = vec![
        ("identity".into(), identity.clone()),
        ("zero".into(), vec![0.0; engine.n()]),
    ];
    for r in 0..cfg.restarts.saturating_sub(2) {
        let z = identity
            .iter()
            .map(|u| u + rng.gen_range(-1.0..=1.0))
            .collect();
        starts.push((format!("random-{r}"), z));
    }
    starts.truncate(cfg.restarts.max(1));

    let mut reports = Vec::new();
    let mut best: Option<LocalResult> = None;
    for (label, z0) in starts {
        match lbfgs(&engine, z0, cfg) {
            Ok(res) if res.cost.is_finite() => {
                reports.push(StartReport {
                    start: label,
                    cost: Some(res.cost),
                    iterations: res.iterations,
                    grad_norm: res.grad_norm,
                    converged: res.converged,
                });
                if best.as_ref().is_none_or(|b| res.cost < b.cost) {
                    best = Some(res);
                }
            }
            _ => reports.push(StartReport {
                start: label,
                cost: None,
                iterations: 0,
                grad_norm: f64::NAN,
                converged: false,
            }),
        }
    }
    let best =
        best.ok_or_else(|| Error::Solver("every start produced a non-finite cost".into()))?;
    let diagnostics = Diagnostics {
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        converged: best.converged,
        starts: reports,
    };
    SolveResult::from_controls(inst, inst.controls_from_flat(&best.z)?, diagnostics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Zoom passes: each re-centres a grid of the same size on the incumbent
    /// with a span of two grid spacings per coordinate.
    #[serde(default)]
    pub refine: usize,
}

/// Maximum number of grid points per pass of [`brute_force_solve`].
pub const GRID_CAP: f64 = 1e7;

/// Exhaustive search over per-node controls on a uniform grid.
pub fn brute_force_solve(inst: &OCPInstance, grid: &GridSpec) -> Result<SolveResult> {
    if grid.steps < 2 || !(grid.lo < grid.hi) {
        return Err(Error::InvalidArgument(
            "grid needs lo < hi and at least 2 steps".into(),
        ));
    }
    let engine = Engine::new(inst);
    let n = engine.n();
    let combos = (grid.steps as f64).powi(n as i32);
    if combos > GRID_CAP {
        return Err(Error::GridTooLarge {
            combinations: combos,
            cap: GRID_CAP,
        });
    }
    let total = grid.steps.pow(n as u32);
    let mut lo = vec![grid.lo.max(engine.lo); n];
    let mut hi = vec![grid.hi.min(engine.hi); n];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..=grid.refine {
        let point = |idx: usize| -> Vec<f64> {
            let mut rem = idx;
            (0..n)
                .map(|d| {
                    let s = rem % grid.steps;
                    rem /= grid.steps;
                    lo[d] + (hi[d] - lo[d]) * s as f64 / (grid.steps - 1) as f64
                })
                .collect()
        };
        let found = (0..total)
            .into_par_iter()
            .filter_map(|idx| {
                let z = point(idx);
                engine
                    .cost(&z)
                    .ok()
                    .filter(|c| c.is_finite())
                    .map(|c| (c, idx))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((c, idx)) = found else { break };
        let z = point(idx);
        if best.as_ref().is_none_or(|b| c < b.0) {
            best = Some((c, z.clone()));
        }
        for d in 0..n {
            let spacing = (hi[d] - lo[d]) / (grid.steps - 1) as f64;
            lo[d] = (z[d] - spacing).max(engine.lo);
            hi[d] = (z[d] + spacing).min(engine.hi);
        }
    }
    let (_, z) = best.ok_or_else(|| Error::Solver("no finite cost on the grid".into()))?;
    let diagnostics = Diagnostics {
        iterations: grid.refine + 1,
        grad_norm: f64::NAN,
        converged: true,
        starts: Vec::new(),
    };
    SolveResult::from_controls(inst, inst.controls_from_flat(&z)?, diagnostics)
}

/// `J ≤ δ + N · ℓ^s`.
pub fn performance_bound_check(j: f64, delta: f64, n: usize, stationary_cost: f64) -> bool {
    j <= delta + n as f64 * stationary_cost
}

/// Initial law as a distribution (helper for callers that need `P_{X0}`).
pub fn initial_distribution(inst: &OCPInstance) -> DiscreteDistribution {
    inst.x0.to_distribution()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Constraint;

    fn paper(gamma: f64, x0: f64, n: usize) -> OCPInstance {
        OCPInstance::new(
            ControlSystem::paper_example(gamma),
            InitialState::Value(x0),
            n,
        )
        .unwrap()
    }

    #[test]
    fn cost_examples() {
        let inst = paper(0.0, 7.0, 4);
        let identity = identity_start(&Engine::new(&inst)).unwrap();
        let u = inst.controls_from_flat(&identity).unwrap();
        assert_eq!(evaluate_cost(&inst, &u).unwrap(), 0.0);

        let inst = paper(50.0, 7.0, 1);
        let zero = inst.controls_from_flat(&[0.0]).unwrap();
        assert_eq!(evaluate_cost(&inst, &zero).unwrap(), 2401.0);

        let free = ControlSystem::new(
            "x * w + u".parse().unwrap(),
            vec![],
            ControlSystem::paper_noise(),
            Constraint::None,
        )
        .unwrap();
        let inst = OCPInstance::new(free, InitialState::Value(1.0), 3).unwrap();
        let u = inst
            .controls_from_flat(&vec![0.3; inst.control_count()])
            .unwrap();
        assert_eq!(evaluate_cost(&inst, &u).unwrap(), 0.0);
    }

    #[test]
    fn incremental_gradient_matches_full_differences() {
        let inst = paper(3.0, 1.5, 4);
        let engine = Engine::new(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f64> = (0..engine.n()).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let g = engine.gradient(&z, 1e-6).unwrap();
        for idx in [0, 1, 4, 9, 14] {
            let h = 1e-6 * z[idx].abs().max(1.0);
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let full = (engine.cost(&zp).unwrap() - engine.cost(&zm).unwrap()) / (2.0 * h);
            assert!(
                (full - g[idx]).abs() < 1e-6 * full.abs().max(1.0),
                "{idx}: {full} vs {}",
                g[idx]
            );
        }
    }

    #[test]
    fn gamma_zero_reaches_zero() {
        let res = solve(&paper(0.0, 7.0, 5), &OptConfig::default()).unwrap();
        assert!(res.cost <= 1e-8);
        for k in 0..5 {
            for i in 0..res.controls.tree().node_count(k) {
                assert!((res.controls.scalar(k, i) - res.states.scalar(k, i)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn matches_brute_force_small() {
        let inst = paper(1.0, 1.0, 2);
        let res = solve(&inst, &OptConfig::default()).unwrap();
        let grid = GridSpec {
            lo: -1.0,
            hi: 2.0,
            steps: 61,
            refine: 4,
        };
        let oracle = brute_force_solve(&inst, &grid).unwrap();
        assert!(
            (res.cost - oracle.cost).abs() < 1e-4,
            "{} vs {}",
            res.cost,
            oracle.cost
        );
        assert!(res.cost <= oracle.cost + 1e-9);
    }

    #[test]
    fn reevaluated_cost_matches() {
        let inst = paper(50.0, 7.0, 3);
        let res = solve(&inst, &OptConfig::default()).unwrap();
        assert!((evaluate_cost(&inst, &res.controls).unwrap() - res.cost).abs() <= 1e-10);
        let identity = inst
            .controls_from_flat(&identity_start(&Engine::new(&inst)).unwrap())
            .unwrap();
        assert!(res.cost <= evaluate_cost(&inst, &identity).unwrap());
        let again = solve(&inst, &OptConfig::default()).unwrap();
        assert!((again.cost - res.cost).abs() <= 1e-6);
    }

    #[test]
    fn brute_force_quadratic() {
        let sys = ControlSystem::new(
            "x".parse().unwrap(),
            vec![CostTerm::expectation("(u - 0.3)^2", 1.0).unwrap()],
            ControlSystem::paper_noise(),
            Constraint::None,
        )
        .unwrap();
        let inst = OCPInstance::new(sys, InitialState::Value(0.0), 1).unwrap();
        let grid = GridSpec {
            lo: 0.0,
            hi: 1.0,
            steps: 11,
            refine: 0,
        };
        let res = brute_force_solve(&inst, &grid).unwrap();
        assert!((res.controls.scalar(0, 0) - 0.3).abs() < 1e-12);
        let huge = GridSpec {
            steps: 1000,
            ..grid
        };
        assert!(matches!(
            brute_force_solve(&paper(1.0, 1.0, 3), &huge),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn box_constraint_is_respected() {
        let mut sys = ControlSystem::paper_example(0.0);
        sys.constraint = Constraint::Box { lo: -1.0, hi: 1.0 };
        let inst = OCPInstance::new(sys, InitialState::Value(3.0), 2).unwrap();
        let res = solve(&inst, &OptConfig::default()).unwrap();
        assert!(res
            .controls
            .layers()
            .iter()
            .flatten()
            .all(|u| (-1.0..=1.0).contains(u)));
        assert!((res.controls.scalar(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn active_bounds_do_not_block_convergence() {
        let sys = ControlSystem::new(
            "0.9 * x + u + w".parse().unwrap(),
            vec![CostTerm::expectation("x^2 + 0.1 * u^2", 1.0).unwrap()],
            crate::rv::NoiseModel::scalar(&[(-0.2, 0.5), (0.2, 0.5)]).unwrap(),
            Constraint::Box { lo: -1.0, hi: 1.0 },
        )
        .unwrap();
        let inst = OCPInstance::new(sys, InitialState::Value(2.0), 6).unwrap();
        let res = solve(&inst, &OptConfig::default()).unwrap();
        assert!(res.diagnostics.starts.iter().all(|s| s.converged));
        assert_eq!(res.controls.scalar(0, 0), -1.0);
    }

    #[test]
    fn bound_examples() {
        assert!(performance_bound_check(0.0, 0.0, 3, 0.0));
        assert!(!performance_bound_check(5.0, 4.0, 10, 0.0));
        assert!(performance_bound_check(12.5, 12.5, 10, 0.0));
    }

    #[test]
    fn rejects_oversized_tree() {
        let err = OCPInstance::new(
            ControlSystem::paper_example(1.0),
            InitialState::Value(0.0),
            15,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { .. }));
    }
}
