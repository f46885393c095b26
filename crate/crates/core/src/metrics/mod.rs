//! Probability metrics between discrete distributions and distances between
//! random variables on a common scenario tree.

mod flow;
mod transport;

pub use flow::FlowNetwork;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm;
use crate::rv::{self, AdaptedProcess, DiscreteDistribution};

/// Default bisection tolerance for [`levy_prokhorov`].
pub const DEFAULT_BISECT_TOL: f64 = 1e-7;

/// Mass below which cumulative breakpoints coincide and transported flow is
/// dropped.
const MASS_SNAP: f64 = 1e-14;

/// Slack on the matched-mass test in the Lévy-Prokhorov feasibility check.
const FLOW_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricKind {
    Wasserstein { order: u32 },
    LevyProkhorov,
    MomentDistance { order: u32 },
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::Wasserstein { order: 1 }
    }
}

impl MetricKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            MetricKind::Wasserstein { order: 0 } | MetricKind::MomentDistance { order: 0 } => Err(
                Error::InvalidArgument("metric order must be a positive integer".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Distance between `p` and `q`. Wasserstein uses the quantile coupling in
    /// one dimension and the transport solver otherwise.
    pub fn distance(&self, p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
        self.validate()?;
        match *self {
            MetricKind::Wasserstein { order } => {
                if p.dim() == 1 && q.dim() == 1 {
                    wasserstein_1d(p, q, order)
                } else {
                    wasserstein_lp(p, q, order)
                }
            }
            MetricKind::LevyProkhorov => levy_prokhorov(p, q, DEFAULT_BISECT_TOL),
            MetricKind::MomentDistance { order } => moment_distance(p, q, order),
        }
    }

    /// Slack to allow when comparing computed values of this metric.
    pub fn slack(&self) -> f64 {
        match self {
            MetricKind::LevyProkhorov => DEFAULT_BISECT_TOL,
            _ => 0.0,
        }
    }
}

fn check_order(r: u32) -> Result<()> {
    if r == 0 {
        Err(Error::InvalidArgument(
            "metric order must be a positive integer".into(),
        ))
    } else {
        Ok(())
    }
}

fn check_dims(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

fn root(value: f64, r: u32) -> f64 {
    match r {
        1 => value,
        2 => value.sqrt(),
        _ => value.powf(1.0 / r as f64),
    }
}

/// Order-`r` Wasserstein distance between one-dimensional distributions via
/// the monotone coupling.
pub fn wasserstein_1d(p: &DiscreteDistribution, q: &DiscreteDistribution, r: u32) -> Result<f64> {
    check_order(r)?;
    for d in [p, q] {
        if d.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: d.dim(),
            });
        }
    }
    let a = p.sorted();
    let b = q.sorted();
    let (a, b) = (a.atoms(), b.atoms());
    let (mut i, mut j) = (0, 0);
    let (mut ca, mut cb) = (a[0].prob, b[0].prob);
    let mut prev = 0.0;
    let mut total = 0.0;
    loop {
        let next = ca.min(cb);
        let gap = (a[i].value[0] - b[j].value[0]).abs();
        if next > prev && gap > 0.0 {
            total += (next - prev) * gap.powi(r as i32);
        }
        prev = prev.max(next);
        let last_a = i + 1 == a.len();
        let last_b = j + 1 == b.len();
        if last_a && last_b {
            break;
        }
        let close = (ca - cb).abs() <= MASS_SNAP;
        let step_a = !last_a && (close || ca < cb || last_b);
        let step_b = !last_b && (close || cb < ca || last_a);
        if step_a {
            i += 1;
            ca += a[i].prob;
        }
        if step_b {
            j += 1;
            cb += b[j].prob;
        }
    }
    Ok(root(total, r))
}

/// Order-`r` Wasserstein distance in any dimension via the transportation
/// simplex.
pub fn wasserstein_lp(p: &DiscreteDistribution, q: &DiscreteDistribution, r: u32) -> Result<f64> {
    check_order(r)?;
    check_dims(p, q)?;
    let supply: Vec<f64> = p.atoms().iter().map(|a| a.prob).collect();
    let demand: Vec<f64> = q.atoms().iter().map(|a| a.prob).collect();
    let cost: Vec<f64> = p
        .atoms()
        .iter()
        .flat_map(|a| {
            q.atoms()
                .iter()
                .map(move |b| norm::distance(&a.value, &b.value).powi(r as i32))
        })
        .collect();
    let (_, flow) = transport::solve(&supply, &demand, &cost)?;
    let value: f64 = flow
        .iter()
        .zip(&cost)
        .filter(|(f, _)| **f > MASS_SNAP)
        .map(|(f, c)| f * c)
        .sum();
    Ok(root(value.max(0.0), r))
}

/// Ky-Fan distance from `(distance, probability)` pairs: the smallest `ε`
/// with `P(d > ε) ≤ ε`.
pub fn ky_fan_from_distances(pairs: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // tails[k] = mass of the k largest distances
    let mut tails = Vec::with_capacity(sorted.len() + 1);
    tails.push(0.0);
    for (_, p) in &sorted {
        tails.push(tails.last().unwrap() + p);
    }
    let tail_above = |eps: f64| -> f64 {
        let k = sorted.partition_point(|(d, _)| *d > eps);
        tails[k]
    };
    let mut candidates: Vec<f64> = sorted.iter().map(|(d, _)| *d).collect();
    candidates.extend(tails.iter().copied());
    candidates.push(0.0);
    candidates.retain(|c| *c >= 0.0);
    candidates.sort_by(f64::total_cmp);
    candidates
        .into_iter()
        .find(|&eps| tail_above(eps) <= eps)
        .unwrap_or(1.0)
}

/// Ky-Fan distance between processes on the same tree at depth `k`.
pub fn ky_fan(x: &AdaptedProcess, y: &AdaptedProcess, k: usize) -> Result<f64> {
    Ok(ky_fan_from_distances(&rv::node_distances(x, y, k)?))
}

fn pairwise_distances(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Vec<f64> {
    p.atoms()
        .iter()
        .flat_map(|a| {
            q.atoms()
                .iter()
                .map(move |b| norm::distance(&a.value, &b.value))
        })
        .collect()
}

/// Largest mass that can be coupled along atom pairs at distance ≤ `eps`.
fn matched_mass(p: &DiscreteDistribution, q: &DiscreteDistribution, dist: &[f64], eps: f64) -> f64 {
    let (m, n) = (p.len(), q.len());
    let source = m + n;
    let sink = source + 1;
    let mut g = FlowNetwork::new(m + n + 2);
    for (i, a) in p.atoms().iter().enumerate() {
        g.add_edge(source, i, a.prob);
    }
    for (j, b) in q.atoms().iter().enumerate() {
        g.add_edge(m + j, sink, b.prob);
    }
    for i in 0..m {
        for j in 0..n {
            if dist[i * n + j] <= eps {
                g.add_edge(i, m + j, f64::INFINITY);
            }
        }
    }
    g.max_flow(source, sink)
}

/// Lévy-Prokhorov distance as the coupling infimum of the Ky-Fan metric,
/// located by bisection to within `bisect_tol` (never below the true value).
pub fn levy_prokhorov(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    bisect_tol: f64,
) -> Result<f64> {
    if !(bisect_tol > 0.0) {
        return Err(Error::InvalidArgument("bisect_tol must be positive".into()));
    }
    check_dims(p, q)?;
    let dist = pairwise_distances(p, q);
    let feasible = |eps: f64| matched_mass(p, q, &dist, eps) >= 1.0 - eps - FLOW_SLACK;
    if feasible(0.0) {
        return Ok(0.0);
    }
    let dmax = dist.iter().fold(0.0f64, |a, &d| a.max(d));
    let mut lo = 0.0;
    let mut hi = dmax.min(1.0);
    while hi - lo > bisect_tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `|m_r(P) − m_r(Q)|` with `m_r` the `r`-th moment norm.
pub fn moment_distance(p: &DiscreteDistribution, q: &DiscreteDistribution, r: u32) -> Result<f64> {
    check_order(r)?;
    Ok((p.moment_norm(r) - q.moment_norm(r)).abs())
}

/// Maximum combined atom count accepted by [`lp_metric_oracle`].
pub const ORACLE_ATOM_CAP: usize = 8;

/// Brute-force Lévy-Prokhorov distance: the first `ε` on the grid
/// `{0, step, 2·step, …}` (capped at 1) for which some vertex of the
/// transportation polytope moves at most `ε` mass farther than `ε`.
pub fn lp_metric_oracle(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    grid_step: f64,
) -> Result<f64> {
    if !(grid_step > 0.0) {
        return Err(Error::InvalidArgument("grid_step must be positive".into()));
    }
    check_dims(p, q)?;
    let (m, n) = (p.len(), q.len());
    if m + n > ORACLE_ATOM_CAP {
        return Err(Error::SupportTooLarge {
            atoms: m + n,
            cap: ORACLE_ATOM_CAP,
        });
    }
    let dist = pairwise_distances(p, q);
    let supply: Vec<f64> = p.atoms().iter().map(|a| a.prob).collect();
    let demand: Vec<f64> = q.atoms().iter().map(|a| a.prob).collect();
    let vertices = polytope_vertices(&supply, &demand);

    let mut levels = dist.clone();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    // min_far[t]: least mass on pairs farther than levels[t]
    let min_far: Vec<f64> = levels
        .iter()
        .map(|&lvl| {
            vertices
                .iter()
                .map(|gamma| {
                    gamma
                        .iter()
                        .zip(&dist)
                        .filter(|(_, d)| **d > lvl)
                        .map(|(g, _)| g)
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let far_at = |eps: f64| {
        let t = levels.partition_point(|&l| l <= eps);
        min_far[t - 1]
    };
    let mut k = 0u64;
    loop {
        let eps = k as f64 * grid_step;
        if eps >= 1.0 {
            return Ok(1.0);
        }
        if far_at(eps) <= eps + FLOW_SLACK {
            return Ok(eps);
        }
        k += 1;
    }
}

/// All vertices of `{γ ≥ 0 : row sums = supply, column sums = demand}`,
/// found by solving every spanning-tree basis of `m + n − 1` cells.
fn polytope_vertices(supply: &[f64], demand: &[f64]) -> Vec<Vec<f64>> {
    let (m, n) = (supply.len(), demand.len());
    let cells = m * n;
    let size = m + n - 1;
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut chosen = Vec::with_capacity(size);
    combinations(cells, size, 0, &mut chosen, &mut |subset| {
        if let Some(gamma) = solve_basis(supply, demand, subset) {
            if !out
                .iter()
                .any(|v| v.iter().zip(&gamma).all(|(a, b)| (a - b).abs() < 1e-14))
            {
                out.push(gamma);
            }
        }
    });
    out
}

fn combinations(
    total: usize,
    size: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    if chosen.len() == size {
        f(chosen);
        return;
    }
    for c in start..total {
        if total - c < size - chosen.len() {
            break;
        }
        chosen.push(c);
        combinations(total, size, c + 1, chosen, f);
        chosen.pop();
    }
}

/// Solves the marginal equations on `subset` by repeatedly peeling a row or
/// column with a single remaining cell. `None` unless the cells form a
/// spanning tree with a nonnegative solution.
fn solve_basis(supply: &[f64], demand: &[f64], subset: &[usize]) -> Option<Vec<f64>> {
    let (m, n) = (supply.len(), demand.len());
    let mut row_left = supply.to_vec();
    let mut col_left = demand.to_vec();
    let mut open: Vec<usize> = subset.to_vec();
    let mut gamma = vec![0.0; m * n];
    let mut row_deg = vec![0usize; m];
    let mut col_deg = vec![0usize; n];
    for &c in subset {
        row_deg[c / n] += 1;
        col_deg[c % n] += 1;
    }
    if row_deg.contains(&0) || col_deg.contains(&0) {
        return None;
    }
    while !open.is_empty() {
        let pos = open
            .iter()
            .position(|&c| row_deg[c / n] == 1 || col_deg[c % n] == 1)?;
        let c = open.swap_remove(pos);
        let (i, j) = (c / n, c % n);
        let value = if row_deg[i] == 1 {
            row_left[i]
        } else {
            col_left[j]
        };
        if value < -1e-13 {
            return None;
        }
        let value = value.max(0.0);
        gamma[c] = value;
        row_left[i] -= value;
        col_left[j] -= value;
        row_deg[i] -= 1;
        col_deg[j] -= 1;
    }
    let residual = row_left
        .iter()
        .chain(&col_left)
        .fold(0.0f64, |a, r| a.max(r.abs()));
    (residual < 1e-12).then_some(gamma)
}
