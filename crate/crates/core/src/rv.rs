//! Finite filtered probability spaces and random variables on them.
//!
//! A [`ScenarioTree`] enumerates every noise history of an i.i.d.
//! finite-support noise sequence. Depth-`k` nodes are indexed in mixed radix:
//! the root index is the leading digit, followed by the noise atom drawn at
//! each step, so node `i` at depth `k + 1` has parent `i / m` and last noise
//! atom `i % m` (with `m` the number of noise atoms). An [`AdaptedProcess`]
//! stores one vector per node, which makes it adapted to the tree filtration
//! by construction.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm;

/// Tolerance on total probability mass.
pub const PROB_TOL: f64 = 1e-12;

/// Default clustering tolerance for [`pushforward`] and the transition operator.
pub const DEFAULT_AGGREGATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: Vec<f64>,
    pub prob: f64,
}

impl Atom {
    pub fn new(value: Vec<f64>, prob: f64) -> Self {
        Atom { value, prob }
    }

    pub fn scalar(value: f64, prob: f64) -> Self {
        Atom {
            value: vec![value],
            prob,
        }
    }
}

/// Weighted atoms in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Atom>", into = "Vec<Atom>")]
pub struct DiscreteDistribution {
    atoms: Vec<Atom>,
}

impl TryFrom<Vec<Atom>> for DiscreteDistribution {
    type Error = Error;

    fn try_from(atoms: Vec<Atom>) -> Result<Self> {
        DiscreteDistribution::new(atoms)
    }
}

impl From<DiscreteDistribution> for Vec<Atom> {
    fn from(d: DiscreteDistribution) -> Self {
        d.atoms
    }
}

fn validate_atoms(atoms: &[Atom]) -> Result<usize> {
    let first = atoms
        .first()
        .ok_or_else(|| Error::InvalidDistribution("no atoms".into()))?;
    let dim = first.value.len();
    if dim == 0 {
        return Err(Error::InvalidDistribution("zero-dimensional atom".into()));
    }
    let mut total = 0.0;
    for a in atoms {
        if a.value.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: a.value.len(),
            });
        }
        if a.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "non-finite atom value {:?}",
                a.value
            )));
        }
        if !(a.prob > 0.0 && a.prob <= 1.0 + PROB_TOL) {
            return Err(Error::InvalidDistribution(format!(
                "atom probability {} outside (0, 1]",
                a.prob
            )));
        }
        total += a.prob;
    }
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(dim)
}

impl DiscreteDistribution {
    /// Validates the atoms and merges exact duplicates (first occurrence wins
    /// the position).
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        validate_atoms(&atoms)?;
        Ok(DiscreteDistribution {
            atoms: aggregate(atoms.into_iter().map(|a| (a.value, a.prob)), 0.0),
        })
    }

    pub fn point(value: Vec<f64>) -> Self {
        DiscreteDistribution {
            atoms: vec![Atom::new(value, 1.0)],
        }
    }

    /// Builds a scalar distribution from `(value, prob)` pairs.
    pub fn scalar(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(v, p)| Atom::scalar(v, p)).collect())
    }

    /// Aggregates weighted values at `tol` (greedy first-fit, max-norm).
    pub fn from_weighted<I>(items: I, tol: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, f64)>,
    {
        let atoms = aggregate(items, tol);
        validate_atoms(&atoms)?;
        Ok(DiscreteDistribution { atoms })
    }

    /// Canonical form: atoms sorted by value and exact duplicates merged in
    /// sorted order, so the result (bitwise) does not depend on input order.
    pub fn canonical<I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, f64)>,
    {
        let mut items: Vec<(Vec<f64>, f64)> = items.into_iter().collect();
        items.sort_by(|a, b| cmp_values(&a.0, &b.0).then(a.1.total_cmp(&b.1)));
        let mut atoms: Vec<Atom> = Vec::with_capacity(items.len());
        for (v, p) in items {
            match atoms.last_mut() {
                Some(last) if last.value == v => last.prob += p,
                _ => atoms.push(Atom::new(v, p)),
            }
        }
        validate_atoms(&atoms)?;
        Ok(DiscreteDistribution { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].value.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob).sum()
    }

    pub fn expectation<G: Fn(&[f64]) -> f64>(&self, g: G) -> f64 {
        self.atoms.iter().map(|a| a.prob * g(&a.value)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for a in &self.atoms {
            for (mi, v) in m.iter_mut().zip(&a.value) {
                *mi += a.prob * v;
            }
        }
        m
    }

    /// `E[‖X‖^r]^{1/r}`.
    pub fn moment_norm(&self, r: u32) -> f64 {
        assert!(r >= 1, "moment order must be positive");
        let m = self.expectation(|v| norm::norm(v).powi(r as i32));
        m.powf(1.0 / r as f64)
    }

    /// Same atoms sorted by value (ties broken by probability).
    pub fn sorted(&self) -> DiscreteDistribution {
        let mut atoms = self.atoms.clone();
        atoms.sort_by(|a, b| cmp_values(&a.value, &b.value).then(a.prob.total_cmp(&b.prob)));
        DiscreteDistribution { atoms }
    }

    pub fn aggregated(&self, tol: f64) -> DiscreteDistribution {
        DiscreteDistribution {
            atoms: aggregate(self.atoms.iter().map(|a| (a.value.clone(), a.prob)), tol),
        }
    }

    /// Image under a map of the atom values (re-aggregated at `tol`).
    pub fn map<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F, tol: f64) -> Result<Self> {
        Self::from_weighted(self.atoms.iter().map(|a| (f(&a.value), a.prob)), tol)
    }

    /// Keeps the `cap` most likely atoms and renormalizes.
    pub fn pruned(&self, cap: usize) -> DiscreteDistribution {
        if self.atoms.len() <= cap {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.atoms.len()).collect();
        order.sort_by(|&a, &b| {
            self.atoms[b]
                .prob
                .total_cmp(&self.atoms[a].prob)
                .then(a.cmp(&b))
        });
        let mut keep: Vec<usize> = order[..cap].to_vec();
        keep.sort_unstable();
        let mass: f64 = keep.iter().map(|&i| self.atoms[i].prob).sum();
        DiscreteDistribution {
            atoms: keep
                .into_iter()
                .map(|i| Atom::new(self.atoms[i].value.clone(), self.atoms[i].prob / mass))
                .collect(),
        }
    }

    /// Atom-wise comparison up to `tol` in value (max-norm) and probability,
    /// after sorting both sides.
    pub fn approx_eq(&self, other: &DiscreteDistribution, tol: f64) -> bool {
        if self.len() != other.len() || self.dim() != other.dim() {
            return false;
        }
        let a = self.sorted();
        let b = other.sorted();
        a.atoms.iter().zip(&b.atoms).all(|(x, y)| {
            norm::max_distance(&x.value, &y.value) <= tol && (x.prob - y.prob).abs() <= tol
        })
    }
}

pub(crate) fn cmp_values(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Greedy first-fit clustering in insertion order. An item joins the first
/// cluster whose current (probability-weighted mean) value lies within `tol`
/// in the max-norm. With `tol == 0` only bitwise-equal values merge and the
/// value is kept as is.
pub fn aggregate<I>(items: I, tol: f64) -> Vec<Atom>
where
    I: IntoIterator<Item = (Vec<f64>, f64)>,
{
    let mut atoms: Vec<Atom> = Vec::new();
    if tol <= 0.0 {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for (v, p) in items {
            // -0.0 and 0.0 are the same point
            let key: Vec<u64> = v.iter().map(|x| (x + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&i) => atoms[i].prob += p,
                None => {
                    index.insert(key, atoms.len());
                    atoms.push(Atom::new(v, p));
                }
            }
        }
        return atoms;
    }
    for (v, p) in items {
        let hit = atoms
            .iter()
            .position(|a| norm::max_distance(&a.value, &v) <= tol);
        match hit {
            Some(i) => {
                let atom = &mut atoms[i];
                atom.prob += p;
                let share = if atom.prob > 0.0 { p / atom.prob } else { 0.0 };
                for (mv, x) in atom.value.iter_mut().zip(&v) {
                    *mv += share * (x - *mv);
                }
            }
            None => atoms.push(Atom::new(v, p)),
        }
    }
    atoms
}

/// i.i.d. finite-support noise law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Atom>", into = "Vec<Atom>")]
pub struct NoiseModel {
    dist: DiscreteDistribution,
}

impl TryFrom<Vec<Atom>> for NoiseModel {
    type Error = Error;

    fn try_from(atoms: Vec<Atom>) -> Result<Self> {
        NoiseModel::new(atoms)
    }
}

impl From<NoiseModel> for Vec<Atom> {
    fn from(n: NoiseModel) -> Self {
        n.dist.atoms
    }
}

impl NoiseModel {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        validate_atoms(&atoms)?;
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].iter().any(|b| b.value == a.value) {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate noise atom {:?}",
                    a.value
                )));
            }
        }
        Ok(NoiseModel {
            dist: DiscreteDistribution { atoms },
        })
    }

    pub fn scalar(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(v, p)| Atom::scalar(v, p)).collect())
    }

    /// Degenerate noise with a single atom.
    pub fn deterministic(value: Vec<f64>) -> Self {
        NoiseModel {
            dist: DiscreteDistribution::point(value),
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        self.dist.atoms()
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dist.dim()
    }

    pub fn distribution(&self) -> &DiscreteDistribution {
        &self.dist
    }
}

/// Number of leaves of a tree with `roots` roots, `branching` noise atoms and
/// the given depth, or `None` on overflow.
pub fn leaf_count(roots: usize, branching: usize, depth: usize) -> Option<usize> {
    (0..depth).try_fold(roots, |acc, _| acc.checked_mul(branching))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    noise: NoiseModel,
    root_probs: Vec<f64>,
    depth: usize,
    probs: Vec<Vec<f64>>,
}

impl ScenarioTree {
    /// A tree with a single root.
    pub fn new(noise: NoiseModel, depth: usize) -> Self {
        Self::with_roots(vec![1.0], noise, depth).expect("single root is valid")
    }

    /// A tree whose root layer is fanned out over the given probabilities.
    pub fn with_roots(root_probs: Vec<f64>, noise: NoiseModel, depth: usize) -> Result<Self> {
        if root_probs.is_empty() || root_probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidDistribution(
                "root probabilities must be positive".into(),
            ));
        }
        let total: f64 = root_probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!(
                "root probabilities sum to {total}"
            )));
        }
        let q: Vec<f64> = noise.atoms().iter().map(|a| a.prob).collect();
        let mut probs = Vec::with_capacity(depth + 1);
        probs.push(root_probs.clone());
        for k in 0..depth {
            let prev: &Vec<f64> = &probs[k];
            let mut next = Vec::with_capacity(prev.len() * q.len());
            for &p in prev {
                next.extend(q.iter().map(|qj| p * qj));
            }
            probs.push(next);
        }
        Ok(ScenarioTree {
            noise,
            root_probs,
            depth,
            probs,
        })
    }

    /// Root layer fanned over `dist`; root `i` carries atom `i`.
    pub fn fanned(dist: &DiscreteDistribution, noise: NoiseModel, depth: usize) -> Result<Self> {
        Self::with_roots(dist.atoms().iter().map(|a| a.prob).collect(), noise, depth)
    }

    /// Root layer is the product of `outer` and `inner`: root `a * inner.len() + b`
    /// has probability `outer[a] * inner[b]`.
    pub fn coupled(
        outer: &DiscreteDistribution,
        inner: &DiscreteDistribution,
        noise: NoiseModel,
        depth: usize,
    ) -> Result<Self> {
        let roots = outer
            .atoms()
            .iter()
            .flat_map(|a| inner.atoms().iter().map(move |b| a.prob * b.prob))
            .collect();
        Self::with_roots(roots, noise, depth)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn branching(&self) -> usize {
        self.noise.len()
    }

    pub fn root_count(&self) -> usize {
        self.root_probs.len()
    }

    pub fn node_count(&self, k: usize) -> usize {
        self.probs[k].len()
    }

    pub fn probs(&self, k: usize) -> &[f64] {
        &self.probs[k]
    }

    pub fn prob(&self, k: usize, node: usize) -> f64 {
        self.probs[k][node]
    }

    pub fn parent(&self, node: usize) -> usize {
        node / self.branching()
    }

    pub fn children(&self, node: usize) -> std::ops::Range<usize> {
        let m = self.branching();
        node * m..node * m + m
    }

    /// Index of the noise atom on the edge into `node` (depth ≥ 1).
    pub fn noise_index(&self, node: usize) -> usize {
        node % self.branching()
    }

    pub fn noise_value(&self, node: usize) -> &[f64] {
        &self.noise.atoms()[self.noise_index(node)].value
    }

    pub fn root_of(&self, k: usize, node: usize) -> usize {
        node / self.branching().pow(k as u32)
    }

    /// Noise atom indices along the path from the root to `node` at depth `k`.
    pub fn history(&self, k: usize, node: usize) -> Vec<usize> {
        let m = self.branching();
        let mut h = vec![0; k];
        let mut n = node;
        for slot in h.iter_mut().rev() {
            *slot = n % m;
            n /= m;
        }
        h
    }

    /// Tree with the same noise and depth but `inner` additional root copies.
    pub fn with_inner_roots(&self, inner: &[f64]) -> Result<Self> {
        let roots = self
            .root_probs
            .iter()
            .flat_map(|a| inner.iter().map(move |b| a * b))
            .collect();
        Self::with_roots(roots, self.noise.clone(), self.depth)
    }
}

/// One vector per tree node for depths `0..layers.len()`.
#[derive(Debug, Clone)]
pub struct AdaptedProcess {
    tree: Arc<ScenarioTree>,
    dim: usize,
    layers: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// `layers[k]` holds `node_count(k) * dim` values, node-major.
    pub fn from_layers(tree: Arc<ScenarioTree>, dim: usize, layers: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "process dimension must be positive".into(),
            ));
        }
        if layers.len() > tree.depth() + 1 {
            return Err(Error::DepthOutOfRange {
                depth: layers.len() - 1,
                available: tree.depth() + 1,
            });
        }
        for (k, layer) in layers.iter().enumerate() {
            let expected = tree.node_count(k) * dim;
            if layer.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: layer.len(),
                });
            }
        }
        Ok(AdaptedProcess { tree, dim, layers })
    }

    pub fn from_fn<F>(tree: Arc<ScenarioTree>, dim: usize, depths: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut layers = Vec::with_capacity(depths);
        for k in 0..depths.min(tree.depth() + 1) {
            let mut layer = Vec::with_capacity(tree.node_count(k) * dim);
            for i in 0..tree.node_count(k) {
                let v = f(k, i);
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                layer.extend(v);
            }
            layers.push(layer);
        }
        if depths > tree.depth() + 1 {
            return Err(Error::DepthOutOfRange {
                depth: depths - 1,
                available: tree.depth() + 1,
            });
        }
        Self::from_layers(tree, dim, layers)
    }

    pub fn constant(tree: Arc<ScenarioTree>, depths: usize, value: Vec<f64>) -> Result<Self> {
        let dim = value.len();
        Self::from_fn(tree, dim, depths, |_, _| value.clone())
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of depths covered (`0..depths()`).
    pub fn depths(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, k: usize) -> Result<&[f64]> {
        self.layers
            .get(k)
            .map(|l| l.as_slice())
            .ok_or(Error::DepthOutOfRange {
                depth: k,
                available: self.layers.len(),
            })
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn value(&self, k: usize, node: usize) -> &[f64] {
        &self.layers[k][node * self.dim..(node + 1) * self.dim]
    }

    pub fn scalar(&self, k: usize, node: usize) -> f64 {
        self.layers[k][node * self.dim]
    }

    pub fn same_tree(&self, other: &AdaptedProcess) -> bool {
        Arc::ptr_eq(&self.tree, &other.tree) || *self.tree == *other.tree
    }

    fn check_depth(&self, k: usize) -> Result<()> {
        if k < self.layers.len() {
            Ok(())
        } else {
            Err(Error::DepthOutOfRange {
                depth: k,
                available: self.layers.len(),
            })
        }
    }

    /// Node values paired with path probabilities at depth `k`.
    pub fn weighted(&self, k: usize) -> Result<impl Iterator<Item = (&[f64], f64)> + '_> {
        self.check_depth(k)?;
        Ok(self.layers[k]
            .chunks(self.dim)
            .zip(self.tree.probs(k).iter().copied()))
    }

    /// Copies this process onto `target`, a tree whose roots are this tree's
    /// roots times `inner` copies (see [`ScenarioTree::coupled`]).
    pub fn lift(&self, target: &Arc<ScenarioTree>, inner: usize) -> Result<AdaptedProcess> {
        if target.root_count() != self.tree.root_count() * inner
            || target.noise() != self.tree.noise()
            || target.depth() + 1 < self.layers.len()
        {
            return Err(Error::TreeMismatch);
        }
        let m = self.tree.branching();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let per_root = m.pow(k as u32);
                let mut out = Vec::with_capacity(target.node_count(k) * self.dim);
                for node in 0..target.node_count(k) {
                    let root = node / per_root;
                    let src = (root / inner) * per_root + node % per_root;
                    out.extend_from_slice(&layer[src * self.dim..(src + 1) * self.dim]);
                }
                out
            })
            .collect();
        AdaptedProcess::from_layers(target.clone(), self.dim, layers)
    }

    /// Elementwise map into a new process on the same tree.
    pub fn map<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Result<AdaptedProcess> {
        let dim = self.layers.first().map_or(self.dim, |l| {
            l.chunks(self.dim).next().map_or(self.dim, |v| f(v).len())
        });
        let layers = self
            .layers
            .iter()
            .map(|l| l.chunks(self.dim).flat_map(&f).collect())
            .collect();
        AdaptedProcess::from_layers(self.tree.clone(), dim, layers)
    }

    /// Keeps depths `0..depths`.
    pub fn truncated(&self, depths: usize) -> AdaptedProcess {
        AdaptedProcess {
            tree: self.tree.clone(),
            dim: self.dim,
            layers: self.layers[..depths.min(self.layers.len())].to_vec(),
        }
    }
}

/// `E[g(X(k))]` as an exact weighted sum over depth-`k` nodes.
pub fn expectation<G: Fn(&[f64]) -> f64>(x: &AdaptedProcess, k: usize, g: G) -> Result<f64> {
    Ok(x.weighted(k)?.map(|(v, p)| p * g(v)).sum())
}

fn check_pair(x: &AdaptedProcess, y: &AdaptedProcess, k: usize) -> Result<()> {
    if !x.same_tree(y) || k >= x.depths() || k >= y.depths() || x.dim() != y.dim() {
        return Err(Error::TreeMismatch);
    }
    Ok(())
}

/// `E[‖X(k) − Y(k)‖^r]` under the same-outcome coupling.
pub fn lr_distance(x: &AdaptedProcess, y: &AdaptedProcess, k: usize, r: u32) -> Result<f64> {
    check_pair(x, y, k)?;
    Ok(node_distances(x, y, k)?
        .into_iter()
        .map(|(d, p)| p * d.powi(r as i32))
        .sum())
}

/// Per-node `(‖X − Y‖, path probability)` at depth `k`.
pub fn node_distances(x: &AdaptedProcess, y: &AdaptedProcess, k: usize) -> Result<Vec<(f64, f64)>> {
    check_pair(x, y, k)?;
    Ok(x.weighted(k)?
        .zip(y.weighted(k)?)
        .map(|((a, p), (b, _))| (norm::distance(a, b), p))
        .collect())
}

/// Law of `X(k)`, aggregated at `tol`.
pub fn pushforward(x: &AdaptedProcess, k: usize, tol: f64) -> Result<DiscreteDistribution> {
    DiscreteDistribution::from_weighted(x.weighted(k)?.map(|(v, p)| (v.to_vec(), p)), tol)
}

/// Joint law of `(X(k), U(k))` as concatenated vectors.
pub fn joint_pushforward(
    x: &AdaptedProcess,
    u: &AdaptedProcess,
    k: usize,
    tol: f64,
) -> Result<DiscreteDistribution> {
    check_pair(x, u, k).or_else(|e| {
        if x.same_tree(u) && k < x.depths() && k < u.depths() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let items = x
        .weighted(k)?
        .zip(u.weighted(k)?)
        .map(|((a, p), (b, _))| ([a, b].concat(), p));
    DiscreteDistribution::from_weighted(items, tol)
}

/// `E[‖X(k)‖^r]^{1/r}`.
pub fn moment_norm(x: &AdaptedProcess, k: usize, r: u32) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidArgument(
            "moment order must be positive".into(),
        ));
    }
    Ok(expectation(x, k, |v| norm::norm(v).powi(r as i32))?.powf(1.0 / r as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovViolation {
    pub depth: usize,
    pub nodes: (usize, usize),
    pub state_gap: f64,
    pub control_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovReport {
    pub consistent: bool,
    pub violations: Vec<MarkovViolation>,
}

/// Checks whether `controls` can be written as `π_k(states(k))`: any two
/// depth-`k` nodes whose states differ by less than `tol` (max-norm) must
/// carry controls that differ by less than `tol`.
pub fn markov_consistency_check(
    states: &AdaptedProcess,
    controls: &AdaptedProcess,
    tol: f64,
) -> Result<MarkovReport> {
    if !states.same_tree(controls) {
        return Err(Error::TreeMismatch);
    }
    let mut violations = Vec::new();
    for k in 0..controls.depths().min(states.depths()) {
        let n = states.tree().node_count(k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| states.value(k, a)[0].total_cmp(&states.value(k, b)[0]));
        for (pos, &a) in order.iter().enumerate() {
            let xa = states.value(k, a);
            for &b in &order[pos + 1..] {
                let xb = states.value(k, b);
                if xb[0] - xa[0] >= tol {
                    break;
                }
                let state_gap = norm::max_distance(xa, xb);
                if state_gap >= tol {
                    continue;
                }
                let control_gap = norm::max_distance(controls.value(k, a), controls.value(k, b));
                if control_gap >= tol {
                    violations.push(MarkovViolation {
                        depth: k,
                        nodes: (a.min(b), a.max(b)),
                        state_gap,
                        control_gap,
                    });
                }
            }
        }
    }
    Ok(MarkovReport {
        consistent: violations.is_empty(),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_noise() -> NoiseModel {
        NoiseModel::scalar(&[(0.5, 0.2), (-0.125, 0.8)]).unwrap()
    }

    fn noise_rv() -> AdaptedProcess {
        let tree = Arc::new(ScenarioTree::new(paper_noise(), 1));
        AdaptedProcess::from_fn(tree.clone(), 1, 2, |k, i| {
            if k == 0 {
                vec![0.0]
            } else {
                tree.noise_value(i).to_vec()
            }
        })
        .unwrap()
    }

    #[test]
    fn tree_combinatorics() {
        let tree = ScenarioTree::new(paper_noise(), 4);
        for k in 0..=4 {
            assert_eq!(tree.node_count(k), 2usize.pow(k as u32));
            let total: f64 = tree.probs(k).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(tree.history(3, 5), vec![1, 0, 1]);
        assert_eq!(tree.parent(5), 2);
        assert_eq!(tree.children(2), 4..6);
        let p = tree.prob(3, 5);
        assert!((p - 0.8 * 0.2 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_noise() {
        assert!(NoiseModel::scalar(&[(0.0, 0.5), (0.0, 0.5)]).is_err());
        assert!(NoiseModel::scalar(&[(0.0, 0.5), (1.0, 0.4)]).is_err());
        assert!(NoiseModel::scalar(&[(0.0, 1.0), (1.0, 0.0)]).is_err());
    }

    #[test]
    fn expectation_examples() {
        let tree = Arc::new(ScenarioTree::new(paper_noise(), 2));
        let c = AdaptedProcess::constant(tree, 3, vec![2.5]).unwrap();
        assert!((expectation(&c, 2, |v| v[0]).unwrap() - 2.5).abs() < 1e-14);

        let w = noise_rv();
        assert!(expectation(&w, 1, |v| v[0]).unwrap().abs() < 1e-15);
        let sq = expectation(&w, 1, |v| v[0] * v[0]).unwrap();
        assert!((sq - 0.0625).abs() < 1e-15);
        assert!(matches!(
            expectation(&w, 2, |v| v[0]),
            Err(Error::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn lr_distance_examples() {
        let noise = NoiseModel::scalar(&[(1.0, 0.3), (0.0, 0.7)]).unwrap();
        let tree = Arc::new(ScenarioTree::new(noise, 1));
        let x = AdaptedProcess::from_fn(tree.clone(), 1, 2, |k, i| {
            if k == 0 {
                vec![1.0]
            } else {
                tree.noise_value(i).to_vec()
            }
        })
        .unwrap();
        let zero = AdaptedProcess::constant(tree.clone(), 2, vec![0.0]).unwrap();
        assert_eq!(lr_distance(&x, &x, 1, 2).unwrap(), 0.0);
        assert_eq!(lr_distance(&x, &zero, 0, 2).unwrap(), 1.0);
        assert!((lr_distance(&x, &zero, 1, 2).unwrap() - 0.3).abs() < 1e-15);

        let other = Arc::new(ScenarioTree::new(paper_noise(), 1));
        let y = AdaptedProcess::constant(other, 2, vec![0.0]).unwrap();
        assert!(matches!(
            lr_distance(&x, &y, 1, 2),
            Err(Error::TreeMismatch)
        ));
    }

    #[test]
    fn pushforward_examples() {
        let tree = Arc::new(ScenarioTree::new(paper_noise(), 1));
        let c = AdaptedProcess::constant(tree.clone(), 2, vec![3.0]).unwrap();
        let d = pushforward(&c, 1, 0.0).unwrap();
        assert_eq!(d.atoms(), &[Atom::scalar(3.0, 1.0)]);

        let w = noise_rv();
        let d = pushforward(&w, 1, DEFAULT_AGGREGATION_TOL).unwrap();
        assert_eq!(&d, paper_noise().distribution());
    }

    #[test]
    fn aggregation_is_first_fit() {
        let atoms = aggregate(
            vec![
                (vec![0.0], 0.25),
                (vec![1.0], 0.25),
                (vec![0.05], 0.25),
                (vec![1.0], 0.25),
            ],
            0.1,
        );
        assert_eq!(atoms.len(), 2);
        assert!((atoms[0].value[0] - 0.025).abs() < 1e-15);
        assert_eq!(atoms[1].value[0], 1.0);
        assert_eq!(atoms[1].prob, 0.5);
    }

    #[test]
    fn canonical_ignores_order() {
        let items = vec![
            (vec![1.0], 0.1),
            (vec![0.0], 0.3),
            (vec![1.0], 0.2),
            (vec![1.0], 0.4),
        ];
        let mut rev = items.clone();
        rev.reverse();
        let a = DiscreteDistribution::canonical(items).unwrap();
        let b = DiscreteDistribution::canonical(rev).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.atoms()[0].value, vec![0.0]);
    }

    #[test]
    fn moment_norm_examples() {
        let tree = Arc::new(ScenarioTree::new(paper_noise(), 1));
        let z = AdaptedProcess::constant(tree.clone(), 2, vec![0.0]).unwrap();
        assert_eq!(moment_norm(&z, 1, 3).unwrap(), 0.0);
        let c = AdaptedProcess::constant(tree, 2, vec![-3.0]).unwrap();
        assert!((moment_norm(&c, 0, 2).unwrap() - 3.0).abs() < 1e-15);
        assert!((moment_norm(&noise_rv(), 1, 2).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn markov_check_examples() {
        let noise = NoiseModel::scalar(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
        let tree = Arc::new(ScenarioTree::new(noise, 1));
        let states = AdaptedProcess::constant(tree.clone(), 2, vec![2.0]).unwrap();
        let controls = AdaptedProcess::from_fn(tree.clone(), 1, 2, |k, i| {
            vec![if k == 1 { i as f64 } else { 0.0 }]
        })
        .unwrap();
        let report = markov_consistency_check(&states, &controls, 1e-6).unwrap();
        assert!(!report.consistent);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].depth, 1);

        let policy = states.map(|x| vec![x[0] * x[0]]).unwrap();
        assert!(
            markov_consistency_check(&states, &policy, 1e-6)
                .unwrap()
                .consistent
        );

        let distinct = AdaptedProcess::from_fn(tree, 1, 2, |_, i| vec![i as f64]).unwrap();
        assert!(
            markov_consistency_check(&distinct, &controls, 1e-6)
                .unwrap()
                .consistent
        );
    }

    #[test]
    fn lift_copies_values_per_outer_root() {
        let tree = Arc::new(ScenarioTree::new(paper_noise(), 2));
        let x =
            AdaptedProcess::from_fn(tree.clone(), 1, 3, |k, i| vec![(10 * k + i) as f64]).unwrap();
        let coupled = Arc::new(tree.with_inner_roots(&[0.2, 0.8]).unwrap());
        let lifted = x.lift(&coupled, 2).unwrap();
        for k in 0..3 {
            for node in 0..coupled.node_count(k) {
                let per = 2usize.pow(k as u32);
                assert_eq!(lifted.scalar(k, node), x.scalar(k, node % per));
            }
            let a = pushforward(&x, k, 0.0).unwrap();
            let b = pushforward(&lifted, k, 0.0).unwrap();
            assert!(a.approx_eq(&b, 1e-15));
        }
    }

    #[test]
    fn distribution_json_shape() {
        let d = DiscreteDistribution::scalar(&[(0.5, 0.2), (-0.125, 0.8)]).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"[{"value":[0.5],"prob":0.2},{"value":[-0.125],"prob":0.8}]"#
        );
        let back: DiscreteDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(
            serde_json::from_str::<DiscreteDistribution>(r#"[{"value":[1],"prob":0.5}]"#).is_err()
        );
    }
}
