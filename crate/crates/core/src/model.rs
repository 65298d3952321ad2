//! Model interfaces and the particle-cloud data model.

use std::collections::HashMap;

use crate::rng::StreamRng;
use crate::tree::{DecompositionTree, NodeId};

/// A time-homogeneous state-space model with `obs_dim == dim`.
///
/// Densities may be unnormalized. Samplers write into caller-provided buffers.
pub trait StateSpaceModel: Send + Sync {
    fn dim(&self) -> usize;

    fn obs_dim(&self) -> usize {
        self.dim()
    }

    /// Log density of the initial state.
    fn log_initial(&self, x: &[f64]) -> f64;

    fn log_transition(&self, x_prev: &[f64], x: &[f64]) -> f64;

    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64;

    fn sample_initial(&self, rng: &mut StreamRng, out: &mut [f64]);

    fn sample_transition(&self, x_prev: &[f64], rng: &mut StreamRng, out: &mut [f64]);

    fn sample_observation(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]);
}

/// Node-indexed transition and likelihood proxies over a decomposition tree.
///
/// `x_prev == None` stands for the first time step: `log_f_aux` then returns
/// the log initial density marginal on the node, and the leaf sampler draws
/// from it. At the root the proxies must agree with the full model up to a
/// constant.
pub trait AuxiliaryFamily: StateSpaceModel {
    fn tree(&self) -> &DecompositionTree;

    fn log_f_aux(&self, node: NodeId, x_prev: Option<&[f64]>, z: &[f64]) -> f64;

    /// `y_sub` holds the observation components of the node.
    fn log_g_aux(&self, node: NodeId, z: &[f64], y_sub: &[f64]) -> f64;

    fn sample_f_aux_leaf(&self, leaf: NodeId, x_prev: Option<&[f64]>, rng: &mut StreamRng) -> f64;

    /// Optional split of `log_f_aux` into a past-dependent part and a part
    /// that only involves the current state. The two parts sum to `log_f_aux`.
    fn log_f_aux_split(&self, _node: NodeId, _x_prev: &[f64], _z: &[f64]) -> Option<(f64, f64)> {
        None
    }

    /// Structure used by the filter's cached merge path.
    fn merge_split(&self) -> Option<&dyn MergeSplit> {
        None
    }

    /// True when `log_g_aux` is additive over components, so every
    /// likelihood ratio in a merge vanishes.
    fn g_factorizes(&self) -> bool {
        false
    }
}

/// Decomposition of a parent's auxiliary transition in terms of its children:
///
/// `log_f_aux(u, x, z_l ++ z_r) = log_f_aux(l, x, z_l) + log_f_aux(r, x, z_r)
///     + left(u, x, z_l) + right(u, x, z_r) + pair(u, x.is_none(), z_l, z_r)`.
pub trait MergeSplit: Send + Sync {
    fn left(&self, node: NodeId, x_prev: Option<&[f64]>, z_left: &[f64]) -> f64;

    fn right(&self, node: NodeId, x_prev: Option<&[f64]>, z_right: &[f64]) -> f64;

    fn pair(&self, node: NodeId, initial: bool, z_left: &[f64], z_right: &[f64]) -> f64;

    /// False if `left` is identically zero.
    fn couples_left(&self) -> bool {
        true
    }

    /// False if `right` is identically zero.
    fn couples_right(&self) -> bool {
        true
    }
}

/// Forward simulation of `t_max` states and observations.
pub fn simulate<M: StateSpaceModel + ?Sized>(model: &M, t_max: usize, rng: &mut StreamRng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = model.dim();
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(t_max);
    let mut ys = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut x = vec![0.0; d];
        match xs.last() {
            None => model.sample_initial(rng, &mut x),
            Some(prev) => model.sample_transition(prev, rng, &mut x),
        }
        let mut y = vec![0.0; model.obs_dim()];
        model.sample_observation(&x, rng, &mut y);
        debug_assert!(t == xs.len());
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

/// Weighted particles attached to one tree node at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCloud {
    pub node: NodeId,
    pub time: usize,
    /// Row-major `len x component_ids.len()` values.
    pub particles: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub component_ids: Vec<usize>,
}

impl NodeCloud {
    pub fn new(node: NodeId, time: usize, component_ids: Vec<usize>, particles: Vec<f64>, log_weights: Vec<f64>) -> Self {
        assert_eq!(particles.len(), log_weights.len() * component_ids.len());
        NodeCloud { node, time, particles, log_weights, component_ids }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn width(&self) -> usize {
        self.component_ids.len()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let k = self.width();
        &self.particles[i * k..(i + 1) * k]
    }

    pub fn is_equally_weighted(&self) -> bool {
        self.log_weights.iter().all(|&w| w == self.log_weights[0])
    }

    /// Equal-weight cloud whose particle `i` is the concatenation of
    /// `left[pairs[i].0]` and `right[pairs[i].1]`.
    pub fn concat(node: NodeId, left: &NodeCloud, right: &NodeCloud, pairs: &[(usize, usize)]) -> NodeCloud {
        let mut ids = left.component_ids.clone();
        ids.extend_from_slice(&right.component_ids);
        let mut particles = Vec::with_capacity(pairs.len() * ids.len());
        for &(a, b) in pairs {
            particles.extend_from_slice(left.particle(a));
            particles.extend_from_slice(right.particle(b));
        }
        NodeCloud::new(node, left.time, ids, particles, vec![0.0; pairs.len()])
    }

    /// Cloud after selecting `indices`, with all weights reset to zero.
    pub fn select(&self, indices: &[usize]) -> NodeCloud {
        let mut particles = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            particles.extend_from_slice(self.particle(i));
        }
        NodeCloud::new(self.node, self.time, self.component_ids.clone(), particles, vec![0.0; indices.len()])
    }

    /// Per-component weighted means.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.width();
        let (p, _) = crate::weights::normalize_log_weights(&self.log_weights)
            .unwrap_or_else(|_| (vec![1.0 / self.len() as f64; self.len()], 0.0));
        let mut m = vec![0.0; k];
        for (i, &pi) in p.iter().enumerate() {
            for (mj, &x) in m.iter_mut().zip(self.particle(i)) {
                *mj += pi * x;
            }
        }
        m
    }

    /// Values of component column `j` (position within the node).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.particle(i)[j]).collect()
    }
}

/// Distinct previous-time particles with multiplicities.
///
/// The mixture `N^-1 sum_n f(x^n, .)` over an equally weighted cloud only
/// depends on the distinct points, so predictive sums run over `len()`
/// unique points with log-multiplicity offsets.
#[derive(Clone, Debug)]
pub struct PastSupport {
    dim: usize,
    points: Vec<f64>,
    log_mult: Vec<f64>,
    /// Unique-point index of each original particle.
    index_of: Vec<usize>,
    n_total: usize,
}

impl PastSupport {
    /// Builds the support of an equally weighted cloud.
    pub fn from_cloud(cloud: &NodeCloud) -> Self {
        Self::from_points(cloud.width(), &cloud.particles)
    }

    pub fn from_points(dim: usize, flat: &[f64]) -> Self {
        let n = flat.len() / dim;
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(n);
        let mut points = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        let mut index_of = Vec::with_capacity(n);
        for i in 0..n {
            let x = &flat[i * dim..(i + 1) * dim];
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let next = counts.len();
            let u = *seen.entry(key).or_insert(next);
            if u == next {
                points.extend_from_slice(x);
                counts.push(0);
            }
            counts[u] += 1;
            index_of.push(u);
        }
        let log_mult = counts.iter().map(|&c| (c as f64).ln()).collect();
        PastSupport { dim, points, log_mult, index_of, n_total: n }
    }

    pub fn len(&self) -> usize {
        self.log_mult.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_mult.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.dim..(p + 1) * self.dim]
    }

    pub fn log_mult(&self) -> &[f64] {
        &self.log_mult
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Unique point behind original particle `n`.
    pub fn unique_of(&self, n: usize) -> usize {
        self.index_of[n]
    }
}

/// Previous-time information feeding the auxiliary targets.
#[derive(Clone, Debug)]
pub enum Past {
    /// First time step: the initial density replaces the predictive mixture.
    Initial,
    Particles(PastSupport),
}

impl Past {
    /// Number of mixture components in the predictive sums.
    pub fn len(&self) -> usize {
        match self {
            Past::Initial => 1,
            Past::Particles(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_initial(&self) -> bool {
        matches!(self, Past::Initial)
    }

    pub fn point(&self, p: usize) -> Option<&[f64]> {
        match self {
            Past::Initial => None,
            Past::Particles(s) => Some(s.point(p)),
        }
    }

    pub fn log_mult(&self, p: usize) -> f64 {
        match self {
            Past::Initial => 0.0,
            Past::Particles(s) => s.log_mult[p],
        }
    }

    /// `log N` for the `N^-1` in front of the predictive sum.
    pub fn log_n(&self) -> f64 {
        match self {
            Past::Initial => 0.0,
            Past::Particles(s) => (s.n_total as f64).ln(),
        }
    }

    /// Log of `N^-1 sum_n exp(log_f(x^n))`.
    pub fn log_predictive(&self, log_f: impl Fn(Option<&[f64]>) -> f64) -> f64 {
        let terms: Vec<f64> = (0..self.len()).map(|p| log_f(self.point(p)) + self.log_mult(p)).collect();
        crate::weights::log_sum_exp(&terms) - self.log_n()
    }
}
