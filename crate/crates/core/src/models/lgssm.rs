//! Linear-Gaussian benchmark with a tridiagonal transition precision.
//!
//! Let `B` be lower bidiagonal with diagonal `tau + lambda` and subdiagonal
//! `-lambda`, `A1 = diag(tau + lambda, tau, ..., tau)` and
//! `c = tau / (tau + lambda)`. The model is
//!
//! ```text
//! X_1 ~ N(0, I),   X_t = 0.5 M X_{t-1} + U_t,   Y_t = X_t + V_t,
//! M = B^-1 A1,     U_t ~ N(0, P^-1),   P = c B^T A1^-1 B,   V_t ~ N(0, sigma_y2 I).
//! ```
//!
//! `P` is tridiagonal with off-diagonal `-lambda`, and `-(1/2)(x - mean)^T P
//! (x - mean)` splits exactly into one term per component plus a
//! nearest-neighbour coupling `f~(s1, s2) = exp(-(1/2)[lambda^2/(tau+lambda)
//! s1^2 - 2 lambda s1 s2])`. The default auxiliary family keeps, for a node,
//! only the terms whose components all lie in the node. Everything is O(d);
//! dense matrices are built only for oracles and tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{AuxiliaryFamily, MergeSplit, Past, StateSpaceModel};
use crate::rng::StreamRng;
use crate::tree::{DecompositionTree, NodeId};
use crate::weights::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LgssmParams {
    pub d: usize,
    pub tau: f64,
    pub lambda: f64,
    pub sigma_y2: f64,
}

impl LgssmParams {
    pub fn new(d: usize, tau: f64, lambda: f64, sigma_y2: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParams("d must be positive".into()));
        }
        if !(tau > 0.0 && lambda >= 0.0 && sigma_y2 > 0.0) || !(tau + lambda).is_finite() {
            return Err(Error::InvalidParams(format!(
                "need tau > 0, lambda >= 0, sigma_y2 > 0 (got {tau}, {lambda}, {sigma_y2})"
            )));
        }
        Ok(LgssmParams { d, tau, lambda, sigma_y2 })
    }

    /// `tau = lambda = 1`, `sigma_y2 = 0.25`.
    pub fn standard(d: usize) -> Self {
        LgssmParams { d, tau: 1.0, lambda: 1.0, sigma_y2: 0.25 }
    }

    fn s(&self) -> f64 {
        self.tau + self.lambda
    }

    fn c(&self) -> f64 {
        self.tau / self.s()
    }

    fn kappa(&self) -> f64 {
        self.lambda * self.tau / self.s()
    }

    /// Diagonal entry `i` of `A1`.
    pub fn a1(&self, i: usize) -> f64 {
        if i == 0 {
            self.s()
        } else {
            self.tau
        }
    }

    /// Diagonal and subdiagonal of the bidiagonal factor `B`.
    pub fn bidiagonal(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![self.s(); self.d], vec![-self.lambda; self.d.saturating_sub(1)])
    }

    /// Diagonal entry `i` of the transition precision.
    pub fn precision_diag(&self, i: usize) -> f64 {
        let d = self.d;
        let edge = self.lambda * self.lambda / self.s();
        match (i == 0, i + 1 == d) {
            (true, true) => self.tau,
            (true, false) => self.tau + edge,
            (false, true) => self.s(),
            (false, false) => self.s() + edge,
        }
    }

    /// Off-diagonal entry of the tridiagonal transition precision.
    pub fn precision_offdiag(&self) -> f64 {
        -self.lambda
    }

    /// `out = P v`.
    pub fn precision_apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.d;
        let off = self.precision_offdiag();
        for i in 0..d {
            let mut acc = self.precision_diag(i) * v[i];
            if i > 0 {
                acc += off * v[i - 1];
            }
            if i + 1 < d {
                acc += off * v[i + 1];
            }
            out[i] = acc;
            count_ops(1);
        }
    }

    /// `out = 0.5 B^-1 A1 x_prev` by forward substitution.
    pub fn transition_mean(&self, x_prev: &[f64], out: &mut [f64]) {
        let s = self.s();
        let mut prev = 0.0;
        for i in 0..self.d {
            let m = (self.a1(i) * x_prev[i] + self.lambda * prev) / s;
            out[i] = 0.5 * m;
            prev = m;
            count_ops(1);
        }
    }

    /// Transition noise `B^-1 A1^(1/2) eps / sqrt(c)`, covariance `P^-1`.
    pub fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let s = self.s();
        let scale = 1.0 / self.c().sqrt();
        let mut prev = 0.0;
        for (i, o) in out.iter_mut().enumerate().take(self.d) {
            let e: f64 = rng.sample(StandardNormal);
            let v = (self.a1(i).sqrt() * e * scale + self.lambda * prev) / s;
            *o = v;
            prev = v;
        }
    }

    /// Dense `0.5 B^-1 A1`.
    pub fn dense_transition(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        let mut col = vec![0.0; self.d];
        let mut e = vec![0.0; self.d];
        for j in 0..self.d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.transition_mean(&e, &mut col);
            m.set_column(j, &DVector::from_column_slice(&col));
        }
        m
    }

    pub fn dense_bidiagonal(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| {
            if i == j {
                self.s()
            } else if i == j + 1 {
                -self.lambda
            } else {
                0.0
            }
        })
    }

    pub fn dense_precision(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| {
            if i == j {
                self.precision_diag(i)
            } else if i.abs_diff(j) == 1 {
                self.precision_offdiag()
            } else {
                0.0
            }
        })
    }

    /// `P^-1 = c^-1 B^-1 A1 B^-T`.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let b_inv = self.dense_bidiagonal().try_inverse().expect("bidiagonal factor is invertible");
        let a1 = DMatrix::from_fn(self.d, self.d, |i, j| if i == j { self.a1(i) } else { 0.0 });
        (&b_inv * a1 * b_inv.transpose()) / self.c()
    }

    fn log_ftilde(&self, s1: f64, s2: f64) -> f64 {
        -0.5 * (self.lambda * self.lambda / self.s() * s1 * s1 - 2.0 * self.lambda * s1 * s2)
    }
}

#[cfg(test)]
thread_local! {
    static OPS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

#[inline]
fn count_ops(_k: u64) {
    #[cfg(test)]
    OPS.with(|c| c.set(c.get() + _k));
}

/// Which auxiliary transition family the model exposes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LgssmAuxVariant {
    /// Per-component terms and couplings whose components lie in the node.
    #[default]
    Decoupled,
    /// Exact Gaussian marginal of the transition on the node's components.
    /// Dense, intended for small `d`.
    MarginalCovariance,
}

#[derive(Clone, Debug)]
struct NodeMarginal {
    lo: usize,
    precision: DMatrix<f64>,
    leaf_sd: f64,
}

#[derive(Clone, Debug)]
pub struct LgssmModel {
    pub params: LgssmParams,
    tree: DecompositionTree,
    variant: LgssmAuxVariant,
    marginals: Vec<NodeMarginal>,
}

/// Builds the model with a chain decomposition tree.
pub fn build_lgssm(params: LgssmParams) -> Result<LgssmModel> {
    LgssmModel::new(params, LgssmAuxVariant::Decoupled)
}

impl LgssmModel {
    pub fn new(params: LgssmParams, variant: LgssmAuxVariant) -> Result<Self> {
        let params = LgssmParams::new(params.d, params.tau, params.lambda, params.sigma_y2)?;
        let tree = DecompositionTree::chain(params.d);
        let marginals = match variant {
            LgssmAuxVariant::Decoupled => Vec::new(),
            LgssmAuxVariant::MarginalCovariance => {
                let cov = params.dense_covariance();
                tree.nodes()
                    .iter()
                    .map(|node| {
                        let k = node.len();
                        let sub = cov.view((node.lo, node.lo), (k, k)).into_owned();
                        let chol = sub.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
                        Ok(NodeMarginal { lo: node.lo, precision: chol.inverse(), leaf_sd: sub[(0, 0)].sqrt() })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(LgssmModel { params, tree, variant, marginals })
    }

    pub fn variant(&self) -> LgssmAuxVariant {
        self.variant
    }

    /// Past-dependent and within-time parts of the decoupled exponent.
    fn decoupled_parts(&self, lo: usize, x_prev: &[f64], z: &[f64]) -> (f64, f64) {
        let p = &self.params;
        let (s, c, kappa) = (p.s(), p.c(), p.kappa());
        let (mut past, mut within) = (0.0, 0.0);
        for (j, &zj) in z.iter().enumerate() {
            let i = lo + j;
            if j > 0 {
                let e = zj - 0.5 * c * x_prev[i];
                past += -0.5 * s * e * e - 0.5 * kappa * z[j - 1] * x_prev[i];
                within += p.log_ftilde(z[j - 1], zj);
            } else if i == 0 {
                let e = zj - 0.5 * x_prev[0];
                past += -0.5 * p.tau * e * e;
            } else {
                let e = zj - 0.5 * c * x_prev[i];
                past += -0.5 * s * e * e;
            }
        }
        (past, within)
    }

    fn log_std_normal(z: &[f64]) -> f64 {
        z.iter().map(|&v| -0.5 * v * v - 0.5 * LN_2PI).sum()
    }
}

impl StateSpaceModel for LgssmModel {
    fn dim(&self) -> usize {
        self.params.d
    }

    fn log_initial(&self, x: &[f64]) -> f64 {
        Self::log_std_normal(x)
    }

    fn log_transition(&self, x_prev: &[f64], x: &[f64]) -> f64 {
        let d = self.params.d;
        let mut mean = vec![0.0; d];
        self.params.transition_mean(x_prev, &mut mean);
        let r: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut pr = vec![0.0; d];
        self.params.precision_apply(&r, &mut pr);
        -0.5 * r.iter().zip(&pr).map(|(a, b)| a * b).sum::<f64>()
    }

    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        let s2 = self.params.sigma_y2;
        x.iter().zip(y).map(|(a, b)| -(a - b) * (a - b) / (2.0 * s2)).sum()
    }

    fn sample_initial(&self, rng: &mut StreamRng, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        let mut noise = vec![0.0; self.params.d];
        self.params.sample_noise(rng, &mut noise);
        self.params.transition_mean(x_prev, out);
        out.iter_mut().zip(&noise).for_each(|(o, n)| *o += n);
    }

    fn sample_observation(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        let sd = self.params.sigma_y2.sqrt();
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi + sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

impl AuxiliaryFamily for LgssmModel {
    fn tree(&self) -> &DecompositionTree {
        &self.tree
    }

    fn log_f_aux(&self, node: NodeId, x_prev: Option<&[f64]>, z: &[f64]) -> f64 {
        let Some(x_prev) = x_prev else {
            return Self::log_std_normal(z);
        };
        match self.variant {
            LgssmAuxVariant::Decoupled => {
                let (a, b) = self.decoupled_parts(self.tree.node(node).lo, x_prev, z);
                a + b
            }
            LgssmAuxVariant::MarginalCovariance => {
                let m = &self.marginals[node];
                let mut mean = vec![0.0; self.params.d];
                self.params.transition_mean(x_prev, &mut mean);
                let r = DVector::from_iterator(z.len(), z.iter().enumerate().map(|(j, &v)| v - mean[m.lo + j]));
                -0.5 * (&m.precision * &r).dot(&r)
            }
        }
    }

    fn log_g_aux(&self, _node: NodeId, z: &[f64], y_sub: &[f64]) -> f64 {
        self.log_likelihood(z, y_sub)
    }

    fn sample_f_aux_leaf(&self, leaf: NodeId, x_prev: Option<&[f64]>, rng: &mut StreamRng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        let Some(x_prev) = x_prev else {
            return e;
        };
        let i = self.tree.node(leaf).lo;
        let p = &self.params;
        match self.variant {
            LgssmAuxVariant::Decoupled if i == 0 => 0.5 * x_prev[0] + e / p.tau.sqrt(),
            LgssmAuxVariant::Decoupled => 0.5 * p.c() * x_prev[i] + e / p.s().sqrt(),
            LgssmAuxVariant::MarginalCovariance => {
                let mut mean = vec![0.0; p.d];
                p.transition_mean(x_prev, &mut mean);
                mean[i] + self.marginals[leaf].leaf_sd * e
            }
        }
    }

    fn log_f_aux_split(&self, node: NodeId, x_prev: &[f64], z: &[f64]) -> Option<(f64, f64)> {
        match self.variant {
            LgssmAuxVariant::Decoupled => Some(self.decoupled_parts(self.tree.node(node).lo, x_prev, z)),
            LgssmAuxVariant::MarginalCovariance => None,
        }
    }

    fn merge_split(&self) -> Option<&dyn MergeSplit> {
        match self.variant {
            LgssmAuxVariant::Decoupled => Some(self),
            LgssmAuxVariant::MarginalCovariance => None,
        }
    }

    fn g_factorizes(&self) -> bool {
        true
    }
}

impl MergeSplit for LgssmModel {
    fn left(&self, node: NodeId, x_prev: Option<&[f64]>, z_left: &[f64]) -> f64 {
        let Some(x_prev) = x_prev else { return 0.0 };
        let (_, r) = self.tree.children(node).expect("internal node");
        let first = self.tree.node(r).lo;
        -0.5 * self.params.kappa() * z_left[z_left.len() - 1] * x_prev[first]
    }

    fn right(&self, _node: NodeId, _x_prev: Option<&[f64]>, _z_right: &[f64]) -> f64 {
        0.0
    }

    fn pair(&self, _node: NodeId, initial: bool, z_left: &[f64], z_right: &[f64]) -> f64 {
        if initial {
            0.0
        } else {
            self.params.log_ftilde(z_left[z_left.len() - 1], z_right[0])
        }
    }

    fn couples_right(&self) -> bool {
        false
    }
}

/// Mixture weight from the split form: `log f~` across the merge boundary
/// plus the ratio of predictive sums of the past-dependent parts.
pub fn log_mixture_weight_lgssm(model: &LgssmModel, node: NodeId, z_left: &[f64], z_right: &[f64], past: &Past) -> f64 {
    let Past::Particles(support) = past else {
        // the initial density factorizes over components
        return 0.0;
    };
    let tree = model.tree();
    let (l, r) = tree.children(node).expect("internal node");
    let z: Vec<f64> = z_left.iter().chain(z_right).copied().collect();
    let sum = |id: NodeId, zz: &[f64]| {
        let terms: Vec<f64> = (0..support.len())
            .map(|p| model.log_f_aux_split(id, support.point(p), zz).expect("decoupled variant").0 + support.log_mult()[p])
            .collect();
        log_sum_exp(&terms)
    };
    model.params.log_ftilde(z_left[z_left.len() - 1], z_right[0]) + sum(node, &z) - sum(l, z_left) - sum(r, z_right)
        + (support.n_total() as f64).ln()
}

/// Simulates `t_max` steps of states and observations.
pub fn simulate_lgssm(model: &LgssmModel, t_max: usize, rng: &mut StreamRng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    crate::model::simulate(model, t_max, rng)
}
