//! Lattice benchmark: independent random-walk vertices observed through
//! jointly Student-t noise whose precision decays with graph distance.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{AuxiliaryFamily, MergeSplit, Past, StateSpaceModel};
use crate::rng::StreamRng;
use crate::tree::{DecompositionTree, NodeId};
use crate::weights::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialParams {
    pub rows: usize,
    pub cols: usize,
    pub sigma_x2: f64,
    pub tau: f64,
    pub r_y: usize,
    pub nu: f64,
}

impl SpatialParams {
    /// `sigma_x2 = 1`, `tau = -0.25`, `r_y = 1`, `nu = 10`.
    pub fn standard(rows: usize, cols: usize) -> Self {
        SpatialParams { rows, cols, sigma_x2: 1.0, tau: -0.25, r_y: 1, nu: 10.0 }
    }

    pub fn num_vertices(&self) -> usize {
        self.rows * self.cols
    }

    /// Manhattan distance between row-major vertices `a` and `b`.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = (a / self.cols, a % self.cols);
        let (rb, cb) = (b / self.cols, b % self.cols);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }
}

/// Symmetric sparse matrix stored as per-row `(column, value)` lists sorted by
/// column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePrecision {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparsePrecision {
    /// Entries `tau^D(v, j)` for graph distance `D <= r_y`.
    pub fn graph_distance(p: &SpatialParams) -> Self {
        let n = p.num_vertices();
        let r = p.r_y as isize;
        let rows = (0..n)
            .map(|v| {
                let (rv, cv) = ((v / p.cols) as isize, (v % p.cols) as isize);
                let mut row = Vec::new();
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rj, cj) = (rv + dr, cv + dc);
                        let dist = dr.unsigned_abs() + dc.unsigned_abs();
                        if dist as isize > r || rj < 0 || cj < 0 || rj >= p.rows as isize || cj >= p.cols as isize {
                            continue;
                        }
                        row.push(((rj as usize) * p.cols + cj as usize, p.tau.powi(dist as i32)));
                    }
                }
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        SparsePrecision { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, v: usize) -> &[(usize, f64)] {
        &self.rows[v]
    }

    pub fn get(&self, v: usize, j: usize) -> f64 {
        self.rows[v].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, w)| w * x[j]).sum();
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(v, row)| row.iter().map(move |&(j, _)| v.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// `x^T Q x` restricted to rows and columns in `lo..hi`, with `x` indexed
    /// from `lo`.
    pub fn quadratic_form(&self, lo: usize, hi: usize, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for v in lo..hi {
            let mut acc = 0.0;
            for &(j, w) in &self.rows[v] {
                if j >= lo && j < hi {
                    acc += w * x[j - lo];
                }
            }
            q += x[v - lo] * acc;
        }
        q
    }

    /// `x_a^T Q x_b` over rows in `a` and columns in `b`.
    pub fn cross_form(&self, a: (usize, usize), xa: &[f64], b: (usize, usize), xb: &[f64]) -> f64 {
        let mut q = 0.0;
        for v in a.0..a.1 {
            let mut acc = 0.0;
            for &(j, w) in &self.rows[v] {
                if j >= b.0 && j < b.1 {
                    acc += w * xb[j - b.0];
                }
            }
            q += xa[v - a.0] * acc;
        }
        q
    }

    /// Banded Cholesky factor of the principal block `lo..hi`.
    pub fn cholesky(&self, lo: usize, hi: usize) -> Result<BandedCholesky> {
        BandedCholesky::factor(hi - lo, self.bandwidth(), |i, j| self.get(lo + i, lo + j))
    }
}

/// Lower-triangular banded factor `L` with `A = L L^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedCholesky {
    n: usize,
    band: usize,
    /// `l[i * (band + 1) + (i - j)]` holds `L[i][j]` for `i - band <= j <= i`.
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(n: usize, band: usize, a: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = band + 1;
        let mut l = vec![0.0; n * w];
        let at = |l: &Vec<f64>, i: usize, j: usize| l[i * w + (i - j)];
        for i in 0..n {
            let j0 = i.saturating_sub(band);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(band));
                let mut s = a(i, j);
                for k in k0..j {
                    s -= at(&l, i, k) * at(&l, j, k);
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / at(&l, j, j);
                }
            }
        }
        Ok(BandedCholesky { n, band, l })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.band + 1) + (i - j)]
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_transpose(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + self.band + 1).min(self.n) {
                s -= self.at(k, i) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
    }
}

#[derive(Debug)]
pub struct SpatialModel {
    pub params: SpatialParams,
    tree: DecompositionTree,
    precision: SparsePrecision,
    chol: BandedCholesky,
    restricted_failures: Vec<NodeId>,
    nonpositive: AtomicUsize,
}

/// Builds the model with a lattice decomposition tree.
pub fn build_spatial(params: SpatialParams) -> Result<SpatialModel> {
    SpatialModel::new(params)
}

impl SpatialModel {
    pub fn new(params: SpatialParams) -> Result<Self> {
        if params.rows == 0 || params.cols == 0 {
            return Err(Error::InvalidParams("lattice must be non-empty".into()));
        }
        if !(params.sigma_x2 > 0.0 && params.nu > 0.0 && params.tau.is_finite()) {
            return Err(Error::InvalidParams("need sigma_x2 > 0, nu > 0 and finite tau".into()));
        }
        let precision = SparsePrecision::graph_distance(&params);
        let n = params.num_vertices();
        let chol = precision.cholesky(0, n)?;
        let tree = DecompositionTree::lattice(params.rows, params.cols);
        let restricted_failures = (0..tree.num_nodes())
            .filter(|&id| {
                let node = tree.node(id);
                precision.cholesky(node.lo, node.hi).is_err()
            })
            .collect();
        Ok(SpatialModel { params, tree, precision, chol, restricted_failures, nonpositive: AtomicUsize::new(0) })
    }

    pub fn precision(&self) -> &SparsePrecision {
        &self.precision
    }

    /// Tree nodes whose restricted precision is not positive definite.
    pub fn restricted_pd_failures(&self) -> &[NodeId] {
        &self.restricted_failures
    }

    /// Number of likelihood evaluations whose t-form argument was not positive.
    pub fn nonpositive_events(&self) -> usize {
        self.nonpositive.load(Ordering::Relaxed)
    }

    fn t_form(&self, q: f64, k: usize) -> f64 {
        let nu = self.params.nu;
        let arg = 1.0 + q / nu;
        if arg <= 0.0 {
            self.nonpositive.fetch_add(1, Ordering::Relaxed);
            return f64::NEG_INFINITY;
        }
        -(nu + k as f64) / 2.0 * arg.ln()
    }

    fn residual(z: &[f64], y: &[f64]) -> Vec<f64> {
        y.iter().zip(z).map(|(a, b)| a - b).collect()
    }

    /// Draw of the observation noise `Z / sqrt(W / nu)`.
    pub fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = rng.sample(StandardNormal);
        }
        self.chol.solve_transpose(out);
        let w = ChiSquared::new(self.params.nu).expect("nu > 0").sample(rng);
        let scale = (w / self.params.nu).sqrt();
        out.iter_mut().for_each(|v| *v /= scale);
    }

    fn log_rw(&self, x_prev: &[f64], lo: usize, z: &[f64]) -> f64 {
        let s2 = self.params.sigma_x2;
        z.iter().enumerate().map(|(j, &v)| -(v - x_prev[lo + j]).powi(2) / (2.0 * s2)).sum()
    }

    fn log_init(&self, z: &[f64]) -> f64 {
        let s2 = self.params.sigma_x2;
        z.iter().map(|&v| -v * v / (2.0 * s2) - 0.5 * (LN_2PI + s2.ln())).sum()
    }
}

impl StateSpaceModel for SpatialModel {
    fn dim(&self) -> usize {
        self.params.num_vertices()
    }

    fn log_initial(&self, x: &[f64]) -> f64 {
        self.log_init(x)
    }

    fn log_transition(&self, x_prev: &[f64], x: &[f64]) -> f64 {
        self.log_rw(x_prev, 0, x)
    }

    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = Self::residual(x, y);
        self.t_form(self.precision.quadratic_form(0, r.len(), &r), r.len())
    }

    fn sample_initial(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let sd = self.params.sigma_x2.sqrt();
        out.iter_mut().for_each(|v| *v = sd * rng.sample::<f64, _>(StandardNormal));
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        let sd = self.params.sigma_x2.sqrt();
        for (o, &x) in out.iter_mut().zip(x_prev) {
            *o = x + sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn sample_observation(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        self.sample_noise(rng, out);
        out.iter_mut().zip(x).for_each(|(o, &xi)| *o += xi);
    }
}

impl AuxiliaryFamily for SpatialModel {
    fn tree(&self) -> &DecompositionTree {
        &self.tree
    }

    fn log_f_aux(&self, node: NodeId, x_prev: Option<&[f64]>, z: &[f64]) -> f64 {
        match x_prev {
            Some(x) => self.log_rw(x, self.tree.node(node).lo, z),
            None => self.log_init(z),
        }
    }

    fn log_g_aux(&self, node: NodeId, z: &[f64], y_sub: &[f64]) -> f64 {
        let n = self.tree.node(node);
        let r = Self::residual(z, y_sub);
        self.t_form(self.precision.quadratic_form(n.lo, n.hi, &r), n.len())
    }

    fn sample_f_aux_leaf(&self, leaf: NodeId, x_prev: Option<&[f64]>, rng: &mut StreamRng) -> f64 {
        let sd = self.params.sigma_x2.sqrt();
        let mean = x_prev.map_or(0.0, |x| x[self.tree.node(leaf).lo]);
        mean + sd * rng.sample::<f64, _>(StandardNormal)
    }

    fn merge_split(&self) -> Option<&dyn MergeSplit> {
        Some(self)
    }
}

impl MergeSplit for SpatialModel {
    fn left(&self, _node: NodeId, _x_prev: Option<&[f64]>, _z_left: &[f64]) -> f64 {
        0.0
    }

    fn right(&self, _node: NodeId, _x_prev: Option<&[f64]>, _z_right: &[f64]) -> f64 {
        0.0
    }

    fn pair(&self, _node: NodeId, _initial: bool, _z_left: &[f64], _z_right: &[f64]) -> f64 {
        0.0
    }

    fn couples_left(&self) -> bool {
        false
    }

    fn couples_right(&self) -> bool {
        false
    }
}

/// `log R^f + log R^g`: the ratio of per-vertex Gaussian predictive sums and
/// the merged t-form over the two child t-forms, with the merged quadratic
/// form assembled from the child forms and the boundary cross term.
pub fn log_mixture_weight_spatial(
    model: &SpatialModel,
    node: NodeId,
    z_left: &[f64],
    z_right: &[f64],
    past: &Past,
    y: &[f64],
) -> f64 {
    let tree = model.tree();
    let (l, r) = tree.children(node).expect("internal node");
    let (nl, nr) = (tree.node(l), tree.node(r));
    let rl = SpatialModel::residual(z_left, &y[nl.lo..nl.hi]);
    let rr = SpatialModel::residual(z_right, &y[nr.lo..nr.hi]);
    let prec = model.precision();
    let ql = prec.quadratic_form(nl.lo, nl.hi, &rl);
    let qr = prec.quadratic_form(nr.lo, nr.hi, &rr);
    let cross = prec.cross_form((nl.lo, nl.hi), &rl, (nr.lo, nr.hi), &rr);
    let log_rg = model.t_form(ql + qr + 2.0 * cross, nl.len() + nr.len())
        - model.t_form(ql, nl.len())
        - model.t_form(qr, nr.len());

    let Past::Particles(support) = past else {
        return log_rg;
    };
    let s2 = model.params.sigma_x2;
    let mut tu = Vec::with_capacity(support.len());
    let mut tl = Vec::with_capacity(support.len());
    let mut tr = Vec::with_capacity(support.len());
    for p in 0..support.len() {
        let x = support.point(p);
        let lm = support.log_mult()[p];
        let a: f64 = z_left.iter().enumerate().map(|(j, &v)| -(v - x[nl.lo + j]).powi(2) / (2.0 * s2)).sum();
        let b: f64 = z_right.iter().enumerate().map(|(j, &v)| -(v - x[nr.lo + j]).powi(2) / (2.0 * s2)).sum();
        tu.push(a + b + lm);
        tl.push(a + lm);
        tr.push(b + lm);
    }
    let log_rf = log_sum_exp(&tu) - log_sum_exp(&tl) - log_sum_exp(&tr) + (support.n_total() as f64).ln();
    log_rf + log_rg
}

/// Simulates `t_max` steps of states and observations.
pub fn simulate_spatial(model: &SpatialModel, t_max: usize, rng: &mut StreamRng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    crate::model::simulate(model, t_max, rng)
}
