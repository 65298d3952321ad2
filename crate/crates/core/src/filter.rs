//! The divide-and-conquer marginal particle filter.
//!
//! Each step draws leaf particles from the bootstrap proposal, weights them by
//! the leaf likelihood proxies, and merges clouds bottom-up. Every cloud
//! carries an `N x P` cache of `log f_u(x^p, z_k)` over the `P` distinct
//! previous-time points, which gives the predictive sums in the mixture
//! weights. When the model provides a [`MergeSplit`], a parent's cache rows
//! are sums of its children's rows, and each pair's predictive sum becomes a
//! dot product of row-scaled exponentials.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{AuxiliaryFamily, MergeSplit, NodeCloud, Past, PastSupport};
use crate::resampling::{self, resample_log_weights, theta_cap, MergeStrategy, MixtureBatch, PairWeights};
use crate::rng::{phase, RngStream, StreamRng};
use crate::tree::NodeId;
use crate::weights::{effective_sample_size, log_sum_exp, normalize_log_weights};

/// Dot products below this fall back to an exact log-sum-exp.
const DOT_FLOOR: f64 = 1e-200;

#[derive(Clone, Debug, PartialEq)]
pub enum RwScale {
    /// `multiplier / sqrt(k)` times the empirical standard deviation of each
    /// component, `k` being the node width.
    Auto { multiplier: f64 },
    /// Fixed step per global component.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperingConfig {
    /// Conditional-ESS threshold as a fraction of `N`.
    pub cess_ratio: f64,
    /// Resample when the ESS drops below this fraction of `N`.
    pub resample_ratio: f64,
    pub mcmc_steps: usize,
    pub rw_scale: RwScale,
}

impl Default for TemperingConfig {
    fn default() -> Self {
        TemperingConfig {
            cess_ratio: 0.8,
            resample_ratio: 0.5,
            mcmc_steps: 2,
            rw_scale: RwScale::Auto { multiplier: 2.38 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Proposal {
    #[default]
    Bootstrap,
}

/// How predictive sums in merges are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MergePath {
    /// Cached path when the model offers a [`MergeSplit`].
    #[default]
    Auto,
    /// Direct evaluation of `log_f_aux` on concatenated states.
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DacConfig {
    pub n_particles: usize,
    pub merge_strategy: MergeStrategy,
    pub tempering: Option<TemperingConfig>,
    pub proposal: Proposal,
    pub merge_path: MergePath,
}

impl DacConfig {
    pub fn new(n_particles: usize, merge_strategy: MergeStrategy) -> Self {
        DacConfig {
            n_particles,
            merge_strategy,
            tempering: None,
            proposal: Proposal::Bootstrap,
            merge_path: MergePath::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidParams(format!("N must be at least 2, got {}", self.n_particles)));
        }
        if let Some(t) = &self.tempering {
            if !(t.cess_ratio > 0.0 && t.cess_ratio <= 1.0) {
                return Err(Error::InvalidParams("CESS threshold must lie in (0, N]".into()));
            }
        }
        Ok(())
    }
}

/// Filter output after `time` steps.
#[derive(Clone, Debug)]
pub struct FilterState {
    pub time: usize,
    /// Equally weighted root cloud; empty before the first step.
    pub root_cloud: NodeCloud,
    /// Distinct points of `root_cloud`, feeding the next step's predictive sums.
    pub past: Past,
}

impl FilterState {
    pub fn initial() -> Self {
        FilterState {
            time: 0,
            root_cloud: NodeCloud::new(0, 0, Vec::new(), Vec::new(), Vec::new()),
            past: Past::Initial,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperDiagnostics {
    pub alphas: Vec<f64>,
    pub resamples: usize,
    pub acceptance_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDiagnostics {
    pub node: NodeId,
    pub level: usize,
    pub theta: usize,
    pub ess: f64,
    pub tempering: Option<TemperDiagnostics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub nodes: Vec<NodeDiagnostics>,
}

/// A cloud with the per-particle values the merges reuse.
struct Work {
    cloud: NodeCloud,
    /// `log g_u(z_k, y_u)`.
    log_g: Vec<f64>,
    /// Row-major `N x P` values of `log f_u(x^p, z_k)`; empty at the root.
    f: Vec<f64>,
    diags: Vec<NodeDiagnostics>,
}

fn y_of<'a, M: AuxiliaryFamily + ?Sized>(model: &M, node: NodeId, y: &'a [f64]) -> &'a [f64] {
    &y[model.tree().components_of(node)]
}

fn fill_f_rows<M: AuxiliaryFamily + ?Sized>(model: &M, node: NodeId, past: &Past, cloud: &NodeCloud) -> Vec<f64> {
    let p = past.len();
    let mut f = Vec::with_capacity(cloud.len() * p);
    for k in 0..cloud.len() {
        let z = cloud.particle(k);
        f.extend((0..p).map(|j| model.log_f_aux(node, past.point(j), z)));
    }
    f
}

fn leaf_work<M: AuxiliaryFamily + ?Sized>(
    model: &M,
    leaf: NodeId,
    time: usize,
    past: &Past,
    y: &[f64],
    n: usize,
    rng: &mut StreamRng,
    need_f: bool,
) -> Result<Work> {
    let comp = model.tree().node(leaf).lo;
    let y_sub = y_of(model, leaf, y);
    let mut particles = Vec::with_capacity(n);
    for _ in 0..n {
        let x_prev = match past {
            Past::Initial => None,
            Past::Particles(s) => Some(s.point(s.unique_of(rng.random_range(0..s.n_total())))),
        };
        particles.push(model.sample_f_aux_leaf(leaf, x_prev, rng));
    }
    let log_g: Vec<f64> = particles.iter().map(|&z| model.log_g_aux(leaf, &[z], y_sub)).collect();
    if let Some(i) = log_g.iter().position(|w| w.is_nan()) {
        return Err(Error::NanWeight(i));
    }
    let cloud = NodeCloud::new(leaf, time, vec![comp], particles, log_g.clone());
    let f = if need_f { fill_f_rows(model, leaf, past, &cloud) } else { Vec::new() };
    Ok(Work { cloud, log_g, f, diags: Vec::new() })
}

/// Bootstrap leaf step: each particle draws its own uniform ancestor from the
/// previous root cloud and is weighted by the leaf likelihood proxy.
pub fn leaf_step<M: AuxiliaryFamily + ?Sized>(
    model: &M,
    leaf: NodeId,
    past: &Past,
    time: usize,
    y: &[f64],
    n: usize,
    rng: &mut StreamRng,
) -> Result<NodeCloud> {
    Ok(leaf_work(model, leaf, time, past, y, n, rng, false)?.cloud)
}

/// Log mixture weight of a pair, evaluated directly from the auxiliary
/// family: likelihood ratio plus the ratio of predictive sums.
pub fn log_mixture_weight<M: AuxiliaryFamily + ?Sized>(
    model: &M,
    node: NodeId,
    z_left: &[f64],
    z_right: &[f64],
    past: &Past,
    y: &[f64],
) -> Result<f64> {
    let (l, r) = model.tree().children(node).expect("mixture weights need an internal node");
    let z: Vec<f64> = z_left.iter().chain(z_right).copied().collect();
    let num = past.log_predictive(|x| model.log_f_aux(node, x, &z));
    if num == f64::NEG_INFINITY {
        return Err(Error::AllWeightsDegenerate);
    }
    let den_l = past.log_predictive(|x| model.log_f_aux(l, x, z_left));
    let den_r = past.log_predictive(|x| model.log_f_aux(r, x, z_right));
    let g = model.log_g_aux(node, &z, y_of(model, node, y))
        - model.log_g_aux(l, z_left, y_of(model, l, y))
        - model.log_g_aux(r, z_right, y_of(model, r, y));
    Ok(g + num - den_l - den_r)
}

struct Cached<'a> {
    split: &'a dyn MergeSplit,
    /// Rows of `F_l + left coupling`.
    ll: Vec<f64>,
    /// Rows of `F_r + right coupling`.
    rr: Vec<f64>,
    /// `exp(ll - sa)`.
    a: Vec<f64>,
    /// `exp(rr - sb) * multiplicity`.
    b: Vec<f64>,
    sa: Vec<f64>,
    sb: Vec<f64>,
}

struct MergeCtx<'a, M: ?Sized> {
    model: &'a M,
    node: NodeId,
    past: &'a Past,
    y_u: &'a [f64],
    left: Work,
    right: Work,
    n: usize,
    p: usize,
    den_l: Vec<f64>,
    den_r: Vec<f64>,
    cached: Option<Cached<'a>>,
}

fn row_scaled_exp(f: &[f64], p: usize, exps: &mut Vec<f64>, scales: &mut Vec<f64>) {
    exps.clear();
    scales.clear();
    exps.reserve(f.len());
    for row in f.chunks_exact(p) {
        let s = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = if s.is_finite() { s } else { 0.0 };
        scales.push(s);
        exps.extend(row.iter().map(|&v| (v - s).exp()));
    }
}

fn weighted_row_lse(exps: &[f64], scales: &[f64], mult: &[f64], p: usize) -> Vec<f64> {
    exps.chunks_exact(p)
        .zip(scales)
        .map(|(row, &s)| s + row.iter().zip(mult).map(|(e, m)| e * m).sum::<f64>().ln())
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl<'a, M: AuxiliaryFamily + ?Sized> MergeCtx<'a, M> {
    fn new(model: &'a M, node: NodeId, past: &'a Past, y: &'a [f64], left: Work, right: Work, path: MergePath) -> Self {
        let n = left.cloud.len();
        let p = past.len();
        let mult: Vec<f64> = (0..p).map(|j| past.log_mult(j).exp()).collect();
        let (mut el, mut sl, mut er, mut sr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        row_scaled_exp(&left.f, p, &mut el, &mut sl);
        row_scaled_exp(&right.f, p, &mut er, &mut sr);
        let den_l = weighted_row_lse(&el, &sl, &mult, p);
        let den_r = weighted_row_lse(&er, &sr, &mult, p);
        let split = if path == MergePath::Auto { model.merge_split() } else { None };
        let mut ctx = MergeCtx { model, node, past, y_u: y_of(model, node, y), left, right, n, p, den_l, den_r, cached: None };
        if let Some(split) = split {
            let mut ll = std::mem::take(&mut ctx.left.f);
            let mut rr = std::mem::take(&mut ctx.right.f);
            let (a, sa) = if !split.couples_left() {
                (el, sl)
            } else {
                for k in 0..n {
                    let z = ctx.left.cloud.particle(k);
                    for j in 0..p {
                        ll[k * p + j] += split.left(node, past.point(j), z);
                    }
                }
                row_scaled_exp(&ll, p, &mut el, &mut sl);
                (el, sl)
            };
            let (mut b, sb) = if !split.couples_right() {
                (er, sr)
            } else {
                for k in 0..n {
                    let z = ctx.right.cloud.particle(k);
                    for j in 0..p {
                        rr[k * p + j] += split.right(node, past.point(j), z);
                    }
                }
                row_scaled_exp(&rr, p, &mut er, &mut sr);
                (er, sr)
            };
            for row in b.chunks_exact_mut(p) {
                row.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
            }
            ctx.cached = Some(Cached { split, ll, rr, a, b, sa, sb });
        }
        ctx
    }

    fn concat(&self, n1: usize, n2: usize) -> Vec<f64> {
        let mut z = self.left.cloud.particle(n1).to_vec();
        z.extend_from_slice(self.right.cloud.particle(n2));
        z
    }

    fn g_ratio(&self, n1: usize, n2: usize) -> f64 {
        if self.model.g_factorizes() {
            0.0
        } else {
            self.model.log_g_aux(self.node, &self.concat(n1, n2), self.y_u) - self.left.log_g[n1] - self.right.log_g[n2]
        }
    }

    fn log_g_u(&self, n1: usize, n2: usize) -> f64 {
        if self.model.g_factorizes() {
            self.left.log_g[n1] + self.right.log_g[n2]
        } else {
            self.model.log_g_aux(self.node, &self.concat(n1, n2), self.y_u)
        }
    }

    fn pair_term(&self, c: &Cached<'_>, n1: usize, n2: usize) -> f64 {
        c.split.pair(self.node, self.past.is_initial(), self.left.cloud.particle(n1), self.right.cloud.particle(n2))
    }

    fn exact_num(&self, c: &Cached<'_>, n1: usize, n2: usize) -> f64 {
        let p = self.p;
        let terms: Vec<f64> = (0..p)
            .map(|j| c.ll[n1 * p + j] + c.rr[n2 * p + j] + self.past.log_mult(j))
            .collect();
        log_sum_exp(&terms)
    }

    /// `log sum_p mult_p f_u(x^p, z)` for the pair.
    fn num(&self, n1: usize, n2: usize, dot_value: Option<f64>) -> f64 {
        let p = self.p;
        match &self.cached {
            Some(c) => {
                let d = dot_value.unwrap_or_else(|| dot(&c.a[n1 * p..(n1 + 1) * p], &c.b[n2 * p..(n2 + 1) * p]));
                let base = if d > DOT_FLOOR { c.sa[n1] + c.sb[n2] + d.ln() } else { self.exact_num(c, n1, n2) };
                base + self.pair_term(c, n1, n2)
            }
            None => {
                let z = self.concat(n1, n2);
                let terms: Vec<f64> = (0..p)
                    .map(|j| self.model.log_f_aux(self.node, self.past.point(j), &z) + self.past.log_mult(j))
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    fn mixture(&self, n1: usize, n2: usize, dot_value: Option<f64>) -> f64 {
        self.g_ratio(n1, n2) + self.num(n1, n2, dot_value) - self.den_l[n1] - self.den_r[n2] + self.past.log_n()
    }

    /// Log target `log g + log predictive` of a child or of the node itself.
    fn log_gamma(&self, node: NodeId, z: &[f64]) -> f64 {
        let tree = self.model.tree();
        let lo = tree.node(self.node).lo;
        let range = tree.components_of(node);
        let y_sub = &self.y_u[range.start - lo..range.end - lo];
        self.model.log_g_aux(node, z, y_sub) + self.past.log_predictive(|x| self.model.log_f_aux(node, x, z))
    }

    fn merged(&self, pairs: &[(usize, usize)], log_weights: Vec<f64>, need_f: bool) -> Work {
        let mut cloud = NodeCloud::concat(self.node, &self.left.cloud, &self.right.cloud, pairs);
        cloud.log_weights = log_weights;
        let log_g = pairs.iter().map(|&(a, b)| self.log_g_u(a, b)).collect();
        let f = if !need_f {
            Vec::new()
        } else if let Some(c) = &self.cached {
            let p = self.p;
            let mut f = Vec::with_capacity(pairs.len() * p);
            for &(a, b) in pairs {
                let pair = self.pair_term(c, a, b);
                let (la, rb) = (&c.ll[a * p..(a + 1) * p], &c.rr[b * p..(b + 1) * p]);
                f.extend(la.iter().zip(rb).map(|(x, y)| x + y + pair));
            }
            f
        } else {
            fill_f_rows(self.model, self.node, self.past, &cloud)
        };
        Work { cloud, log_g, f, diags: Vec::new() }
    }
}

impl<M: AuxiliaryFamily + ?Sized> PairWeights for MergeCtx<'_, M> {
    fn len(&self) -> usize {
        self.n
    }

    fn log_pair(&self, n1: usize, n2: usize) -> f64 {
        self.left.cloud.log_weights[n1] + self.right.cloud.log_weights[n2]
    }

    fn log_mixture(&self, n1: usize, n2: usize) -> f64 {
        self.mixture(n1, n2, None)
    }

    fn log_mixture_all(&self, out: &mut [f64]) {
        let (n, p) = (self.n, self.p);
        match &self.cached {
            Some(c) => {
                // S = A B^T, with B stored row-major as N x P
                unsafe {
                    matrixmultiply::dgemm(
                        n, p, n, 1.0,
                        c.a.as_ptr(), p as isize, 1,
                        c.b.as_ptr(), 1, p as isize,
                        0.0, out.as_mut_ptr(), n as isize, 1,
                    );
                }
                for n1 in 0..n {
                    for n2 in 0..n {
                        out[n1 * n + n2] = self.mixture(n1, n2, Some(out[n1 * n + n2]));
                    }
                }
            }
            None => {
                for n1 in 0..n {
                    for n2 in 0..n {
                        out[n1 * n + n2] = self.mixture(n1, n2, None);
                    }
                }
            }
        }
    }
}

struct StepCtx<'a, M: ?Sized> {
    model: &'a M,
    config: &'a DacConfig,
    past: &'a Past,
    y: &'a [f64],
    time: usize,
    stream: &'a RngStream,
}

impl<M: AuxiliaryFamily + ?Sized> StepCtx<'_, M> {
    fn node_rng(&self, node: NodeId, tag: u64) -> StreamRng {
        self.stream.split(node as u64).split(tag).rng()
    }

    fn process(&self, node: NodeId) -> Result<Work> {
        let tree = self.model.tree();
        let need_f = node != tree.root();
        let Some((l, r)) = tree.children(node) else {
            let mut rng = self.node_rng(node, phase::LEAF);
            return leaf_work(self.model, node, self.time, self.past, self.y, self.config.n_particles, &mut rng, need_f);
        };
        let (left, right) = rayon::join(|| self.process(l), || self.process(r));
        let (left, right) = (left?, right?);
        let mut diags = left.diags.clone();
        diags.extend(right.diags.iter().cloned());
        let ctx = MergeCtx::new(self.model, node, self.past, self.y, left, right, self.config.merge_path);
        let n = self.config.n_particles;
        let mut perm_rng = self.node_rng(node, phase::PERMUTATION);
        let mut res_rng = self.node_rng(node, phase::RESAMPLE);
        let strategy = &self.config.merge_strategy;

        if let (MergeStrategy::Adaptive { ess_target, theta_cap: cap }, Some(tcfg)) = (strategy, &self.config.tempering) {
            let target = ess_target.unwrap_or(n as f64);
            let cap = cap.unwrap_or_else(|| theta_cap(n));
            let batch = resampling::adaptive_batch(&ctx, target, cap, &mut perm_rng)?;
            let ess = batch.ess()?;
            if ess < target {
                let mut rng = self.node_rng(node, phase::TEMPER);
                let (mut work, tdiag) = temper_batch(&ctx, &batch, target, tcfg, need_f, &mut rng)?;
                diags.push(NodeDiagnostics {
                    node,
                    level: tree.level_of(node),
                    theta: batch.theta(),
                    ess,
                    tempering: Some(tdiag),
                });
                work.diags = diags;
                return Ok(work);
            }
            let pairs = resampling::resample_batch(&batch, n, &mut res_rng)?;
            let mut work = ctx.merged(&pairs, vec![0.0; n], need_f);
            diags.push(NodeDiagnostics { node, level: tree.level_of(node), theta: batch.theta(), ess, tempering: None });
            work.diags = diags;
            return Ok(work);
        }

        let sel = resampling::select_pairs(strategy, &ctx, &mut perm_rng, &mut res_rng)?;
        let mut work = ctx.merged(&sel.pairs, sel.log_weights, need_f);
        diags.push(NodeDiagnostics { node, level: tree.level_of(node), theta: sel.theta, ess: sel.ess, tempering: None });
        work.diags = diags;
        Ok(work)
    }
}

/// Solves `f(x) = target` for a function decreasing from `f(lo) >= target`
/// to `f(hi) < target`.
fn bisect(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..60 {
        if hi - lo <= 1e-4 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the upper end keeps CESS at or just below the threshold while
    // guaranteeing progress
    hi
}

/// Conditional ESS of an incremental exponent `delta` on log weights `lm`
/// given normalised current weights `w`.
pub fn conditional_ess(w: &[f64], lm: &[f64], delta: f64) -> f64 {
    let max = lm.iter().zip(w).filter(|(_, &wi)| wi > 0.0).map(|(&l, _)| delta * l).fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for (&wi, &l) in w.iter().zip(lm) {
        if wi > 0.0 {
            let e = (delta * l - max).exp();
            s1 += wi * e;
            s2 += wi * e * e;
        }
    }
    w.len() as f64 * s1 * s1 / s2
}

fn temper_batch<M: AuxiliaryFamily + ?Sized>(
    ctx: &MergeCtx<'_, M>,
    batch: &MixtureBatch,
    ess_target: f64,
    cfg: &TemperingConfig,
    need_f: bool,
    rng: &mut StreamRng,
) -> Result<(Work, TemperDiagnostics)> {
    let n = ctx.n;
    let tree = ctx.model.tree();
    let (l, r) = tree.children(ctx.node).expect("internal node");
    let k_l = tree.node(l).len();
    let width = tree.node(ctx.node).len();

    let ess_at = |alpha: f64| {
        let lw: Vec<f64> = batch
            .log_pair_weights
            .iter()
            .zip(&batch.log_mixture_weights)
            .map(|(p, m)| p + alpha * m)
            .collect();
        effective_sample_size(&lw).unwrap_or(1.0)
    };
    let ess0 = ess_at(0.0);
    // nothing to bridge when the mixture weights do not lower the ESS
    let mut alpha = if ess_at(1.0) >= ess_target.min(ess0) {
        1.0
    } else if ess0 < ess_target {
        0.0
    } else {
        bisect(0.0, 1.0, ess_target, ess_at)
    };
    let init: Vec<f64> = batch
        .log_pair_weights
        .iter()
        .zip(&batch.log_mixture_weights)
        .map(|(p, m)| p + alpha * m)
        .collect();
    let picks = resample_log_weights(&init, n, rng)?;
    let pairs: Vec<(usize, usize)> = picks.iter().map(|&i| batch.pair(i)).collect();

    let mut z: Vec<f64> = Vec::with_capacity(n * width);
    let mut gamma_c = Vec::with_capacity(n);
    let mut lm = Vec::with_capacity(n);
    for (&i, &(a, b)) in picks.iter().zip(&pairs) {
        z.extend(ctx.concat(a, b));
        let gc = ctx.left.log_g[a] + ctx.den_l[a] + ctx.right.log_g[b] + ctx.den_r[b] - 2.0 * ctx.past.log_n();
        gamma_c.push(gc);
        lm.push(batch.log_mixture_weights[i]);
    }
    let mut lw = vec![0.0; n];
    let mut diag = TemperDiagnostics { alphas: vec![alpha], resamples: 1, acceptance_rate: 0.0 };
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let beta = cfg.cess_ratio * n as f64;

    while alpha < 1.0 {
        let (w, _) = normalize_log_weights(&lw)?;
        let room = 1.0 - alpha;
        let delta = if conditional_ess(&w, &lm, room) >= beta {
            room
        } else {
            bisect(0.0, room, beta, |d| conditional_ess(&w, &lm, d))
        };
        alpha = if delta >= room { 1.0 } else { alpha + delta };
        diag.alphas.push(alpha);
        for (wi, &mi) in lw.iter_mut().zip(&lm) {
            *wi += delta * mi;
        }
        if effective_sample_size(&lw)? < cfg.resample_ratio * n as f64 {
            let idx = resample_log_weights(&lw, n, rng)?;
            z = idx.iter().flat_map(|&i| z[i * width..(i + 1) * width].to_vec()).collect();
            gamma_c = idx.iter().map(|&i| gamma_c[i]).collect();
            lm = idx.iter().map(|&i| lm[i]).collect();
            lw = vec![0.0; n];
            diag.resamples += 1;
        }
        let scale = rw_scales(cfg, &z, &lw, width, tree.node(ctx.node).lo)?;
        for k in 0..n {
            let zk = &mut z[k * width..(k + 1) * width];
            let mut cur = (1.0 - alpha) * gamma_c[k] + alpha * (gamma_c[k] + lm[k]);
            for _ in 0..cfg.mcmc_steps {
                let prop: Vec<f64> = zk
                    .iter()
                    .zip(&scale)
                    .map(|(&v, &s)| v + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let gc = ctx.log_gamma(l, &prop[..k_l]) + ctx.log_gamma(r, &prop[k_l..]);
                let gu = ctx.log_gamma(ctx.node, &prop);
                let next = (1.0 - alpha) * gc + alpha * gu;
                proposed += 1;
                if next.is_finite() && rng.random::<f64>().ln() < next - cur {
                    accepted += 1;
                    zk.copy_from_slice(&prop);
                    gamma_c[k] = gc;
                    lm[k] = gu - gc;
                    cur = next;
                }
            }
        }
    }
    diag.acceptance_rate = if proposed == 0 { 0.0 } else { accepted as f64 / proposed as f64 };

    let lo = tree.node(ctx.node).lo;
    let cloud = NodeCloud::new(ctx.node, ctx.left.cloud.time, (lo..lo + width).collect(), z, lw);
    let log_g = (0..n).map(|k| ctx.model.log_g_aux(ctx.node, cloud.particle(k), ctx.y_u)).collect();
    let f = if need_f { fill_f_rows(ctx.model, ctx.node, ctx.past, &cloud) } else { Vec::new() };
    Ok((Work { cloud, log_g, f, diags: Vec::new() }, diag))
}

fn rw_scales(cfg: &TemperingConfig, z: &[f64], lw: &[f64], width: usize, lo: usize) -> Result<Vec<f64>> {
    match &cfg.rw_scale {
        RwScale::Fixed(s) => Ok(s[lo..lo + width].to_vec()),
        RwScale::Auto { multiplier } => {
            let (w, _) = normalize_log_weights(lw)?;
            let factor = multiplier / (width as f64).sqrt();
            Ok((0..width)
                .map(|j| {
                    let mean: f64 = w.iter().enumerate().map(|(k, wk)| wk * z[k * width + j]).sum();
                    let var: f64 = w.iter().enumerate().map(|(k, wk)| wk * (z[k * width + j] - mean).powi(2)).sum();
                    // a collapsed component gets a unit-scale step
                    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                    factor * sd
                })
                .collect())
        }
    }
}

/// One filter step: leaves, then merges bottom-up, returning an equally
/// weighted root cloud. `stream` is the stream of this time step; nodes and
/// phases split from it.
pub fn dac_step<M: AuxiliaryFamily + ?Sized>(
    prev: &FilterState,
    y: &[f64],
    model: &M,
    config: &DacConfig,
    stream: &RngStream,
) -> Result<(FilterState, StepDiagnostics)> {
    config.validate()?;
    let time = prev.time + 1;
    let ctx = StepCtx { model, config, past: &prev.past, y, time, stream };
    let root = model.tree().root();
    let work = ctx.process(root)?;
    let mut cloud = work.cloud;
    cloud.time = time;
    if !cloud.is_equally_weighted() {
        let mut rng = stream.split(root as u64).split(phase::RESAMPLE).split(1).rng();
        let idx = resample_log_weights(&cloud.log_weights, config.n_particles, &mut rng)?;
        cloud = cloud.select(&idx);
    } else {
        cloud.log_weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let past = Past::Particles(PastSupport::from_cloud(&cloud));
    let state = FilterState { time, root_cloud: cloud, past };
    Ok((state, StepDiagnostics { nodes: work.diags }))
}

/// Runs the filter over `ys`, calling `on_step` after every step. Step `t`
/// (1-based) uses `stream.split(t)`.
pub fn run_filter<M: AuxiliaryFamily + ?Sized>(
    model: &M,
    ys: &[Vec<f64>],
    config: &DacConfig,
    stream: &RngStream,
    mut on_step: impl FnMut(&FilterState, &StepDiagnostics),
) -> Result<FilterState> {
    let mut state = FilterState::initial();
    for y in ys {
        let (next, diag) = dac_step(&state, y, model, config, &stream.split(state.time as u64 + 1))?;
        on_step(&next, &diag);
        state = next;
    }
    Ok(state)
}

/// Checks that leaf likelihoods plus every merge's mixture weight, evaluated
/// through the filter's merge machinery at the single state `x`, equal the
/// marginal target at the root over the leaf proposal masses.
///
/// Returns the discrepancy, or [`Error::AuditFailed`] when it exceeds `1e-6`.
pub fn unnormalized_root_weight_audit<M: AuxiliaryFamily + ?Sized>(
    model: &M,
    past: &Past,
    y: &[f64],
    x: &[f64],
    path: MergePath,
) -> Result<f64> {
    let tree = model.tree();
    fn walk<M: AuxiliaryFamily + ?Sized>(
        model: &M,
        node: NodeId,
        past: &Past,
        y: &[f64],
        x: &[f64],
        path: MergePath,
        total: &mut f64,
    ) -> Work {
        let tree = model.tree();
        match tree.children(node) {
            None => {
                let lo = tree.node(node).lo;
                let z = x[lo];
                let g = model.log_g_aux(node, &[z], y_of(model, node, y));
                *total += g;
                let cloud = NodeCloud::new(node, 0, vec![lo], vec![z], vec![0.0]);
                let f = fill_f_rows(model, node, past, &cloud);
                Work { cloud, log_g: vec![g], f, diags: Vec::new() }
            }
            Some((l, r)) => {
                let left = walk(model, l, past, y, x, path, total);
                let right = walk(model, r, past, y, x, path, total);
                let ctx = MergeCtx::new(model, node, past, y, left, right, path);
                *total += ctx.log_mixture(0, 0);
                ctx.merged(&[(0, 0)], vec![0.0], true)
            }
        }
    }
    let mut lhs = 0.0;
    walk(model, tree.root(), past, y, x, path, &mut lhs);
    let root_pred = past.log_predictive(|xp| match xp {
        Some(xp) => model.log_transition(xp, x),
        None => model.log_initial(x),
    });
    let leaf_pred: f64 = tree
        .leaves()
        .iter()
        .map(|&leaf| {
            let z = [x[tree.node(leaf).lo]];
            past.log_predictive(|xp| model.log_f_aux(leaf, xp, &z))
        })
        .sum();
    let rhs = model.log_likelihood(x, y) + root_pred - leaf_pred;
    let err = lhs - rhs;
    if err.abs() > 1e-6 || !err.is_finite() {
        return Err(Error::AuditFailed { lhs, rhs });
    }
    Ok(err)
}
