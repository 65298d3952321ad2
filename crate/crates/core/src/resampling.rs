//! Stratified resampling and the mixture-resampling merge strategies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::model::NodeCloud;
use crate::rng::StreamRng;
use crate::tree::NodeId;
use crate::weights::{effective_sample_size, normalize_log_weights};

/// Default bound on `N` for [`merge_full`].
pub const DEFAULT_FULL_CAP: usize = 2000;

/// Stratified resampling: one uniform per stratum `[m/M, (m+1)/M)`, mapped
/// through the inverse CDF of `probabilities`.
pub fn stratified_resample(probabilities: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if probabilities.is_empty() {
        return Err(Error::InvalidProbabilities("empty probability vector".into()));
    }
    if let Some(p) = probabilities.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidProbabilities(format!("entry {p} is negative or NaN")));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProbabilities(format!("probabilities sum to {total}")));
    }
    let last = probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    let mut cdf = probabilities[0];
    for m in 0..count {
        let u = (m as f64 + rng.random::<f64>()) / count as f64 * total;
        while cdf <= u && i < last {
            i += 1;
            cdf += probabilities[i];
        }
        out.push(i);
    }
    Ok(out)
}

/// Normalises `log_weights` and draws `count` stratified indices.
pub fn resample_log_weights(log_weights: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let (p, _) = normalize_log_weights(log_weights)?;
    stratified_resample(&p, count, rng)
}

/// `ceil(sqrt(n))`, the default cap on the number of permutation blocks.
pub fn theta_cap(n: usize) -> usize {
    let r = n.isqrt();
    if r * r < n {
        r + 1
    } else {
        r
    }
}

/// Weight functions evaluated on candidate pairs `(n1, n2)` of a left and a
/// right child particle.
pub trait PairWeights {
    /// Particles per child.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `log w_l[n1] + log w_r[n2]`.
    fn log_pair(&self, n1: usize, n2: usize) -> f64;

    /// Log mixture weight of the pair.
    fn log_mixture(&self, n1: usize, n2: usize) -> f64;

    /// Mixture weights of the block `(n, right[n])`, `n = 0..len()`.
    fn log_mixture_block(&self, right: &[usize], out: &mut [f64]) {
        for (n, (o, &r)) in out.iter_mut().zip(right).enumerate() {
            *o = self.log_mixture(n, r);
        }
    }

    /// Mixture weights of all pairs, row-major in `n1`.
    fn log_mixture_all(&self, out: &mut [f64]) {
        let n = self.len();
        for n1 in 0..n {
            for n2 in 0..n {
                out[n1 * n + n2] = self.log_mixture(n1, n2);
            }
        }
    }
}

/// [`PairWeights`] from child log-weights and a mixture-weight closure.
pub struct FnPairWeights<'a, F> {
    pub left: &'a [f64],
    pub right: &'a [f64],
    pub mixture: F,
}

impl<F: Fn(usize, usize) -> f64> PairWeights for FnPairWeights<'_, F> {
    fn len(&self) -> usize {
        self.left.len()
    }

    fn log_pair(&self, n1: usize, n2: usize) -> f64 {
        self.left[n1] + self.right[n2]
    }

    fn log_mixture(&self, n1: usize, n2: usize) -> f64 {
        (self.mixture)(n1, n2)
    }
}

/// Candidate pairs built from `theta` matchings of size `N`; block 0 is the
/// identity matching.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureBatch {
    pub n: usize,
    /// `blocks[b][n1]` is the right index paired with `n1` in block `b`.
    pub blocks: Vec<Vec<usize>>,
    pub log_pair_weights: Vec<f64>,
    pub log_mixture_weights: Vec<f64>,
    pub log_updated_weights: Vec<f64>,
}

impl MixtureBatch {
    pub fn theta(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.log_updated_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_updated_weights.is_empty()
    }

    pub fn pair(&self, i: usize) -> (usize, usize) {
        (i % self.n, self.blocks[i / self.n][i % self.n])
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }

    pub fn ess(&self) -> Result<f64> {
        effective_sample_size(&self.log_updated_weights)
    }

    fn push_block(&mut self, right: Vec<usize>, weights: &dyn PairWeights) {
        let start = self.log_mixture_weights.len();
        self.log_mixture_weights.resize(start + self.n, 0.0);
        weights.log_mixture_block(&right, &mut self.log_mixture_weights[start..]);
        for (n1, &n2) in right.iter().enumerate() {
            let lp = weights.log_pair(n1, n2);
            self.log_pair_weights.push(lp);
            self.log_updated_weights.push(lp + self.log_mixture_weights[start + n1]);
        }
        self.blocks.push(right);
    }
}

/// Batch holding only the identity matching `(n, n)`.
pub fn build_identity_block(weights: &dyn PairWeights) -> MixtureBatch {
    let n = weights.len();
    let mut batch = MixtureBatch {
        n,
        blocks: Vec::new(),
        log_pair_weights: Vec::with_capacity(n),
        log_mixture_weights: Vec::with_capacity(n),
        log_updated_weights: Vec::with_capacity(n),
    };
    batch.push_block((0..n).collect(), weights);
    batch
}

/// Appends the block `(n, pi(n))` for a uniform random permutation `pi`.
pub fn add_permutation_block(batch: &mut MixtureBatch, rng: &mut StreamRng, weights: &dyn PairWeights) {
    let mut perm: Vec<usize> = (0..batch.n).collect();
    perm.shuffle(rng);
    batch.push_block(perm, weights);
}

/// Identity block plus `theta - 1` permutation blocks.
pub fn lightweight_batch(weights: &dyn PairWeights, theta: usize, rng: &mut StreamRng) -> MixtureBatch {
    let mut batch = build_identity_block(weights);
    for _ in 1..theta.max(1) {
        add_permutation_block(&mut batch, rng, weights);
    }
    batch
}

/// Adds permutation blocks until the ESS of the updated weights reaches
/// `ess_target` or the batch holds `cap` blocks.
pub fn adaptive_batch(weights: &dyn PairWeights, ess_target: f64, cap: usize, rng: &mut StreamRng) -> Result<MixtureBatch> {
    let mut batch = build_identity_block(weights);
    let mut ess = batch.ess()?;
    while ess < ess_target && batch.theta() < cap {
        add_permutation_block(&mut batch, rng, weights);
        ess = batch.ess()?;
    }
    Ok(batch)
}

/// Draws `count` candidate pairs from the batch's updated weights.
pub fn resample_batch(batch: &MixtureBatch, count: usize, rng: &mut StreamRng) -> Result<Vec<(usize, usize)>> {
    let idx = resample_log_weights(&batch.log_updated_weights, count, rng)?;
    Ok(idx.into_iter().map(|i| batch.pair(i)).collect())
}

/// How child clouds are merged at internal nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MergeStrategy {
    /// All `N^2` pairs; `N` above `cap` is rejected.
    Full { cap: usize },
    /// Identity plus `theta - 1` permutations.
    Lightweight { theta: usize },
    /// Permutations added until the ESS reaches `ess_target` (default `N`)
    /// or `theta_cap` blocks (default `ceil(sqrt(N))`) are used.
    Adaptive { ess_target: Option<f64>, theta_cap: Option<usize> },
    /// Identity pairs selected by pair weights only; the mixture weight is
    /// carried as the output importance weight.
    Linear,
}

impl Default for MergeStrategy {
    fn default() -> Self {
        MergeStrategy::Adaptive { ess_target: None, theta_cap: None }
    }
}

impl MergeStrategy {
    pub fn full() -> Self {
        MergeStrategy::Full { cap: DEFAULT_FULL_CAP }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeStrategy::Full { .. } => "dac-full",
            MergeStrategy::Lightweight { .. } => "dac-lightweight",
            MergeStrategy::Adaptive { .. } => "dac-adaptive",
            MergeStrategy::Linear => "dac-linear",
        }
    }
}

/// Pairs chosen by a merge and the output weights attached to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub pairs: Vec<(usize, usize)>,
    pub log_weights: Vec<f64>,
    pub theta: usize,
    /// ESS of the candidate weights the selection was drawn from.
    pub ess: f64,
}

/// Runs `strategy` on `weights`. Permutations come from `perm_rng` and the
/// resampling draw from `resample_rng`.
pub fn select_pairs(
    strategy: &MergeStrategy,
    weights: &dyn PairWeights,
    perm_rng: &mut StreamRng,
    resample_rng: &mut StreamRng,
) -> Result<Selection> {
    let n = weights.len();
    match *strategy {
        MergeStrategy::Full { cap } => {
            if n > cap {
                return Err(Error::CapExceeded { n, cap });
            }
            let mut lw = vec![0.0; n * n];
            weights.log_mixture_all(&mut lw);
            for n1 in 0..n {
                for n2 in 0..n {
                    lw[n1 * n + n2] += weights.log_pair(n1, n2);
                }
            }
            let ess = effective_sample_size(&lw)?;
            let idx = resample_log_weights(&lw, n, resample_rng)?;
            Ok(Selection {
                pairs: idx.into_iter().map(|i| (i / n, i % n)).collect(),
                log_weights: vec![0.0; n],
                theta: n,
                ess,
            })
        }
        MergeStrategy::Lightweight { theta } => {
            let batch = lightweight_batch(weights, theta.clamp(1, n), perm_rng);
            finish(&batch, n, resample_rng)
        }
        MergeStrategy::Adaptive { ess_target, theta_cap: cap } => {
            let target = ess_target.unwrap_or(n as f64);
            let cap = cap.unwrap_or_else(|| theta_cap(n));
            let batch = adaptive_batch(weights, target, cap, perm_rng)?;
            finish(&batch, n, resample_rng)
        }
        MergeStrategy::Linear => {
            let lp: Vec<f64> = (0..n).map(|i| weights.log_pair(i, i)).collect();
            let ess = effective_sample_size(&lp)?;
            let idx = resample_log_weights(&lp, n, resample_rng)?;
            let log_weights = idx.iter().map(|&i| weights.log_mixture(i, i)).collect();
            Ok(Selection { pairs: idx.into_iter().map(|i| (i, i)).collect(), log_weights, theta: 1, ess })
        }
    }
}

fn finish(batch: &MixtureBatch, n: usize, rng: &mut StreamRng) -> Result<Selection> {
    Ok(Selection {
        pairs: resample_batch(batch, n, rng)?,
        log_weights: vec![0.0; n],
        theta: batch.theta(),
        ess: batch.ess()?,
    })
}

/// Result of merging two clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutcome {
    pub cloud: NodeCloud,
    pub selection: Selection,
}

fn merge_with(
    node: NodeId,
    left: &NodeCloud,
    right: &NodeCloud,
    weights: &dyn PairWeights,
    strategy: MergeStrategy,
    rng: &mut StreamRng,
) -> Result<MergeOutcome> {
    assert_eq!(left.len(), right.len(), "child clouds must have equal size");
    let mut perm_rng = StreamRng::from_rng(rng);
    let selection = select_pairs(&strategy, weights, &mut perm_rng, rng)?;
    let mut cloud = NodeCloud::concat(node, left, right, &selection.pairs);
    cloud.log_weights.clone_from(&selection.log_weights);
    Ok(MergeOutcome { cloud, selection })
}

/// Mixture resampling over all `N^2` pairs.
pub fn merge_full(
    node: NodeId,
    left: &NodeCloud,
    right: &NodeCloud,
    weights: &dyn PairWeights,
    cap: usize,
    rng: &mut StreamRng,
) -> Result<MergeOutcome> {
    merge_with(node, left, right, weights, MergeStrategy::Full { cap }, rng)
}

/// Lightweight mixture resampling with a fixed number of blocks.
pub fn merge_lightweight(
    node: NodeId,
    left: &NodeCloud,
    right: &NodeCloud,
    weights: &dyn PairWeights,
    theta: usize,
    rng: &mut StreamRng,
) -> Result<MergeOutcome> {
    merge_with(node, left, right, weights, MergeStrategy::Lightweight { theta }, rng)
}

/// Adaptive lightweight mixture resampling; `theta` in the outcome is the
/// number of blocks used.
pub fn merge_adaptive(
    node: NodeId,
    left: &NodeCloud,
    right: &NodeCloud,
    weights: &dyn PairWeights,
    ess_target: f64,
    rng: &mut StreamRng,
) -> Result<MergeOutcome> {
    let strategy = MergeStrategy::Adaptive { ess_target: Some(ess_target), theta_cap: None };
    merge_with(node, left, right, weights, strategy, rng)
}

/// Linear-cost merge without mixture weights at selection time.
pub fn merge_linear(
    node: NodeId,
    left: &NodeCloud,
    right: &NodeCloud,
    weights: &dyn PairWeights,
    rng: &mut StreamRng,
) -> Result<MergeOutcome> {
    merge_with(node, left, right, weights, MergeStrategy::Linear, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn rng(tag: u64) -> StreamRng {
        RngStream::new(99).split(tag).rng()
    }

    fn cloud(node: NodeId, comp: usize, values: &[f64], lw: &[f64]) -> NodeCloud {
        NodeCloud::new(node, 1, vec![comp], values.to_vec(), lw.to_vec())
    }

    #[test]
    fn point_mass() {
        let idx = stratified_resample(&[1.0, 0.0, 0.0, 0.0], 4, &mut rng(1)).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 0]);
    }

    #[test]
    fn uniform_weights_select_each_once() {
        let n = 37;
        let idx = stratified_resample(&vec![1.0 / n as f64; n], n, &mut rng(2)).unwrap();
        assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn two_atoms_concentrate() {
        let m = 100_000;
        let idx = stratified_resample(&[0.5, 0.5], m, &mut rng(3)).unwrap();
        let zeros = idx.iter().filter(|&&i| i == 0).count() as f64;
        assert!((zeros - 50_000.0).abs() <= 3.0 * (m as f64 * 0.25).sqrt());
    }

    #[test]
    fn invalid_probabilities() {
        assert!(matches!(stratified_resample(&[0.5, 0.6], 2, &mut rng(4)), Err(Error::InvalidProbabilities(_))));
        assert!(matches!(stratified_resample(&[1.5, -0.5], 2, &mut rng(4)), Err(Error::InvalidProbabilities(_))));
    }

    #[test]
    fn trailing_zero_probability_never_selected() {
        let p = [0.3, 0.7, 0.0];
        for s in 0..50 {
            let idx = stratified_resample(&p, 10, &mut rng(100 + s)).unwrap();
            assert!(idx.iter().all(|&i| i < 2));
        }
    }

    #[test]
    fn theta_cap_values() {
        assert_eq!(theta_cap(1), 1);
        assert_eq!(theta_cap(100), 10);
        assert_eq!(theta_cap(101), 11);
        assert_eq!(theta_cap(1000), 32);
        assert_eq!(theta_cap(5000), 71);
    }

    #[test]
    fn identity_block() {
        let lw = [0.1, 0.2, 0.3];
        let rw = [0.0, -1.0, 0.5];
        let w = FnPairWeights { left: &lw, right: &rw, mixture: |_, _| 0.0 };
        let b = build_identity_block(&w);
        assert_eq!(b.pairs(), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(b.log_updated_weights, b.log_pair_weights);
        assert_eq!(b.theta(), 1);

        let eq = [0.0; 3];
        let w = FnPairWeights { left: &eq, right: &eq, mixture: |_, _| 1.5 };
        let b = build_identity_block(&w);
        assert!(b.log_updated_weights.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn permutation_block() {
        let eq = [0.0; 2];
        let w = FnPairWeights { left: &eq, right: &eq, mixture: |a, b| (a * 10 + b) as f64 };
        let mut b = build_identity_block(&w);
        add_permutation_block(&mut b, &mut rng(5), &w);
        assert_eq!(b.theta(), 2);
        assert_eq!(b.len(), 4);
        for i in 0..4 {
            let (n1, n2) = b.pair(i);
            assert_eq!(b.log_mixture_weights[i], (n1 * 10 + n2) as f64);
            assert_eq!(b.log_updated_weights[i], b.log_pair_weights[i] + b.log_mixture_weights[i]);
        }
        let mut again = build_identity_block(&w);
        add_permutation_block(&mut again, &mut rng(5), &w);
        assert_eq!(again, b);
    }

    #[test]
    fn adaptive_theta_examples() {
        let eq = [0.0; 50];
        let flat = FnPairWeights { left: &eq, right: &eq, mixture: |_, _| 0.0 };
        let b = adaptive_batch(&flat, 50.0, theta_cap(50), &mut rng(6)).unwrap();
        assert_eq!(b.theta(), 1);
        let b = adaptive_batch(&flat, 1e9, theta_cap(50), &mut rng(6)).unwrap();
        assert_eq!(b.theta(), theta_cap(50));
    }

    #[test]
    fn full_merge_cap() {
        let eq = [0.0; 5];
        let w = FnPairWeights { left: &eq, right: &eq, mixture: |_, _| 0.0 };
        let c = cloud(1, 0, &eq, &eq);
        let err = merge_full(0, &c, &c, &w, 4, &mut rng(7)).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { n: 5, cap: 4 }));
    }

    #[test]
    fn single_particle_merge_concatenates() {
        let l = cloud(1, 0, &[1.0], &[0.3]);
        let r = cloud(2, 1, &[2.0], &[-0.2]);
        let w = FnPairWeights { left: &l.log_weights, right: &r.log_weights, mixture: |_, _| 0.7 };
        let out = merge_full(0, &l, &r, &w, DEFAULT_FULL_CAP, &mut rng(8)).unwrap();
        assert_eq!(out.cloud.particles, vec![1.0, 2.0]);
        assert_eq!(out.cloud.component_ids, vec![0, 1]);
        assert_eq!(out.cloud.log_weights, vec![0.0]);
    }

    #[test]
    fn linear_carries_mixture_weights() {
        let vals: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let eq = [0.0; 6];
        let l = cloud(1, 0, &vals, &eq);
        let r = cloud(2, 1, &vals, &eq);
        let w = FnPairWeights { left: &eq, right: &eq, mixture: |a, _| a as f64 * 0.1 };
        let out = merge_linear(0, &l, &r, &w, &mut rng(9)).unwrap();
        for (i, &(a, b)) in out.selection.pairs.iter().enumerate() {
            assert_eq!(a, b);
            assert_eq!(out.cloud.log_weights[i], a as f64 * 0.1);
        }
        // heavy-tailed mixture weights leave the output unequally weighted
        assert!(!out.cloud.is_equally_weighted());
    }

    #[test]
    fn lightweight_theta_one_is_identity_only() {
        let eq = [0.0; 4];
        let vals = [0.0, 1.0, 2.0, 3.0];
        let l = cloud(1, 0, &vals, &eq);
        let r = cloud(2, 1, &vals, &eq);
        let w = FnPairWeights { left: &eq, right: &eq, mixture: |_, _| 0.0 };
        let out = merge_lightweight(0, &l, &r, &w, 1, &mut rng(10)).unwrap();
        assert!(out.selection.pairs.iter().all(|&(a, b)| a == b));
        assert!(out.cloud.is_equally_weighted());
        assert_eq!(out.selection.theta, 1);
    }

    proptest! {
        #[test]
        fn merged_components_concatenate(n in 1usize..20, seed in 0u64..1000, kind in 0usize..4) {
            let lw: Vec<f64> = (0..n).map(|i| ((i * 7 + seed as usize) % 5) as f64 * 0.3).collect();
            let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let l = NodeCloud::new(1, 0, vec![0, 1], vals.iter().flat_map(|&v| [v, v]).collect(), lw.clone());
            let r = NodeCloud::new(2, 0, vec![2], vals.clone(), lw.clone());
            let w = FnPairWeights { left: &lw, right: &lw, mixture: |a, b| ((a + 2 * b) % 3) as f64 * 0.5 };
            let strategy = [
                MergeStrategy::full(),
                MergeStrategy::Lightweight { theta: theta_cap(n) },
                MergeStrategy::default(),
                MergeStrategy::Linear,
            ][kind];
            let mut stream = RngStream::new(seed).rng();
            let out = merge_with(0, &l, &r, &w, strategy, &mut stream).unwrap();
            prop_assert_eq!(&out.cloud.component_ids, &vec![0, 1, 2]);
            prop_assert_eq!(out.cloud.len(), n);
            prop_assert!(out.selection.theta >= 1);
            if kind == 2 {
                prop_assert!(out.selection.theta <= theta_cap(n));
            }
        }

        #[test]
        fn batches_start_with_identity(n in 1usize..30, theta in 1usize..6, seed in 0u64..100) {
            let eq = vec![0.0; n];
            let w = FnPairWeights { left: &eq, right: &eq, mixture: |_, _| 0.0 };
            let b = lightweight_batch(&w, theta, &mut RngStream::new(seed).rng());
            prop_assert_eq!(&b.blocks[0], &(0..n).collect::<Vec<_>>());
            for block in &b.blocks {
                let mut sorted = block.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
            prop_assert_eq!(b.len(), theta * n);
        }

        #[test]
        fn stratified_output_is_sorted_and_positive(ws in prop::collection::vec(0.0f64..1.0, 1..30), m in 1usize..60, seed in 0u64..100) {
            let total: f64 = ws.iter().sum();
            prop_assume!(total > 1e-6);
            let p: Vec<f64> = ws.iter().map(|w| w / total).collect();
            let idx = stratified_resample(&p, m, &mut RngStream::new(seed).rng()).unwrap();
            prop_assert_eq!(idx.len(), m);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| p[i] > 0.0));
        }
    }
}
