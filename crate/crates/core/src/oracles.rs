//! Reference filters: the exact Kalman filter for the linear-Gaussian model
//! and a bootstrap particle filter for any model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::metrics::MarginalTruth;
use crate::model::{NodeCloud, StateSpaceModel};
use crate::models::lgssm::LgssmParams;
use crate::resampling::resample_log_weights;
use crate::rng::{RngStream, StreamRng};

/// Largest state dimension the dense Kalman filter accepts.
pub const KALMAN_MAX_DIM: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanState {
    pub fn marginals(&self) -> Vec<MarginalTruth> {
        (0..self.mean.len()).map(|i| MarginalTruth { mean: self.mean[i], var: self.cov[(i, i)] }).collect()
    }
}

/// Dense Kalman filter for `X_t = F X_{t-1} + U`, `Y_t = X_t + V` with
/// `X_1 ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct KalmanFilter {
    f: DMatrix<f64>,
    q: DMatrix<f64>,
    r: f64,
}

impl KalmanFilter {
    pub fn new(params: &LgssmParams) -> Result<Self> {
        if params.d > KALMAN_MAX_DIM {
            return Err(Error::InvalidParams(format!("Kalman oracle supports d <= {KALMAN_MAX_DIM}")));
        }
        if params.d > 256 {
            log::warn!("dense Kalman filter at d={} costs O(d^3) per step", params.d);
        }
        Ok(KalmanFilter { f: params.dense_transition(), q: params.dense_covariance(), r: params.sigma_y2 })
    }

    /// One predict/update cycle; `prev == None` uses the `N(0, I)` prior.
    pub fn step(&self, prev: Option<&KalmanState>, y: &[f64]) -> Result<KalmanState> {
        let d = y.len();
        let (m, p) = match prev {
            None => (DVector::zeros(d), DMatrix::identity(d, d)),
            Some(s) => (&self.f * &s.mean, &self.f * &s.cov * self.f.transpose() + &self.q),
        };
        let mut s = p.clone();
        for i in 0..d {
            s[(i, i)] += self.r;
        }
        let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
        // K = P S^-1, computed as (S^-1 P)^T since both are symmetric
        let k = chol.solve(&p).transpose();
        let y = DVector::from_column_slice(y);
        let mean = &m + &k * (y - &m);
        let i_k = DMatrix::identity(d, d) - &k;
        let mut cov = &i_k * &p * i_k.transpose() + (&k * k.transpose()) * self.r;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(KalmanState { mean, cov })
    }
}

pub fn kalman_step(state: Option<&KalmanState>, y: &[f64], params: &LgssmParams) -> Result<KalmanState> {
    KalmanFilter::new(params)?.step(state, y)
}

/// Filtering distributions for every time step.
pub fn kalman_filter(params: &LgssmParams, ys: &[Vec<f64>]) -> Result<Vec<KalmanState>> {
    let kf = KalmanFilter::new(params)?;
    let mut out: Vec<KalmanState> = Vec::with_capacity(ys.len());
    for y in ys {
        let next = kf.step(out.last(), y)?;
        out.push(next);
    }
    Ok(out)
}

/// Propagate through the transition, weight by the likelihood, then
/// stratified-resample `n` particles. `cloud == None` samples the initial
/// distribution.
pub fn bootstrap_pf_step<M: StateSpaceModel + ?Sized>(
    cloud: Option<&NodeCloud>,
    y: &[f64],
    model: &M,
    n: usize,
    time: usize,
    rng: &mut StreamRng,
) -> Result<NodeCloud> {
    let d = model.dim();
    let mut particles = vec![0.0; n * d];
    for (k, out) in particles.chunks_exact_mut(d).enumerate() {
        match cloud {
            None => model.sample_initial(rng, out),
            Some(c) => model.sample_transition(c.particle(k % c.len()), rng, out),
        }
    }
    let log_w: Vec<f64> = particles.chunks_exact(d).map(|x| model.log_likelihood(x, y)).collect();
    let idx = resample_log_weights(&log_w, n, rng)?;
    let weighted = NodeCloud::new(0, time, (0..d).collect(), particles, log_w);
    Ok(weighted.select(&idx))
}

/// Runs the bootstrap filter over `ys`; step `t` draws from `stream.split(t)`.
pub fn run_bootstrap_pf<M: StateSpaceModel + ?Sized>(
    model: &M,
    ys: &[Vec<f64>],
    n: usize,
    stream: &RngStream,
    mut on_step: impl FnMut(usize, &NodeCloud),
) -> Result<NodeCloud> {
    let mut cloud: Option<NodeCloud> = None;
    for (i, y) in ys.iter().enumerate() {
        let t = i + 1;
        let mut rng = stream.split(t as u64).rng();
        let next = bootstrap_pf_step(cloud.as_ref(), y, model, n, t, &mut rng)?;
        on_step(t, &next);
        cloud = Some(next);
    }
    cloud.ok_or_else(|| Error::InvalidParams("no observations".into()))
}
