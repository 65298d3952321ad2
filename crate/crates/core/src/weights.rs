//! Log-space weight arithmetic shared by every resampling and merge step.

use crate::error::{Error, Result};

/// `log(sum(exp(xs)))`, stabilised by the running maximum. Returns `-inf` for
/// an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn check(log_weights: &[f64]) -> Result<()> {
    if let Some(i) = log_weights.iter().position(|w| w.is_nan()) {
        return Err(Error::NanWeight(i));
    }
    if log_weights.iter().all(|&w| w == f64::NEG_INFINITY) {
        return Err(Error::AllWeightsDegenerate);
    }
    Ok(())
}

/// Normalises log-weights into probabilities.
///
/// Returns the probabilities together with `log(sum(exp(log_weights)))`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    check(log_weights)?;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return Err(Error::InvalidProbabilities("log-weight is +inf".into()));
    }
    let mut probs: Vec<f64> = log_weights.iter().map(|&w| (w - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok((probs, max + sum.ln()))
}

/// Effective sample size `(sum w)^2 / sum w^2` evaluated in log space.
pub fn effective_sample_size(log_weights: &[f64]) -> Result<f64> {
    check(log_weights)?;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for &w in log_weights {
        let e = (w - max).exp();
        s1 += e;
        s2 += e * e;
    }
    let n = log_weights.len() as f64;
    Ok((s1 * s1 / s2).clamp(1.0, n))
}

/// Sample mean/variance helper over equally weighted values.
#[cfg(test)]
pub(crate) fn mean_and_variance(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
