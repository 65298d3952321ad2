//! Accuracy metrics against Gaussian filtering marginals.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalTruth {
    pub mean: f64,
    pub var: f64,
}

/// Metrics of one component of one run at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub rep: usize,
    pub t: usize,
    pub component: usize,
    pub w1: f64,
    pub ks: f64,
    pub mean_estimate: f64,
    pub sq_err: f64,
}

fn phi(s: f64) -> f64 {
    0.5 * erfc(-s / std::f64::consts::SQRT_2)
}

fn density(s: f64) -> f64 {
    (-0.5 * s * s).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Antiderivative of the standard normal CDF, vanishing at `-inf`.
fn psi(s: f64) -> f64 {
    if s == f64::INFINITY {
        return f64::INFINITY;
    }
    s * phi(s) + density(s)
}

/// `int_a^b |c - Phi(s)| ds` for `a <= b`, split where `Phi = c`.
fn abs_gap(a: f64, b: f64, c: f64, q: f64) -> f64 {
    let part = |a: f64, b: f64| (c * (b - a) - (psi(b) - psi(a))).abs();
    if q > a && q < b {
        part(a, q) + part(q, b)
    } else {
        part(a, b)
    }
}

fn standardized_sorted(samples: &[f64], truth: MarginalTruth) -> Vec<f64> {
    assert!(truth.var > 0.0, "marginal variance must be positive");
    let sd = truth.var.sqrt();
    let mut s: Vec<f64> = samples.iter().map(|&x| (x - truth.mean) / sd).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Wasserstein-1 distance between the empirical distribution of `samples`
/// and `N(mean, var)`, integrated exactly between atoms.
pub fn w1_empirical_vs_gaussian(samples: &[f64], truth: MarginalTruth) -> f64 {
    assert!(!samples.is_empty());
    let s = standardized_sorted(samples, truth);
    let n = s.len();
    let std_normal = Normal::standard();
    // left tail: int_{-inf}^{s_1} Phi, right tail: int_{s_N}^inf (1 - Phi)
    let mut total = psi(s[0]) + psi(-s[n - 1]);
    for k in 1..n {
        let (a, b) = (s[k - 1], s[k]);
        if b > a {
            let c = k as f64 / n as f64;
            total += abs_gap(a, b, c, std_normal.inverse_cdf(c));
        }
    }
    total * truth.var.sqrt()
}

/// Kolmogorov-Smirnov distance between the empirical CDF and `N(mean, var)`.
pub fn ks_empirical_vs_gaussian(samples: &[f64], truth: MarginalTruth) -> f64 {
    assert!(!samples.is_empty());
    let s = standardized_sorted(samples, truth);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, &x)| {
            let c = phi(x);
            (c - (k + 1) as f64 / n).abs().max((c - k as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Per-component mean over repetitions of the squared error of `estimates`
/// (`reps x d`) against `truth`.
pub fn mse_of_means(estimates: &[Vec<f64>], truth: &[f64]) -> Vec<f64> {
    assert!(!estimates.is_empty());
    let reps = estimates.len() as f64;
    (0..truth.len())
        .map(|i| estimates.iter().map(|e| (e[i] - truth[i]).powi(2)).sum::<f64>() / reps)
        .collect()
}

/// [`mse_of_means`] divided by the true marginal variances.
pub fn rmse_of_means(estimates: &[Vec<f64>], truth: &[f64], variances: &[f64]) -> Vec<f64> {
    mse_of_means(estimates, truth).iter().zip(variances).map(|(m, v)| m / v).collect()
}

/// Per-component metrics of an equally weighted sample matrix (`n x d`
/// row-major) at one time.
pub fn component_metrics(rep: usize, t: usize, particles: &[f64], d: usize, truth: &[MarginalTruth]) -> Vec<MetricRow> {
    let n = particles.len() / d;
    (0..d)
        .map(|i| {
            let col: Vec<f64> = (0..n).map(|k| particles[k * d + i]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            MetricRow {
                rep,
                t,
                component: i,
                w1: w1_empirical_vs_gaussian(&col, truth[i]),
                ks: ks_empirical_vs_gaussian(&col, truth[i]),
                mean_estimate: mean,
                sq_err: (mean - truth[i].mean).powi(2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const STD: MarginalTruth = MarginalTruth { mean: 0.0, var: 1.0 };

    fn quantiles(n: usize) -> Vec<f64> {
        let nd = Normal::standard();
        (1..=n).map(|k| nd.inverse_cdf((k as f64 - 0.5) / n as f64)).collect()
    }

    /// Composite Simpson quadrature of |F_hat - Phi| between consecutive atoms.
    fn w1_quadrature(samples: &[f64], truth: MarginalTruth) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let sd = truth.var.sqrt();
        let mut knots = vec![s[0].min(truth.mean - 12.0 * sd)];
        knots.extend_from_slice(&s);
        knots.push(s[s.len() - 1].max(truth.mean + 12.0 * sd));
        let n = s.len() as f64;
        let mut total = 0.0;
        for (k, w) in knots.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let c = k as f64 / n;
            let f = |x: f64| (c - phi((x - truth.mean) / sd)).abs();
            let m = 20_000;
            let h = (b - a) / m as f64;
            let mut acc = f(a) + f(b);
            for i in 1..m {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
            }
            total += acc * h / 3.0;
        }
        total
    }

    #[test]
    fn point_mass_at_mean() {
        let truth = MarginalTruth { mean: 1.5, var: 4.0 };
        let w = w1_empirical_vs_gaussian(&[1.5; 7], truth);
        assert_abs_diff_eq!(w, 2.0 * (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn exact_quantiles() {
        let q = quantiles(10_000);
        assert!(w1_empirical_vs_gaussian(&q, STD) < 1e-3);
        assert_abs_diff_eq!(ks_empirical_vs_gaussian(&q, STD), 0.5 / 10_000.0, epsilon = 1e-9);
    }

    #[test]
    fn shifted_quantiles() {
        let delta = 0.3;
        let q: Vec<f64> = quantiles(20_000).iter().map(|x| x + delta).collect();
        assert!((w1_empirical_vs_gaussian(&q, STD) - delta).abs() < 2e-3);
        let far: Vec<f64> = quantiles(2000).iter().map(|x| x + 3.0).collect();
        assert!(ks_empirical_vs_gaussian(&far, STD) >= phi(1.5) - phi(-1.5));
    }

    #[test]
    fn single_sample_at_median() {
        assert_abs_diff_eq!(ks_empirical_vs_gaussian(&[0.0], STD), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn matches_quadrature() {
        let samples = [-2.1, -0.4, -0.4, 0.05, 0.9, 1.7, 3.2];
        let truth = MarginalTruth { mean: 0.3, var: 1.7 };
        let exact = w1_empirical_vs_gaussian(&samples, truth);
        let quad = w1_quadrature(&samples, truth);
        assert!((exact - quad).abs() < 1e-6, "{exact} vs {quad}");
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_of_means(&[vec![1.0, 2.0]], &[1.0, 2.0]), vec![0.0, 0.0]);
        assert_abs_diff_eq!(mse_of_means(&[vec![1.5]], &[1.0])[0], 0.25, epsilon = 1e-15);
        let r = rmse_of_means(&[vec![1.5], vec![0.5]], &[1.0], &[0.5]);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn rmse_of_noisy_estimator() {
        use crate::rng::RngStream;
        use rand::Rng;
        use rand_distr::StandardNormal;
        // estimator = mu + sqrt(v) * eps has rmse v / sigma^2
        let mut r = RngStream::new(3).rng();
        let (mu, v, s2) = (0.7f64, 0.04f64, 0.5f64);
        let est: Vec<Vec<f64>> = (0..20_000).map(|_| vec![mu + v.sqrt() * r.sample::<f64, _>(StandardNormal)]).collect();
        let got = rmse_of_means(&est, &[mu], &[s2])[0];
        assert!((got / (v / s2) - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn w1_shift_triangle(xs in prop::collection::vec(-5.0f64..5.0, 1..40), shift in -2.0f64..2.0) {
            let a = w1_empirical_vs_gaussian(&xs, STD);
            let b = w1_empirical_vs_gaussian(&xs, MarginalTruth { mean: shift, var: 1.0 });
            prop_assert!(a <= b + shift.abs() + 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn ks_bounds(xs in prop::collection::vec(-8.0f64..8.0, 1..60)) {
            let ks = ks_empirical_vs_gaussian(&xs, STD);
            prop_assert!(ks >= 0.5 / xs.len() as f64 - 1e-12 && ks <= 1.0);
        }

        #[test]
        fn order_invariance(mut xs in prop::collection::vec(-4.0f64..4.0, 1..30)) {
            let truth = MarginalTruth { mean: 0.2, var: 0.8 };
            let (w, k) = (w1_empirical_vs_gaussian(&xs, truth), ks_empirical_vs_gaussian(&xs, truth));
            xs.reverse();
            prop_assert_eq!(w, w1_empirical_vs_gaussian(&xs, truth));
            prop_assert_eq!(k, ks_empirical_vs_gaussian(&xs, truth));
        }
    }
}
