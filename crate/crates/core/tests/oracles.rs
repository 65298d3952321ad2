use dacpf::oracles::{kalman_filter, run_bootstrap_pf};
use dacpf::{build_lgssm, LgssmParams, RngStream};

#[test]
fn bootstrap_error_decays_at_the_monte_carlo_rate() {
    let p = LgssmParams::standard(1);
    let model = build_lgssm(p).unwrap();
    let (_, ys) = dacpf::model::simulate(&model, 5, &mut RngStream::new(3).rng());
    let truth = kalman_filter(&p, &ys).unwrap();
    let reps = 200;
    let mut rmse = Vec::new();
    for n in [100, 1000, 10_000] {
        let mut sq = 0.0;
        for r in 0..reps {
            let cloud = run_bootstrap_pf(&model, &ys, n, &RngStream::new(n as u64).split(r), |_, _| {}).unwrap();
            sq += (cloud.mean()[0] - truth[4].mean[0]).powi(2);
        }
        rmse.push((sq / reps as f64).sqrt());
    }
    let slope = (rmse[2] / rmse[0]).ln() / 100f64.ln();
    assert!((-0.65..=-0.35).contains(&slope), "slope {slope}, rmse {rmse:?}");
}

#[test]
fn kalman_covariances_stay_positive_semidefinite() {
    for d in [3, 17, 64] {
        let p = LgssmParams::new(d, 0.6, 1.7, 0.3).unwrap();
        let model = build_lgssm(p).unwrap();
        let (_, ys) = dacpf::model::simulate(&model, 8, &mut RngStream::new(d as u64).rng());
        for s in kalman_filter(&p, &ys).unwrap() {
            let eig = s.cov.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
            assert!(s.marginals().iter().all(|m| m.var > 0.0));
        }
    }
}
