use rand::Rng;
use rand_distr::StandardNormal;

use dacpf::filter::{dac_step, leaf_step, run_filter, unnormalized_root_weight_audit, StepDiagnostics};
use dacpf::model::{AuxiliaryFamily, Past, PastSupport, StateSpaceModel};
use dacpf::models::lgssm::{LgssmAuxVariant, LgssmModel};
use dacpf::oracles::kalman_filter;
use dacpf::resampling::{resample_log_weights, theta_cap, MergeStrategy};
use dacpf::rng::phase;
use dacpf::{build_lgssm, build_spatial, DacConfig, FilterState, LgssmParams, MergePath, RngStream, SpatialParams, StreamRng};

fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn simulate(model: &dyn AuxiliaryFamily, t: usize, seed: u64) -> Vec<Vec<f64>> {
    dacpf::model::simulate(model, t, &mut RngStream::new(seed).rng()).1
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

#[test]
fn audit_covers_initial_duplicates_and_both_paths() {
    let mut models: Vec<Box<dyn AuxiliaryFamily>> = Vec::new();
    for d in [1, 3, 5, 16, 33] {
        models.push(Box::new(build_lgssm(LgssmParams::standard(d)).unwrap()));
    }
    models.push(Box::new(LgssmModel::new(LgssmParams::new(6, 0.7, 1.9, 0.4).unwrap(), LgssmAuxVariant::Decoupled).unwrap()));
    models.push(Box::new(LgssmModel::new(LgssmParams::standard(4), LgssmAuxVariant::MarginalCovariance).unwrap()));
    models.push(Box::new(build_spatial(SpatialParams::standard(2, 3)).unwrap()));
    models.push(Box::new(build_spatial(SpatialParams { r_y: 2, ..SpatialParams::standard(3, 3) }).unwrap()));
    let mut rng = RngStream::new(7).rng();
    for m in &models {
        let d = m.dim();
        for n in [0, 1, 3, 8] {
            let past = match n {
                0 => Past::Initial,
                _ => {
                    let mut pts = normal_vec(&mut rng, n * d);
                    // a repeated particle exercises the multiplicities
                    pts.extend_from_slice(&pts[..d].to_vec());
                    Past::Particles(PastSupport::from_points(d, &pts))
                }
            };
            for path in [MergePath::Auto, MergePath::Generic] {
                let x = normal_vec(&mut rng, d);
                let y = normal_vec(&mut rng, d);
                let e = unnormalized_root_weight_audit(m.as_ref(), &past, &y, &x, path).unwrap();
                assert!(e.abs() < 1e-6, "d={d} n={n} {path:?}: {e}");
            }
        }
    }
}

#[test]
fn one_dimensional_step_is_a_marginal_pf_step() {
    let model = build_lgssm(LgssmParams::standard(1)).unwrap();
    let ys = simulate(&model, 3, 1);
    let config = DacConfig::new(50, MergeStrategy::default());
    let stream = RngStream::new(3);
    let mut state = FilterState::initial();
    for (i, y) in ys.iter().enumerate() {
        let s = stream.split(i as u64 + 1);
        let (next, diag) = dac_step(&state, y, &model, &config, &s).unwrap();
        assert!(diag.nodes.is_empty());
        let mut rng = s.split(0).split(phase::LEAF).rng();
        let leaf = leaf_step(&model, 0, &state.past, i + 1, y, 50, &mut rng).unwrap();
        let mut rng = s.split(0).split(phase::RESAMPLE).split(1).rng();
        let idx = resample_log_weights(&leaf.log_weights, 50, &mut rng).unwrap();
        assert_eq!(next.root_cloud.particles, leaf.select(&idx).particles);
        for (k, &w) in leaf.log_weights.iter().enumerate() {
            assert!((w - model.log_likelihood(leaf.particle(k), y)).abs() < 1e-9);
        }
        state = next;
    }
}

#[test]
fn full_merge_tracks_kalman_on_two_components() {
    let p = LgssmParams::standard(2);
    let model = build_lgssm(p).unwrap();
    let ys = simulate(&model, 5, 11);
    let truth = kalman_filter(&p, &ys).unwrap();
    let config = DacConfig::new(400, MergeStrategy::full());
    let reps = 30;
    let mut err = vec![vec![Vec::new(); 2]; ys.len()];
    for r in 0..reps {
        run_filter(&model, &ys, &config, &RngStream::new(100).split(r), |s, _| {
            let m = s.root_cloud.mean();
            for j in 0..2 {
                err[s.time - 1][j].push(m[j] - truth[s.time - 1].mean[j]);
            }
        })
        .unwrap();
    }
    for (t, per) in err.iter().enumerate() {
        for (j, e) in per.iter().enumerate() {
            let z = mean(e).abs() / (var(e) / e.len() as f64).sqrt();
            assert!(z < 4.0, "t={} j={j}: z={z}", t + 1);
        }
    }
}

fn thetas(diags: &[StepDiagnostics]) -> Vec<usize> {
    diags.iter().flat_map(|d| d.nodes.iter().map(|n| n.theta)).collect()
}

fn run_diags(model: &dyn AuxiliaryFamily, config: &DacConfig, t: usize, seed: u64) -> Vec<StepDiagnostics> {
    let ys = simulate(model, t, seed);
    let mut out = Vec::new();
    run_filter(model, &ys, config, &RngStream::new(seed), |_, d| out.push(d.clone())).unwrap();
    out
}

#[test]
fn theta_stays_within_bounds() {
    let model = build_lgssm(LgssmParams::standard(8)).unwrap();
    for n in [2, 5, 17, 64, 150] {
        let cap = theta_cap(n);
        let adaptive = thetas(&run_diags(&model, &DacConfig::new(n, MergeStrategy::default()), 3, n as u64));
        assert_eq!(adaptive.len(), 3 * 7);
        assert!(adaptive.iter().all(|&t| (1..=cap).contains(&t)), "n={n}: {adaptive:?}");

        let lw = DacConfig::new(n, MergeStrategy::Lightweight { theta: cap.min(3) });
        assert!(thetas(&run_diags(&model, &lw, 2, 1)).iter().all(|&t| t == cap.min(3)));
        let linear = DacConfig::new(n, MergeStrategy::Linear);
        assert!(thetas(&run_diags(&model, &linear, 2, 1)).iter().all(|&t| t == 1));
    }
    let full = DacConfig::new(20, MergeStrategy::full());
    assert!(thetas(&run_diags(&model, &full, 2, 1)).iter().all(|&t| t == 20));
}

fn tempering_config(n: usize) -> DacConfig {
    let mut c = DacConfig::new(n, MergeStrategy::Adaptive { ess_target: Some((theta_cap(n) * n) as f64), theta_cap: None });
    c.tempering = Some(Default::default());
    c
}

#[test]
fn tempering_sequences_increase_to_one() {
    let model = build_lgssm(LgssmParams::standard(4)).unwrap();
    let diags = run_diags(&model, &tempering_config(200), 4, 5);
    // at t = 1 the mixture weights vanish, so there is nothing to bridge
    let first: Vec<_> = diags[0].nodes.iter().filter_map(|nd| nd.tempering.as_ref()).collect();
    assert!(!first.is_empty());
    for t in first {
        assert_eq!(t.alphas, vec![1.0]);
    }
    let mut rates = Vec::new();
    for nd in diags[1..].iter().flat_map(|d| &d.nodes) {
        let t = nd.tempering.as_ref().expect("unreachable target forces tempering");
        assert_eq!(*t.alphas.last().unwrap(), 1.0);
        assert!(t.alphas.windows(2).all(|w| w[0] < w[1]), "{:?}", t.alphas);
        if t.alphas.len() > 1 {
            rates.push(t.acceptance_rate);
        }
    }
    assert!(!rates.is_empty());
    let r = mean(&rates);
    assert!(r > 0.05 && r < 0.95, "acceptance rate {r}");
}

#[test]
fn tempering_runs_on_spatial_model() {
    let model = build_spatial(SpatialParams::standard(4, 4)).unwrap();
    assert!(model.restricted_pd_failures().is_empty());
    let ys = simulate(&model, 3, 2);
    let last = run_filter(&model, &ys, &tempering_config(64), &RngStream::new(2), |s, _| {
        assert!(s.root_cloud.particles.iter().all(|v| v.is_finite()));
    })
    .unwrap();
    assert_eq!(last.root_cloud.component_ids, (0..16).collect::<Vec<_>>());
}

#[test]
fn thread_count_does_not_change_output() {
    let model = build_spatial(SpatialParams::standard(4, 4)).unwrap();
    let ys = simulate(&model, 3, 9);
    let config = DacConfig::new(40, MergeStrategy::default());
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_filter(&model, &ys, &config, &RngStream::new(4), |_, _| {}).unwrap().root_cloud)
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a, run(1));
}

fn root_means(model: &dyn AuxiliaryFamily, prev: &FilterState, y: &[f64], config: &DacConfig, seeds: std::ops::Range<u64>) -> Vec<Vec<f64>> {
    seeds.map(|s| dac_step(prev, y, model, config, &RngStream::new(s)).unwrap().0.root_cloud.mean()).collect()
}

fn two_sample_z(a: &[Vec<f64>], b: &[Vec<f64>], j: usize) -> f64 {
    let xa: Vec<f64> = a.iter().map(|m| m[j]).collect();
    let xb: Vec<f64> = b.iter().map(|m| m[j]).collect();
    (mean(&xa) - mean(&xb)).abs() / (var(&xa) / xa.len() as f64 + var(&xb) / xb.len() as f64).sqrt()
}

fn previous_state(model: &dyn AuxiliaryFamily, config: &DacConfig, y: &[f64]) -> FilterState {
    dac_step(&FilterState::initial(), y, model, config, &RngStream::new(77)).unwrap().0
}

#[test]
fn permuting_the_previous_cloud_preserves_the_output_law() {
    let model = build_lgssm(LgssmParams::standard(4)).unwrap();
    let ys = simulate(&model, 2, 21);
    let config = DacConfig::new(40, MergeStrategy::default());
    let prev = previous_state(&model, &config, &ys[0]);
    let perm: Vec<usize> = (0..40).rev().collect();
    let cloud = prev.root_cloud.select(&perm);
    let permuted = FilterState { time: 1, past: Past::Particles(PastSupport::from_cloud(&cloud)), root_cloud: cloud };
    let a = root_means(&model, &prev, &ys[1], &config, 0..300);
    let b = root_means(&model, &permuted, &ys[1], &config, 1000..1300);
    for j in 0..4 {
        let z = two_sample_z(&a, &b, j);
        assert!(z < 4.0, "component {j}: z={z}");
    }
}

#[test]
fn full_and_lightweight_agree_in_distribution() {
    let model = build_lgssm(LgssmParams::standard(2)).unwrap();
    let ys = simulate(&model, 2, 31);
    let full = DacConfig::new(40, MergeStrategy::full());
    let lw = DacConfig::new(40, MergeStrategy::Lightweight { theta: theta_cap(40) });
    let prev = previous_state(&model, &full, &ys[0]);
    let f = |m: &Vec<f64>| vec![m[0] + m[1]];
    let a: Vec<Vec<f64>> = root_means(&model, &prev, &ys[1], &full, 0..200).iter().map(f).collect();
    let b: Vec<Vec<f64>> = root_means(&model, &prev, &ys[1], &lw, 1000..1200).iter().map(f).collect();
    // two-sided test at the 1e-3 level
    let z = two_sample_z(&a, &b, 0);
    assert!(z < 3.29, "z={z}");
}

#[test]
fn generic_and_cached_paths_agree() {
    let model = build_lgssm(LgssmParams::standard(6)).unwrap();
    let ys = simulate(&model, 3, 41);
    let a = DacConfig::new(30, MergeStrategy::default());
    let b = DacConfig { merge_path: MergePath::Generic, ..a.clone() };
    let ra = run_filter(&model, &ys, &a, &RngStream::new(5), |_, _| {}).unwrap();
    let rb = run_filter(&model, &ys, &b, &RngStream::new(5), |_, _| {}).unwrap();
    for (x, y) in ra.root_cloud.particles.iter().zip(&rb.root_cloud.particles) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let model = build_lgssm(LgssmParams::standard(2)).unwrap();
    let y = [0.0, 0.0];
    let s = RngStream::new(0);
    assert!(dac_step(&FilterState::initial(), &y, &model, &DacConfig::new(1, MergeStrategy::default()), &s).is_err());
    let capped = DacConfig::new(30, MergeStrategy::Full { cap: 20 });
    assert!(matches!(dac_step(&FilterState::initial(), &y, &model, &capped, &s), Err(dacpf::Error::CapExceeded { .. })));
}
