use std::fs;
use std::path::Path;
use std::process::Command;

use dacpf::bench::{run_experiment, summarize, Algo, ExperimentConfig, ModelSpec};
use dacpf::LgssmParams;

fn dacpf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dacpf")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

const RUN: [&str; 13] = ["run", "--model", "lgssm", "--d", "4", "--algo", "dac-adaptive", "--n", "32", "--t", "3", "--reps", "3"];

#[test]
fn run_writes_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = dacpf(&[&RUN[..], &["--seed", "5", "--out", out.to_str().unwrap()]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = read(&out.join("results.csv"));
    assert_eq!(results.lines().next().unwrap(), "rep,t,scope,metric,value");
    // 4 components x 5 metrics + 4 averages, per rep and time
    assert_eq!(results.lines().count(), 1 + 3 * 3 * (4 * 5 + 4));
    assert!(results.contains("\n2,3,all,w1,"));
    let theta = read(&out.join("theta.csv"));
    assert_eq!(theta.lines().next().unwrap(), "rep,t,level,theta,count");
    let counted: usize = theta.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 3 * 3 * 3);
    assert_eq!(read(&out.join("timing.csv")).lines().count(), 4);
    assert!(read(&out.join("config.txt")).contains("algo = dac-adaptive"));
}

#[test]
fn same_seed_gives_identical_results_at_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for (i, threads) in ["1", "3", "1"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}"));
        let o = dacpf(&[&["--threads", threads][..], &RUN[..], &["--seed", "9", "--out", out.to_str().unwrap()]].concat());
        assert!(o.status.success());
        bodies.push((read(&out.join("results.csv")), read(&out.join("theta.csv"))));
    }
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0], bodies[2]);
    let other = dir.path().join("other");
    dacpf(&[&RUN[..], &["--seed", "10", "--out", other.to_str().unwrap()]].concat());
    assert_ne!(read(&other.join("results.csv")), bodies[0].0);
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.txt");
    fs::write(&cfg, "# experiment\nmodel = spatial\nrows = 2\ncols = 2\nalgo = bpf\nn = 200\nt = 2\nreps = 2\n").unwrap();
    let out = dir.path().join("r");
    let o = dacpf(&["run", "--config", cfg.to_str().unwrap(), "--reps", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = read(&out.join("results.csv"));
    // spatial runs report filtering means and variances only
    assert_eq!(results.lines().count(), 1 + 2 * 4 * 2);
    assert!(results.lines().skip(1).all(|l| l.starts_with("0,")));
    assert!(!out.join("theta.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let out = out.to_str().unwrap();
    assert_eq!(dacpf(&["run", "--model", "spatial", "--algo", "kalman", "--out", out]).status.code(), Some(2));
    assert_eq!(dacpf(&["run", "--reps", "0", "--out", out]).status.code(), Some(2));
    assert_eq!(dacpf(&["run", "--algo", "magic", "--out", out]).status.code(), Some(2));
    assert_eq!(dacpf(&["run", "--n", "4"]).status.code(), Some(2));
    assert_eq!(dacpf(&["preset", "nope", "--out", out]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(dacpf(&["summarize", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));
    let ok = dacpf(&["run", "--d", "2", "--algo", "kalman", "--t", "2", "--out", out]);
    assert_eq!(ok.status.code(), Some(0));
}

fn summary_rows(path: &Path) -> Vec<Vec<String>> {
    read(path).lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn summarize_single_row_and_known_quartiles() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("results.csv");
    fs::write(
        &input,
        "rep,t,scope,metric,value\n0,1,all,w1,0.5\n0,2,0,mean,1\n1,2,0,mean,2\n2,2,0,mean,4\n3,2,0,mean,7\n0,2,1,ks,NaN\n",
    )
    .unwrap();
    let out = dir.path().join("summary.csv");
    summarize(&input, &out).unwrap();
    assert_eq!(read(&out).lines().next().unwrap(), "algo,model,dim,n,t,scope,metric,count,mean,q1,median,q3");
    let rows = summary_rows(&out);
    assert_eq!(rows.len(), 2, "group without finite values is omitted");
    assert_eq!(rows[0][4..], ["1", "all", "w1", "1", "0.5", "0.5", "0.5", "0.5"]);
    // type-7 quartiles of {1, 2, 4, 7}
    assert_eq!(rows[1][4..], ["2", "0", "mean", "4", "3.5", "1.75", "3", "4.75"]);
    assert_eq!(rows[0][..4], ["unknown", "unknown", "unknown", "unknown"]);
}

#[test]
fn summarize_rejects_bad_schema() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("results.csv");
    fs::write(&input, "rep,t,scope,value\n0,1,all,1\n").unwrap();
    assert!(matches!(summarize(&input, &dir.path().join("s.csv")), Err(dacpf::Error::SchemaMismatch(_))));
    fs::write(&input, "rep,t,scope,metric,value\n0,1,all,w1,abc\n").unwrap();
    assert!(matches!(summarize(&input, &dir.path().join("s.csv")), Err(dacpf::Error::SchemaMismatch(_))));
}

#[test]
fn summarize_directory_labels_runs_and_adds_runtime() {
    let dir = tempfile::tempdir().unwrap();
    for algo in [Algo::DacLightweight, Algo::Bpf] {
        let c = ExperimentConfig {
            model: ModelSpec::Lgssm(LgssmParams::standard(4)),
            algo,
            n: 40,
            t_max: 2,
            reps: 3,
            out: dir.path().join(algo.name()),
            ..ExperimentConfig::default()
        };
        let reps = run_experiment(&c).unwrap();
        assert_eq!(reps.len(), 3);
    }
    let out = dir.path().join("summary.csv");
    summarize(dir.path(), &out).unwrap();
    let rows = summary_rows(&out);
    for algo in ["bpf", "dac-lightweight"] {
        let w1 = rows.iter().find(|r| r[0] == algo && r[4] == "2" && r[5] == "all" && r[6] == "w1").unwrap();
        assert_eq!(w1[1..4], ["lgssm", "4", "40"]);
        assert_eq!(w1[7], "3");
        let rt = rows.iter().find(|r| r[0] == algo && r[6] == "wall_time_s").unwrap();
        assert_eq!(rt[4..6], ["all", "all"]);
    }
}

#[test]
fn smoke_preset_writes_every_run_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = dacpf(&["preset", "smoke", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (label, _) in dacpf::bench::preset("smoke", dir.path(), false).unwrap() {
        assert!(dir.path().join(&label).join("results.csv").is_file(), "{label}");
    }
    assert!(summary_rows(&dir.path().join("summary.csv")).len() > 100);
}
