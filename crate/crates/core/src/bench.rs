//! Experiment harness: configurations, repetitions, CSV artifacts, presets
//! and summaries.
//!
//! A run directory holds `config.txt`, `results.csv`
//! (`rep,t,scope,metric,value`), `theta.csv` (`rep,t,level,theta,count`) and
//! `timing.csv` (`rep,wall_time_s`). Observations are simulated once per
//! configuration from the seed and shared by all repetitions; repetition `r`
//! runs on `RngStream::new(seed).split(r)`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{run_filter, DacConfig, TemperingConfig};
use crate::metrics::{component_metrics, MarginalTruth};
use crate::model::AuxiliaryFamily;
use crate::models::lgssm::{LgssmModel, LgssmParams};
use crate::models::spatial::{SpatialModel, SpatialParams};
use crate::oracles::{kalman_filter, run_bootstrap_pf, KalmanState, KALMAN_MAX_DIM};
use crate::resampling::{theta_cap, MergeStrategy, DEFAULT_FULL_CAP};
use crate::rng::{phase, RngStream};

pub const RESULTS_HEADER: [&str; 5] = ["rep", "t", "scope", "metric", "value"];
pub const SUMMARY_HEADER: [&str; 12] =
    ["algo", "model", "dim", "n", "t", "scope", "metric", "count", "mean", "q1", "median", "q3"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelSpec {
    Lgssm(LgssmParams),
    Spatial(SpatialParams),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Lgssm(_) => "lgssm",
            ModelSpec::Spatial(_) => "spatial",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Lgssm(p) => p.d,
            ModelSpec::Spatial(p) => p.num_vertices(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    DacAdaptive,
    DacLightweight,
    DacFull,
    DacLinear,
    Bpf,
    Kalman,
}

impl Algo {
    pub const ALL: [Algo; 6] =
        [Algo::DacAdaptive, Algo::DacLightweight, Algo::DacFull, Algo::DacLinear, Algo::Bpf, Algo::Kalman];

    pub fn name(&self) -> &'static str {
        match self {
            Algo::DacAdaptive => "dac-adaptive",
            Algo::DacLightweight => "dac-lightweight",
            Algo::DacFull => "dac-full",
            Algo::DacLinear => "dac-linear",
            Algo::Bpf => "bpf",
            Algo::Kalman => "kalman",
        }
    }

    pub fn is_dac(&self) -> bool {
        !matches!(self, Algo::Bpf | Algo::Kalman)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap-pf" => Ok(Algo::Bpf),
            _ => Algo::ALL
                .into_iter()
                .find(|a| a.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub algo: Algo,
    pub n: usize,
    pub t_max: usize,
    pub reps: usize,
    pub seed: u64,
    /// Lightweight block count; defaults to `ceil(sqrt(N))`.
    pub theta: Option<usize>,
    /// Adaptive ESS target; defaults to `N`.
    pub ess_target: Option<f64>,
    pub temper: bool,
    pub full_cap: usize,
    pub theta_diagnostics: bool,
    pub timing: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::Lgssm(LgssmParams::standard(32)),
            algo: Algo::DacAdaptive,
            n: 100,
            t_max: 10,
            reps: 1,
            seed: 0,
            theta: None,
            ess_target: None,
            temper: false,
            full_cap: DEFAULT_FULL_CAP,
            theta_diagnostics: true,
            timing: true,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Builds a configuration from defaults overridden by `pairs` in order,
    /// then validates it.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut model = "lgssm".to_string();
        let mut lg = LgssmParams::standard(32);
        let mut sp = SpatialParams::standard(2, 2);
        for (k, v) in pairs {
            let (k, v) = (k.as_ref().replace('-', "_"), v.as_ref());
            match k.as_str() {
                "model" => model = v.to_string(),
                "d" => lg.d = parse(&k, v)?,
                "tau" => lg.tau = parse(&k, v)?,
                "lambda" => lg.lambda = parse(&k, v)?,
                "sigma_y2" => lg.sigma_y2 = parse(&k, v)?,
                "rows" => sp.rows = parse(&k, v)?,
                "cols" => sp.cols = parse(&k, v)?,
                "sigma_x2" => sp.sigma_x2 = parse(&k, v)?,
                "obs_tau" => sp.tau = parse(&k, v)?,
                "r_y" => sp.r_y = parse(&k, v)?,
                "nu" => sp.nu = parse(&k, v)?,
                "algo" => c.algo = v.parse()?,
                "n" => c.n = parse(&k, v)?,
                "t" | "t_max" => c.t_max = parse(&k, v)?,
                "reps" => c.reps = parse(&k, v)?,
                "seed" => c.seed = parse(&k, v)?,
                "theta" => c.theta = Some(parse(&k, v)?),
                "ess_target" => c.ess_target = Some(parse(&k, v)?),
                "temper" => c.temper = parse_bool(&k, v)?,
                "full_cap" => c.full_cap = parse(&k, v)?,
                "theta_diagnostics" => c.theta_diagnostics = parse_bool(&k, v)?,
                "timing" => c.timing = parse_bool(&k, v)?,
                "out" => c.out = PathBuf::from(v),
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        c.model = match model.as_str() {
            "lgssm" => ModelSpec::Lgssm(lg),
            "spatial" => ModelSpec::Spatial(sp),
            other => return Err(Error::Config(format!("unknown model '{other}'"))),
        };
        c.validate()?;
        Ok(c)
    }

    /// Key/value lines accepted by [`parse_config_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("model", self.model.name().into());
        match self.model {
            ModelSpec::Lgssm(p) => {
                put("d", p.d.to_string());
                put("tau", p.tau.to_string());
                put("lambda", p.lambda.to_string());
                put("sigma_y2", p.sigma_y2.to_string());
            }
            ModelSpec::Spatial(p) => {
                put("rows", p.rows.to_string());
                put("cols", p.cols.to_string());
                put("sigma_x2", p.sigma_x2.to_string());
                put("obs_tau", p.tau.to_string());
                put("r_y", p.r_y.to_string());
                put("nu", p.nu.to_string());
            }
        }
        put("algo", self.algo.name().into());
        put("n", self.n.to_string());
        put("t", self.t_max.to_string());
        put("reps", self.reps.to_string());
        put("seed", self.seed.to_string());
        if let Some(th) = self.theta {
            put("theta", th.to_string());
        }
        if let Some(e) = self.ess_target {
            put("ess_target", e.to_string());
        }
        put("temper", self.temper.to_string());
        put("full_cap", self.full_cap.to_string());
        put("theta_diagnostics", self.theta_diagnostics.to_string());
        put("timing", self.timing.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.reps == 0 {
            return err("reps must be at least 1".into());
        }
        if self.t_max == 0 {
            return err("t must be at least 1".into());
        }
        match self.model {
            ModelSpec::Lgssm(p) => {
                LgssmParams::new(p.d, p.tau, p.lambda, p.sigma_y2)?;
                if p.d > KALMAN_MAX_DIM {
                    return err(format!("d = {} exceeds the Kalman oracle limit {KALMAN_MAX_DIM}", p.d));
                }
            }
            ModelSpec::Spatial(p) => {
                if p.rows == 0 || p.cols == 0 {
                    return err("grid must have at least one vertex".into());
                }
                if self.algo == Algo::Kalman {
                    return err("kalman requires the lgssm model".into());
                }
            }
        }
        if self.algo != Algo::Kalman && self.n < 2 {
            return err(format!("n must be at least 2, got {}", self.n));
        }
        if self.algo == Algo::DacLightweight {
            if let Some(th) = self.theta {
                if th == 0 || th > self.n {
                    return err(format!("theta must lie in 1..={}, got {th}", self.n));
                }
            }
        }
        if self.algo == Algo::DacAdaptive {
            if let Some(e) = self.ess_target {
                let max = (theta_cap(self.n) * self.n) as f64;
                if !(e > 1.0 && e <= max) {
                    return err(format!("ess_target must lie in (1, {max}], got {e}"));
                }
            }
        }
        if self.algo == Algo::DacFull && self.n > self.full_cap {
            return err(format!("dac-full with n = {} exceeds full_cap = {}", self.n, self.full_cap));
        }
        if self.temper && self.algo != Algo::DacAdaptive {
            warn!("tempering only runs with dac-adaptive; ignored for {}", self.algo);
        }
        Ok(())
    }

    /// Merge strategy of a DaC algorithm.
    pub fn merge_strategy(&self) -> Option<MergeStrategy> {
        Some(match self.algo {
            Algo::DacAdaptive => MergeStrategy::Adaptive { ess_target: self.ess_target, theta_cap: None },
            Algo::DacLightweight => MergeStrategy::Lightweight { theta: self.theta.unwrap_or(theta_cap(self.n)) },
            Algo::DacFull => MergeStrategy::Full { cap: self.full_cap },
            Algo::DacLinear => MergeStrategy::Linear,
            Algo::Bpf | Algo::Kalman => return None,
        })
    }

    pub fn dac_config(&self) -> Option<DacConfig> {
        let mut c = DacConfig::new(self.n, self.merge_strategy()?);
        if self.temper {
            c.tempering = Some(TemperingConfig::default());
        }
        Some(c)
    }
}

/// A built model with its simulated data and, for the LGSSM, the exact
/// filtering marginals.
pub enum BuiltModel {
    Lgssm(LgssmModel),
    Spatial(SpatialModel),
}

impl BuiltModel {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Lgssm(p) => BuiltModel::Lgssm(crate::models::lgssm::build_lgssm(*p)?),
            ModelSpec::Spatial(p) => BuiltModel::Spatial(crate::models::spatial::build_spatial(*p)?),
        })
    }

    pub fn aux(&self) -> &dyn AuxiliaryFamily {
        match self {
            BuiltModel::Lgssm(m) => m,
            BuiltModel::Spatial(m) => m,
        }
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: BuiltModel,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub kalman: Option<Vec<KalmanState>>,
    pub truth: Option<Vec<Vec<MarginalTruth>>>,
}

/// Which coordinates a row describes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Component(usize),
    All,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Component(i) => write!(f, "{i}"),
            Scope::All => f.write_str("all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub t: usize,
    pub scope: Scope,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaRow {
    pub t: usize,
    pub level: usize,
    pub theta: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepOutput {
    pub rep: usize,
    pub rows: Vec<ResultRow>,
    pub theta: Vec<ThetaRow>,
    pub wall_time_s: f64,
}

impl RepOutput {
    pub fn value(&self, t: usize, scope: &Scope, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.t == t && &r.scope == scope && r.metric == metric).map(|r| r.value)
    }
}

fn push_cloud_rows(rows: &mut Vec<ResultRow>, t: usize, particles: &[f64], d: usize, truth: Option<&[MarginalTruth]>) {
    let n = particles.len() / d;
    match truth {
        Some(truth) => {
            let m = component_metrics(0, t, particles, d, truth);
            let mut acc = [0.0; 4];
            for r in &m {
                let rel = r.sq_err / truth[r.component].var;
                let vals = [("mean", r.mean_estimate), ("w1", r.w1), ("ks", r.ks), ("sq_err", r.sq_err), ("rel_sq_err", rel)];
                for (metric, value) in vals {
                    rows.push(ResultRow { t, scope: Scope::Component(r.component), metric, value });
                }
                for (a, v) in acc.iter_mut().zip([r.w1, r.ks, r.sq_err, rel]) {
                    *a += v;
                }
            }
            for (metric, a) in ["w1", "ks", "mse", "rmse"].into_iter().zip(acc) {
                rows.push(ResultRow { t, scope: Scope::All, metric, value: a / d as f64 });
            }
        }
        None => {
            for i in 0..d {
                let mean = (0..n).map(|k| particles[k * d + i]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (particles[k * d + i] - mean).powi(2)).sum::<f64>() / n as f64;
                rows.push(ResultRow { t, scope: Scope::Component(i), metric: "mean", value: mean });
                rows.push(ResultRow { t, scope: Scope::Component(i), metric: "var", value: var });
            }
        }
    }
}

impl Experiment {
    /// Validates `config`, builds the model, simulates the data and runs the
    /// Kalman oracle when the model is linear-Gaussian.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = BuiltModel::build(&config.model)?;
        let mut rng = RngStream::new(config.seed).split(phase::DATA).rng();
        let (xs, ys) = crate::model::simulate(model.aux(), config.t_max, &mut rng);
        let kalman = match &config.model {
            ModelSpec::Lgssm(p) => Some(kalman_filter(p, &ys)?),
            ModelSpec::Spatial(_) => None,
        };
        let truth = kalman.as_ref().map(|ks| ks.iter().map(KalmanState::marginals).collect());
        Ok(Experiment { config, model, xs, ys, kalman, truth })
    }

    fn truth_at(&self, t: usize) -> Option<&[MarginalTruth]> {
        self.truth.as_ref().map(|tr| tr[t - 1].as_slice())
    }

    /// Runs repetition `rep` and collects its rows in memory.
    pub fn run_rep(&self, rep: usize) -> Result<RepOutput> {
        let c = &self.config;
        let d = c.model.dim();
        let stream = RngStream::new(c.seed).split(rep as u64);
        let mut rows = Vec::new();
        let mut theta = Vec::new();
        let start = Instant::now();
        match c.algo {
            Algo::Kalman => {
                for (i, s) in self.kalman.as_ref().expect("kalman requires lgssm").iter().enumerate() {
                    for (j, m) in s.marginals().iter().enumerate() {
                        rows.push(ResultRow { t: i + 1, scope: Scope::Component(j), metric: "mean", value: m.mean });
                        rows.push(ResultRow { t: i + 1, scope: Scope::Component(j), metric: "var", value: m.var });
                    }
                }
            }
            Algo::Bpf => {
                run_bootstrap_pf(self.model.aux(), &self.ys, c.n, &stream.split(phase::BOOTSTRAP), |t, cloud| {
                    push_cloud_rows(&mut rows, t, &cloud.particles, d, self.truth_at(t));
                })?;
            }
            _ => {
                let dac = c.dac_config().expect("dac algorithm");
                run_filter(self.model.aux(), &self.ys, &dac, &stream, |state, diag| {
                    let t = state.time;
                    push_cloud_rows(&mut rows, t, &state.root_cloud.particles, d, self.truth_at(t));
                    if c.theta_diagnostics {
                        let mut counts: Vec<(usize, usize, usize)> = Vec::new();
                        for nd in &diag.nodes {
                            match counts.iter_mut().find(|e| e.0 == nd.level && e.1 == nd.theta) {
                                Some(e) => e.2 += 1,
                                None => counts.push((nd.level, nd.theta, 1)),
                            }
                        }
                        counts.sort_unstable();
                        theta.extend(counts.into_iter().map(|(level, th, count)| ThetaRow { t, level, theta: th, count }));
                    }
                })?;
            }
        }
        if let BuiltModel::Spatial(m) = &self.model {
            let events = m.nonpositive_events();
            if events > 0 {
                warn!("spatial likelihood saw {events} non-positive t-form arguments");
            }
        }
        Ok(RepOutput { rep, rows, theta, wall_time_s: start.elapsed().as_secs_f64() })
    }
}

fn create(path: &Path, header: &str) -> Result<fs::File> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    Ok(f)
}

/// Runs every repetition and writes the run directory `config.out`.
/// Repetitions run in parallel chunks on the current rayon pool; files are
/// written in repetition order and flushed after each chunk.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RepOutput>> {
    let exp = Experiment::prepare(config.clone())?;
    let dir = &config.out;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    let mut results = create(&dir.join("results.csv"), &RESULTS_HEADER.join(","))?;
    let mut theta = match config.theta_diagnostics && config.algo.is_dac() {
        true => Some(create(&dir.join("theta.csv"), "rep,t,level,theta,count")?),
        false => None,
    };
    let mut timing = match config.timing {
        true => Some(create(&dir.join("timing.csv"), "rep,wall_time_s")?),
        false => None,
    };
    let chunk = rayon::current_num_threads().max(1);
    let mut out = Vec::with_capacity(config.reps);
    let reps: Vec<usize> = (0..config.reps).collect();
    for block in reps.chunks(chunk) {
        let done: Vec<RepOutput> = block.par_iter().map(|&r| exp.run_rep(r)).collect::<Result<_>>()?;
        for r in &done {
            let mut buf = String::new();
            for row in &r.rows {
                buf.push_str(&format!("{},{},{},{},{}\n", r.rep, row.t, row.scope, row.metric, row.value));
            }
            results.write_all(buf.as_bytes())?;
            if let Some(f) = theta.as_mut() {
                for th in &r.theta {
                    writeln!(f, "{},{},{},{},{}", r.rep, th.t, th.level, th.theta, th.count)?;
                }
            }
            if let Some(f) = timing.as_mut() {
                writeln!(f, "{},{}", r.rep, r.wall_time_s)?;
            }
        }
        results.flush()?;
        info!("{}: {} of {} reps done", dir.display(), block[block.len() - 1] + 1, config.reps);
        out.extend(done);
    }
    Ok(out)
}

pub const PRESETS: [&str; 6] = ["smoke", "figure1-desk", "figure2-desk", "appendixA-desk", "spatial-2x2-validate", "kalman-d2"];

/// Labelled configurations of a preset, each writing to `dir/<label>`.
pub fn preset(name: &str, dir: &Path, full_scale: bool) -> Result<Vec<(String, ExperimentConfig)>> {
    let lg = |d: usize| ModelSpec::Lgssm(LgssmParams::standard(d));
    let base = |model: ModelSpec, algo: Algo, n: usize, t_max: usize, reps: usize| ExperimentConfig {
        model,
        algo,
        n,
        t_max,
        reps,
        seed: 20_160_101,
        ..ExperimentConfig::default()
    };
    let (t_long, dims) = match full_scale {
        true => (100, vec![32, 256, 2048]),
        false => (10, vec![32]),
    };
    let mut runs: Vec<ExperimentConfig> = Vec::new();
    match name {
        "smoke" => {
            for algo in Algo::ALL {
                let reps = if algo == Algo::Kalman { 1 } else { 4 };
                runs.push(base(lg(8), algo, 64, 5, reps));
            }
            let sp = ModelSpec::Spatial(SpatialParams::standard(2, 2));
            runs.push(ExperimentConfig { temper: true, ..base(sp, Algo::DacAdaptive, 64, 5, 4) });
            runs.push(base(sp, Algo::Bpf, 256, 5, 4));
        }
        "figure1-desk" => {
            for &d in &dims {
                runs.push(base(lg(d), Algo::DacAdaptive, 1000, t_long, if full_scale { 50 } else { 10 }));
            }
        }
        "figure2-desk" => {
            for &d in &dims {
                for n in [100, 500, 1000] {
                    for algo in [Algo::DacAdaptive, Algo::DacLightweight] {
                        runs.push(base(lg(d), algo, n, t_long, 50));
                    }
                }
            }
        }
        "appendixA-desk" => {
            for algo in [Algo::DacFull, Algo::DacLightweight, Algo::DacAdaptive, Algo::DacLinear] {
                runs.push(base(lg(128), algo, 500, 10, 50));
            }
        }
        "spatial-2x2-validate" => {
            let sp = ModelSpec::Spatial(SpatialParams::standard(2, 2));
            for n in [100, 500, 1000, 5000] {
                runs.push(base(sp, Algo::DacAdaptive, n, 10, 50));
            }
            runs.push(base(sp, Algo::Bpf, 100_000, 10, 50));
        }
        "kalman-d2" => {
            for n in [250, 1000, 4000] {
                runs.push(ExperimentConfig { full_cap: 4000, ..base(lg(2), Algo::DacFull, n, 10, 50) });
            }
            runs.push(base(lg(2), Algo::Kalman, 1, 10, 1));
        }
        _ => return Err(Error::Config(format!("unknown preset '{name}'; known: {}", PRESETS.join(", ")))),
    }
    Ok(runs
        .into_iter()
        .map(|mut c| {
            let label = format!("{}-{}-d{}-n{}", c.algo, c.model.name(), c.model.dim(), c.n);
            c.out = dir.join(&label);
            (label, c)
        })
        .collect())
}

/// Runs every configuration of a preset, then writes `dir/summary.csv`.
pub fn run_preset(name: &str, dir: &Path, full_scale: bool) -> Result<()> {
    let runs = preset(name, dir, full_scale)?;
    if full_scale {
        warn!("full-scale grid for '{name}': expect hours to days of compute");
    }
    for (label, c) in &runs {
        info!("preset {name}: running {label}");
        run_experiment(c)?;
    }
    summarize(dir, &dir.join("summary.csv"))
}

/// Type-7 sample quantile of sorted `x`.
pub fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

struct Labels {
    algo: String,
    model: String,
    dim: String,
    n: String,
}

fn labels_for(dir: &Path) -> Labels {
    let mut l = Labels { algo: "unknown".into(), model: "unknown".into(), dim: "unknown".into(), n: "unknown".into() };
    let Ok(text) = fs::read_to_string(dir.join("config.txt")) else {
        return l;
    };
    let pairs = parse_config_text(&text).unwrap_or_default();
    let get = |k: &str| pairs.iter().rev().find(|(a, _)| a == k).map(|(_, b)| b.clone());
    if let Ok(c) = ExperimentConfig::from_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str()))) {
        l = Labels { algo: c.algo.to_string(), model: c.model.name().into(), dim: c.model.dim().to_string(), n: c.n.to_string() };
    } else if let Some(a) = get("algo") {
        l.algo = a;
    }
    l
}

fn find_results(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_results(&e, out)?;
        } else if e.file_name().is_some_and(|n| n == "results.csv") {
            out.push(e);
        }
    }
    Ok(())
}

type GroupKey = (String, String, String);

fn read_groups(path: &Path, header: &[&str], key: impl Fn(&csv::StringRecord) -> GroupKey, value_col: usize) -> Result<Vec<(GroupKey, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::SchemaMismatch(format!("{}: expected header {}, got {}", path.display(), header.join(","), got.join(","))));
    }
    let mut groups: Vec<(GroupKey, Vec<f64>)> = Vec::new();
    let mut index: HashMap<GroupKey, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::SchemaMismatch(format!("{}: row with {} fields", path.display(), rec.len())));
        }
        let v: f64 = rec[value_col]
            .parse()
            .map_err(|_| Error::SchemaMismatch(format!("{}: non-numeric value '{}'", path.display(), &rec[value_col])))?;
        let k = key(&rec);
        let i = *index.entry(k.clone()).or_insert_with(|| {
            groups.push((k, Vec::new()));
            groups.len() - 1
        });
        if v.is_finite() {
            groups[i].1.push(v);
        }
    }
    Ok(groups)
}

/// Summarizes a `results.csv` file, or every run directory below a
/// directory, into per-(algorithm, model, dimension, N, t, scope, metric)
/// mean and quartiles. Runtime rows come from sibling `timing.csv` files.
/// Groups without finite values are omitted with a warning.
pub fn summarize(input: &Path, output: &Path) -> Result<()> {
    let mut files = Vec::new();
    find_results(input, &mut files)?;
    if files.is_empty() {
        return Err(Error::SchemaMismatch(format!("no results.csv under {}", input.display())));
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    for file in files {
        let dir = file.parent().unwrap_or(Path::new("."));
        let l = labels_for(dir);
        let key = |r: &csv::StringRecord| (r[1].to_string(), r[2].to_string(), r[3].to_string());
        let mut groups = read_groups(&file, &RESULTS_HEADER, key, 4)?;
        let timing = dir.join("timing.csv");
        if timing.is_file() {
            let key = |_: &csv::StringRecord| ("all".to_string(), "all".to_string(), "wall_time_s".to_string());
            groups.extend(read_groups(&timing, &["rep", "wall_time_s"], key, 1)?);
        }
        if groups.is_empty() {
            warn!("{}: no rows", file.display());
        }
        for ((t, scope, metric), mut v) in groups {
            if v.is_empty() {
                warn!("{}: t={t} scope={scope} metric={metric} has no finite values; omitted", file.display());
                continue;
            }
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let stats = [mean, quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75)];
            let mut rec = vec![l.algo.clone(), l.model.clone(), l.dim.clone(), l.n.clone(), t, scope, metric, v.len().to_string()];
            rec.extend(stats.iter().map(f64::to_string));
            records.push(rec);
        }
    }
    let mut w = csv::Writer::from_path(output)?;
    w.write_record(SUMMARY_HEADER)?;
    for rec in &records {
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(quantile_sorted(&x, 0.0), 1.0);
        assert_eq!(quantile_sorted(&x, 0.25), 1.75);
        assert_eq!(quantile_sorted(&x, 0.5), 3.0);
        assert_eq!(quantile_sorted(&x, 0.75), 4.75);
        assert_eq!(quantile_sorted(&[3.5], 0.75), 3.5);
    }

    #[test]
    fn config_text_round_trip() {
        let c = ExperimentConfig {
            model: ModelSpec::Spatial(SpatialParams::standard(4, 4)),
            algo: Algo::DacLightweight,
            theta: Some(3),
            temper: true,
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_pairs(parse_config_text(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, ExperimentConfig { out: back.out.clone(), ..c });
    }

    #[test]
    fn config_errors() {
        assert!(matches!(ExperimentConfig::from_pairs([("reps", "0")]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_pairs([("model", "spatial"), ("algo", "kalman")]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_pairs([("colour", "red")]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_pairs([("n", "x")]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_pairs([("algo", "dac-full"), ("n", "3000")]), Err(Error::Config(_))));
        assert!(parse_config_text("n 5").is_err());
        assert_eq!(parse_config_text("# c\n\nn = 5 # x\n").unwrap(), vec![("n".to_string(), "5".to_string())]);
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            for full in [false, true] {
                for (_, c) in preset(name, Path::new("/tmp/p"), full).unwrap() {
                    c.validate().unwrap();
                }
            }
        }
        assert!(preset("nope", Path::new("/tmp"), false).is_err());
    }
}
