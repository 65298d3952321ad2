use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::error;

use dacpf::bench::{parse_config_text, run_experiment, run_preset, summarize, ExperimentConfig};
use dacpf::{Error, Result};

#[derive(Parser)]
#[command(name = "dacpf", version, about = "Divide-and-conquer marginal particle filter experiments")]
struct Cli {
    /// Worker threads for repetitions and merges (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration.
    Run(RunArgs),
    /// Run a named preset grid into DIR, one subdirectory per configuration.
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Use the full-scale grid instead of the desk-scale one.
        #[arg(long)]
        full_scale: bool,
    },
    /// Summarize a results.csv, or every run below a directory.
    Summarize {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Key/value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["lgssm", "spatial"])]
    model: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta: Option<usize>,
    #[arg(long)]
    ess_target: Option<f64>,
    #[arg(long, action = ArgAction::Set)]
    temper: Option<bool>,
    /// Largest N accepted by dac-full.
    #[arg(long)]
    full_cap: Option<usize>,
    /// LGSSM transition precision parameters and observation variance.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma_y2: Option<f64>,
    /// Spatial model parameters.
    #[arg(long)]
    sigma_x2: Option<f64>,
    #[arg(long)]
    obs_tau: Option<f64>,
    #[arg(long)]
    r_y: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(p) => parse_config_text(&fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        set("model", self.model.clone());
        set("d", opt(&self.d));
        set("rows", opt(&self.rows));
        set("cols", opt(&self.cols));
        set("algo", self.algo.clone());
        set("n", opt(&self.n));
        set("t", opt(&self.t));
        set("reps", opt(&self.reps));
        set("seed", opt(&self.seed));
        set("theta", opt(&self.theta));
        set("ess_target", opt(&self.ess_target));
        set("temper", opt(&self.temper));
        set("full_cap", opt(&self.full_cap));
        set("tau", opt(&self.tau));
        set("lambda", opt(&self.lambda));
        set("sigma_y2", opt(&self.sigma_y2));
        set("sigma_x2", opt(&self.sigma_x2));
        set("obs_tau", opt(&self.obs_tau));
        set("r_y", opt(&self.r_y));
        set("nu", opt(&self.nu));
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        if !pairs.iter().any(|(k, _)| k == "out") {
            return Err(Error::Config("--out is required".into()));
        }
        ExperimentConfig::from_pairs(pairs)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run_experiment(&args.config()?).map(|_| ()),
        Command::Preset { name, out, full_scale } => run_preset(&name, &out, full_scale),
        Command::Summarize { input, out } => summarize(&input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
