//! `tsrl` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when
//! training aborts on a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsrl_core::data::{filter_by_feature, load_dataset, save_dataset, subsample_trajectories, TransitionDataset};
use tsrl_core::envs::{collect_dataset, make_env, BehaviorPolicy, EnvParams};
use tsrl_core::harness::{self, RunConfig};
use tsrl_core::tdm::load_tdm;
use tsrl_core::{agent, Error, Result};

#[derive(Parser)]
#[command(name = "tsrl", version, about = "T-symmetry dynamics models and offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set tsrl.lambda1=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

/// A dataset given either directly or through a run configuration.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Dataset file (.hdf5/.h5) or columnar directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run configuration whose dataset section to use.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, overrides: &[String]) -> Result<TransitionDataset> {
        match (&self.dataset, &self.config) {
            (Some(p), _) => load_dataset(p),
            (None, Some(c)) => harness::load_run_dataset(&RunConfig::load(c, overrides)?),
            (None, None) => Err(Error::Argument("pass --dataset or --config".into())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a T-symmetry dynamics model.
    TrainTdm(ConfigArgs),
    /// Train a TSRL agent on top of a trained dynamics model.
    TrainTsrl {
        #[command(flatten)]
        run: ConfigArgs,
        /// TDM checkpoint produced by `train-tdm`.
        #[arg(long)]
        tdm: PathBuf,
    },
    /// Score every transition of a dataset with a trained dynamics model.
    Score {
        #[arg(long)]
        tdm: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory receiving `scores.csv` and `summary.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Draw whole trajectories until a transition budget is reached.
    Subsample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        transitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        overwrite: bool,
    },
    /// Keep transitions whose state feature is at most a fraction of its maximum.
    Filter {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        feature: usize,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run one augmentation pass and report what the filter keeps.
    AugmentPreview {
        #[arg(long)]
        tdm: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 0.01)]
        noise_scale: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Number of dataset rows to augment.
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON output file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a trained agent in an oracle environment.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment name; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Plot learning curves with min/max bands across runs.
    Plot {
        /// Metrics files, one per run.
        files: Vec<PathBuf>,
        #[arg(long, default_value = "normalized_score")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Collect a dataset from an oracle environment.
    Collect {
        #[arg(long)]
        env: String,
        #[arg(long, default_value = "scripted-suboptimal")]
        behavior: String,
        #[arg(long)]
        transitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Point-mass friction coefficient.
        #[arg(long)]
        friction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn guard_output(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Validation(format!(
            "{} already exists (pass --overwrite to replace it)",
            path.display()
        )));
    }
    if path.is_dir() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(format!("clearing {}", path.display()), e))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>, overwrite: bool) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            guard_output(path, overwrite)?;
            std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTdm(args) => {
            let path = harness::run_train_tdm(&args.load()?, args.overwrite)?;
            println!("{}", path.display());
        }
        Command::TrainTsrl { run, tdm } => {
            let out = harness::run_train_tsrl(&run.load()?, &tdm, run.overwrite)?;
            if let Some(r) = &out.final_eval {
                println!("normalized score {:.2} (return {:.3} ± {:.3})", r.normalized_score, r.mean_return, r.std_return);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Score { tdm, data, overrides, out, overwrite } => {
            let model = load_tdm(&tdm)?.model;
            let raw = data.load(&overrides)?;
            let scores = harness::score_dataset(&model, &raw)?;
            let scores = scores.as_slice().expect("contiguous scores");
            let summary = harness::summarize_scores(scores)?;
            harness::prepare_output_dir(&out, overwrite)?;
            harness::write_scores_csv(&out.join("scores.csv"), scores)?;
            write_json(&summary, Some(&out.join("summary.json")), true)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Subsample { dataset, out, transitions, seed, overwrite } => {
            let d = subsample_trajectories(&load_dataset(&dataset)?, transitions, seed)?;
            guard_output(&out, overwrite)?;
            save_dataset(&d, &out)?;
            println!("{} transitions -> {}", d.len(), out.display());
        }
        Command::Filter { dataset, out, feature, fraction, overwrite } => {
            let d = filter_by_feature(&load_dataset(&dataset)?, feature, fraction)?;
            guard_output(&out, overwrite)?;
            save_dataset(&d, &out)?;
            println!("{} transitions -> {}", d.len(), out.display());
        }
        Command::AugmentPreview { tdm, data, overrides, tau, noise_scale, k, limit, seed, out, overwrite } => {
            let model = load_tdm(&tdm)?.model;
            let raw = data.load(&overrides)?;
            let preview = harness::augment_preview(&model, &raw, tau, noise_scale, k, limit, seed)?;
            write_json(&preview, out.as_deref(), overwrite)?;
        }
        Command::Evaluate { checkpoint, env, episodes, seeds, out, overwrite } => {
            let ckpt = agent::load_tsrl(&checkpoint)?;
            let name = env.unwrap_or(ckpt.env.clone());
            let env = make_env(&name, &EnvParams::default(), ckpt.seed)?;
            let report = harness::evaluate_agent(&ckpt.agent, &env, episodes, &seeds)?;
            write_json(&report, out.as_deref(), overwrite)?;
        }
        Command::Plot { files, metric, out, overwrite } => {
            guard_output(&out, overwrite)?;
            let bands = harness::plot_learning_curves(&files, &metric, &out)?;
            println!("{} points -> {}", bands.len(), out.display());
        }
        Command::Collect { env, behavior, transitions, seed, friction, out, overwrite } => {
            let behavior: BehaviorPolicy = behavior.parse()?;
            let params = EnvParams {
                friction,
                ..EnvParams::default()
            };
            let env = make_env(&env, &params, seed)?;
            let d = collect_dataset(&env, behavior, transitions, seed)?;
            guard_output(&out, overwrite)?;
            save_dataset(&d, &out)?;
            println!("{} transitions -> {}", d.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
