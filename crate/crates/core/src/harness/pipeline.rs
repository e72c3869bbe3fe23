use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::agent::{StepMetrics, TsrlAgent, TsrlCheckpoint, TsrlData, save_tsrl};
use crate::augment::AugmentationRule;
use crate::data::{load_dataset, normalize_states, NormalizationStats, TransitionDataset};
use crate::envs::{collect_dataset, evaluate_policy, make_env, EvalReport, OracleEnv};
use crate::error::{Error, Result};
use crate::tdm::{save_tdm, EpochReport, TdmCheckpoint, TdmModel, TdmTrainer};

pub const CONFIG_ECHO: &str = "config.toml";
pub const TDM_CHECKPOINT: &str = "tdm.json";
pub const TDM_METRICS: &str = "tdm_metrics.jsonl";
pub const TSRL_CHECKPOINT: &str = "tsrl.json";
pub const TSRL_METRICS: &str = "metrics.jsonl";
pub const EVAL_REPORT: &str = "eval.json";

/// One line of the TSRL metrics file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean over the steps since the previous record.
    pub critic_loss: f64,
    pub policy_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub kept_fraction: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub normalized_score: Option<f64>,
}

/// Creates `dir`, refusing to reuse a non-empty directory unless
/// `overwrite` is set.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.next().is_some();
    if occupied {
        if !overwrite {
            return Err(Error::Validation(format!(
                "output directory {} is not empty (pass --overwrite to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}

/// Loads or generates the raw dataset named by the config.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<TransitionDataset> {
    match (&cfg.dataset.path, &cfg.dataset.env) {
        (Some(path), None) => load_dataset(path),
        (None, Some(r)) => {
            let env = make_env(&r.name, &r.params, r.seed)?;
            collect_dataset(&env, r.behavior, r.transitions, r.seed)
        }
        _ => Err(Error::Config("exactly one of dataset.path and dataset.env must be set".into())),
    }
}

pub fn eval_env(cfg: &RunConfig) -> Result<Option<OracleEnv>> {
    cfg.eval_env_spec()
        .map(|(name, params)| make_env(&name, &params, cfg.seed))
        .transpose()
}

/// Trains a TDM on an already normalized dataset, reporting each epoch.
/// The inner result carries a numerical abort; the model is then the last
/// finite state.
pub fn train_tdm_with(
    data: &TransitionDataset,
    stats: NormalizationStats,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(TdmModel, usize, Result<()>)> {
    let mut trainer = TdmTrainer::new(data.state_dim(), data.action_dim(), &cfg.tdm, stats, cfg.seed)?;
    let outcome = trainer.run(data, on_epoch);
    let epochs = trainer.epochs_completed();
    Ok((trainer.into_model(), epochs, outcome))
}

/// Runs the first stage: dataset, normalization, TDM training. Writes the
/// config echo, per-epoch metrics and the checkpoint into the output
/// directory and returns the checkpoint path.
pub fn run_train_tdm(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let raw = load_run_dataset(cfg)?;
    prepare_output_dir(&cfg.output_dir, overwrite)?;
    write_file(&cfg.output_dir.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    let (data, stats) = normalize_states(&raw)?;
    let mut metrics = JsonlWriter::create(&cfg.output_dir.join(TDM_METRICS))?;
    let mut write_err = None;
    let mut last = None;
    let (model, epochs, outcome) = train_tdm_with(&data, stats, cfg, |r| {
        if let Err(e) = metrics.write(r) {
            write_err.get_or_insert(e);
        }
        last = Some(r.clone());
    })?;
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut ckpt = TdmCheckpoint::new(model, cfg.tdm.clone(), cfg.seed, epochs);
    ckpt.final_epoch = last;
    if let Err(e) = &outcome {
        ckpt.abort_reason = Some(e.to_string());
    }
    let path = cfg.output_dir.join(TDM_CHECKPOINT);
    save_tdm(&path, &ckpt)?;
    outcome.map(|_| path)
}

/// Refuses a TDM whose dimensions or normalization do not match the data
/// and run configuration.
pub fn check_compatibility(tdm: &TdmModel, raw: &TransitionDataset, cfg: &RunConfig) -> Result<()> {
    if tdm.state_dim() != raw.state_dim() || tdm.action_dim() != raw.action_dim() {
        return Err(Error::Compatibility(format!(
            "tdm expects ({}, {}) state/action dims, dataset has ({}, {})",
            tdm.state_dim(),
            tdm.action_dim(),
            raw.state_dim(),
            raw.action_dim()
        )));
    }
    for (name, want, have) in [
        ("state", cfg.tdm.latent_state_dim, tdm.latent_state_dim()),
        ("action", cfg.tdm.latent_action_dim, tdm.latent_action_dim()),
    ] {
        if want.is_some_and(|w| w != have) {
            return Err(Error::Compatibility(format!(
                "config asks for latent {name} dim {}, tdm has {have}",
                want.unwrap()
            )));
        }
    }
    let stats = NormalizationStats::fit(raw.states())?;
    if stats.fingerprint() != tdm.stats().fingerprint() {
        return Err(Error::Compatibility(
            "dataset normalization statistics differ from the ones the tdm was trained with".into(),
        ));
    }
    Ok(())
}

pub struct TsrlOutcome {
    pub agent: TsrlAgent,
    pub rule: Option<AugmentationRule>,
    pub final_eval: Option<EvalReport>,
}

/// Second stage in memory: fits the augmentation threshold on the frozen
/// TDM, then trains the agent with periodic evaluation. Every metrics
/// record is passed to `on_record`.
pub fn train_tsrl_with(
    tdm: TdmModel,
    raw: &TransitionDataset,
    cfg: &RunConfig,
    env: Option<&OracleEnv>,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TsrlOutcome> {
    check_compatibility(&tdm, raw, cfg)?;
    let data = raw.normalized_with(tdm.stats())?;
    let rule = if cfg.tsrl.ablations.no_a {
        None
    } else {
        let a = &cfg.augmentation;
        Some(AugmentationRule::fit(&tdm, &data, a.tau, a.noise_scale, a.k)?)
    };
    let cache = TsrlData::new(&data, &tdm)?;
    let (low, high) = match env {
        Some(e) => (e.action_low().to_vec(), e.action_high().to_vec()),
        None => action_bounds_from_data(raw),
    };
    let mut agent = TsrlAgent::new(cfg.tsrl.clone(), tdm, low, high, cfg.seed)?;
    let total = cfg.tsrl.iterations as u64;
    let mut acc = Accumulator::default();
    let mut final_eval = None;
    for _ in 0..total {
        let m = agent.train_step(&cache, rule.as_ref())?;
        acc.add(&m);
        let step = m.step;
        let eval_now = env.is_some() && (step % cfg.eval.interval as u64 == 0 || step == total);
        if step % cfg.log_interval as u64 == 0 || eval_now || step == total {
            let mut rec = acc.take(step);
            if eval_now {
                let report = evaluate_agent(&agent, env.unwrap(), cfg.eval.episodes, &cfg.eval.seeds)?;
                rec.eval_return_mean = Some(report.mean_return);
                rec.eval_return_std = Some(report.std_return);
                rec.normalized_score = Some(report.normalized_score);
                log::info!("step {step}: normalized score {:.2}", report.normalized_score);
                final_eval = Some(report);
            }
            on_record(&rec)?;
        }
    }
    Ok(TsrlOutcome { agent, rule, final_eval })
}

pub fn evaluate_agent(agent: &TsrlAgent, env: &OracleEnv, episodes: usize, seeds: &[u64]) -> Result<EvalReport> {
    let mut failure = None;
    let report = evaluate_policy(
        env,
        |s| match agent.act(s) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; env.action_dim()]
            }
        },
        episodes,
        seeds,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Per-dimension action range seen in the data, used when no environment
/// supplies bounds.
pub fn action_bounds_from_data(d: &TransitionDataset) -> (Vec<f64>, Vec<f64>) {
    let a = d.actions();
    let low: Vec<f64> = a.columns().into_iter().map(|c| c.fold(f64::INFINITY, |m, &v| m.min(v))).collect();
    let high: Vec<f64> = a.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
    let high = low.iter().zip(high).map(|(&l, h)| if h > l { h } else { l + 1.0 }).collect();
    (low, high)
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    critic: f64,
    kept: f64,
    policy_steps: usize,
    policy: f64,
    alpha: Option<f64>,
}

impl Accumulator {
    fn add(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.critic += m.critic_loss;
        self.kept += m.kept_fraction;
        if let Some(p) = m.policy_loss {
            self.policy_steps += 1;
            self.policy += p;
        }
        if m.alpha.is_some() {
            self.alpha = m.alpha;
        }
    }

    fn take(&mut self, step: u64) -> MetricsRecord {
        let n = self.steps.max(1) as f64;
        let rec = MetricsRecord {
            step,
            critic_loss: self.critic / n,
            policy_loss: (self.policy_steps > 0).then(|| self.policy / self.policy_steps as f64),
            alpha: self.alpha,
            kept_fraction: self.kept / n,
            ..MetricsRecord::default()
        };
        *self = Accumulator::default();
        rec
    }
}

pub struct TsrlRun {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Runs the second stage from a TDM checkpoint, writing config echo,
/// metrics JSONL, the agent checkpoint and the final evaluation.
pub fn run_train_tsrl(cfg: &RunConfig, tdm_path: &Path, overwrite: bool) -> Result<TsrlRun> {
    cfg.validate()?;
    let tdm = crate::tdm::load_tdm(tdm_path)?;
    if let Some(reason) = &tdm.abort_reason {
        return Err(Error::Compatibility(format!("tdm checkpoint comes from an aborted run: {reason}")));
    }
    let raw = load_run_dataset(cfg)?;
    check_compatibility(&tdm.model, &raw, cfg)?;
    let env = eval_env(cfg)?;
    prepare_output_dir(&cfg.output_dir, overwrite)?;
    write_file(&cfg.output_dir.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    let metrics_path = cfg.output_dir.join(TSRL_METRICS);
    let mut metrics = JsonlWriter::create(&metrics_path)?;
    let outcome = train_tsrl_with(tdm.model, &raw, cfg, env.as_ref(), |r| metrics.write(r));
    metrics.flush()?;
    let outcome = outcome?;
    let checkpoint = cfg.output_dir.join(TSRL_CHECKPOINT);
    let name = env.as_ref().map(|e| e.name()).unwrap_or("");
    save_tsrl(&checkpoint, &TsrlCheckpoint::new(outcome.agent, outcome.rule, name, cfg.seed))?;
    if let Some(report) = &outcome.final_eval {
        write_file(&cfg.output_dir.join(EVAL_REPORT), &serde_json::to_string_pretty(report)?)?;
    }
    Ok(TsrlRun {
        checkpoint,
        metrics: metrics_path,
        final_eval: outcome.final_eval,
    })
}
