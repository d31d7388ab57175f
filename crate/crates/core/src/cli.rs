//! Command-line entry point.
//!
//! Every subcommand reads an optional TOML config file whose sections
//! mirror the library configs, applies flag overrides on top, and writes
//! its metrics as CSV plus a `summary.json` that validates against
//! `schemas/summary.schema.json`.
//!
//! ```toml
//! scene = "push"        # preset name or path to a scene TOML file
//!
//! [generation]
//! trajectories = 200
//!
//! [train]
//! k = 7
//! epochs = 20
//!
//! [train.regulator]
//! penetration_loss = true
//!
//! [reward_fit]
//! epochs = 300
//!
//! [mbpo]
//! epochs = 50
//!
//! [grad_check]
//! particles = 64
//! ```

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, Dataset, GenConfig, SplitPart};
use crate::eval::{
    config_hash, eval_reward_pred, eval_traj_recon, fit_reward_head, robustness_eval, run_mbpo, scene_gradient_check,
    EvalReport, Features, GradCheckConfig, MbpoConfig, MbpoReport, RewardFitConfig,
};
use crate::models::{Component, ModelParams};
use crate::scene::SceneConfig;
use crate::training::{train_baseline, train_srl, BaselineKind, LossReport, TrainConfig};

/// Format tag of `summary.json`.
pub const SUMMARY_FORMAT: &str = "softrep-summary 1";
/// Largest relative error accepted by `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Contents of a config file; absent sections keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scene: Option<String>,
    pub generation: GenConfig,
    pub train: TrainConfig,
    pub reward_fit: RewardFitConfig,
    pub mbpo: MbpoConfig,
    pub grad_check: GradCheckConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.into(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.into(),
            message: e.to_string(),
        })
    }

    fn scene(&self, flag: Option<&str>) -> Result<SceneConfig, CliError> {
        Ok(SceneConfig::load(flag.or(self.scene.as_deref()).unwrap_or("push"))?)
    }
}

/// Machine-readable result of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub command: String,
    pub version: String,
    /// Hash of the effective configuration after flag overrides.
    pub config_hash: String,
    pub seed: u64,
    /// Scene hash of the dataset or scene the command ran on.
    pub data_hash: String,
    pub reports: Vec<EvalReport>,
    pub wall_time_s: f64,
}

#[derive(Debug, Parser)]
#[command(
    name = "softrep",
    version,
    about = "Soft-body simulation and state representation learning"
)]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a trajectory dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Preset name or scene TOML file.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        random_fraction: Option<f64>,
    },
    /// Train the representation through regulation and simulated rollouts.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Drop the penetration term from the loss (projection only).
        #[arg(long)]
        ablate_penetration: bool,
        /// Initial constraint weight.
        #[arg(long)]
        beta0: Option<f64>,
    },
    /// Train an autoencoder, forward-model or inverse-model baseline.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value = "autoencoder")]
        kind: BaselineKind,
    },
    /// Accumulated rollout Chamfer of reconstructions.
    EvalTraj {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "test")]
        split: SplitPart,
    },
    /// Fit a reward head on frozen latents and report its test MSE.
    EvalReward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        /// Evaluate the reward head stored in the model as is.
        #[arg(long)]
        no_fit: bool,
    },
    /// Policy optimization through the simulator on a frozen encoder.
    Mbpo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mbpo: MbpoFlags,
    },
    /// MBPO with observations subsampled to several point counts.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mbpo: MbpoFlags,
        /// Comma-separated point counts.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
    },
    /// Compare simulator gradients with central finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    /// Share of trajectories replayed through the simulator on load.
    #[arg(long, default_value_t = 0.05)]
    pub replay: f64,
}

#[derive(Debug, Args)]
pub struct MbpoFlags {
    /// Encoder checkpoint; without it the policy sees raw tracked points.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<String>,
    /// Repetitions with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Tracked points of the raw-feature baseline.
    #[arg(long)]
    pub downsample: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Runs one command. `Ok(false)` means it ran but its check failed.
pub fn run(command: Command) -> Result<bool, CliError> {
    let clock = Instant::now();
    match command {
        Command::GenData {
            common,
            scene,
            trajectories,
            random_fraction,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let scene = file.scene(scene.as_deref())?;
            let mut cfg = file.generation;
            override_with(&mut cfg.trajectories, trajectories);
            override_with(&mut cfg.random_fraction, random_fraction);
            override_with(&mut cfg.seed, common.seed);
            let data = generate_dataset(&scene, &cfg)?;
            data.save(&common.out)?;
            println!(
                "wrote {} trajectories ({} resampled) to {}",
                data.trajectories.len(),
                data.manifest.resampled,
                common.out.display()
            );
            Ok(true)
        }
        Command::Train {
            common,
            train,
            ablate_penetration,
            beta0,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let mut cfg = train_config(file, &common, &train);
            override_with(&mut cfg.beta0, beta0);
            if ablate_penetration {
                cfg.regulator.penetration_loss = false;
            }
            let data = Dataset::load(&train.data, train.replay)?;
            let (params, report) = train_srl(&data, &cfg)?;
            save_training(&common.out, &params, &report)?;
            Ok(true)
        }
        Command::TrainBaseline { common, train, kind } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let cfg = train_config(file, &common, &train);
            let data = Dataset::load(&train.data, train.replay)?;
            let (params, report) = train_baseline(kind, &data, &cfg)?;
            save_training(&common.out, &params, &report)?;
            Ok(true)
        }
        Command::EvalTraj {
            common,
            model,
            data,
            k,
            split,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let params = ModelParams::load(&model)?;
            let data = Dataset::load(&data, 0.0)?;
            let k = k.unwrap_or(file.train.k);
            let report = eval_traj_recon(&params, &data, split, k, &file.train.regulator)?;
            let hash = config_hash(&(&file.train.regulator, k, split));
            write_reports(
                &common.out,
                "eval-traj",
                hash,
                0,
                &data.manifest.scene_hash,
                vec![report],
                clock,
            )?;
            Ok(true)
        }
        Command::EvalReward {
            common,
            model,
            data,
            split,
            no_fit,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let mut params = ModelParams::load(&model)?;
            let data = Dataset::load(&data, 0.0)?;
            let mut fit = file.reward_fit;
            override_with(&mut fit.seed, common.seed);
            if !no_fit {
                let mse = fit_reward_head(&mut params, &data, &fit)?;
                log::info!("reward head training MSE {mse:.6}");
                std::fs::create_dir_all(&common.out)?;
                params.save(&common.out.join("model_with_reward.ckpt"))?;
            } else if !params.has(Component::Reward) {
                return Err(CliError::Usage("--no-fit needs a model with a reward head".into()));
            }
            let report = eval_reward_pred(&params, &data, split)?;
            let hash = config_hash(&(&fit, no_fit, split));
            write_reports(
                &common.out,
                "eval-reward",
                hash,
                fit.seed,
                &data.manifest.scene_hash,
                vec![report],
                clock,
            )?;
            Ok(true)
        }
        Command::Mbpo { common, mbpo } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let (scene, cfg, encoder) = mbpo_setup(&file, &common, &mbpo)?;
            let runs = (0..mbpo.seeds)
                .map(|i| {
                    run_mbpo(
                        encoder.as_ref(),
                        &scene,
                        &MbpoConfig {
                            seed: cfg.seed + i,
                            ..cfg.clone()
                        },
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_curves(&common.out, "mbpo", &cfg, &scene, &runs, clock)
        }
        Command::Robustness { common, mbpo, counts } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let (scene, cfg, encoder) = mbpo_setup(&file, &common, &mbpo)?;
            let encoder = encoder.ok_or_else(|| CliError::Usage("robustness needs --model".into()))?;
            let mut runs = Vec::new();
            for i in 0..mbpo.seeds {
                runs.extend(robustness_eval(
                    &encoder,
                    &scene,
                    &counts,
                    &MbpoConfig {
                        seed: cfg.seed + i,
                        ..cfg.clone()
                    },
                )?);
            }
            write_curves(&common.out, "robustness", &cfg, &scene, &runs, clock)
        }
        Command::GradCheck { common, scene } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let scene = file.scene(scene.as_deref())?;
            let mut cfg = file.grad_check;
            override_with(&mut cfg.seed, common.seed);
            let check = scene_gradient_check(&scene, &cfg)?;
            let ok = check.max_rel_error < GRAD_CHECK_TOLERANCE;
            println!(
                "max relative error {:.3e} over {} entries ({})",
                check.max_rel_error,
                check.entries,
                if ok { "ok" } else { "FAILED" }
            );
            let report = EvalReport::new(
                "grad_rel_error",
                vec![check.max_rel_error],
                0,
                config_hash(&cfg),
                clock.elapsed().as_secs_f64(),
            );
            write_reports(
                &common.out,
                "grad-check",
                config_hash(&cfg),
                cfg.seed,
                &scene.hash(),
                vec![report],
                clock,
            )?;
            Ok(ok)
        }
    }
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn train_config(file: FileConfig, common: &Common, flags: &TrainFlags) -> TrainConfig {
    let mut cfg = file.train;
    override_with(&mut cfg.epochs, flags.epochs);
    override_with(&mut cfg.k, flags.k);
    override_with(&mut cfg.lr, flags.lr);
    override_with(&mut cfg.seed, common.seed);
    if flags.max_samples.is_some() {
        cfg.max_samples = flags.max_samples;
    }
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(common.out.join("checkpoint"));
    }
    cfg
}

fn save_training(out: &Path, params: &ModelParams, report: &LossReport) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    params.save(&out.join("model.ckpt"))?;
    std::fs::write(out.join("loss_report.json"), report.to_json()?)?;
    let mut w = csv::Writer::from_writer(File::create(out.join("loss.csv"))?);
    w.write_record([
        "epoch",
        "beta",
        "multi_step",
        "constraint",
        "total",
        "samples",
        "skipped",
    ])?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.beta.to_string(),
            e.multi_step.to_string(),
            e.constraint.to_string(),
            e.total.to_string(),
            e.samples.to_string(),
            e.skipped.to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(last) = report.epochs.last() {
        println!(
            "{}: {} epochs, final multi-step {:.5}, constraint {:.5}",
            report.kind,
            report.epochs.len(),
            last.multi_step,
            last.constraint
        );
    }
    Ok(())
}

fn mbpo_setup(
    file: &FileConfig,
    common: &Common,
    flags: &MbpoFlags,
) -> Result<(SceneConfig, MbpoConfig, Option<ModelParams>), CliError> {
    let scene = file.scene(flags.scene.as_deref())?;
    let mut cfg = file.mbpo.clone();
    override_with(&mut cfg.epochs, flags.epochs);
    override_with(&mut cfg.horizon, flags.horizon);
    override_with(&mut cfg.seed, common.seed);
    if let Some(points) = flags.downsample {
        cfg.features = Features::Downsample { points };
    }
    let encoder = flags.model.as_deref().map(ModelParams::load).transpose()?;
    if encoder.is_none() && cfg.features == Features::Latent {
        return Err(CliError::Usage(
            "latent features need --model (or use --downsample)".into(),
        ));
    }
    if flags.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    Ok((scene, cfg, encoder))
}

fn write_curves(
    out: &Path,
    command: &str,
    cfg: &MbpoConfig,
    scene: &SceneConfig,
    runs: &[MbpoReport],
    clock: Instant,
) -> Result<bool, CliError> {
    std::fs::create_dir_all(out)?;
    MbpoReport::write_csv(runs, File::create(out.join("curves.csv"))?)?;
    let mut groups: Vec<Option<usize>> = runs.iter().map(|r| r.obs_points).collect();
    groups.dedup();
    groups.sort_unstable();
    groups.dedup();
    let hash = config_hash(cfg);
    let mut reports = Vec::new();
    for g in groups {
        let label = g.map_or_else(|| "all".to_string(), |p| p.to_string());
        let group: Vec<&MbpoReport> = runs.iter().filter(|r| r.obs_points == g).collect();
        let first: Vec<f64> = group.iter().filter_map(|r| r.curve.first().copied()).collect();
        let last: Vec<f64> = group.iter().filter_map(|r| r.curve.last().copied()).collect();
        if first.is_empty() {
            continue;
        }
        let wall = group.iter().map(|r| r.wall_time_s).sum();
        reports.push(EvalReport::new(
            &format!("first_epoch_reward@{label}"),
            first,
            0,
            hash.clone(),
            wall,
        ));
        reports.push(EvalReport::new(
            &format!("final_epoch_reward@{label}"),
            last,
            0,
            hash.clone(),
            wall,
        ));
    }
    for r in &reports {
        println!(
            "{}: mean {:.5} std {:.5} over {} seeds",
            r.metric,
            r.mean,
            r.std,
            r.values.len()
        );
    }
    write_summary(out, command, hash, cfg.seed, &scene.hash(), reports, clock)?;
    Ok(true)
}

fn write_reports(
    out: &Path,
    command: &str,
    hash: String,
    seed: u64,
    data_hash: &str,
    reports: Vec<EvalReport>,
    clock: Instant,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    for r in &reports {
        r.write_csv(File::create(out.join(format!("{}.csv", r.metric)))?)?;
        println!(
            "{}: mean {:.6} std {:.6} ({} samples, {} flagged)",
            r.metric,
            r.mean,
            r.std,
            r.values.len(),
            r.flagged
        );
    }
    write_summary(out, command, hash, seed, data_hash, reports, clock)
}

fn write_summary(
    out: &Path,
    command: &str,
    hash: String,
    seed: u64,
    data_hash: &str,
    reports: Vec<EvalReport>,
    clock: Instant,
) -> Result<(), CliError> {
    let summary = Summary {
        format: SUMMARY_FORMAT.into(),
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        seed,
        data_hash: data_hash.into(),
        reports,
        wall_time_s: clock.elapsed().as_secs_f64(),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
