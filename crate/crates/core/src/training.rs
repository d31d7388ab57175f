//! Loss assembly and optimization loops for the representation model and
//! the autoencoder, forward-model and inverse-model baselines.
//!
//! The main objective encodes a start observation, decodes it, regulates
//! the decoded cloud into a simulable state, rolls that state out with the
//! recorded actions and compares every rolled-out cloud with the recorded
//! one. Gradients flow back through the simulator, the regulator, the
//! decoder and the encoder in one tape.
//!
//! ```
//! use softrep::training::{beta_schedule, total_loss};
//!
//! let beta = beta_schedule(3, 0.99, 0.9);
//! assert!((beta - 0.72171).abs() < 1e-12);
//! assert_eq!(total_loss(2.0, 4.0, 0.5), 3.0);
//! ```

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::dataset::{Dataset, SplitPart, Window};
use crate::eval::{window_metric, EvalError};
use crate::metrics::{chamfer, points_tensor, MetricError};
use crate::models::{
    accumulate, clip_grad_norm, Adam, AdamConfig, Architecture, Component, ModelError, ModelParams, Net,
};
use crate::mpm::{pack_action, Simulator};
use crate::regulator::{regulate_on_tape, RegulatorConfig, RegulatorError};
use crate::scene::SceneError;
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{a} ground-truth states but {b} rolled-out states")]
    LengthMismatch { a: usize, b: usize },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("every sample of epoch {0} failed")]
    AllFailed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Regulator(#[from] RegulatorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot read or write report: {0}")]
    Json(#[from] serde_json::Error),
}

/// `beta0 * lambda^epoch`.
pub fn beta_schedule(epoch: usize, beta0: f64, lambda: f64) -> f64 {
    beta0 * lambda.powi(epoch as i32)
}

/// `(1 - beta) * multi_step + beta * constraint`.
pub fn total_loss(multi_step: f64, constraint: f64, beta: f64) -> f64 {
    (1.0 - beta) * multi_step + beta * constraint
}

/// `sum_i gamma^i * chamfer(truth[i], rolled[i])`, with `i` counted from 0.
pub fn multi_step_loss<A, B>(truth: &[A], rolled: &[B], gamma: f64) -> Result<f64, TrainError>
where
    A: AsRef<[Vec3]>,
    B: AsRef<[Vec3]>,
{
    if truth.len() != rolled.len() {
        return Err(TrainError::LengthMismatch {
            a: truth.len(),
            b: rolled.len(),
        });
    }
    let mut w = 1.0;
    let mut sum = 0.0;
    for (t, r) in truth.iter().zip(rolled) {
        sum += w * chamfer(t.as_ref(), r.as_ref())?;
        w *= gamma;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rollout steps per sample.
    pub k: usize,
    pub gamma: f64,
    pub beta0: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global gradient-norm bound per optimizer step.
    pub clip: f64,
    /// Cap on training samples per epoch (all when `None`).
    pub max_samples: Option<usize>,
    /// Validation every this many epochs (never when 0).
    pub validate_every: usize,
    /// Saves the model and report after every epoch and resumes from them.
    pub checkpoint_dir: Option<PathBuf>,
    /// Layer widths; sizes that depend on the data are filled in.
    pub arch: Architecture,
    pub regulator: RegulatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 7,
            gamma: 0.99,
            beta0: 0.99,
            lambda: 0.9,
            lr: 5e-4,
            epochs: 20,
            batch: 4,
            seed: 0,
            clip: 1.0,
            max_samples: None,
            validate_every: 0,
            checkpoint_dir: None,
            arch: Architecture::default(),
            regulator: RegulatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, episode_len: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} not in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.beta0) {
            return bad(format!("beta0 {} not in [0, 1]", self.beta0));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda {} not in (0, 1]", self.lambda));
        }
        if self.k == 0 || self.k + 1 > episode_len {
            return bad(format!(
                "k = {} must be in 1..={}",
                self.k,
                episode_len.saturating_sub(1)
            ));
        }
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip > 0.0) {
            return bad("batch, lr and clip must be positive".into());
        }
        Ok(())
    }

    /// Architecture with sizes taken from the dataset.
    pub fn arch_for(&self, data: &Dataset) -> Architecture {
        let d = self.arch.d_latent;
        Architecture {
            n_points: data.manifest.particles,
            action_dim: 3 * data.manifest.tools,
            policy_input: 2 * d + 6,
            action_bound: data.scene().sim.action_bound,
            ..self.arch.clone()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Batch means of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub beta: f64,
    pub multi_step: f64,
    pub constraint: f64,
    pub total: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub multi_step: f64,
    pub constraint: f64,
    pub total: f64,
    pub samples: usize,
    /// Samples dropped after a simulator or regulator failure.
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub epoch: usize,
    pub metric: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: String,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub validation: Vec<ValLog>,
}

impl LossReport {
    /// Largest deviation of a logged total from its logged components.
    pub fn max_identity_error(&self) -> f64 {
        let steps = self.steps.iter().map(|s| (s.total, s.multi_step, s.constraint, s.beta));
        let epochs = self
            .epochs
            .iter()
            .map(|s| (s.total, s.multi_step, s.constraint, s.beta));
        steps
            .chain(epochs)
            .map(|(t, m, c, b)| (t - total_loss(m, c, b)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Autoencoder,
    Forward,
    Inverse,
}

impl std::str::FromStr for BaselineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "autoencoder" => Ok(Self::Autoencoder),
            "forward" => Ok(Self::Forward),
            "inverse" => Ok(Self::Inverse),
            other => Err(format!("unknown baseline {other:?} (autoencoder, forward, inverse)")),
        }
    }
}

/// Loss terms of one sample; `total` is on the tape.
struct SampleLoss {
    total: Var,
    multi_step: f64,
    constraint: f64,
}

enum Outcome {
    Done(SampleLoss),
    /// The sample cannot be simulated; it is skipped and counted.
    Skipped(String),
}

fn skippable(e: &TrainError) -> bool {
    match e {
        TrainError::Tape(AdError::Kernel { .. }) => true,
        TrainError::Regulator(RegulatorError::Geometry(_)) => true,
        TrainError::Regulator(RegulatorError::Tape(AdError::Kernel { .. })) => true,
        _ => false,
    }
}

fn outcome(r: Result<SampleLoss, TrainError>) -> Result<Outcome, TrainError> {
    match r {
        Ok(s) => Ok(Outcome::Done(s)),
        Err(e) if skippable(&e) => Ok(Outcome::Skipped(e.to_string())),
        Err(e) => Err(e),
    }
}

fn cloud_var(tape: &mut Tape, points: &[Vec3]) -> Var {
    tape.constant(points_tensor(points))
}

/// Decoded, regulated and rolled-out loss of one window.
fn srl_loss(
    net: &Net,
    tape: &mut Tape,
    sim: &Arc<Simulator>,
    data: &Dataset,
    w: &Window,
    cfg: &TrainConfig,
    beta: f64,
) -> Result<SampleLoss, TrainError> {
    let start = data.start_state(w);
    let n = start.len();
    let obs = cloud_var(tape, &start.positions);
    let h = net.encode(tape, obs)?;
    let decoded = net.decode(tape, h)?;
    let rigids = sim.primitives(&start.rigid_poses, None);
    let reg = regulate_on_tape(tape, decoded, start, &rigids, &cfg.regulator)?;
    let mut state = reg.state;
    let mut terms = Vec::with_capacity(w.k);
    for (i, (a, truth)) in data.window_actions(w).iter().zip(data.window_truth(w)).enumerate() {
        let action = tape.constant(pack_action(a));
        state = tape.sim_step(sim, start, state, action, i)?;
        let rows = tape.slice_rows(state, 0, n)?;
        let pos = tape.slice_cols(rows, 0, 3)?;
        let gt = cloud_var(tape, &truth.positions);
        terms.push(tape.chamfer(pos, gt)?);
    }
    let mut ms = tape.scale(terms[0], 1.0)?;
    let mut w_i = 1.0;
    for &t in &terms[1..] {
        w_i *= cfg.gamma;
        ms = tape.axpby(1.0, ms, w_i, t)?;
    }
    let total = tape.axpby(1.0 - beta, ms, beta, reg.loss)?;
    Ok(SampleLoss {
        total,
        multi_step: tape.scalar_value(ms),
        constraint: tape.scalar_value(reg.loss),
    })
}

/// Chamfer reconstruction loss of one observation.
fn recon_loss(net: &Net, tape: &mut Tape, points: &[Vec3]) -> Result<SampleLoss, TrainError> {
    let obs = cloud_var(tape, points);
    let h = net.encode(tape, obs)?;
    let decoded = net.decode(tape, h)?;
    let total = tape.chamfer(decoded, obs)?;
    Ok(SampleLoss {
        total,
        multi_step: tape.scalar_value(total),
        constraint: 0.0,
    })
}

fn transition_loss(
    net: &Net,
    tape: &mut Tape,
    data: &Dataset,
    traj: usize,
    t: usize,
    kind: BaselineKind,
) -> Result<SampleLoss, TrainError> {
    let tr = &data.trajectories[traj];
    let o0 = cloud_var(tape, &tr.states[t].positions);
    let o1 = cloud_var(tape, &tr.states[t + 1].positions);
    let flat: Vec<f64> = tr.actions[t].0.iter().flat_map(|v| v.iter().copied()).collect();
    let a = tape.constant(Tensor::from_shape_vec((1, flat.len()), flat).expect("action row"));
    let h0 = net.encode(tape, o0)?;
    let h1 = net.encode(tape, o1)?;
    let total = match kind {
        BaselineKind::Forward => {
            let pred = net.forward_model(tape, h0, a)?;
            tape.mse(pred, h1)?
        }
        BaselineKind::Inverse => {
            let pred = net.inverse_model(tape, h0, h1)?;
            tape.mse(pred, a)?
        }
        BaselineKind::Autoencoder => unreachable!("autoencoder samples are single observations"),
    };
    Ok(SampleLoss {
        total,
        multi_step: tape.scalar_value(total),
        constraint: 0.0,
    })
}

/// Mini-batch Adam over `samples`, one tape per sample with gradients
/// averaged over the batch.
fn optimize<S, F, V>(
    params: &mut ModelParams,
    trainable: &[Component],
    samples: &[S],
    cfg: &TrainConfig,
    kind: &str,
    beta_of: impl Fn(usize) -> f64,
    sample_loss: F,
    mut validate: V,
) -> Result<LossReport, TrainError>
where
    F: Fn(&Net, &mut Tape, &S, f64) -> Result<SampleLoss, TrainError>,
    V: FnMut(&ModelParams) -> Result<Option<(f64, usize)>, TrainError>,
{
    let mut report = LossReport {
        kind: kind.to_string(),
        ..LossReport::default()
    };
    let mut first_epoch = 0;
    if let Some(dir) = &cfg.checkpoint_dir {
        let (ckpt, rep) = (dir.join("model.ckpt"), dir.join("report.json"));
        if ckpt.exists() && rep.exists() {
            let saved: LossReport = serde_json::from_str(&std::fs::read_to_string(&rep)?)?;
            if saved.kind == kind {
                *params = ModelParams::load(&ckpt)?;
                first_epoch = saved.epochs.len();
                report = saved;
                log::info!("{kind}: resuming after epoch {first_epoch}");
            }
        }
    }
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = report.steps.len();
    for epoch in first_epoch..cfg.epochs {
        let clock = Instant::now();
        let beta = beta_of(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let take = cfg.max_samples.unwrap_or(order.len()).min(order.len());
        let (mut e_ms, mut e_c, mut e_tot, mut e_n, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in order[..take].chunks(cfg.batch) {
            let mut grads = Vec::new();
            let (mut b_ms, mut b_c, mut b_tot, mut b_n) = (0.0, 0.0, 0.0, 0usize);
            for &i in batch {
                let mut tape = Tape::new();
                let net = params.bind(&mut tape, trainable);
                match outcome(sample_loss(&net, &mut tape, &samples[i], beta))? {
                    Outcome::Skipped(why) => {
                        log::warn!("{kind}: epoch {epoch} sample {i} skipped: {why}");
                        skipped += 1;
                    }
                    Outcome::Done(s) => {
                        let total = tape.scalar_value(s.total);
                        if !total.is_finite() {
                            return Err(TrainError::NonFinite {
                                what: "loss",
                                epoch,
                                step,
                            });
                        }
                        accumulate(&mut grads, net.grads(&tape.backward(s.total)?));
                        b_ms += s.multi_step;
                        b_c += s.constraint;
                        b_tot += total;
                        b_n += 1;
                    }
                }
            }
            if b_n == 0 {
                continue;
            }
            let inv = 1.0 / b_n as f64;
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|x| x * inv);
            }
            let norm = clip_grad_norm(&mut grads, cfg.clip);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    step,
                });
            }
            adam.step(params, &grads)?;
            let (ms, c) = (b_ms * inv, b_c * inv);
            report.steps.push(StepLog {
                epoch,
                step,
                beta,
                multi_step: ms,
                constraint: c,
                total: b_tot * inv,
                samples: b_n,
            });
            step += 1;
            e_ms += b_ms;
            e_c += b_c;
            e_tot += b_tot;
            e_n += b_n;
        }
        if e_n == 0 {
            return Err(TrainError::AllFailed(epoch));
        }
        let inv = 1.0 / e_n as f64;
        let (ms, c) = (e_ms * inv, e_c * inv);
        report.epochs.push(EpochLog {
            epoch,
            beta,
            multi_step: ms,
            constraint: c,
            total: e_tot * inv,
            samples: e_n,
            skipped,
            seconds: clock.elapsed().as_secs_f64(),
        });
        log::info!(
            "{kind}: epoch {epoch} beta {beta:.4} multi-step {ms:.5} constraint {c:.5} ({e_n} samples, {skipped} skipped, {:.1}s)",
            clock.elapsed().as_secs_f64()
        );
        if cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0 {
            if let Some((metric, samples)) = validate(params)? {
                log::info!("{kind}: epoch {epoch} validation {metric:.5}");
                report.validation.push(ValLog { epoch, metric, samples });
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            params.save(&dir.join("model.ckpt"))?;
            std::fs::write(dir.join("report.json"), report.to_json()?)?;
        }
    }
    Ok(report)
}

fn validation_metric(
    params: &ModelParams,
    sim: &Arc<Simulator>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Option<(f64, usize)>, TrainError> {
    let windows = data.split_windows(SplitPart::Val, cfg.k);
    let mut sum = 0.0;
    let mut n = 0;
    for w in &windows {
        if let Some(m) = window_metric(params, sim, data, w, &cfg.regulator)? {
            sum += m;
            n += 1;
        }
    }
    Ok((n > 0).then(|| (sum / n as f64, n)))
}

/// Trains encoder and decoder through regulation and simulated rollouts.
/// With `cfg.regulator.penetration_loss == false` the constraint loss is
/// identically zero and penetrating points are only projected.
pub fn train_srl(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, LossReport), TrainError> {
    cfg.validate(data.manifest.episode_len)?;
    let sim = data.scene().simulator()?;
    let mut params = ModelParams::init(cfg.arch_for(data), &[Component::Encoder, Component::Decoder], cfg.seed)?;
    let windows = data.split_windows(SplitPart::Train, cfg.k);
    let kind = if cfg.regulator.penetration_loss {
        "srl"
    } else {
        "srl_no_penetration"
    };
    let report = optimize(
        &mut params,
        &[Component::Encoder, Component::Decoder],
        &windows,
        cfg,
        kind,
        |e| beta_schedule(e, cfg.beta0, cfg.lambda),
        |net, tape, w, beta| srl_loss(net, tape, &sim, data, w, cfg, beta),
        |p| validation_metric(p, &sim, data, cfg),
    )?;
    Ok((params, report))
}

/// Trains a baseline. Encoder-only kinds get a decoder fitted afterwards on
/// the frozen encoder, under the same budget.
pub fn train_baseline(
    kind: BaselineKind,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossReport), TrainError> {
    cfg.validate(data.manifest.episode_len)?;
    let sim = data.scene().simulator()?;
    let arch = cfg.arch_for(data);
    match kind {
        BaselineKind::Autoencoder => {
            let mut params = ModelParams::init(arch, &[Component::Encoder, Component::Decoder], cfg.seed)?;
            let windows = data.split_windows(SplitPart::Train, cfg.k);
            let report = optimize(
                &mut params,
                &[Component::Encoder, Component::Decoder],
                &windows,
                cfg,
                "autoencoder",
                |_| 0.0,
                |net, tape, w, _| recon_loss(net, tape, &data.start_state(w).positions),
                |p| validation_metric(p, &sim, data, cfg),
            )?;
            Ok((params, report))
        }
        BaselineKind::Forward | BaselineKind::Inverse => {
            let head = if kind == BaselineKind::Forward {
                Component::Forward
            } else {
                Component::Inverse
            };
            let mut params = ModelParams::init(arch, &[Component::Encoder, head], cfg.seed)?;
            let len = data.manifest.episode_len;
            let transitions: Vec<(usize, usize)> = data
                .manifest
                .split
                .train
                .iter()
                .flat_map(|&t| (0..len).map(move |s| (t, s)))
                .collect();
            let name = if kind == BaselineKind::Forward {
                "forward"
            } else {
                "inverse"
            };
            let mut report = optimize(
                &mut params,
                &[Component::Encoder, head],
                &transitions,
                cfg,
                name,
                |_| 0.0,
                |net, tape, &(t, s), _| transition_loss(net, tape, data, t, s, kind),
                |_| Ok(None),
            )?;
            let decoder = fit_decoder(&mut params, data, cfg)?;
            report.validation = decoder.validation;
            Ok((params, report))
        }
    }
}

/// Fits a fresh decoder on the frozen encoder by Chamfer reconstruction.
pub fn fit_decoder(params: &mut ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<LossReport, TrainError> {
    let sim = data.scene().simulator()?;
    params.remove(Component::Decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0de);
    params.add_component(Component::Decoder, &mut rng)?;
    let windows = data.split_windows(SplitPart::Train, cfg.k);
    optimize(
        params,
        &[Component::Decoder],
        &windows,
        cfg,
        "decoder",
        |_| 0.0,
        |net, tape, w, _| recon_loss(net, tape, &data.start_state(w).positions),
        |p| validation_metric(p, &sim, data, cfg),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_values() {
        assert_eq!(beta_schedule(0, 0.99, 0.9), 0.99);
        assert!((beta_schedule(1, 0.99, 0.9) - 0.891).abs() < 1e-15);
        assert!((beta_schedule(3, 0.99, 0.9) - 0.72171).abs() < 1e-15);
    }

    #[test]
    fn multi_step_weights() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(multi_step_loss(&[a.clone()], &[a.clone()], 0.99).unwrap(), 0.0);
        // chamfer(a, b) = 2 for a unit offset
        assert_eq!(multi_step_loss(&[a.clone()], &[b.clone()], 0.5).unwrap(), 2.0);
        let c = vec![Vec3::new(1.0 / 2f64.sqrt(), 0.0, 0.0)];
        let two = multi_step_loss(&[a.clone(), a.clone()], &[c.clone(), c], 0.99).unwrap();
        assert!((two - 1.99).abs() < 1e-12);
        assert!(matches!(
            multi_step_loss(&[a.clone()], &[a.clone(), a], 1.0),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn total_loss_endpoints() {
        assert_eq!(total_loss(2.0, 4.0, 1.0), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn config_bounds() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(8).is_ok());
        assert!(cfg.validate(7).is_err());
        assert!(TrainConfig {
            gamma: 0.0,
            ..cfg.clone()
        }
        .validate(8)
        .is_err());
        assert!(TrainConfig {
            beta0: 1.5,
            ..cfg.clone()
        }
        .validate(8)
        .is_err());
        assert!(TrainConfig { lambda: 1.2, ..cfg }.validate(8).is_err());
    }
}
