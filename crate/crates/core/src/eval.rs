//! Evaluation harnesses: accumulated rollout Chamfer after reconstruction,
//! reward prediction from latents, policy optimization through the
//! simulator on a frozen encoder, and its point-count robustness.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::dataset::{Dataset, SplitPart, Window};
use crate::metrics::{chamfer, points_tensor, MetricError};
use crate::models::{clip_grad_norm, Adam, AdamConfig, Architecture, Component, ModelError, ModelParams};
use crate::mpm::{
    observe, pack_state, rollout_gradient_check, unpack_state, Action, FullState, GradCheckReport, SimError, Simulator,
};
use crate::pool::parallel_map;
use crate::regulator::{regulate, RegulatorConfig, RegulatorError};
use crate::scene::{SceneConfig, SceneError};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Regulator(#[from] RegulatorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no sample could be evaluated")]
    Empty,
    #[error("point count {count} exceeds the {available} particles of the scene")]
    TooManyPoints { count: usize, available: usize },
    #[error("non-finite {what} at MBPO epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("invalid evaluation settings: {0}")]
    Config(String),
}

/// Hex SHA-256 of the JSON form of any configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Per-sample values of one metric with their mean and population standard
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Samples excluded after a simulator or regulator failure.
    pub flagged: usize,
    pub config_hash: String,
    pub wall_time_s: f64,
}

/// Column names of [`EvalReport::write_csv`].
pub const CSV_COLUMNS: [&str; 5] = ["metric", "sample", "value", "mean", "std"];

impl EvalReport {
    pub fn new(metric: &str, values: Vec<f64>, flagged: usize, config_hash: String, wall_time_s: f64) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            metric: metric.to_string(),
            values,
            mean,
            std,
            flagged,
            config_hash,
            wall_time_s,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_COLUMNS)?;
        for (i, v) in self.values.iter().enumerate() {
            out.write_record([
                self.metric.clone(),
                i.to_string(),
                v.to_string(),
                self.mean.to_string(),
                self.std.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<(), EvalError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Maps an observation to a cloud of the simulated particle count.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, obs: &[Vec3]) -> Result<Vec<Vec3>, EvalError>;
}

impl Reconstructor for ModelParams {
    fn reconstruct(&self, obs: &[Vec3]) -> Result<Vec<Vec3>, EvalError> {
        let h = self.encode(&points_tensor(obs))?;
        let d = self.decode(&h)?;
        Ok(d.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }
}

/// Returns the observation itself.
pub struct Verbatim;

impl Reconstructor for Verbatim {
    fn reconstruct(&self, obs: &[Vec3]) -> Result<Vec<Vec3>, EvalError> {
        Ok(obs.to_vec())
    }
}

fn failed(e: &EvalError) -> bool {
    matches!(e, EvalError::Sim(_) | EvalError::Regulator(RegulatorError::Geometry(_)))
}

/// `sum_i chamfer(truth_i, rolled_i)` after reconstructing and regulating
/// the start observation; `None` when the sample cannot be simulated.
pub fn window_metric<M: Reconstructor + ?Sized>(
    model: &M,
    sim: &Arc<Simulator>,
    data: &Dataset,
    w: &Window,
    regulator: &RegulatorConfig,
) -> Result<Option<f64>, EvalError> {
    let run = || -> Result<f64, EvalError> {
        let start = data.start_state(w);
        let decoded = model.reconstruct(&start.positions)?;
        let rigids = sim.primitives(&start.rigid_poses, None);
        let reg = regulate(start, &decoded, &rigids, regulator)?;
        let rolled = sim.rollout(&reg.state, data.window_actions(w))?;
        let mut sum = 0.0;
        for (r, t) in rolled.iter().zip(data.window_truth(w)) {
            sum += chamfer(&t.positions, &r.positions)?;
        }
        Ok(sum)
    };
    match run() {
        Ok(v) => Ok(Some(v)),
        Err(e) if failed(&e) => {
            log::warn!("trajectory {} start {}: {e}", w.traj, w.start);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct TrajConfig<'a> {
    scene: &'a str,
    split: SplitPart,
    k: usize,
    regulator: &'a RegulatorConfig,
}

/// Accumulated rollout Chamfer over every `k`-window of a split.
pub fn eval_traj_recon<M: Reconstructor + ?Sized>(
    model: &M,
    data: &Dataset,
    split: SplitPart,
    k: usize,
    regulator: &RegulatorConfig,
) -> Result<EvalReport, EvalError> {
    let clock = Instant::now();
    let sim = data.scene().simulator()?;
    let windows = data.split_windows(split, k);
    if windows.is_empty() {
        return Err(EvalError::Config(format!("no windows of length {k} in the split")));
    }
    let mut values = Vec::with_capacity(windows.len());
    let mut flagged = 0;
    for m in parallel_map(&windows, |w| window_metric(model, &sim, data, w, regulator)) {
        match m? {
            Some(v) => values.push(v),
            None => flagged += 1,
        }
    }
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let hash = config_hash(&TrajConfig {
        scene: &data.manifest.scene_hash,
        split,
        k,
        regulator,
    });
    Ok(EvalReport::new(
        "traj_recon",
        values,
        flagged,
        hash,
        clock.elapsed().as_secs_f64(),
    ))
}

/// Predicts a scalar reward from an observation.
pub trait RewardPredictor: Sync {
    fn predict(&self, obs: &[Vec3]) -> Result<f64, EvalError>;
}

impl RewardPredictor for ModelParams {
    fn predict(&self, obs: &[Vec3]) -> Result<f64, EvalError> {
        Ok(self.reward(&self.encode(&points_tensor(obs))?)?)
    }
}

impl<F: Fn(&[Vec3]) -> f64 + Sync> RewardPredictor for F {
    fn predict(&self, obs: &[Vec3]) -> Result<f64, EvalError> {
        Ok(self(obs))
    }
}

/// `(observation, label)` pairs of a split: every successor state with the
/// object reward against the scene's fixed reference target.
pub fn reward_samples(data: &Dataset, split: SplitPart) -> Result<Vec<(&FullState, f64)>, EvalError> {
    let scene = data.scene();
    let reference = scene.reference_cloud();
    let mut out = Vec::new();
    for &t in data.manifest.split.get(split) {
        for s in &data.trajectories[t].states[1..] {
            out.push((s, scene.object_reward(&s.positions, &reference)?));
        }
    }
    Ok(out)
}

/// Squared reward-prediction error on every sample of a split.
pub fn eval_reward_pred<P: RewardPredictor + ?Sized>(
    predictor: &P,
    data: &Dataset,
    split: SplitPart,
) -> Result<EvalReport, EvalError> {
    let clock = Instant::now();
    let samples = reward_samples(data, split)?;
    let values = parallel_map(&samples, |(s, label)| {
        Ok::<_, EvalError>((predictor.predict(&s.positions)? - label).powi(2))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let hash = config_hash(&(&data.manifest.scene_hash, split, "object_reward"));
    Ok(EvalReport::new(
        "reward_mse",
        values,
        0,
        hash,
        clock.elapsed().as_secs_f64(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardFitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RewardFitConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Fits a fresh reward head on frozen-encoder latents of the training
/// split. Returns the final training MSE.
pub fn fit_reward_head(params: &mut ModelParams, data: &Dataset, cfg: &RewardFitConfig) -> Result<f64, EvalError> {
    let samples = reward_samples(data, SplitPart::Train)?;
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let d = params.arch().d_latent;
    let mut latents = Tensor::zeros((samples.len(), d));
    let mut labels = Tensor::zeros((samples.len(), 1));
    for (i, (s, r)) in samples.iter().enumerate() {
        let h = params.encode(&points_tensor(&s.positions))?;
        latents.row_mut(i).assign(&ndarray::ArrayView1::from(&h[..]));
        labels[[i, 0]] = *r;
    }
    params.remove(Component::Reward);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    params.add_component(Component::Reward, &mut rng)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch.max(1)) {
            let x = latents.select(ndarray::Axis(0), batch);
            let y = labels.select(ndarray::Axis(0), batch);
            let mut tape = Tape::new();
            let net = params.bind(&mut tape, &[Component::Reward]);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = net.reward(&mut tape, xv)?;
            let loss = tape.mse(pred, yv)?;
            let grads = net.grads(&tape.backward(loss)?);
            adam.step(params, &grads)?;
            sum += tape.scalar_value(loss) * batch.len() as f64;
            count += batch.len();
        }
        last = sum / count as f64;
    }
    Ok(last)
}

/// Policy inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Features {
    /// Encoder latents of the observation and of the target.
    Latent,
    /// Raw positions of a fixed subset of tracked particles and the same
    /// particles in the target.
    Downsample { points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbpoConfig {
    pub epochs: usize,
    /// Control steps per episode.
    pub horizon: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    /// Observe a random subset of this many particles at every step.
    pub obs_points: Option<usize>,
    pub features: Features,
    pub hidden: Vec<usize>,
}

impl Default for MbpoConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            horizon: 10,
            lr: 3e-3,
            clip: 1.0,
            seed: 0,
            obs_points: None,
            features: Features::Latent,
            hidden: vec![256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbpoReport {
    pub seed: u64,
    pub obs_points: Option<usize>,
    /// Mean per-step reward of each epoch's episode.
    pub curve: Vec<f64>,
    pub config_hash: String,
    pub wall_time_s: f64,
}

impl MbpoReport {
    pub fn write_csv<W: Write>(reports: &[MbpoReport], w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "obs_points", "epoch", "reward"])?;
        for r in reports {
            let pts = r.obs_points.map(|p| p.to_string()).unwrap_or_else(|| "all".into());
            for (e, v) in r.curve.iter().enumerate() {
                out.write_record([r.seed.to_string(), pts.clone(), e.to_string(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

struct FeatureBuilder<'a> {
    encoder: Option<&'a ModelParams>,
    target: Vec<Vec3>,
    target_latent: Vec<f64>,
    tracked: Vec<usize>,
}

impl FeatureBuilder<'_> {
    fn build(
        &self,
        state: &FullState,
        prev_action: &[f64],
        obs_points: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, EvalError> {
        let mut f = Vec::new();
        match self.encoder {
            Some(enc) => {
                let obs = observe(state, obs_points.map(|m| (m, &mut *rng)))?;
                f.extend(enc.encode(&points_tensor(&obs))?);
            }
            None => f.extend(self.tracked.iter().flat_map(|&i| state.positions[i].iter().copied())),
        }
        for p in &state.rigid_poses {
            f.extend(p.translation.iter().copied());
        }
        f.extend_from_slice(prev_action);
        match self.encoder {
            Some(_) => f.extend_from_slice(&self.target_latent),
            None => f.extend(self.tracked.iter().flat_map(|&i| self.target[i].iter().copied())),
        }
        Ok(f)
    }
}

/// Reward of the packed state `state` on the tape.
fn reward_on_tape(
    tape: &mut Tape,
    scene: &SceneConfig,
    state: Var,
    n: usize,
    tools: usize,
    target: Var,
) -> Result<Var, AdError> {
    let rows = tape.slice_rows(state, 0, n)?;
    let pos = tape.slice_cols(rows, 0, 3)?;
    let ch = tape.chamfer(pos, target)?;
    let avg_p = tape.constant(Tensor::from_elem((1, n), 1.0 / n as f64));
    let centroid = tape.matmul(avg_p, pos)?;
    let trows = tape.slice_rows(state, n, tools)?;
    let tpos = tape.slice_cols(trows, 0, 3)?;
    let avg_t = tape.constant(Tensor::from_elem((1, tools), 1.0 / tools as f64));
    let tool = tape.matmul(avg_t, tpos)?;
    let diff = tape.sub(tool, centroid)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let reach = tape.sqrt(s)?;
    tape.axpby(-scene.reward_chamfer, ch, -scene.reward_reach, reach)
}

/// Optimizes a policy by differentiating the summed episode reward through
/// the simulator. The encoder (when given) is frozen and its latents enter
/// the policy as constants.
pub fn run_mbpo(encoder: Option<&ModelParams>, scene: &SceneConfig, cfg: &MbpoConfig) -> Result<MbpoReport, EvalError> {
    let clock = Instant::now();
    let hash = config_hash(&(scene.hash(), cfg));
    if cfg.horizon == 0 || cfg.epochs == 0 {
        return Ok(MbpoReport {
            seed: cfg.seed,
            obs_points: cfg.obs_points,
            curve: Vec::new(),
            config_hash: hash,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }
    if let Some(m) = cfg.obs_points {
        if m > scene.particles || m == 0 {
            return Err(EvalError::TooManyPoints {
                count: m,
                available: scene.particles,
            });
        }
    }
    let sim = scene.simulator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = scene.nominal_state(&mut rng);
    let target = scene.reference_target(&initial);
    let n = initial.len();
    let tools = initial.rigid_poses.len();
    let action_dim = scene.action_dim();
    let (builder, feature_width) = match (encoder, cfg.features) {
        (Some(enc), Features::Latent) => {
            let tl = enc.encode(&points_tensor(&target))?;
            let d = tl.len();
            let b = FeatureBuilder {
                encoder: Some(enc),
                target: target.clone(),
                target_latent: tl,
                tracked: Vec::new(),
            };
            (b, 2 * d + 2 * action_dim)
        }
        (_, Features::Downsample { points }) => {
            if points == 0 || points > n {
                return Err(EvalError::TooManyPoints {
                    count: points,
                    available: n,
                });
            }
            let mut tracked = sample(&mut rng, n, points).into_vec();
            tracked.sort_unstable();
            let b = FeatureBuilder {
                encoder: None,
                target: target.clone(),
                target_latent: Vec::new(),
                tracked,
            };
            (b, 6 * points + 2 * action_dim)
        }
        (None, Features::Latent) => {
            return Err(EvalError::Config("latent features need an encoder".into()));
        }
    };
    let arch = Architecture {
        policy_input: feature_width,
        action_dim,
        action_bound: scene.sim.action_bound,
        head_hidden: cfg.hidden.clone(),
        ..Architecture::new(n, 1, action_dim)
    };
    let mut policy = ModelParams::init(arch, &[Component::Policy], cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut obs_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let net = policy.bind(&mut tape, &[Component::Policy]);
        let target_var = tape.constant(points_tensor(&target));
        let mut state = tape.constant(pack_state(&initial));
        let mut prev = vec![0.0; action_dim];
        let mut rewards = Vec::with_capacity(cfg.horizon);
        let mut total: Option<Var> = None;
        for step in 0..cfg.horizon {
            let current = unpack_state(tape.value(state), &initial);
            let f = builder.build(&current, &prev, cfg.obs_points, &mut obs_rng)?;
            let fv = tape.constant(Tensor::from_shape_vec((1, f.len()), f).expect("feature row"));
            let act = net.policy(&mut tape, fv)?;
            prev = tape.value(act).iter().copied().collect();
            let act = tape.reshape(act, tools, 3)?;
            state = tape.sim_step(&sim, &initial, state, act, step)?;
            let r = reward_on_tape(&mut tape, scene, state, n, tools, target_var)?;
            rewards.push(tape.scalar_value(r));
            total = Some(match total {
                None => r,
                Some(t) => tape.add(t, r)?,
            });
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        if !mean.is_finite() {
            return Err(EvalError::NonFinite { what: "reward", epoch });
        }
        curve.push(mean);
        let loss = tape.scale(total.expect("horizon > 0"), -1.0 / cfg.horizon as f64)?;
        let mut grads = net.grads(&tape.backward(loss)?);
        let norm = clip_grad_norm(&mut grads, cfg.clip);
        if !norm.is_finite() {
            return Err(EvalError::NonFinite {
                what: "gradient",
                epoch,
            });
        }
        adam.step(&mut policy, &grads)?;
        log::debug!("mbpo seed {} epoch {epoch}: mean reward {mean:.5}", cfg.seed);
    }
    Ok(MbpoReport {
        seed: cfg.seed,
        obs_points: cfg.obs_points,
        curve,
        config_hash: hash,
        wall_time_s: clock.elapsed().as_secs_f64(),
    })
}

/// [`run_mbpo`] with observations subsampled to each of `counts`.
pub fn robustness_eval(
    encoder: &ModelParams,
    scene: &SceneConfig,
    counts: &[usize],
    cfg: &MbpoConfig,
) -> Result<Vec<MbpoReport>, EvalError> {
    if let Some(&bad) = counts.iter().find(|&&c| c > scene.particles || c == 0) {
        return Err(EvalError::TooManyPoints {
            count: bad,
            available: scene.particles,
        });
    }
    counts
        .iter()
        .map(|&c| {
            let obs_points = (c < scene.particles).then_some(c);
            run_mbpo(
                Some(encoder),
                scene,
                &MbpoConfig {
                    obs_points,
                    ..cfg.clone()
                },
            )
        })
        .collect()
}

/// Size of the gradient check: a shrunken copy of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub particles: usize,
    pub resolution: usize,
    pub steps: usize,
    pub substeps: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            particles: 64,
            resolution: 16,
            steps: 3,
            substeps: 5,
            seed: 0,
            step: 1e-6,
        }
    }
}

/// Finite-difference check of simulator gradients on a random initial state
/// of `scene` under random actions, at the size given by `cfg`.
pub fn scene_gradient_check(scene: &SceneConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport, EvalError> {
    let mut small = scene.clone();
    small.particles = cfg.particles;
    small.sim.resolution = cfg.resolution;
    small.sim.substeps = cfg.substeps;
    // targets are never used here, only the initial state has to fit
    small.target_shift = [0.0; 3];
    small.target_jitter = 0.0;
    small.validate()?;
    let sim = small.simulator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = small.sample_initial(&mut rng);
    let bound = 0.5 * small.sim.action_bound;
    let actions: Vec<Action> = (0..cfg.steps)
        .map(|_| {
            Action(
                (0..small.tools.len())
                    .map(|_| Vec3::from_fn(|_, _| rng.random_range(-bound..bound)))
                    .collect(),
            )
        })
        .collect();
    Ok(rollout_gradient_check(&sim, &state, &actions, cfg.seed, cfg.step)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_definition() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn csv_has_stable_columns() {
        let r = EvalReport::new("x", vec![1.0, 3.0], 0, "h".into(), 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "x,0,1,2,1");
        assert_eq!(lines.count(), 1);
    }
}
