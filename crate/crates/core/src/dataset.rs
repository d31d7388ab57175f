//! Trajectory datasets: generation in a scene, on-disk persistence and
//! replay validation.
//!
//! A dataset directory holds `manifest.json` plus one little-endian `f32`
//! blob per array:
//!
//! | file               | layout                                   |
//! |--------------------|------------------------------------------|
//! | `positions.f32`    | `[traj, step, particle, 3]`              |
//! | `velocities.f32`   | `[traj, step, particle, 3]`              |
//! | `deformation.f32`  | `[traj, step, particle, 9]` (row-major)  |
//! | `affine.f32`       | `[traj, step, particle, 9]` (row-major)  |
//! | `tools.f32`        | `[traj, step, tool, 3]` (translations)   |
//! | `actions.f32`      | `[traj, step - 1, tool, 3]`              |
//! | `rewards.f32`      | `[traj, step - 1]`                       |
//! | `targets.f32`      | `[traj, particle, 3]`                    |
//!
//! `step` runs over the initial state and every successor, so it has
//! `episode_len + 1` entries. All stored values are exactly representable
//! in `f32`, so a dataset loaded from disk equals the one generated.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::metrics::chamfer_grad;
use crate::models::snap;
use crate::mpm::{Action, FullState, SimError, Simulator, StateAdjoint};
use crate::pool::parallel_map;
use crate::scene::{centroid, tool_center, SceneConfig, SceneError};
use crate::{Mat3, Vec3};

const FORMAT: &str = "softrep-dataset 1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("blob {name}: expected {expected} values, found {found}")]
    Blob {
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("trajectory {traj} does not replay: step {step} differs from the simulator")]
    Replay { traj: usize, step: usize },
    #[error("gave up after {0} consecutive simulator failures")]
    TooManyFailures(usize),
    #[error("invalid generation settings: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub trajectories: usize,
    /// Share of trajectories driven by uniformly random actions.
    pub random_fraction: f64,
    pub seed: u64,
    /// Gradient-ascent iterations on the action sequence for the other
    /// trajectories.
    pub opt_iters: usize,
    /// Step of each iteration as a fraction of the action bound.
    pub opt_step: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            random_fraction: 0.3,
            seed: 0,
            opt_iters: 3,
            opt_step: 0.5,
        }
    }
}

/// Train/validation/test trajectory indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffled 10:1:1 split.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((n as f64) / 12.0).round() as usize;
        let held = if n >= 3 { held.max(1) } else { 0 };
        let test = idx.split_off(n - held);
        let val = idx.split_off(n - 2 * held);
        let (mut train, mut val, mut test) = (idx, val, test);
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }

    pub fn get(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (train, val, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Initial state followed by one state per action.
    pub states: Vec<FullState>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub target: Vec<Vec3>,
    pub random: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub trajectories: usize,
    pub episode_len: usize,
    pub particles: usize,
    pub tools: usize,
    pub generation: GenConfig,
    pub scene_hash: String,
    pub scene: SceneConfig,
    pub split: Split,
    pub random: Vec<bool>,
    /// Trajectories discarded and resampled after a simulator failure.
    pub resampled: usize,
    /// Blob name to shape.
    pub blobs: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

/// A training or evaluation sample: `start` state, `k` actions and the
/// `k` ground-truth successors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub k: usize,
}

impl Dataset {
    pub fn scene(&self) -> &SceneConfig {
        &self.manifest.scene
    }

    /// All windows of length `k` in the given trajectories.
    pub fn windows(&self, trajs: &[usize], k: usize) -> Vec<Window> {
        let len = self.manifest.episode_len;
        if k == 0 || k > len {
            return Vec::new();
        }
        trajs
            .iter()
            .flat_map(|&traj| (0..=len - k).map(move |start| Window { traj, start, k }))
            .collect()
    }

    pub fn split_windows(&self, part: SplitPart, k: usize) -> Vec<Window> {
        self.windows(self.manifest.split.get(part), k)
    }

    pub fn start_state(&self, w: &Window) -> &FullState {
        &self.trajectories[w.traj].states[w.start]
    }

    pub fn window_actions(&self, w: &Window) -> &[Action] {
        &self.trajectories[w.traj].actions[w.start..w.start + w.k]
    }

    pub fn window_truth(&self, w: &Window) -> &[FullState] {
        &self.trajectories[w.traj].states[w.start + 1..=w.start + w.k]
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        let t = &self.trajectories;
        let states = || t.iter().flat_map(|tr| tr.states.iter());
        write_blob(
            dir,
            "positions",
            states().flat_map(|s| s.positions.iter().flat_map(|p| p.iter().copied())),
        )?;
        write_blob(
            dir,
            "velocities",
            states().flat_map(|s| s.velocities.iter().flat_map(|p| p.iter().copied())),
        )?;
        write_blob(
            dir,
            "deformation",
            states().flat_map(|s| s.deformation.iter().flat_map(row_major)),
        )?;
        write_blob(
            dir,
            "affine",
            states().flat_map(|s| s.affine.iter().flat_map(row_major)),
        )?;
        write_blob(
            dir,
            "tools",
            states().flat_map(|s| s.rigid_poses.iter().flat_map(|p| p.translation.iter().copied())),
        )?;
        write_blob(
            dir,
            "actions",
            t.iter().flat_map(|tr| {
                tr.actions
                    .iter()
                    .flat_map(|a| a.0.iter().flat_map(|v| v.iter().copied()))
            }),
        )?;
        write_blob(dir, "rewards", t.iter().flat_map(|tr| tr.rewards.iter().copied()))?;
        write_blob(
            dir,
            "targets",
            t.iter().flat_map(|tr| tr.target.iter().flat_map(|p| p.iter().copied())),
        )?;
        Ok(())
    }

    /// Loads a dataset and replays `replay_fraction` of its trajectories
    /// (at least one) through the simulator.
    pub fn load(dir: &Path, replay_fraction: f64) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if m.format != FORMAT || m.dtype != "f32le" {
            return Err(DatasetError::Manifest(format!(
                "unsupported format {} / {}",
                m.format, m.dtype
            )));
        }
        if m.scene.hash() != m.scene_hash {
            return Err(DatasetError::Manifest(
                "scene hash does not match the embedded scene".into(),
            ));
        }
        let (nt, steps, n, tools) = (m.trajectories, m.episode_len + 1, m.particles, m.tools);
        let pos = read_blob(dir, "positions", nt * steps * n * 3)?;
        let vel = read_blob(dir, "velocities", nt * steps * n * 3)?;
        let def = read_blob(dir, "deformation", nt * steps * n * 9)?;
        let aff = read_blob(dir, "affine", nt * steps * n * 9)?;
        let tl = read_blob(dir, "tools", nt * steps * tools * 3)?;
        let act = read_blob(dir, "actions", nt * (steps - 1) * tools * 3)?;
        let rew = read_blob(dir, "rewards", nt * (steps - 1))?;
        let tgt = read_blob(dir, "targets", nt * n * 3)?;
        let dt = m.scene.sim.dt_control();
        let vec3 = |b: &[f64], i: usize| Vec3::new(b[3 * i], b[3 * i + 1], b[3 * i + 2]);
        let mat3 = |b: &[f64], i: usize| Mat3::from_fn(|r, c| b[9 * i + 3 * r + c]);
        let mut trajectories = Vec::with_capacity(nt);
        for t in 0..nt {
            let states = (0..steps)
                .map(|s| {
                    let base = (t * steps + s) * n;
                    let tb = (t * steps + s) * tools;
                    FullState {
                        positions: (0..n).map(|i| vec3(&pos, base + i)).collect(),
                        velocities: (0..n).map(|i| vec3(&vel, base + i)).collect(),
                        deformation: (0..n).map(|i| mat3(&def, base + i)).collect(),
                        affine: (0..n).map(|i| mat3(&aff, base + i)).collect(),
                        rigid_poses: (0..tools).map(|q| Pose::from_translation(vec3(&tl, tb + q))).collect(),
                        time: s as f64 * dt,
                    }
                })
                .collect();
            let actions = (0..steps - 1)
                .map(|s| {
                    Action(
                        (0..tools)
                            .map(|q| vec3(&act, (t * (steps - 1) + s) * tools + q))
                            .collect(),
                    )
                })
                .collect();
            trajectories.push(Trajectory {
                states,
                actions,
                rewards: rew[t * (steps - 1)..(t + 1) * (steps - 1)].to_vec(),
                target: (0..n).map(|i| vec3(&tgt, t * n + i)).collect(),
                random: m.random.get(t).copied().unwrap_or(false),
            });
        }
        let data = Self {
            manifest: m,
            trajectories,
        };
        data.verify_replay(replay_fraction)?;
        Ok(data)
    }

    /// Replays a deterministic sample of trajectories and checks every
    /// stored successor bit for bit.
    pub fn verify_replay(&self, fraction: f64) -> Result<(), DatasetError> {
        let nt = self.trajectories.len();
        if nt == 0 || fraction <= 0.0 {
            return Ok(());
        }
        let count = ((nt as f64 * fraction).ceil() as usize).clamp(1, nt);
        let mut idx: Vec<usize> = (0..nt).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.manifest.generation.seed ^ 0x5eed));
        let sim = self.manifest.scene.simulator()?;
        for &t in &idx[..count] {
            let tr = &self.trajectories[t];
            let replay = sim.rollout(&tr.states[0], &tr.actions)?;
            for (s, (a, b)) in replay.iter().zip(&tr.states[1..]).enumerate() {
                if !same_state(&rounded(a, 0.0), b) {
                    return Err(DatasetError::Replay { traj: t, step: s + 1 });
                }
            }
        }
        Ok(())
    }
}

fn same_state(a: &FullState, b: &FullState) -> bool {
    let bits = |x: &f64, y: &f64| x.to_bits() == y.to_bits();
    a.positions
        .iter()
        .zip(&b.positions)
        .all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| bits(x, y)))
        && a.velocities
            .iter()
            .zip(&b.velocities)
            .all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| bits(x, y)))
        && a.deformation
            .iter()
            .zip(&b.deformation)
            .all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| bits(x, y)))
        && a.affine
            .iter()
            .zip(&b.affine)
            .all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| bits(x, y)))
        && a.rigid_poses
            .iter()
            .zip(&b.rigid_poses)
            .all(|(p, q)| p.translation.iter().zip(q.translation.iter()).all(|(x, y)| bits(x, y)))
}

fn row_major(m: &Mat3) -> impl Iterator<Item = f64> + '_ {
    (0..9).map(move |i| m[(i / 3, i % 3)])
}

/// Every field rounded to `f32`; `time` is replaced.
pub fn rounded(s: &FullState, time: f64) -> FullState {
    FullState {
        positions: s.positions.iter().map(|p| p.map(snap)).collect(),
        velocities: s.velocities.iter().map(|p| p.map(snap)).collect(),
        deformation: s.deformation.iter().map(|m| m.map(snap)).collect(),
        affine: s.affine.iter().map(|m| m.map(snap)).collect(),
        rigid_poses: s
            .rigid_poses
            .iter()
            .map(|p| Pose {
                rotation: p.rotation,
                translation: p.translation.map(snap),
            })
            .collect(),
        time,
    }
}

fn write_blob(dir: &Path, name: &str, values: impl Iterator<Item = f64>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.f32")))?);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_blob(dir: &Path, name: &'static str, expected: usize) -> Result<Vec<f64>, DatasetError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(dir.join(format!("{name}.f32")))?).read_to_end(&mut bytes)?;
    if bytes.len() != 4 * expected {
        return Err(DatasetError::Blob {
            name,
            expected,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reward of `state` and its gradient with respect to particle positions
/// and tool translations.
pub fn reward_adjoint(
    scene: &SceneConfig,
    state: &FullState,
    target: &[Vec3],
) -> Result<(f64, StateAdjoint), DatasetError> {
    let n = state.len();
    let tools = state.rigid_poses.len();
    let (d, ga, _) = chamfer_grad(&state.positions, target).map_err(SceneError::from)?;
    let mut adj = StateAdjoint::zeros(n, tools);
    for (a, g) in adj.positions.iter_mut().zip(&ga) {
        *a = -scene.reward_chamfer * g;
    }
    let diff = tool_center(state) - centroid(&state.positions);
    let reach = diff.norm();
    if reach > 0.0 {
        let u = diff / reach * scene.reward_reach;
        for a in &mut adj.positions {
            *a += u / n as f64;
        }
        for a in &mut adj.rigid_translations {
            *a -= u / tools as f64;
        }
    }
    Ok((-scene.reward_chamfer * d - scene.reward_reach * reach, adj))
}

fn random_actions<R: Rng>(rng: &mut R, len: usize, tools: usize, bound: f64) -> Vec<Action> {
    (0..len)
        .map(|_| {
            Action(
                (0..tools)
                    .map(|_| {
                        Vec3::new(
                            rng.random_range(-bound..bound),
                            rng.random_range(-bound..bound),
                            rng.random_range(-bound..bound),
                        )
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Improves an action sequence by normalized gradient ascent on the summed
/// reward through the simulator.
pub fn optimize_actions(
    sim: &Simulator,
    scene: &SceneConfig,
    initial: &FullState,
    target: &[Vec3],
    actions: &mut [Action],
    iters: usize,
    step: f64,
) -> Result<(), DatasetError> {
    let bound = scene.sim.action_bound;
    for _ in 0..iters {
        let states = sim.rollout(initial, actions)?;
        let adjoints = states
            .iter()
            .map(|s| reward_adjoint(scene, s, target).map(|r| r.1))
            .collect::<Result<Vec<_>, _>>()?;
        let grad = sim.rollout_grad(initial, actions, &adjoints)?;
        let peak = grad.actions.iter().flatten().map(|g| g.amax()).fold(0.0, f64::max);
        if !(peak > 0.0) {
            break;
        }
        for (a, g) in actions.iter_mut().zip(&grad.actions) {
            for (ai, gi) in a.0.iter_mut().zip(g) {
                *ai = (*ai + gi * (step * bound / peak)).map(|c| snap(c.clamp(-bound, bound)));
            }
        }
    }
    Ok(())
}

/// Generates one trajectory; `Ok(None)` when the simulator rejects it.
fn generate_one<R: Rng>(
    sim: &Simulator,
    scene: &SceneConfig,
    cfg: &GenConfig,
    random: bool,
    rng: &mut R,
) -> Result<Option<Trajectory>, DatasetError> {
    let initial = scene.sample_initial(rng);
    let target = scene.sample_target(rng, &initial);
    let len = scene.episode_len;
    let bound = scene.sim.action_bound;
    let mut actions = random_actions(rng, len, scene.tools.len(), bound);
    for a in &mut actions {
        for v in &mut a.0 {
            *v = v.map(snap);
        }
    }
    if !random {
        for a in &mut actions {
            for v in &mut a.0 {
                *v *= 0.25;
            }
        }
        match optimize_actions(sim, scene, &initial, &target, &mut actions, cfg.opt_iters, cfg.opt_step) {
            Ok(()) => {}
            Err(DatasetError::Sim(e)) => {
                log::debug!("action optimization failed: {e}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    let states = match sim.rollout(&initial, &actions) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("rollout failed: {e}");
            return Ok(None);
        }
    };
    let dt = scene.sim.dt_control();
    let mut stored = vec![rounded(&initial, 0.0)];
    stored.extend(states.iter().enumerate().map(|(i, s)| rounded(s, (i + 1) as f64 * dt)));
    let rewards = stored[1..]
        .iter()
        .map(|s| scene.reward(s, &target).map(snap))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(Trajectory {
        states: stored,
        actions,
        rewards,
        target: target.iter().map(|p| p.map(snap)).collect(),
        random,
    }))
}

/// Generates `cfg.trajectories` trajectories in `scene`.
pub fn generate_dataset(scene: &SceneConfig, cfg: &GenConfig) -> Result<Dataset, DatasetError> {
    scene.validate()?;
    if !(0.0..=1.0).contains(&cfg.random_fraction) {
        return Err(DatasetError::Config(format!(
            "random_fraction {} not in [0, 1]",
            cfg.random_fraction
        )));
    }
    let sim = scene.simulator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_random = (cfg.trajectories as f64 * cfg.random_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..cfg.trajectories).map(|i| i < n_random).collect();
    kinds.shuffle(&mut rng);
    let jobs: Vec<(usize, bool)> = kinds.iter().copied().enumerate().collect();
    let results = parallel_map(&jobs, |&(i, random)| -> Result<(Trajectory, usize), DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let mut failures = 0;
        loop {
            if let Some(t) = generate_one(&sim, scene, cfg, random, &mut rng)? {
                log::debug!("generated trajectory {}/{}", i + 1, cfg.trajectories);
                return Ok((t, failures));
            }
            failures += 1;
            log::warn!("trajectory {i}: simulator failure, resampling ({failures})");
            if failures >= 20 {
                return Err(DatasetError::TooManyFailures(failures));
            }
        }
    });
    let mut trajectories = Vec::with_capacity(cfg.trajectories);
    let mut resampled = 0;
    for r in results {
        let (t, failures) = r?;
        trajectories.push(t);
        resampled += failures;
    }
    if resampled > 0 {
        log::info!("resampled {resampled} trajectories after simulator failures");
    }
    let (nt, steps, n, tools) = (
        cfg.trajectories,
        scene.episode_len + 1,
        scene.particles,
        scene.tools.len(),
    );
    let blobs = vec![
        ("positions".to_string(), vec![nt, steps, n, 3]),
        ("velocities".to_string(), vec![nt, steps, n, 3]),
        ("deformation".to_string(), vec![nt, steps, n, 9]),
        ("affine".to_string(), vec![nt, steps, n, 9]),
        ("tools".to_string(), vec![nt, steps, tools, 3]),
        ("actions".to_string(), vec![nt, steps - 1, tools, 3]),
        ("rewards".to_string(), vec![nt, steps - 1]),
        ("targets".to_string(), vec![nt, n, 3]),
    ];
    Ok(Dataset {
        manifest: Manifest {
            format: FORMAT.into(),
            dtype: "f32le".into(),
            trajectories: nt,
            episode_len: scene.episode_len,
            particles: n,
            tools,
            generation: cfg.clone(),
            scene_hash: scene.hash(),
            scene: scene.clone(),
            split: Split::new(nt, cfg.seed),
            random: kinds,
            resampled,
            blobs,
        },
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratio_is_ten_one_one() {
        let s = Split::new(200, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (166, 17, 17));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        let s = Split::new(6000, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5000, 500, 500));
    }

    #[test]
    fn windows_cover_every_start() {
        let d = Dataset {
            manifest: Manifest {
                format: FORMAT.into(),
                dtype: "f32le".into(),
                trajectories: 0,
                episode_len: 8,
                particles: 0,
                tools: 1,
                generation: GenConfig::default(),
                scene_hash: String::new(),
                scene: SceneConfig::push(),
                split: Split::new(0, 0),
                random: vec![],
                resampled: 0,
                blobs: vec![],
            },
            trajectories: vec![],
        };
        let w = d.windows(&[3, 5], 7);
        assert_eq!(w.len(), 4);
        assert_eq!(
            w[1],
            Window {
                traj: 3,
                start: 1,
                k: 7
            }
        );
        assert!(d.windows(&[0], 9).is_empty());
    }
}
