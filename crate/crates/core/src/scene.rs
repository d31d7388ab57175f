//! Task scenes: a simulator configuration, a box-shaped object sampled as
//! particles, actuated tools placed relative to it, and a reward.
//!
//! Scenes are plain TOML. Two presets ship with the crate: `push` (a sphere
//! pushes a cube of plasticine) and `rope` (two capsules bend a thin bar).
//!
//! ```
//! use softrep::scene::SceneConfig;
//!
//! let push = SceneConfig::preset("push").unwrap();
//! let text = push.to_toml().unwrap();
//! assert_eq!(SceneConfig::from_toml(&text).unwrap(), push);
//! assert_eq!(push.hash().len(), 64);
//! ```

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{Pose, Shape};
use crate::metrics::{chamfer, MetricError};
use crate::models::snap;
use crate::mpm::{FullState, SimConfig, SimError, Simulator};
use crate::Vec3;

const REFERENCE_SEED: u64 = 0x7a59e7;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("unknown scene preset {0:?} (known: push, rope)")]
    UnknownPreset(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("cannot parse scene: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot write scene: {0}")]
    Write(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A kinematic tool placed at `offset` from the object centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub shape: Shape,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub name: String,
    pub particles: usize,
    /// Control steps per trajectory.
    pub episode_len: usize,
    pub object_center: [f64; 3],
    pub object_half_extents: [f64; 3],
    /// Uniform jitter of the object centre per trajectory (x and z only).
    pub center_jitter: f64,
    /// Uniform jitter of each tool position per trajectory (y and z only).
    pub tool_jitter: f64,
    pub tools: Vec<Tool>,
    /// Offset of the reference target from the initial object.
    pub target_shift: [f64; 3],
    /// Uniform jitter of randomized targets around `target_shift` (x and z).
    pub target_jitter: f64,
    pub reward_chamfer: f64,
    pub reward_reach: f64,
    pub sim: SimConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::push()
    }
}

impl SceneConfig {
    pub fn push() -> Self {
        let half = 0.0625;
        let radius = 0.06;
        Self {
            name: "push".into(),
            particles: 512,
            episode_len: 8,
            object_center: [0.45, 0.5, 0.5],
            object_half_extents: [half; 3],
            center_jitter: 0.04,
            tool_jitter: 0.02,
            tools: vec![Tool {
                shape: Shape::Sphere { radius },
                offset: [-(half + radius + 0.01), 0.0, 0.0],
            }],
            target_shift: [0.1, 0.0, 0.0],
            target_jitter: 0.05,
            reward_chamfer: 1.0,
            reward_reach: 0.1,
            sim: SimConfig {
                dt_sub: 5e-4,
                substeps: 10,
                gravity: [0.0; 3],
                ..SimConfig::default()
            },
        }
    }

    pub fn rope() -> Self {
        let half = [0.25, 0.03, 0.03];
        let radius = 0.03;
        let finger = |x: f64| Tool {
            shape: Shape::Capsule {
                half_length: 0.06,
                radius,
            },
            offset: [x, 0.0, -(half[2] + radius + 0.01)],
        };
        Self {
            name: "rope".into(),
            particles: 512,
            episode_len: 8,
            object_center: [0.5, 0.5, 0.45],
            object_half_extents: half,
            center_jitter: 0.03,
            tool_jitter: 0.02,
            tools: vec![finger(-0.1), finger(0.1)],
            target_shift: [0.0, 0.0, 0.08],
            target_jitter: 0.04,
            reward_chamfer: 1.0,
            reward_reach: 0.1,
            sim: SimConfig {
                dt_sub: 5e-4,
                substeps: 10,
                gravity: [0.0; 3],
                ..SimConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self, SceneError> {
        match name {
            "push" => Ok(Self::push()),
            "rope" => Ok(Self::rope()),
            other => Err(SceneError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let scene: Self = toml::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> Result<String, SceneError> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a TOML file, or a preset name when `spec` has no such file.
    pub fn load(spec: &str) -> Result<Self, SceneError> {
        let path = Path::new(spec);
        if path.exists() {
            Self::from_toml(&std::fs::read_to_string(path)?)
        } else {
            Self::preset(spec)
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.sim.validate()?;
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        if self.particles == 0 {
            return bad("particles must be positive");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be positive");
        }
        if self.tools.is_empty() {
            return bad("at least one tool is required");
        }
        if self.object_half_extents.iter().any(|&h| h <= 0.0) {
            return bad("object half extents must be positive");
        }
        let lo = (self.sim.bound + 1) as f64 * self.sim.dx();
        let reach = self.center_jitter + self.target_jitter;
        for d in 0..3 {
            let c = self.object_center[d];
            let h = self.object_half_extents[d];
            let extra = reach + self.target_shift[d].abs();
            if c - h - extra < lo || c + h + extra > 1.0 - lo {
                return bad("object or target leaves the free part of the domain");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scene serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn simulator(&self) -> Result<Arc<Simulator>, SceneError> {
        let shapes = self.tools.iter().map(|t| t.shape).collect();
        let actuated = (0..self.tools.len()).collect();
        Ok(Arc::new(Simulator::new(self.sim.clone(), shapes, actuated)?))
    }

    pub fn action_dim(&self) -> usize {
        3 * self.tools.len()
    }

    /// Object particles and tool poses for the nominal placement.
    pub fn nominal_state<R: Rng>(&self, rng: &mut R) -> FullState {
        self.place(
            rng,
            Vec3::from(self.object_center),
            &vec![Vec3::zeros(); self.tools.len()],
        )
    }

    /// A randomized initial state, every value rounded to `f32`.
    pub fn sample_initial<R: Rng>(&self, rng: &mut R) -> FullState {
        let j = self.center_jitter;
        let mut center = Vec3::from(self.object_center);
        if j > 0.0 {
            center.x += rng.random_range(-j..j);
            center.z += rng.random_range(-j..j);
        }
        let tj = self.tool_jitter;
        let jitter: Vec<Vec3> = self
            .tools
            .iter()
            .map(|_| {
                if tj > 0.0 {
                    Vec3::new(0.0, rng.random_range(-tj..tj), rng.random_range(-tj..tj))
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        self.place(rng, center, &jitter)
    }

    fn place<R: Rng>(&self, rng: &mut R, center: Vec3, tool_jitter: &[Vec3]) -> FullState {
        let h = Vec3::from(self.object_half_extents);
        let positions = (0..self.particles)
            .map(|_| {
                let u = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                (center + u.component_mul(&h)).map(snap)
            })
            .collect();
        let poses = self
            .tools
            .iter()
            .zip(tool_jitter)
            .map(|(t, j)| Pose::from_translation((center + Vec3::from(t.offset) + j).map(snap)))
            .collect();
        FullState::at_rest(positions, poses)
    }

    /// The initial object shifted by `target_shift`.
    pub fn reference_target(&self, initial: &FullState) -> Vec<Vec3> {
        shifted(&initial.positions, Vec3::from(self.target_shift))
    }

    /// A fixed target: the nominal object, sampled with a fixed seed,
    /// shifted by `target_shift`.
    pub fn reference_cloud(&self) -> Vec<Vec3> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
        self.reference_target(&self.nominal_state(&mut rng))
    }

    /// The initial object shifted by a jittered `target_shift`.
    pub fn sample_target<R: Rng>(&self, rng: &mut R, initial: &FullState) -> Vec<Vec3> {
        let mut s = Vec3::from(self.target_shift);
        let j = self.target_jitter;
        if j > 0.0 {
            s.x += rng.random_range(-j..j);
            s.z += rng.random_range(-j..j);
        }
        shifted(&initial.positions, s)
    }

    /// Reward of a state: object term plus tool-reach term.
    pub fn reward(&self, state: &FullState, target: &[Vec3]) -> Result<f64, SceneError> {
        Ok(self.object_reward(&state.positions, target)? - self.reward_reach * self.reach(state))
    }

    /// `-reward_chamfer * chamfer(points, target)`.
    pub fn object_reward(&self, points: &[Vec3], target: &[Vec3]) -> Result<f64, SceneError> {
        Ok(-self.reward_chamfer * chamfer(points, target)?)
    }

    /// Distance from the mean tool position to the object centroid.
    pub fn reach(&self, state: &FullState) -> f64 {
        (tool_center(state) - centroid(&state.positions)).norm()
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64
}

pub fn tool_center(state: &FullState) -> Vec3 {
    let poses = &state.rigid_poses;
    poses.iter().fold(Vec3::zeros(), |a, p| a + p.translation) / poses.len().max(1) as f64
}

fn shifted(points: &[Vec3], s: Vec3) -> Vec<Vec3> {
    points.iter().map(|p| p + s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_are_valid_and_distinct() {
        let push = SceneConfig::push();
        let rope = SceneConfig::rope();
        push.validate().unwrap();
        rope.validate().unwrap();
        assert_ne!(push.hash(), rope.hash());
        assert_eq!(rope.action_dim(), 6);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let s = SceneConfig::from_toml("name = \"small\"\nparticles = 64\n").unwrap();
        assert_eq!(s.particles, 64);
        assert_eq!(s.tools, SceneConfig::push().tools);
    }

    #[test]
    fn initial_state_is_on_f32_grid_and_outside_tools() {
        let scene = SceneConfig::push();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = scene.simulator().unwrap();
        for _ in 0..10 {
            let s = scene.sample_initial(&mut rng);
            s.validate().unwrap();
            assert!(s.positions.iter().all(|p| p.iter().all(|&c| snap(c) == c)));
            let prims = sim.primitives(&s.rigid_poses, None);
            assert!(s.positions.iter().all(|p| prims.iter().all(|r| r.distance(p) > 0.0)));
        }
    }

    #[test]
    fn reward_is_zero_at_target_with_tool_at_centroid() {
        let mut scene = SceneConfig::push();
        scene.reward_reach = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = scene.sample_initial(&mut rng);
        assert_eq!(scene.reward(&s, &s.positions).unwrap(), 0.0);
        assert!(scene.reward(&s, &scene.reference_target(&s)).unwrap() < 0.0);
    }
}
