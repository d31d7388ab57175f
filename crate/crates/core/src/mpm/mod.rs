//! Differentiable MLS-MPM with APIC transfers, fixed-corotated elasticity
//! and von Mises plasticity, coupled to kinematic rigid primitives.
//!
//! Every control step runs `substeps` substeps of P2G, grid update (gravity,
//! rigid contact, sticky walls) and G2P. Actuated primitives move with the
//! commanded velocity. Reverse mode recomputes the substeps of one control
//! step from its checkpointed input state and runs the hand-written adjoints
//! backwards through them.

mod check;
mod grid;
mod material;
mod rollout;
mod substep;
mod tape;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, RigidPrimitive, Shape};
use crate::{Mat3, Vec3};

pub use check::{rollout_gradient_check, GradCheckReport};
pub use grid::{compute_grid_mass, GridField};
pub use material::{cofactor, Constitutive, MaterialParams, MaterialTrace};
pub use rollout::{RolloutGrad, StateAdjoint};
pub use substep::TransferTotals;
pub use tape::{pack_action, pack_state, unpack_positions, unpack_state, StepOp, STATE_COLS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("substep dt {dt:.3e} violates the CFL bound {limit:.3e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("particle {particle} moves {cells:.2} cells in one substep (control step {step})")]
    TooFast { particle: usize, cells: f64, step: usize },
    #[error("particle {index} at {point:?} is outside the unit cube")]
    OutsideDomain { index: usize, point: [f64; 3] },
    #[error("deformation gradient of particle {particle} inverted (control step {step})")]
    Inverted { particle: usize, step: usize },
    #[error("non-finite {what} during {phase} (control step {step})")]
    NonFinite {
        what: &'static str,
        phase: &'static str,
        step: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot subsample {requested} points from {available}")]
    Subsample { requested: usize, available: usize },
}

/// Numerical and physical settings of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub resolution: usize,
    pub dt_sub: f64,
    pub substeps: usize,
    pub gravity: [f64; 3],
    /// Thickness of the sticky wall layer, in cells.
    pub bound: usize,
    /// Contact is applied at grid nodes with `sdf < contact_margin`.
    pub contact_margin: f64,
    /// Per-component bound on commanded velocities.
    pub action_bound: f64,
    /// Particle volume; `None` means `(dx / 2)³`.
    pub particle_volume: Option<f64>,
    /// Courant number for the elastic wave speed check.
    pub cfl: f64,
    pub plastic: bool,
    pub material: MaterialParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            dt_sub: 2e-4,
            substeps: 20,
            gravity: [0.0, -9.8, 0.0],
            bound: 3,
            contact_margin: 0.0,
            action_bound: 4.0,
            particle_volume: None,
            cfl: 0.5,
            plastic: true,
            material: MaterialParams::default(),
        }
    }
}

impl SimConfig {
    pub fn dx(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn dt_control(&self) -> f64 {
        self.dt_sub * self.substeps as f64
    }

    pub fn particle_volume(&self) -> f64 {
        self.particle_volume.unwrap_or_else(|| (0.5 * self.dx()).powi(3))
    }

    pub fn particle_mass(&self) -> f64 {
        self.particle_volume() * self.material.density
    }

    /// Largest stable substep for the elastic wave speed.
    pub fn cfl_limit(&self) -> f64 {
        let (mu, lambda) = self.material.lame();
        let wave = ((lambda + 2.0 * mu) / self.material.density).sqrt();
        self.cfl * self.dx() / wave
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.material.validate().map_err(SimError::Config)?;
        if self.resolution < 8 {
            return Err(SimError::Config(format!(
                "resolution must be >= 8, got {}",
                self.resolution
            )));
        }
        if 2 * self.bound + 2 >= self.resolution {
            return Err(SimError::Config(format!(
                "bound {} leaves no interior in a {}³ grid",
                self.bound, self.resolution
            )));
        }
        if self.substeps == 0 {
            return Err(SimError::Config("substeps must be >= 1".into()));
        }
        if !(self.dt_sub > 0.0) {
            return Err(SimError::Config(format!("dt_sub must be > 0, got {}", self.dt_sub)));
        }
        if !(self.action_bound > 0.0) || !(self.contact_margin >= 0.0) || !(self.cfl > 0.0) {
            return Err(SimError::Config(
                "action_bound and cfl must be > 0, contact_margin >= 0".into(),
            ));
        }
        if let Some(v) = self.particle_volume {
            if !(v > 0.0) {
                return Err(SimError::Config(format!("particle_volume must be > 0, got {v}")));
            }
        }
        let limit = self.cfl_limit();
        if self.dt_sub > limit {
            return Err(SimError::Cfl { dt: self.dt_sub, limit });
        }
        Ok(())
    }
}

/// Complete simulator state: particle fields plus rigid poses.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub deformation: Vec<Mat3>,
    /// APIC affine velocity matrices.
    pub affine: Vec<Mat3>,
    pub rigid_poses: Vec<Pose>,
    pub time: f64,
}

impl FullState {
    /// Particles at rest and undeformed.
    pub fn at_rest(positions: Vec<Vec3>, rigid_poses: Vec<Pose>) -> Self {
        let n = positions.len();
        Self {
            positions,
            velocities: vec![Vec3::zeros(); n],
            deformation: vec![Mat3::identity(); n],
            affine: vec![Mat3::zeros(); n],
            rigid_poses,
            time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.deformation.len() != n || self.affine.len() != n {
            return Err(SimError::Shape(format!(
                "particle fields disagree: {} positions, {} velocities, {} F, {} C",
                n,
                self.velocities.len(),
                self.deformation.len(),
                self.affine.len()
            )));
        }
        let finite = self.positions.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.velocities.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.deformation.iter().all(|m| m.iter().all(|c| c.is_finite()))
            && self.affine.iter().all(|m| m.iter().all(|c| c.is_finite()))
            && self.time.is_finite();
        if !finite {
            return Err(SimError::NonFinite {
                what: "state",
                phase: "validation",
                step: 0,
            });
        }
        for (i, p) in self.positions.iter().enumerate() {
            grid::check_inside(i, p)?;
        }
        if let Some(i) = self.deformation.iter().position(|f| !(f.determinant() > 0.0)) {
            return Err(SimError::Inverted { particle: i, step: 0 });
        }
        Ok(())
    }

    /// Reindexes every particle field: particle `i` of the result is
    /// particle `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            velocities: perm.iter().map(|&i| self.velocities[i]).collect(),
            deformation: perm.iter().map(|&i| self.deformation[i]).collect(),
            affine: perm.iter().map(|&i| self.affine[i]).collect(),
            rigid_poses: self.rigid_poses.clone(),
            time: self.time,
        }
    }
}

/// Velocity command for each actuated primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Action(pub Vec<Vec3>);

impl Action {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Vec3::zeros(); n])
    }

    /// Componentwise clamp to `[-bound, bound]`.
    pub fn clamped(&self, bound: f64) -> Self {
        Self(self.0.iter().map(|a| a.map(|c| c.clamp(-bound, bound))).collect())
    }
}

/// Unordered particle positions, optionally a random subset of `m` of them.
pub fn observe<R: Rng + ?Sized>(state: &FullState, subsample: Option<(usize, &mut R)>) -> Result<Vec<Vec3>, SimError> {
    match subsample {
        None => Ok(state.positions.clone()),
        Some((m, rng)) => {
            let n = state.len();
            if m > n {
                return Err(SimError::Subsample {
                    requested: m,
                    available: n,
                });
            }
            let mut idx = sample(rng, n, m).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| state.positions[i]).collect())
        }
    }
}

/// A scene: simulator settings plus rigid shapes, some of them actuated.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    shapes: Vec<Shape>,
    actuated: Vec<usize>,
    constitutive: Constitutive,
}

impl Simulator {
    pub fn new(config: SimConfig, shapes: Vec<Shape>, actuated: Vec<usize>) -> Result<Self, SimError> {
        config.validate()?;
        if let Some(&bad) = actuated.iter().find(|&&i| i >= shapes.len()) {
            return Err(SimError::Config(format!(
                "actuated primitive {bad} does not exist ({} shapes)",
                shapes.len()
            )));
        }
        let constitutive = Constitutive::new(&config.material, config.plastic);
        Ok(Self {
            config,
            shapes,
            actuated,
            constitutive,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }

    pub fn action_dim(&self) -> usize {
        3 * self.actuated.len()
    }

    /// Primitives at the given poses, with velocities from `action`.
    pub fn primitives(&self, poses: &[Pose], action: Option<&Action>) -> Vec<RigidPrimitive> {
        let mut out: Vec<RigidPrimitive> = self
            .shapes
            .iter()
            .zip(poses)
            .map(|(&shape, &pose)| RigidPrimitive {
                shape,
                pose,
                velocity: Vec3::zeros(),
            })
            .collect();
        if let Some(a) = action {
            for (&k, v) in self.actuated.iter().zip(&a.0) {
                out[k].velocity = *v;
            }
        }
        out
    }

    fn check_inputs(&self, state: &FullState, action: &Action) -> Result<(), SimError> {
        if state.rigid_poses.len() != self.shapes.len() {
            return Err(SimError::Shape(format!(
                "state has {} rigid poses, scene has {} primitives",
                state.rigid_poses.len(),
                self.shapes.len()
            )));
        }
        if action.0.len() != self.actuated.len() {
            return Err(SimError::Shape(format!(
                "action has {} commands, scene actuates {} primitives",
                action.0.len(),
                self.actuated.len()
            )));
        }
        if action.0.iter().any(|a| !a.iter().all(|c| c.is_finite())) {
            return Err(SimError::NonFinite {
                what: "action",
                phase: "forward",
                step: 0,
            });
        }
        Ok(())
    }
}
