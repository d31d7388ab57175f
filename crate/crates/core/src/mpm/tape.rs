//! Simulator steps as operations on the autodiff tape.
//!
//! A state is packed into a `(N + P) x 24` tensor. Particle rows hold
//! `[x, v, C (row-major), F (row-major)]`; the last `P` rows hold rigid
//! translations in their first three columns. Rotations are constant.

use std::sync::Arc;

use crate::autodiff::{AdError, Op, Tape, Tensor, Var};
use crate::geometry::Pose;
use crate::{Mat3, Vec3};

use super::{Action, FullState, Simulator, StateAdjoint};

pub const STATE_COLS: usize = 24;

fn put_vec(row: &mut [f64], at: usize, v: &Vec3) {
    row[at..at + 3].copy_from_slice(v.as_slice());
}

fn put_mat(row: &mut [f64], at: usize, m: &Mat3) {
    for i in 0..3 {
        for j in 0..3 {
            row[at + 3 * i + j] = m[(i, j)];
        }
    }
}

fn get_vec(t: &Tensor, r: usize, at: usize) -> Vec3 {
    Vec3::new(t[[r, at]], t[[r, at + 1]], t[[r, at + 2]])
}

fn get_mat(t: &Tensor, r: usize, at: usize) -> Mat3 {
    Mat3::from_fn(|i, j| t[[r, at + 3 * i + j]])
}

pub fn pack_state(state: &FullState) -> Tensor {
    let n = state.len();
    let mut t = Tensor::zeros((n + state.rigid_poses.len(), STATE_COLS));
    for p in 0..n {
        let mut row = t.row_mut(p);
        let row = row.as_slice_mut().expect("standard layout");
        put_vec(row, 0, &state.positions[p]);
        put_vec(row, 3, &state.velocities[p]);
        put_mat(row, 6, &state.affine[p]);
        put_mat(row, 15, &state.deformation[p]);
    }
    for (q, pose) in state.rigid_poses.iter().enumerate() {
        for d in 0..3 {
            t[[n + q, d]] = pose.translation[d];
        }
    }
    t
}

fn pack_adjoint(adj: &StateAdjoint) -> Tensor {
    let n = adj.positions.len();
    let mut t = Tensor::zeros((n + adj.rigid_translations.len(), STATE_COLS));
    for p in 0..n {
        let mut row = t.row_mut(p);
        let row = row.as_slice_mut().expect("standard layout");
        put_vec(row, 0, &adj.positions[p]);
        put_vec(row, 3, &adj.velocities[p]);
        put_mat(row, 6, &adj.affine[p]);
        put_mat(row, 15, &adj.deformation[p]);
    }
    for (q, v) in adj.rigid_translations.iter().enumerate() {
        for d in 0..3 {
            t[[n + q, d]] = v[d];
        }
    }
    t
}

fn unpack_adjoint(t: &Tensor, n: usize) -> StateAdjoint {
    StateAdjoint {
        positions: (0..n).map(|p| get_vec(t, p, 0)).collect(),
        velocities: (0..n).map(|p| get_vec(t, p, 3)).collect(),
        affine: (0..n).map(|p| get_mat(t, p, 6)).collect(),
        deformation: (0..n).map(|p| get_mat(t, p, 15)).collect(),
        rigid_translations: (n..t.nrows()).map(|r| get_vec(t, r, 0)).collect(),
    }
}

/// Rebuilds a state from its packed form, taking rotations from `template`.
pub fn unpack_state(t: &Tensor, template: &FullState) -> FullState {
    let n = template.len();
    FullState {
        positions: (0..n).map(|p| get_vec(t, p, 0)).collect(),
        velocities: (0..n).map(|p| get_vec(t, p, 3)).collect(),
        affine: (0..n).map(|p| get_mat(t, p, 6)).collect(),
        deformation: (0..n).map(|p| get_mat(t, p, 15)).collect(),
        rigid_poses: template
            .rigid_poses
            .iter()
            .enumerate()
            .map(|(q, pose)| Pose {
                rotation: pose.rotation,
                translation: get_vec(t, n + q, 0),
            })
            .collect(),
        time: template.time,
    }
}

/// Particle positions of a packed state.
pub fn unpack_positions(t: &Tensor, n: usize) -> Vec<Vec3> {
    (0..n).map(|p| get_vec(t, p, 0)).collect()
}

/// One control step: inputs are a packed state and an `A x 3` action (one
/// row per actuated primitive); the output is the packed next state.
pub struct StepOp {
    sim: Arc<Simulator>,
    template: FullState,
    step: usize,
}

impl StepOp {
    /// `template` supplies the particle count and rigid rotations; `step`
    /// labels errors.
    pub fn new(sim: Arc<Simulator>, template: FullState, step: usize) -> Self {
        Self { sim, template, step }
    }

    fn decode(&self, inputs: &[&Tensor]) -> Result<(FullState, Action), AdError> {
        let rows = self.template.len() + self.template.rigid_poses.len();
        if inputs.len() != 2
            || inputs[0].dim() != (rows, STATE_COLS)
            || inputs[1].dim() != (self.sim.actuated().len(), 3)
        {
            return Err(AdError::Shape {
                op: "sim_step",
                detail: format!(
                    "expected state {rows}x{STATE_COLS} and action {}x3",
                    self.sim.actuated().len()
                ),
            });
        }
        let state = unpack_state(inputs[0], &self.template);
        let action = Action((0..inputs[1].nrows()).map(|r| get_vec(inputs[1], r, 0)).collect());
        Ok((state, action))
    }

    fn kernel_err(&self, e: super::SimError) -> AdError {
        AdError::Kernel {
            op: "sim_step",
            message: format!("control step {}: {e}", self.step),
        }
    }
}

impl Op for StepOp {
    fn name(&self) -> &'static str {
        "sim_step"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (state, action) = self.decode(inputs)?;
        let next = self.sim.step(&state, &action).map_err(|e| self.kernel_err(e))?;
        Ok(pack_state(&next))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (state, action) = self.decode(inputs)?;
        let out_bar = unpack_adjoint(grad, state.len());
        let (in_bar, a_bar) = self
            .sim
            .step_vjp(&state, &action, &out_bar)
            .map_err(|e| self.kernel_err(e))?;
        let mut ab = Tensor::zeros((a_bar.len(), 3));
        for (r, a) in a_bar.iter().enumerate() {
            for d in 0..3 {
                ab[[r, d]] = a[d];
            }
        }
        Ok(vec![Some(pack_adjoint(&in_bar)), Some(ab)])
    }
}

impl Tape {
    /// Records one simulator control step.
    pub fn sim_step(
        &mut self,
        sim: &Arc<Simulator>,
        template: &FullState,
        state: Var,
        action: Var,
        step: usize,
    ) -> Result<Var, AdError> {
        self.apply(StepOp::new(sim.clone(), template.clone(), step), &[state, action])
    }
}

/// Packs an action as an `A x 3` tensor.
pub fn pack_action(action: &Action) -> Tensor {
    let mut t = Tensor::zeros((action.0.len(), 3));
    for (r, a) in action.0.iter().enumerate() {
        for d in 0..3 {
            t[[r, d]] = a[d];
        }
    }
    t
}
