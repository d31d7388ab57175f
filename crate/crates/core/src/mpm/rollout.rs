//! Control steps, rollouts and their reverse mode.

use crate::geometry::{Pose, RigidPrimitive};
use crate::{Mat3, Vec3};

use super::grid::Layout;
use super::substep::{self, Kernel, Particles, RigidBar, TransferTotals, Workspace};
use super::{Action, FullState, SimError, Simulator};

/// Adjoint of a [`FullState`]. Rigid poses carry a translation adjoint only.
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub deformation: Vec<Mat3>,
    pub affine: Vec<Mat3>,
    pub rigid_translations: Vec<Vec3>,
}

impl StateAdjoint {
    pub fn zeros(particles: usize, rigids: usize) -> Self {
        Self {
            positions: vec![Vec3::zeros(); particles],
            velocities: vec![Vec3::zeros(); particles],
            deformation: vec![Mat3::zeros(); particles],
            affine: vec![Mat3::zeros(); particles],
            rigid_translations: vec![Vec3::zeros(); rigids],
        }
    }

    /// Adjoint that is nonzero only in the positions.
    pub fn from_positions(positions: Vec<Vec3>, rigids: usize) -> Self {
        let mut out = Self::zeros(positions.len(), rigids);
        out.positions = positions;
        out
    }

    pub fn is_zero(&self) -> bool {
        self.positions.iter().all(|v| *v == Vec3::zeros())
            && self.velocities.iter().all(|v| *v == Vec3::zeros())
            && self.deformation.iter().all(|m| *m == Mat3::zeros())
            && self.affine.iter().all(|m| *m == Mat3::zeros())
            && self.rigid_translations.iter().all(|v| *v == Vec3::zeros())
    }

    fn add_assign(&mut self, other: &StateAdjoint) {
        fn add<T: Copy + std::ops::AddAssign>(a: &mut [T], b: &[T]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.velocities, &other.velocities);
        add(&mut self.deformation, &other.deformation);
        add(&mut self.affine, &other.affine);
        add(&mut self.rigid_translations, &other.rigid_translations);
    }

    fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.velocities.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.deformation.iter().all(|m| m.iter().all(|c| c.is_finite()))
            && self.affine.iter().all(|m| m.iter().all(|c| c.is_finite()))
            && self.rigid_translations.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    fn particles(&self) -> Particles {
        Particles {
            x: self.positions.clone(),
            v: self.velocities.clone(),
            c: self.affine.clone(),
            f: self.deformation.clone(),
        }
    }
}

/// Gradients of a rollout loss with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGrad {
    pub state: StateAdjoint,
    /// One entry per control step, one vector per actuated primitive.
    pub actions: Vec<Vec<Vec3>>,
}

impl Simulator {
    pub(crate) fn kernel(&self) -> Kernel {
        let c = &self.config;
        Kernel {
            layout: Layout::new(c.resolution),
            dx: c.dx(),
            inv_dx: c.resolution as f64,
            dt: c.dt_sub,
            vol: c.particle_volume(),
            mass: c.particle_mass(),
            gravity: Vec3::from(c.gravity),
            bound: c.bound as i64,
            margin: c.contact_margin,
            friction: c.material.friction,
            model: self.constitutive,
        }
    }

    /// Primitives for substep `s` of a control step that starts at `poses`.
    fn substep_primitives(&self, poses: &[Pose], action: &Action, s: usize) -> Vec<RigidPrimitive> {
        let mut prims = self.primitives(poses, Some(action));
        let t = self.config.dt_sub * s as f64;
        for p in prims.iter_mut() {
            p.pose.translation += p.velocity * t;
        }
        prims
    }

    fn advance_poses(&self, poses: &[Pose], action: &Action) -> Vec<Pose> {
        let mut out = poses.to_vec();
        let t = self.config.dt_control();
        for (&k, a) in self.actuated.iter().zip(&action.0) {
            out[k].translation += a * t;
        }
        out
    }

    fn run_step(
        &self,
        state: &FullState,
        action: &Action,
        step: usize,
        ws: &mut Workspace,
        mut traces: Option<&mut Vec<substep::Trace>>,
        mut totals: Option<&mut Vec<TransferTotals>>,
    ) -> Result<FullState, SimError> {
        self.check_inputs(state, action)?;
        let action = action.clamped(self.config.action_bound);
        let k = self.kernel();
        let mut particles = Particles {
            x: state.positions.clone(),
            v: state.velocities.clone(),
            c: state.affine.clone(),
            f: state.deformation.clone(),
        };
        for s in 0..self.config.substeps {
            let prims = self.substep_primitives(&state.rigid_poses, &action, s);
            let mut t = TransferTotals {
                mass: 0.0,
                momentum: Vec3::zeros(),
            };
            let (next, trace) = substep::forward(
                &k,
                ws,
                &particles,
                &prims,
                step,
                traces.is_some(),
                totals.is_some().then_some(&mut t),
            )?;
            if let (Some(tr), Some(trace)) = (traces.as_deref_mut(), trace) {
                tr.push(trace);
            }
            if let Some(tt) = totals.as_deref_mut() {
                tt.push(t);
            }
            particles = next;
        }
        Ok(FullState {
            positions: particles.x,
            velocities: particles.v,
            deformation: particles.f,
            affine: particles.c,
            rigid_poses: self.advance_poses(&state.rigid_poses, &action),
            time: state.time + self.config.dt_control(),
        })
    }

    /// Advances one control step under `action` (clamped to the bounds).
    pub fn step(&self, state: &FullState, action: &Action) -> Result<FullState, SimError> {
        let mut ws = Workspace::new(Layout::new(self.config.resolution));
        self.run_step(state, action, 0, &mut ws, None, None)
    }

    /// Like [`Simulator::step`], also returning grid mass and momentum right
    /// after every P2G.
    pub fn step_with_totals(
        &self,
        state: &FullState,
        action: &Action,
    ) -> Result<(FullState, Vec<(f64, Vec3)>), SimError> {
        let mut ws = Workspace::new(Layout::new(self.config.resolution));
        let mut totals = Vec::with_capacity(self.config.substeps);
        let next = self.run_step(state, action, 0, &mut ws, None, Some(&mut totals))?;
        Ok((next, totals.into_iter().map(|t| (t.mass, t.momentum)).collect()))
    }

    /// States after each of the `actions`.
    pub fn rollout(&self, state: &FullState, actions: &[Action]) -> Result<Vec<FullState>, SimError> {
        if actions.is_empty() {
            return Err(SimError::Shape("rollout needs at least one action".into()));
        }
        let mut ws = Workspace::new(Layout::new(self.config.resolution));
        let mut out: Vec<FullState> = Vec::with_capacity(actions.len());
        for (i, a) in actions.iter().enumerate() {
            let prev = out.last().unwrap_or(state);
            let next = self.run_step(prev, a, i, &mut ws, None, None)?;
            out.push(next);
        }
        Ok(out)
    }

    fn step_vjp_inner(
        &self,
        state: &FullState,
        action: &Action,
        out_bar: &StateAdjoint,
        step: usize,
        ws: &mut Workspace,
    ) -> Result<(StateAdjoint, Vec<Vec3>), SimError> {
        let mut traces = Vec::with_capacity(self.config.substeps);
        self.run_step(state, action, step, ws, Some(&mut traces), None)?;
        let clamped = action.clamped(self.config.action_bound);
        let k = self.kernel();
        let n_rigid = self.shapes.len();
        let dt = self.config.dt_sub;

        let mut translation_bar = out_bar.rigid_translations.clone();
        let mut action_bar = vec![Vec3::zeros(); self.actuated.len()];
        for (j, &kp) in self.actuated.iter().enumerate() {
            action_bar[j] += out_bar.rigid_translations[kp] * self.config.dt_control();
        }

        let mut bar = out_bar.particles();
        for (s, trace) in traces.iter().enumerate().rev() {
            let prims = self.substep_primitives(&state.rigid_poses, &clamped, s);
            let mut rigid = RigidBar {
                velocity: vec![Vec3::zeros(); n_rigid],
                translation: vec![Vec3::zeros(); n_rigid],
            };
            bar = substep::backward(&k, ws, trace, &prims, &bar, &mut rigid);
            for q in 0..n_rigid {
                translation_bar[q] += rigid.translation[q];
            }
            for (j, &kp) in self.actuated.iter().enumerate() {
                action_bar[j] += rigid.velocity[kp] + rigid.translation[kp] * (dt * s as f64);
            }
        }
        let bound = self.config.action_bound;
        for (ab, a) in action_bar.iter_mut().zip(&action.0) {
            for d in 0..3 {
                if a[d].abs() > bound {
                    ab[d] = 0.0;
                }
            }
        }
        let adj = StateAdjoint {
            positions: bar.x,
            velocities: bar.v,
            deformation: bar.f,
            affine: bar.c,
            rigid_translations: translation_bar,
        };
        if !adj.is_finite() || !action_bar.iter().all(|a| a.iter().all(|c| c.is_finite())) {
            return Err(SimError::NonFinite {
                what: "adjoint",
                phase: "backward",
                step,
            });
        }
        Ok((adj, action_bar))
    }

    /// Vector-Jacobian product of [`Simulator::step`]: returns the adjoint of
    /// the input state and of the action.
    pub fn step_vjp(
        &self,
        state: &FullState,
        action: &Action,
        out_bar: &StateAdjoint,
    ) -> Result<(StateAdjoint, Vec<Vec3>), SimError> {
        self.check_adjoint(state, out_bar)?;
        let mut ws = Workspace::new(Layout::new(self.config.resolution));
        self.step_vjp_inner(state, action, out_bar, 0, &mut ws)
    }

    /// Gradient of a loss on the rollout states, given the loss adjoint of
    /// every output state. States are checkpointed once per control step and
    /// substeps are recomputed during the backward sweep.
    pub fn rollout_grad(
        &self,
        state: &FullState,
        actions: &[Action],
        adjoints: &[StateAdjoint],
    ) -> Result<RolloutGrad, SimError> {
        if adjoints.len() != actions.len() {
            return Err(SimError::Shape(format!(
                "{} adjoints for {} actions",
                adjoints.len(),
                actions.len()
            )));
        }
        for a in adjoints {
            self.check_adjoint(state, a)?;
        }
        let mut checkpoints = Vec::with_capacity(actions.len());
        checkpoints.push(state.clone());
        let states = self.rollout(state, actions)?;
        checkpoints.extend(states.into_iter().take(actions.len() - 1));

        let mut ws = Workspace::new(Layout::new(self.config.resolution));
        let mut bar = StateAdjoint::zeros(state.len(), self.shapes.len());
        let mut action_grads = vec![Vec::new(); actions.len()];
        for i in (0..actions.len()).rev() {
            bar.add_assign(&adjoints[i]);
            if bar.is_zero() {
                action_grads[i] = vec![Vec3::zeros(); self.actuated.len()];
                continue;
            }
            let (prev, a_bar) = self.step_vjp_inner(&checkpoints[i], &actions[i], &bar, i, &mut ws)?;
            bar = prev;
            action_grads[i] = a_bar;
        }
        Ok(RolloutGrad {
            state: bar,
            actions: action_grads,
        })
    }

    fn check_adjoint(&self, state: &FullState, adj: &StateAdjoint) -> Result<(), SimError> {
        let n = state.len();
        let ok = adj.positions.len() == n
            && adj.velocities.len() == n
            && adj.deformation.len() == n
            && adj.affine.len() == n
            && adj.rigid_translations.len() == self.shapes.len();
        if ok {
            Ok(())
        } else {
            Err(SimError::Shape(format!(
                "adjoint does not match a state with {n} particles and {} primitives",
                self.shapes.len()
            )))
        }
    }
}
