//! Central finite-difference check of rollout gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, FullState, SimError, Simulator, StateAdjoint};
use crate::Vec3;

/// Velocity terms are down-weighted so both parts of the loss have similar
/// magnitude.
const VELOCITY_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of checked coordinates.
    pub entries: usize,
    pub step: f64,
}

/// Random linear functional of every rollout state.
struct Probe {
    x: Vec<Vec<Vec3>>,
    v: Vec<Vec<Vec3>>,
    tools: Vec<Vec<Vec3>>,
}

impl Probe {
    fn new(seed: u64, steps: usize, particles: usize, rigids: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<Vec3> {
            (0..n)
                .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect()
        };
        let x = (0..steps).map(|_| draw(particles)).collect();
        let v = (0..steps).map(|_| draw(particles)).collect();
        let tools = (0..steps).map(|_| draw(rigids)).collect();
        Self { x, v, tools }
    }

    fn loss(&self, states: &[FullState]) -> f64 {
        let mut total = 0.0;
        for (t, s) in states.iter().enumerate() {
            for p in 0..s.len() {
                total += s.positions[p].dot(&self.x[t][p]) + VELOCITY_WEIGHT * s.velocities[p].dot(&self.v[t][p]);
            }
            for (pose, w) in s.rigid_poses.iter().zip(&self.tools[t]) {
                total += pose.translation.dot(w);
            }
        }
        total
    }

    fn adjoints(&self) -> Vec<StateAdjoint> {
        (0..self.x.len())
            .map(|t| {
                let mut a = StateAdjoint::from_positions(self.x[t].clone(), self.tools[t].len());
                a.velocities = self.v[t].iter().map(|w| w * VELOCITY_WEIGHT).collect();
                a.rigid_translations = self.tools[t].clone();
                a
            })
            .collect()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares [`Simulator::rollout_grad`] of a random linear loss on every
/// rollout state against central differences with step `h`, over every
/// initial position coordinate and every action component.
pub fn rollout_gradient_check(
    sim: &Simulator,
    state: &FullState,
    actions: &[Action],
    seed: u64,
    h: f64,
) -> Result<GradCheckReport, SimError> {
    let probe = Probe::new(seed, actions.len(), state.len(), state.rigid_poses.len());
    let grad = sim.rollout_grad(state, actions, &probe.adjoints())?;
    let central = |plus: &FullState, minus: &FullState, ap: &[Action], am: &[Action]| -> Result<f64, SimError> {
        let lp = probe.loss(&sim.rollout(plus, ap)?);
        let lm = probe.loss(&sim.rollout(minus, am)?);
        Ok((lp - lm) / (2.0 * h))
    };
    let mut worst = 0.0_f64;
    let mut entries = 0;
    for p in 0..state.len() {
        for d in 0..3 {
            let mut sp = state.clone();
            sp.positions[p][d] += h;
            let mut sm = state.clone();
            sm.positions[p][d] -= h;
            let fd = central(&sp, &sm, actions, actions)?;
            worst = worst.max(rel_err(grad.state.positions[p][d], fd));
            entries += 1;
        }
    }
    for t in 0..actions.len() {
        for k in 0..actions[t].0.len() {
            for d in 0..3 {
                let mut ap = actions.to_vec();
                ap[t].0[k][d] += h;
                let mut am = actions.to_vec();
                am[t].0[k][d] -= h;
                let fd = central(state, state, &ap, &am)?;
                worst = worst.max(rel_err(grad.actions[t][k][d], fd));
                entries += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        entries,
        step: h,
    })
}
