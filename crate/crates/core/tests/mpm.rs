use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softrep::autodiff::{Tape, Tensor};
use softrep::geometry::{Pose, Shape};
use softrep::mpm::{
    compute_grid_mass, observe, pack_action, pack_state, Action, FullState, SimConfig, SimError, Simulator,
    StateAdjoint,
};
use softrep::{Mat3, Vec3};

fn blob(rng: &mut ChaCha8Rng, n: usize, center: Vec3, radius: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm() <= 1.0 {
            out.push(center + p * radius);
        }
    }
    out
}

fn free_config() -> SimConfig {
    SimConfig {
        resolution: 16,
        dt_sub: 5e-4,
        substeps: 5,
        gravity: [0.0; 3],
        ..SimConfig::default()
    }
}

fn empty_scene(config: SimConfig) -> Simulator {
    Simulator::new(config, vec![], vec![]).unwrap()
}

/// Random contact-free state with small velocities and mild deformation.
fn random_state(rng: &mut ChaCha8Rng, n: usize, deform: f64) -> FullState {
    let mut s = FullState::at_rest(blob(rng, n, Vec3::new(0.5, 0.5, 0.5), 0.12), vec![]);
    for p in 0..n {
        s.velocities[p] = Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        s.deformation[p] = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-deform..deform));
        s.affine[p] = Mat3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    }
    s
}

#[test]
fn free_flight_advances_uniformly() {
    let sim = empty_scene(free_config());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = FullState::at_rest(blob(&mut rng, 100, Vec3::new(0.5, 0.5, 0.5), 0.1), vec![]);
    let v = Vec3::new(0.3, -0.2, 0.1);
    s.velocities.iter_mut().for_each(|x| *x = v);
    let next = sim.step(&s, &Action::zeros(0)).unwrap();
    let dt = sim.config().dt_control();
    for p in 0..s.len() {
        assert!((next.positions[p] - (s.positions[p] + v * dt)).norm() < 1e-12);
        assert!((next.velocities[p] - v).norm() < 1e-12);
    }
}

#[test]
fn gravity_adds_one_substep_of_velocity() {
    let config = SimConfig {
        substeps: 1,
        ..SimConfig::default()
    };
    let g = Vec3::from(config.gravity);
    let dt = config.dt_sub;
    let sim = empty_scene(config);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = FullState::at_rest(blob(&mut rng, 200, Vec3::new(0.5, 0.5, 0.5), 0.1), vec![]);
    let next = sim.step(&s, &Action::zeros(0)).unwrap();
    for v in &next.velocities {
        assert!((v - g * dt).norm() < 1e-12);
    }
}

#[test]
fn transfer_conserves_mass_and_momentum() {
    let sim = empty_scene(free_config());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = random_state(&mut rng, 256, 0.05);
    let mass = sim.config().particle_mass();
    for _ in 0..5 {
        let momentum: Vec3 = s.velocities.iter().map(|v| v * mass).sum();
        let (next, totals) = sim.step_with_totals(&s, &Action::zeros(0)).unwrap();
        let (m, p) = totals[0];
        let expected = mass * s.len() as f64;
        assert!((m - expected).abs() <= 1e-12 * expected);
        assert!((p - momentum).norm() <= 1e-10 * momentum.norm());
        s = next;
    }
}

#[test]
fn grid_mass_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = blob(&mut rng, 1000, Vec3::new(0.4, 0.6, 0.5), 0.3);
    let grid = compute_grid_mass(&pts, 32, 0.25).unwrap();
    assert!((grid.total_mass() - 250.0).abs() < 250.0 * 1e-12);
    assert_eq!(compute_grid_mass(&[], 32, 1.0).unwrap().total_mass(), 0.0);
}

#[test]
fn rollout_matches_repeated_steps_bitwise() {
    let sim = empty_scene(SimConfig {
        resolution: 16,
        dt_sub: 5e-4,
        substeps: 5,
        ..SimConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_state(&mut rng, 64, 0.05);
    let actions = vec![Action::zeros(0); 3];
    let traj = sim.rollout(&s, &actions).unwrap();
    let mut manual = s.clone();
    for (i, a) in actions.iter().enumerate() {
        manual = sim.step(&manual, a).unwrap();
        assert_eq!(manual, traj[i]);
    }
    assert_eq!(sim.rollout(&s, &actions).unwrap(), traj);
    assert!(matches!(sim.rollout(&s, &[]), Err(SimError::Shape(_))));
}

#[test]
fn observe_subsamples_without_replacement() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = FullState::at_rest(blob(&mut rng, 500, Vec3::new(0.5, 0.5, 0.5), 0.2), vec![]);
    let all = observe::<ChaCha8Rng>(&s, None).unwrap();
    assert_eq!(all, s.positions);
    let sub = observe(&s, Some((200, &mut rng))).unwrap();
    assert_eq!(sub.len(), 200);
    for (i, p) in sub.iter().enumerate() {
        assert!(s.positions.contains(p));
        assert!(!sub[..i].contains(p));
    }
    assert!(matches!(
        observe(&s, Some((501, &mut rng))),
        Err(SimError::Subsample { .. })
    ));
}

#[test]
fn escaping_particle_is_reported() {
    let sim = empty_scene(free_config());
    let mut s = FullState::at_rest(vec![Vec3::new(0.5, 0.5, 0.999)], vec![]);
    s.velocities[0] = Vec3::new(0.0, 0.0, 1.0);
    // the wall layer stops it; without walls it would leave
    assert!(sim.step(&s, &Action::zeros(0)).is_ok());
    let mut s = FullState::at_rest(vec![Vec3::new(0.5, 0.5, 0.5)], vec![]);
    s.velocities[0] = Vec3::new(0.0, 0.0, 200.0);
    assert!(matches!(sim.step(&s, &Action::zeros(0)), Err(SimError::TooFast { .. })));
}

#[test]
fn zero_adjoint_gives_zero_gradient() {
    let sim = empty_scene(free_config());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = random_state(&mut rng, 32, 0.05);
    let actions = vec![Action::zeros(0); 2];
    let adj = vec![StateAdjoint::zeros(32, 0); 2];
    let g = sim.rollout_grad(&s, &actions, &adj).unwrap();
    assert!(g.state.is_zero());
}

#[test]
fn mean_position_gradient_is_uniform_in_free_flight() {
    let sim = empty_scene(free_config());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50;
    let mut s = FullState::at_rest(blob(&mut rng, n, Vec3::new(0.5, 0.5, 0.5), 0.1), vec![]);
    s.velocities.iter_mut().for_each(|v| *v = Vec3::new(0.2, 0.1, -0.1));
    let actions = vec![Action::zeros(0); 3];
    let mut adj = vec![StateAdjoint::zeros(n, 0); 3];
    adj[2].positions = vec![Vec3::repeat(1.0 / n as f64); n];
    let g = sim.rollout_grad(&s, &actions, &adj).unwrap();
    for p in &g.state.positions {
        assert!((p - Vec3::repeat(1.0 / n as f64)).amax() < 1e-10, "{p}");
    }
}

struct Weights {
    x: Vec<Vec3>,
    v: Vec<Vec3>,
}

fn loss(traj: &[FullState], w: &[Weights]) -> f64 {
    let mut total = 0.0;
    for (s, w) in traj.iter().zip(w) {
        for p in 0..s.len() {
            total += s.positions[p].dot(&w.x[p]) + s.velocities[p].dot(&w.v[p]) * 0.01;
        }
    }
    total
}

fn random_weights(rng: &mut ChaCha8Rng, steps: usize, n: usize) -> Vec<Weights> {
    let mut r = || {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    };
    (0..steps)
        .map(|_| Weights {
            x: (0..n).map(|_| r()).collect(),
            v: (0..n).map(|_| r()).collect(),
        })
        .collect()
}

fn adjoints(w: &[Weights], rigids: usize) -> Vec<StateAdjoint> {
    w.iter()
        .map(|w| {
            let mut a = StateAdjoint::from_positions(w.x.clone(), rigids);
            a.velocities = w.v.iter().map(|v| v * 0.01).collect();
            a
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Relative error with an absolute floor for entries near the
/// finite-difference noise level.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-9
}

/// Central differences of `loss` over every initial position coordinate.
fn position_fd(sim: &Simulator, s: &FullState, actions: &[Action], w: &[Weights], h: f64) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); s.len()];
    for p in 0..s.len() {
        for d in 0..3 {
            let mut sp = s.clone();
            sp.positions[p][d] += h;
            let mut sm = s.clone();
            sm.positions[p][d] -= h;
            let lp = loss(&sim.rollout(&sp, actions).unwrap(), w);
            let lm = loss(&sim.rollout(&sm, actions).unwrap(), w);
            out[p][d] = (lp - lm) / (2.0 * h);
        }
    }
    out
}

#[test]
fn rollout_gradient_matches_finite_differences_elastic() {
    let config = SimConfig {
        resolution: 16,
        dt_sub: 5e-4,
        substeps: 5,
        ..SimConfig::default()
    };
    let sim = empty_scene(config);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_state(&mut rng, 64, 0.03);
    let actions = vec![Action::zeros(0); 3];
    let w = random_weights(&mut rng, 3, 64);
    let g = sim.rollout_grad(&s, &actions, &adjoints(&w, 0)).unwrap();
    let fd = position_fd(&sim, &s, &actions, &w, 1e-6);
    let mut worst = 0.0_f64;
    for p in 0..64 {
        for d in 0..3 {
            worst = worst.max(rel_err(g.state.positions[p][d], fd[p][d]));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:.3e}");
}

#[test]
fn rollout_gradient_matches_finite_differences_yielding() {
    let config = SimConfig {
        resolution: 16,
        dt_sub: 5e-4,
        substeps: 4,
        gravity: [0.0; 3],
        ..SimConfig::default()
    };
    let sim = empty_scene(config);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = random_state(&mut rng, 40, 0.02);
    // well past the yield surface so the return map stays active
    let stretch = Mat3::from_diagonal(&Vec3::new(1.3, 0.9, 0.85));
    s.deformation.iter_mut().for_each(|f| *f = stretch * *f);
    let actions = vec![Action::zeros(0); 2];
    let w = random_weights(&mut rng, 2, 40);
    let g = sim.rollout_grad(&s, &actions, &adjoints(&w, 0)).unwrap();
    let fd = position_fd(&sim, &s, &actions, &w, 1e-6);
    let mut worst = 0.0_f64;
    for p in 0..40 {
        for d in 0..3 {
            worst = worst.max(rel_err(g.state.positions[p][d], fd[p][d]));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:.3e}");

    // deformation and affine adjoints on a few entries
    let h = 1e-6;
    for p in [0, 7, 21] {
        for idx in [0, 4, 5] {
            let mut sp = s.clone();
            sp.deformation[p][idx] += h;
            let mut sm = s.clone();
            sm.deformation[p][idx] -= h;
            let fdv = (loss(&sim.rollout(&sp, &actions).unwrap(), &w) - loss(&sim.rollout(&sm, &actions).unwrap(), &w))
                / (2.0 * h);
            assert!(
                close(g.state.deformation[p][idx], fdv),
                "F {p} {idx}: {} vs {fdv}",
                g.state.deformation[p][idx]
            );
            let mut sp = s.clone();
            sp.affine[p][idx] += h;
            let mut sm = s.clone();
            sm.affine[p][idx] -= h;
            let fdv = (loss(&sim.rollout(&sp, &actions).unwrap(), &w) - loss(&sim.rollout(&sm, &actions).unwrap(), &w))
                / (2.0 * h);
            assert!(
                close(g.state.affine[p][idx], fdv),
                "C {p} {idx}: {} vs {fdv}",
                g.state.affine[p][idx]
            );
        }
    }
}

fn push_scene() -> (Simulator, FullState) {
    let config = SimConfig {
        resolution: 16,
        dt_sub: 5e-4,
        substeps: 5,
        gravity: [0.0; 3],
        ..SimConfig::default()
    };
    let sim = Simulator::new(config, vec![Shape::Sphere { radius: 0.08 }], vec![0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = blob(&mut rng, 60, Vec3::new(0.5, 0.5, 0.5), 0.12);
    let pose = Pose::from_translation(Vec3::new(0.31, 0.52, 0.49));
    let pts = pts
        .into_iter()
        .filter(|p| (p - pose.translation).norm() > 0.1)
        .collect();
    (sim, FullState::at_rest(pts, vec![pose]))
}

#[test]
fn contact_gradient_wrt_actions_matches_finite_differences() {
    let (sim, s) = push_scene();
    let n = s.len();
    let actions = vec![
        Action(vec![Vec3::new(2.0, 0.3, -0.2)]),
        Action(vec![Vec3::new(1.5, -0.4, 0.3)]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random_weights(&mut rng, 2, n);
    let mut adj = adjoints(&w, 1);
    let pose_w = Vec3::new(0.3, -0.7, 0.2);
    adj[1].rigid_translations[0] = pose_w;
    let total = |actions: &[Action]| {
        let traj = sim.rollout(&s, actions).unwrap();
        loss(&traj, &w) + traj[1].rigid_poses[0].translation.dot(&pose_w)
    };
    let g = sim.rollout_grad(&s, &actions, &adj).unwrap();
    // the loss depends on contact at all
    let moved = sim.rollout(&s, &actions).unwrap();
    let rest = sim.rollout(&s, &[Action::zeros(1), Action::zeros(1)]).unwrap();
    assert!(moved[1].positions != rest[1].positions);
    let h = 1e-6;
    for i in 0..2 {
        for d in 0..3 {
            let mut ap = actions.clone();
            ap[i].0[0][d] += h;
            let mut am = actions.clone();
            am[i].0[0][d] -= h;
            let fd = (total(&ap) - total(&am)) / (2.0 * h);
            let an = g.actions[i][0][d];
            assert!(rel_err(an, fd) < 1e-4, "step {i} axis {d}: {an} vs {fd}");
        }
    }
}

#[test]
fn tape_step_matches_direct_step_and_its_vjp() {
    let (sim, s) = push_scene();
    let sim = Arc::new(sim);
    let action = Action(vec![Vec3::new(1.0, 0.5, 0.0)]);
    let mut tape = Tape::new();
    let x = tape.leaf(pack_state(&s));
    let a = tape.leaf(pack_action(&action));
    let y = tape.sim_step(&sim, &s, x, a, 0).unwrap();
    let direct = sim.step(&s, &action).unwrap();
    assert_eq!(tape.value(y), &pack_state(&direct));
    let pos = tape.slice_cols(y, 0, 3).unwrap();
    let total = tape.sum(pos).unwrap();
    let grads = tape.backward(total).unwrap();
    let n = s.len();
    let mut adj = StateAdjoint::zeros(n, 1);
    adj.positions = vec![Vec3::repeat(1.0); n];
    adj.rigid_translations = vec![Vec3::repeat(1.0)];
    let (expect, a_bar) = sim.step_vjp(&s, &action, &adj).unwrap();
    let gx: &Tensor = grads.get(x);
    for p in 0..n {
        for d in 0..3 {
            assert_eq!(gx[[p, d]], expect.positions[p][d]);
        }
    }
    assert_eq!(grads.get(a)[[0, 0]], a_bar[0][0]);
}
