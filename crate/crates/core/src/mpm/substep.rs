//! One MLS-MPM substep and its adjoint.

use crate::geometry::RigidPrimitive;
use crate::{Mat3, Vec3};

use super::grid::{Layout, Stencil, OFFSETS};
use super::material::{Constitutive, MaterialTrace};
use super::SimError;

/// Tangential speeds below this count as sticking.
const STICK_EPS: f64 = 1e-12;

/// Particle fields advanced by a substep.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Particles {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub f: Vec<Mat3>,
}

impl Particles {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            c: vec![Mat3::zeros(); n],
            f: vec![Mat3::zeros(); n],
        }
    }
}

/// Constants shared by every substep of a scene.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel {
    pub layout: Layout,
    pub dx: f64,
    pub inv_dx: f64,
    pub dt: f64,
    pub vol: f64,
    pub mass: f64,
    pub gravity: Vec3,
    pub bound: i64,
    pub margin: f64,
    pub friction: f64,
    pub model: Constitutive,
}

impl Kernel {
    /// `4 / dx²`, the APIC inertia scaling for quadratic splines.
    fn apic(&self) -> f64 {
        4.0 * self.inv_dx * self.inv_dx
    }

    fn is_wall(&self, idx: usize) -> bool {
        let g = self.layout.resolution as i64;
        self.layout
            .coords(idx)
            .iter()
            .any(|&c| c < self.bound || c > g - self.bound)
    }
}

/// Dense grid scratch space, cleared after use over the active nodes only.
pub(crate) struct Workspace {
    mass: Vec<f64>,
    mom: Vec<Vec3>,
    vel: Vec<Vec3>,
    active: Vec<usize>,
    touched: Vec<bool>,
    mass_bar: Vec<f64>,
    mom_bar: Vec<Vec3>,
    vel_bar: Vec<Vec3>,
}

impl Workspace {
    pub fn new(layout: Layout) -> Self {
        let n = layout.len();
        Self {
            mass: vec![0.0; n],
            mom: vec![Vec3::zeros(); n],
            vel: vec![Vec3::zeros(); n],
            active: Vec::new(),
            touched: vec![false; n],
            mass_bar: vec![0.0; n],
            mom_bar: vec![Vec3::zeros(); n],
            vel_bar: vec![Vec3::zeros(); n],
        }
    }

    fn clear(&mut self) {
        for &i in &self.active {
            self.mass[i] = 0.0;
            self.mom[i] = Vec3::zeros();
            self.vel[i] = Vec3::zeros();
            self.mass_bar[i] = 0.0;
            self.mom_bar[i] = Vec3::zeros();
            self.vel_bar[i] = Vec3::zeros();
            self.touched[i] = false;
        }
        self.active.clear();
    }
}

/// What the adjoint needs from one forward substep.
pub(crate) struct Trace {
    input: Particles,
    material: Vec<MaterialTrace>,
    active: Vec<usize>,
    node_mass: Vec<f64>,
    /// Velocity after gravity, before contact and walls.
    node_pre: Vec<Vec3>,
    node_vel: Vec<Vec3>,
}

/// Grid totals right after P2G, for conservation checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTotals {
    pub mass: f64,
    pub momentum: Vec3,
}

/// Velocity of a grid node after contact with one primitive moving at `vb`.
/// Approaching motion loses its normal component and keeps a Coulomb-scaled
/// tangential part; separating motion is left alone.
pub(crate) fn contact(u: &Vec3, vb: &Vec3, n: &Vec3, mu: f64) -> Vec3 {
    let rel = u - vb;
    let vn = rel.dot(n);
    if vn >= 0.0 {
        return *u;
    }
    let t = rel - n * vn;
    let tn = t.norm();
    if tn <= STICK_EPS {
        return *vb;
    }
    let s = 1.0 + mu * vn / tn;
    if s <= 0.0 {
        *vb
    } else {
        vb + t * s
    }
}

/// Adjoint of [`contact`]: returns `(ū, v̄_b, n̄)`.
pub(crate) fn contact_vjp(u: &Vec3, vb: &Vec3, n: &Vec3, mu: f64, o: &Vec3) -> (Vec3, Vec3, Vec3) {
    let rel = u - vb;
    let vn = rel.dot(n);
    if vn >= 0.0 {
        return (*o, Vec3::zeros(), Vec3::zeros());
    }
    let t = rel - n * vn;
    let tn = t.norm();
    if tn <= STICK_EPS {
        return (Vec3::zeros(), *o, Vec3::zeros());
    }
    let s = 1.0 + mu * vn / tn;
    if s <= 0.0 {
        return (Vec3::zeros(), *o, Vec3::zeros());
    }
    // out = vb + s t, with s = 1 + mu vn / |t| and t = rel - (n·rel) n
    let s_bar = t.dot(o);
    let mut t_bar = o * s;
    let tn_bar = -mu * vn * s_bar / (tn * tn);
    t_bar += t * (tn_bar / tn);
    let vn_bar = mu * s_bar / tn - n.dot(&t_bar);
    let rel_bar = t_bar + n * vn_bar;
    let n_bar = -t_bar * vn + rel * vn_bar;
    (rel_bar, o - rel_bar, n_bar)
}

/// Adjoints produced by [`backward`] for the rigid primitives.
pub(crate) struct RigidBar {
    pub velocity: Vec<Vec3>,
    pub translation: Vec<Vec3>,
}

/// Runs one substep. `step` only labels errors.
pub(crate) fn forward(
    k: &Kernel,
    ws: &mut Workspace,
    input: &Particles,
    prims: &[RigidPrimitive],
    step: usize,
    want_trace: bool,
    mut totals: Option<&mut TransferTotals>,
) -> Result<(Particles, Option<Trace>), SimError> {
    let n = input.x.len();
    let mut out = Particles::zeros(n);
    let mut material = Vec::with_capacity(if want_trace { n } else { 0 });
    let apic = k.apic();

    // P2G
    for p in 0..n {
        let (x, v, c, f) = (&input.x[p], &input.v[p], &input.c[p], &input.f[p]);
        let f_trial = (Mat3::identity() + c * k.dt) * f;
        let Some(mt) = k.model.project(&f_trial) else {
            ws.clear();
            return Err(SimError::Inverted { particle: p, step });
        };
        let tau = k.model.kirchhoff(&mt.f_new, &mt.rotation);
        let affine = tau * (-k.dt * k.vol * apic) + c * k.mass;
        out.f[p] = mt.f_new;
        if want_trace {
            material.push(mt);
        }
        let st = Stencil::new(x, k.inv_dx);
        let mv = v * k.mass;
        for o in OFFSETS {
            let idx = k.layout.index(&st.base, o);
            let w = st.weight(o);
            let dpos = st.dpos(o, k.dx);
            if !ws.touched[idx] {
                ws.touched[idx] = true;
                ws.active.push(idx);
            }
            ws.mass[idx] += w * k.mass;
            ws.mom[idx] += (mv + affine * dpos) * w;
        }
    }
    if let Some(t) = totals.as_deref_mut() {
        t.mass = ws.active.iter().map(|&i| ws.mass[i]).sum();
        t.momentum = ws.active.iter().map(|&i| ws.mom[i]).sum();
    }

    // grid update
    for &idx in &ws.active {
        if ws.mass[idx] <= 0.0 {
            ws.mom[idx] = Vec3::zeros();
            continue;
        }
        let mut u = ws.mom[idx] / ws.mass[idx] + k.gravity * k.dt;
        ws.mom[idx] = u;
        if k.is_wall(idx) {
            u = Vec3::zeros();
        } else if !prims.is_empty() {
            let pos = k.layout.position(idx, k.dx);
            for prim in prims {
                let (d, nrm) = prim.sdf(&pos);
                if d < k.margin {
                    u = contact(&u, &prim.velocity, &nrm, k.friction);
                }
            }
        }
        ws.vel[idx] = u;
    }

    // G2P
    let max_disp = k.dx;
    for p in 0..n {
        let x = &input.x[p];
        let st = Stencil::new(x, k.inv_dx);
        let mut v_new = Vec3::zeros();
        let mut b = Mat3::zeros();
        for o in OFFSETS {
            let idx = k.layout.index(&st.base, o);
            let w = st.weight(o);
            let u = ws.vel[idx];
            v_new += u * w;
            b += u * st.dpos(o, k.dx).transpose() * w;
        }
        let disp = v_new.norm() * k.dt;
        if !(disp <= max_disp) {
            let err = if disp.is_finite() {
                SimError::TooFast {
                    particle: p,
                    cells: disp / k.dx,
                    step,
                }
            } else {
                SimError::NonFinite {
                    what: "particle velocity",
                    phase: "forward",
                    step,
                }
            };
            ws.clear();
            return Err(err);
        }
        out.v[p] = v_new;
        out.c[p] = b * apic;
        out.x[p] = x + v_new * k.dt;
        if let Err(e) = super::grid::check_inside(p, &out.x[p]) {
            ws.clear();
            return Err(e);
        }
    }

    let trace = want_trace.then(|| Trace {
        input: input.clone(),
        material,
        active: ws.active.clone(),
        node_mass: ws.active.iter().map(|&i| ws.mass[i]).collect(),
        node_pre: ws.active.iter().map(|&i| ws.mom[i]).collect(),
        node_vel: ws.active.iter().map(|&i| ws.vel[i]).collect(),
    });
    ws.clear();
    Ok((out, trace))
}

/// Pulls the adjoint of a substep's output back to its input. Primitive
/// adjoints are accumulated into `rigid`.
pub(crate) fn backward(
    k: &Kernel,
    ws: &mut Workspace,
    trace: &Trace,
    prims: &[RigidPrimitive],
    out_bar: &Particles,
    rigid: &mut RigidBar,
) -> Particles {
    let input = &trace.input;
    let n = input.x.len();
    let apic = k.apic();
    let mut bar = Particles::zeros(n);

    ws.active.extend_from_slice(&trace.active);
    for (a, &idx) in trace.active.iter().enumerate() {
        ws.touched[idx] = true;
        ws.mass[idx] = trace.node_mass[a];
        ws.mom[idx] = trace.node_pre[a];
        ws.vel[idx] = trace.node_vel[a];
    }

    // G2P
    for p in 0..n {
        let st = Stencil::new(&input.x[p], k.inv_dx);
        let x_bar = out_bar.x[p];
        let v_bar = out_bar.v[p] + x_bar * k.dt;
        let c_bar = out_bar.c[p] * apic;
        let mut xb = x_bar;
        for o in OFFSETS {
            let idx = k.layout.index(&st.base, o);
            let w = st.weight(o);
            let dpos = st.dpos(o, k.dx);
            let u = ws.vel[idx];
            let cd = c_bar * dpos;
            ws.vel_bar[idx] += (v_bar + cd) * w;
            let w_bar = u.dot(&v_bar) + u.dot(&cd);
            xb += st.grad(o, k.inv_dx) * w_bar - c_bar.transpose() * u * w;
        }
        bar.x[p] = xb;
    }

    // grid update
    for &idx in &trace.active {
        let mass = ws.mass[idx];
        if mass <= 0.0 || k.is_wall(idx) {
            continue;
        }
        let mut o = ws.vel_bar[idx];
        let pos = k.layout.position(idx, k.dx);
        let u0 = ws.mom[idx];
        if !prims.is_empty() {
            let mut chain = Vec::with_capacity(prims.len());
            let mut u = u0;
            for (q, prim) in prims.iter().enumerate() {
                let (d, nrm) = prim.sdf(&pos);
                if d < k.margin {
                    chain.push((q, u, nrm));
                    u = contact(&u, &prim.velocity, &nrm, k.friction);
                }
            }
            for &(q, u, nrm) in chain.iter().rev() {
                let prim = &prims[q];
                let (ub, vbb, nb) = contact_vjp(&u, &prim.velocity, &nrm, k.friction, &o);
                rigid.velocity[q] += vbb;
                if nb != Vec3::zeros() {
                    rigid.translation[q] -= prim.sdf_hessian(&pos) * nb;
                }
                o = ub;
            }
        }
        ws.mom_bar[idx] = o / mass;
        ws.mass_bar[idx] = -o.dot(&(u0 - k.gravity * k.dt)) / mass;
    }

    // P2G
    for p in 0..n {
        let (x, v, c, f) = (&input.x[p], &input.v[p], &input.c[p], &input.f[p]);
        let mt = &trace.material[p];
        let tau = k.model.kirchhoff(&mt.f_new, &mt.rotation);
        let affine = tau * (-k.dt * k.vol * apic) + c * k.mass;
        let st = Stencil::new(x, k.inv_dx);
        let mv = v * k.mass;
        let mut v_bar = Vec3::zeros();
        let mut a_bar = Mat3::zeros();
        let mut xb = Vec3::zeros();
        for o in OFFSETS {
            let idx = k.layout.index(&st.base, o);
            let w = st.weight(o);
            let dpos = st.dpos(o, k.dx);
            let mb = ws.mom_bar[idx];
            v_bar += mb * (w * k.mass);
            a_bar += mb * dpos.transpose() * w;
            let w_bar = mb.dot(&(mv + affine * dpos)) + ws.mass_bar[idx] * k.mass;
            xb += st.grad(o, k.inv_dx) * w_bar - affine.transpose() * mb * w;
        }
        bar.x[p] += xb;
        bar.v[p] = v_bar;
        let tau_bar = a_bar * (-k.dt * k.vol * apic);
        let (f_new_bar, r_bar) = k.model.kirchhoff_vjp(&mt.f_new, &mt.rotation, &tau_bar);
        let f_trial = (Mat3::identity() + c * k.dt) * f;
        let f_trial_bar = k.model.project_vjp(&f_trial, mt, &(f_new_bar + out_bar.f[p]), &r_bar);
        bar.f[p] = (Mat3::identity() + c * k.dt).transpose() * f_trial_bar;
        bar.c[p] = a_bar * k.mass + f_trial_bar * f.transpose() * k.dt;
    }
    ws.clear();
    bar
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn contact_cases() {
        let n = Vec3::new(0.0, 1.0, 0.0);
        let vb = Vec3::zeros();
        // separating
        let u = Vec3::new(1.0, 2.0, 0.0);
        assert_eq!(contact(&u, &vb, &n, 0.5), u);
        // approaching with slip
        let u = Vec3::new(1.0, -1.0, 0.0);
        let out = contact(&u, &vb, &n, 0.5);
        assert!((out - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
        // friction strong enough to stick
        assert_eq!(contact(&u, &vb, &n, 2.0), vb);
    }

    #[test]
    fn contact_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = 0.4;
        let mut checked = 0;
        while checked < 200 {
            let u = rand_vec(&mut rng);
            let vb = rand_vec(&mut rng) * 0.3;
            let n = rand_vec(&mut rng).normalize();
            let o = rand_vec(&mut rng);
            let rel = u - vb;
            let vn = rel.dot(&n);
            let tn = (rel - n * vn).norm();
            // stay away from the case switches
            if vn.abs() < 1e-3 || tn < 1e-3 || (1.0 + mu * vn / tn).abs() < 1e-3 {
                continue;
            }
            checked += 1;
            let (ub, vbb, nb) = contact_vjp(&u, &vb, &n, mu, &o);
            let h = 1e-6;
            for d in 0..3 {
                let e = Vec3::ith(d, h);
                let fd = |du: Vec3, dv: Vec3, dn: Vec3| o.dot(&contact(&(u + du), &(vb + dv), &(n + dn), mu));
                let z = Vec3::zeros();
                let gu = (fd(e, z, z) - fd(-e, z, z)) / (2.0 * h);
                let gv = (fd(z, e, z) - fd(z, -e, z)) / (2.0 * h);
                let gn = (fd(z, z, e) - fd(z, z, -e)) / (2.0 * h);
                assert!((gu - ub[d]).abs() < 1e-6, "u {gu} {}", ub[d]);
                assert!((gv - vbb[d]).abs() < 1e-6, "vb {gv} {}", vbb[d]);
                assert!((gn - nb[d]).abs() < 1e-6, "n {gn} {}", nb[d]);
            }
        }
    }
}
