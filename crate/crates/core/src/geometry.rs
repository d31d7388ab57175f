//! Rigid primitives, their signed distance fields, and the minimum
//! displacement that moves a point out of a union of primitives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Mat3, Vec3};

/// Points with `sdf >= margin - FEASIBLE_TOL` are treated as already outside.
pub const FEASIBLE_TOL: f64 = 1e-9;
/// Round cap of the sequential projection fallback.
pub const PROJECTION_ROUNDS: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("margin must be non-negative, got {0}")]
    NegativeMargin(f64),
    #[error("could not reach a feasible point; worst residual penetration {residual:.3e}")]
    Infeasible { residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Segment along the local y axis from `-half_length` to `+half_length`.
    Capsule {
        half_length: f64,
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
}

impl Shape {
    fn validate(&self) -> Result<(), GeometryError> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Capsule { half_length, radius } => half_length > 0.0 && radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidPrimitive(format!(
                "non-positive dimension in {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if !(err < 1e-9) {
            return Err(GeometryError::InvalidPrimitive(format!(
                "rotation is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPrimitive {
    pub shape: Shape,
    pub pose: Pose,
    /// World-frame linear velocity, used by grid contact.
    pub velocity: Vec3,
}

impl RigidPrimitive {
    pub fn new(shape: Shape, pose: Pose) -> Result<Self, GeometryError> {
        shape.validate()?;
        Ok(Self {
            shape,
            pose,
            velocity: Vec3::zeros(),
        })
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self, GeometryError> {
        Self::new(Shape::Sphere { radius }, Pose::from_translation(center))
    }

    pub fn capsule(center: Vec3, half_length: f64, radius: f64) -> Result<Self, GeometryError> {
        Self::new(Shape::Capsule { half_length, radius }, Pose::from_translation(center))
    }

    pub fn cuboid(center: Vec3, half_extents: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(Shape::Box { half_extents }, Pose::from_translation(center))
    }

    /// Signed distance and its gradient (unit length except on the medial
    /// axis, where some valid unit subgradient is returned).
    pub fn sdf(&self, p: &Vec3) -> (f64, Vec3) {
        let q = self.pose.to_local(p);
        let (d, g) = local_sdf(&self.shape, &q);
        (d, self.pose.rotation * g)
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        local_sdf(&self.shape, &self.pose.to_local(p)).0
    }

    /// Hessian of the signed distance (zero where the field is piecewise
    /// linear, e.g. inside a box).
    pub fn sdf_hessian(&self, p: &Vec3) -> Mat3 {
        let q = self.pose.to_local(p);
        let h = local_hessian(&self.shape, &q);
        self.pose.rotation * h * self.pose.rotation.transpose()
    }
}

/// Evaluates one primitive's signed distance field at `point`.
pub fn sdf_eval(primitive: &RigidPrimitive, point: &Vec3) -> (f64, Vec3) {
    primitive.sdf(point)
}

fn unit_or_x(v: Vec3) -> (f64, Vec3) {
    let n = v.norm();
    if n > 0.0 {
        (n, v / n)
    } else {
        (0.0, Vec3::x())
    }
}

fn local_sdf(shape: &Shape, q: &Vec3) -> (f64, Vec3) {
    match *shape {
        Shape::Sphere { radius } => {
            let (n, g) = unit_or_x(*q);
            (n - radius, g)
        }
        Shape::Capsule { half_length, radius } => {
            let c = Vec3::new(0.0, q.y.clamp(-half_length, half_length), 0.0);
            let (n, g) = unit_or_x(q - c);
            (n - radius, g)
        }
        Shape::Box { half_extents } => {
            let b = Vec3::from(half_extents);
            let d = q.abs() - b;
            let outside = d.map(|v| v.max(0.0));
            let out_norm = outside.norm();
            if out_norm > 0.0 {
                let dir = outside.zip_map(q, |o, qi| o * qi.signum());
                (out_norm, dir / out_norm)
            } else {
                let axis = d.imax();
                let mut g = Vec3::zeros();
                g[axis] = if q[axis] < 0.0 { -1.0 } else { 1.0 };
                (d[axis], g)
            }
        }
    }
}

fn local_hessian(shape: &Shape, q: &Vec3) -> Mat3 {
    let curved = |v: Vec3, tangent_dims: Mat3| -> Mat3 {
        let n = v.norm();
        if n > 0.0 {
            let g = v / n;
            (tangent_dims - g * g.transpose()) / n
        } else {
            Mat3::zeros()
        }
    };
    match *shape {
        Shape::Sphere { .. } => curved(*q, Mat3::identity()),
        Shape::Capsule { half_length, .. } => {
            if q.y.abs() < half_length {
                let v = Vec3::new(q.x, 0.0, q.z);
                curved(v, Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 1.0)))
            } else {
                let c = Vec3::new(0.0, q.y.clamp(-half_length, half_length), 0.0);
                curved(q - c, Mat3::identity())
            }
        }
        Shape::Box { half_extents } => {
            let d = q.abs() - Vec3::from(half_extents);
            if d.iter().all(|&v| v <= 0.0) {
                return Mat3::zeros();
            }
            let active = d.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let offset = d.zip_map(q, |di, qi| di.max(0.0) * qi.signum());
            curved(offset, Mat3::from_diagonal(&active))
        }
    }
}

/// Minimum displacement moving a point outside every primitive by `margin`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDisplacement {
    pub displacement: Vec3,
    /// Euclidean length of `displacement`.
    pub cost: f64,
    /// Primitives whose offset surface the exit point lies on.
    pub active: Vec<usize>,
}

impl ExitDisplacement {
    fn none() -> Self {
        Self {
            displacement: Vec3::zeros(),
            cost: 0.0,
            active: Vec::new(),
        }
    }
}

fn is_feasible(primitives: &[RigidPrimitive], y: &Vec3, margin: f64) -> bool {
    primitives.iter().all(|r| r.distance(y) >= margin - FEASIBLE_TOL)
}

fn worst_penetration(primitives: &[RigidPrimitive], y: &Vec3, margin: f64) -> f64 {
    primitives.iter().map(|r| margin - r.distance(y)).fold(0.0, f64::max)
}

/// Closest point to `p` lying on the `margin`-offset surfaces of all
/// primitives in `set`, by iterating minimum-norm steps against the
/// linearized constraints.
fn solve_active_set(primitives: &[RigidPrimitive], set: &[usize], p: &Vec3, start: Vec3, margin: f64) -> Option<Vec3> {
    let k = set.len();
    let mut y = start;
    for _ in 0..200 {
        let mut a = DMatrix::<f64>::zeros(k, 3);
        let mut r = DVector::<f64>::zeros(k);
        let mut residual = 0.0_f64;
        for (row, &idx) in set.iter().enumerate() {
            let (d, g) = primitives[idx].sdf(&y);
            for c in 0..3 {
                a[(row, c)] = g[c];
            }
            // linearized constraint: d + g.(y' - y) = margin, with y' = p + A^T mu
            r[row] = margin - d + g.dot(&y) - g.dot(p);
            residual = residual.max((margin - d).abs());
        }
        let aat = &a * a.transpose();
        let mu = aat.lu().solve(&r)?;
        let step = a.transpose() * mu;
        let next = p + Vec3::new(step[0], step[1], step[2]);
        let moved = (next - y).norm();
        y = next;
        if !y.iter().all(|v| v.is_finite()) {
            return None;
        }
        if moved < 1e-15 && residual < 1e-13 {
            break;
        }
    }
    let ok = set.iter().all(|&i| (primitives[i].distance(&y) - margin).abs() < 1e-10);
    ok.then_some(y)
}

fn sequential_projection(primitives: &[RigidPrimitive], p: &Vec3, margin: f64) -> Vec3 {
    let mut y = *p;
    for _ in 0..PROJECTION_ROUNDS {
        let mut moved = false;
        for r in primitives {
            let (d, g) = r.sdf(&y);
            if d < margin - FEASIBLE_TOL {
                y += (margin - d) * g;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    y
}

fn active_subsets(n: usize, violated: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let max_size = n.min(3);
    for mask in 1u32..(1u32 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() <= max_size && set.iter().any(|i| violated.contains(i)) {
            out.push(set);
        }
    }
    out
}

/// Minimum-length displacement taking `point` to `sdf >= margin` for every
/// primitive.
///
/// A single penetrated sphere or capsule is resolved in closed form along the
/// field gradient. Otherwise every active set of up to three offset surfaces
/// is solved for its closest point and the cheapest feasible candidate wins;
/// round-robin projection is kept as a last feasible fallback.
pub fn min_exit_displacement(
    primitives: &[RigidPrimitive],
    point: &Vec3,
    margin: f64,
) -> Result<ExitDisplacement, GeometryError> {
    if !(margin >= 0.0) {
        return Err(GeometryError::NegativeMargin(margin));
    }
    let violated: Vec<usize> = primitives
        .iter()
        .enumerate()
        .filter(|(_, r)| r.distance(point) < margin - FEASIBLE_TOL)
        .map(|(i, _)| i)
        .collect();
    if violated.is_empty() {
        return Ok(ExitDisplacement::none());
    }

    let mut best: Option<(f64, Vec3, Vec<usize>)> = None;
    let consider = |best: &mut Option<(f64, Vec3, Vec<usize>)>, y: Vec3, active: Vec<usize>| {
        if !is_feasible(primitives, &y, margin) {
            return;
        }
        let cost = (y - point).norm();
        if best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
            *best = Some((cost, y, active));
        }
    };

    // Closed-form single-surface exits.
    for (i, r) in primitives.iter().enumerate() {
        let (d, g) = r.sdf(point);
        if d < margin - FEASIBLE_TOL {
            consider(&mut best, point + (margin - d) * g, vec![i]);
        }
    }
    // Any feasible point is at least as far as the deepest single exit.
    let lower_bound = violated
        .iter()
        .map(|&i| margin - primitives[i].distance(point))
        .fold(0.0, f64::max);
    let settled = best.as_ref().is_some_and(|(c, _, _)| *c <= lower_bound * (1.0 + 1e-14));
    if !settled {
        let fallback = sequential_projection(primitives, point, margin);
        let starts: Vec<Vec3> = std::iter::once(*point)
            .chain(std::iter::once(fallback))
            .chain(primitives.iter().map(|r| {
                let (d, g) = r.sdf(point);
                point + (margin - d).max(0.0) * g
            }))
            .collect();
        for set in active_subsets(primitives.len(), &violated) {
            if set.len() == 1 {
                continue;
            }
            for start in &starts {
                if let Some(y) = solve_active_set(primitives, &set, point, *start, margin) {
                    consider(&mut best, y, set.clone());
                }
            }
        }
        let active = primitives
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.distance(&fallback) - margin).abs() < 1e-9)
            .map(|(i, _)| i)
            .collect();
        consider(&mut best, fallback, active);
    }

    match best {
        Some((cost, y, active)) => Ok(ExitDisplacement {
            displacement: y - point,
            cost,
            active,
        }),
        None => Err(GeometryError::Infeasible {
            residual: worst_penetration(primitives, &sequential_projection(primitives, point, margin), margin),
        }),
    }
}

/// Jacobian of the exit point `point + displacement` with respect to `point`,
/// by implicit differentiation of the optimality conditions
/// `y = p + sum_i mu_i grad_i(y)`, `sdf_i(y) = margin` over the active set.
/// Returns the identity for points that needed no displacement.
pub fn exit_jacobian(primitives: &[RigidPrimitive], point: &Vec3, exit: &ExitDisplacement) -> Mat3 {
    if exit.active.is_empty() || exit.cost == 0.0 {
        return Mat3::identity();
    }
    let y = point + exit.displacement;
    let k = exit.active.len();
    let grads: Vec<Vec3> = exit.active.iter().map(|&i| primitives[i].sdf(&y).1).collect();
    // multipliers by least squares on displacement = G mu
    let mut g = DMatrix::<f64>::zeros(3, k);
    for (c, gi) in grads.iter().enumerate() {
        for r in 0..3 {
            g[(r, c)] = gi[r];
        }
    }
    let d = DVector::from_column_slice(exit.displacement.as_slice());
    let mu = match (g.transpose() * &g).lu().solve(&(g.transpose() * d)) {
        Some(mu) => mu,
        None => return tangent_projector(&grads),
    };
    let mut m = Mat3::identity();
    for (j, &i) in exit.active.iter().enumerate() {
        m -= mu[j] * primitives[i].sdf_hessian(&y);
    }
    let n = 3 + k;
    let mut kkt = DMatrix::<f64>::zeros(n, n);
    for r in 0..3 {
        for c in 0..3 {
            kkt[(r, c)] = m[(r, c)];
        }
        for j in 0..k {
            kkt[(r, 3 + j)] = -g[(r, j)];
            kkt[(3 + j, r)] = g[(r, j)];
        }
    }
    let Some(inv) = kkt.try_inverse() else {
        return tangent_projector(&grads);
    };
    let mut jac = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            jac[(r, c)] = inv[(r, c)];
        }
    }
    if jac.iter().all(|v| v.is_finite()) {
        jac
    } else {
        tangent_projector(&grads)
    }
}

fn tangent_projector(grads: &[Vec3]) -> Mat3 {
    let mut p = Mat3::identity();
    for g in grads {
        p -= g * g.transpose();
    }
    p
}
