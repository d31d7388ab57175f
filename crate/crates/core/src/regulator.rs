//! Projection of decoded point clouds onto physically feasible states.
//!
//! A decoded cloud is clamped into the domain, particles inside rigid bodies
//! are pushed out along their minimum exit displacement (the summed exit
//! lengths are the constraint loss), the result is matched one-to-one to the
//! ground-truth particles, and the matched positions are spliced with the
//! ground truth's velocities, deformation gradients and affine fields.

use std::sync::Arc;

use crate::autodiff::{AdError, Op, Tape, Tensor, Var};
use crate::geometry::{exit_jacobian, min_exit_displacement, GeometryError, RigidPrimitive, FEASIBLE_TOL};
use crate::metrics::{emd_match, points_tensor, tensor_points, MatchResult, MetricError, DEFAULT_MATCH_ITERS};
use crate::mpm::{compute_grid_mass, pack_state, FullState, SimError, STATE_COLS};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum RegulatorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error("decoded cloud has {decoded} points, ground truth has {truth}")]
    SizeMismatch { decoded: usize, truth: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegulatorConfig {
    /// Required clearance from every rigid surface.
    pub margin: f64,
    /// Resolution of the occupancy grid used to gate the exact test.
    pub resolution: usize,
    /// Bidding-round budget of the matching.
    pub match_iters: usize,
    /// Add the matched squared residual to the constraint loss.
    pub include_residual: bool,
    /// When false, penetrating particles are still pushed out so the state
    /// can be simulated, but contribute no loss and pass gradients through
    /// unchanged.
    pub penetration_loss: bool,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            margin: 0.002,
            resolution: 32,
            match_iters: DEFAULT_MATCH_ITERS,
            include_residual: false,
            penetration_loss: true,
        }
    }
}

impl RegulatorConfig {
    /// Decoded clouds are clamped into `[lo, 1 - lo]` per axis.
    pub fn clamp_bound(&self) -> f64 {
        2.0 / self.resolution as f64
    }
}

/// Output of [`resolve_penetration`].
#[derive(Debug, Clone, PartialEq)]
pub struct Penetration {
    pub points: Vec<Vec3>,
    /// Sum of exit lengths.
    pub loss: f64,
    /// Indices of the particles that were moved.
    pub moved: Vec<usize>,
}

/// The spliced feasible state and its constraint loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulatedState {
    pub state: FullState,
    pub constraint_loss: f64,
    pub matching: MatchResult,
    /// Number of particles moved out of rigid bodies.
    pub moved: usize,
}

fn min_sdf(rigids: &[RigidPrimitive], p: &Vec3) -> f64 {
    rigids.iter().map(|r| r.distance(p)).fold(f64::INFINITY, f64::min)
}

fn is_penetrating(rigids: &[RigidPrimitive], p: &Vec3, margin: f64) -> bool {
    min_sdf(rigids, p) < margin - FEASIBLE_TOL
}

/// Particles closer than `margin` to some rigid body, found by testing only
/// particles whose nearest grid node is occupied and lies within
/// `margin + (√3/2)·dx` of a body.
pub fn penetrating_particles(
    rigids: &[RigidPrimitive],
    points: &[Vec3],
    margin: f64,
    resolution: usize,
) -> Result<Vec<usize>, RegulatorError> {
    if rigids.is_empty() || points.is_empty() {
        return Ok(Vec::new());
    }
    let grid = compute_grid_mass(points, resolution, 1.0)?;
    let dx = grid.dx();
    let band = margin + 0.5 * 3f64.sqrt() * dx;
    let dim = resolution as i64 + 3;
    let key = |c: [i64; 3]| (((c[0] + 1) * dim + c[1] + 1) * dim + c[2] + 1) as usize;
    let mut flagged = vec![false; (dim * dim * dim) as usize];
    for (c, _) in grid.occupied() {
        let pos = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * dx;
        if min_sdf(rigids, &pos) < band {
            flagged[key(c)] = true;
        }
    }
    Ok(points
        .iter()
        .enumerate()
        .filter(|(_, p)| flagged[key(grid.nearest_node(p))] && is_penetrating(rigids, p, margin))
        .map(|(i, _)| i)
        .collect())
}

/// Reference all-particle scan for [`penetrating_particles`].
pub fn penetrating_particles_dense(rigids: &[RigidPrimitive], points: &[Vec3], margin: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| is_penetrating(rigids, p, margin))
        .map(|(i, _)| i)
        .collect()
}

/// Moves every penetrating particle by its minimum exit displacement.
pub fn resolve_penetration(
    rigids: &[RigidPrimitive],
    decoded: &[Vec3],
    margin: f64,
    resolution: usize,
) -> Result<Penetration, RegulatorError> {
    let moved = penetrating_particles(rigids, decoded, margin, resolution)?;
    let mut points = decoded.to_vec();
    let mut loss = 0.0;
    for &i in &moved {
        let exit = min_exit_displacement(rigids, &decoded[i], margin)?;
        points[i] += exit.displacement;
        loss += exit.cost;
    }
    Ok(Penetration { points, loss, moved })
}

/// Reorders `points` so that entry `i` is the point matched to ground-truth
/// particle `i`.
pub fn resolve_smoothness(
    ground_truth: &[Vec3],
    points: &[Vec3],
    max_iters: usize,
) -> Result<(Vec<Vec3>, MatchResult), RegulatorError> {
    let m = emd_match(ground_truth, points, max_iters)?;
    let reordered = m.permutation.iter().map(|&j| points[j]).collect();
    Ok((reordered, m))
}

fn clamp_points(points: &[Vec3], lo: f64) -> Vec<Vec3> {
    points.iter().map(|p| p.map(|c| c.clamp(lo, 1.0 - lo))).collect()
}

fn splice(truth: &FullState, positions: Vec<Vec3>) -> FullState {
    FullState {
        positions,
        ..truth.clone()
    }
}

/// Clamps, resolves penetration, matches, and splices the decoded cloud with
/// the ground truth's per-particle attributes and rigid poses.
pub fn regulate(
    truth: &FullState,
    decoded: &[Vec3],
    rigids: &[RigidPrimitive],
    config: &RegulatorConfig,
) -> Result<RegulatedState, RegulatorError> {
    if decoded.len() != truth.len() {
        return Err(RegulatorError::SizeMismatch {
            decoded: decoded.len(),
            truth: truth.len(),
        });
    }
    let clamped = clamp_points(decoded, config.clamp_bound());
    let pen = resolve_penetration(rigids, &clamped, config.margin, config.resolution)?;
    let (reordered, matching) = resolve_smoothness(&truth.positions, &pen.points, config.match_iters)?;
    let mut loss = if config.penetration_loss { pen.loss } else { 0.0 };
    if config.include_residual {
        loss += matching.cost;
    }
    Ok(RegulatedState {
        state: splice(truth, reordered),
        constraint_loss: loss,
        matching,
        moved: pen.moved.len(),
    })
}

struct PenetrationOp {
    rigids: Arc<Vec<RigidPrimitive>>,
    margin: f64,
    resolution: usize,
    straight_through: bool,
}

impl PenetrationOp {
    fn resolve(&self, input: &Tensor) -> Result<(Vec<Vec3>, Penetration), AdError> {
        let pts = tensor_points(input);
        let pen =
            resolve_penetration(&self.rigids, &pts, self.margin, self.resolution).map_err(|e| AdError::Kernel {
                op: "resolve_penetration",
                message: e.to_string(),
            })?;
        Ok((pts, pen))
    }
}

impl Op for PenetrationOp {
    fn name(&self) -> &'static str {
        "resolve_penetration"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(points_tensor(&self.resolve(inputs[0])?.1.points))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut g = grad.clone();
        if self.straight_through {
            return Ok(vec![Some(g)]);
        }
        let (pts, pen) = self.resolve(inputs[0])?;
        for &i in &pen.moved {
            let exit = min_exit_displacement(&self.rigids, &pts[i], self.margin).map_err(|e| AdError::Kernel {
                op: "resolve_penetration",
                message: e.to_string(),
            })?;
            let j = exit_jacobian(&self.rigids, &pts[i], &exit);
            let gi = Vec3::new(grad[[i, 0]], grad[[i, 1]], grad[[i, 2]]);
            let back = j.transpose() * gi;
            for d in 0..3 {
                g[[i, d]] = back[d];
            }
        }
        Ok(vec![Some(g)])
    }
}

struct PenetrationLossOp {
    rigids: Arc<Vec<RigidPrimitive>>,
    margin: f64,
    resolution: usize,
}

impl Op for PenetrationLossOp {
    fn name(&self) -> &'static str {
        "penetration_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let pts = tensor_points(inputs[0]);
        let pen =
            resolve_penetration(&self.rigids, &pts, self.margin, self.resolution).map_err(|e| AdError::Kernel {
                op: "penetration_loss",
                message: e.to_string(),
            })?;
        Ok(Tensor::from_elem((1, 1), pen.loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let pts = tensor_points(inputs[0]);
        let kernel = |e: RegulatorError| AdError::Kernel {
            op: "penetration_loss",
            message: e.to_string(),
        };
        let moved = penetrating_particles(&self.rigids, &pts, self.margin, self.resolution).map_err(kernel)?;
        let mut g = Tensor::zeros(inputs[0].dim());
        for i in moved {
            let exit = min_exit_displacement(&self.rigids, &pts[i], self.margin).map_err(|e| kernel(e.into()))?;
            if exit.cost > 0.0 {
                // d|y - p| / dp at the optimum
                let dir = -exit.displacement / exit.cost;
                for d in 0..3 {
                    g[[i, d]] = dir[d] * grad[[0, 0]];
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

/// Row gather `out[i] = in[index[i]]`.
pub struct GatherRows {
    index: Vec<usize>,
}

impl GatherRows {
    pub fn new(index: Vec<usize>) -> Self {
        Self { index }
    }
}

impl Op for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        if let Some(&bad) = self.index.iter().find(|&&i| i >= x.nrows()) {
            return Err(AdError::Shape {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {} rows", x.nrows()),
            });
        }
        Ok(x.select(ndarray::Axis(0), &self.index))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut g = Tensor::zeros(inputs[0].dim());
        for (r, &i) in self.index.iter().enumerate() {
            let mut row = g.row_mut(i);
            row += &grad.row(r);
        }
        Ok(vec![Some(g)])
    }
}

/// Result of [`regulate_on_tape`].
pub struct TapeRegulated {
    /// Packed state (see [`crate::mpm::pack_state`]).
    pub state: Var,
    /// Constraint loss (`1 x 1`).
    pub loss: Var,
    pub info: RegulatedState,
}

/// [`regulate`] recorded on a tape. `decoded` is an `N x 3` variable; the
/// returned state is differentiable with respect to it through the clamp,
/// the exit projection and the (fixed) matching permutation.
pub fn regulate_on_tape(
    tape: &mut Tape,
    decoded: Var,
    truth: &FullState,
    rigids: &[RigidPrimitive],
    config: &RegulatorConfig,
) -> Result<TapeRegulated, RegulatorError> {
    let n = truth.len();
    if tape.value(decoded).dim() != (n, 3) {
        return Err(RegulatorError::SizeMismatch {
            decoded: tape.value(decoded).nrows(),
            truth: n,
        });
    }
    let lo = config.clamp_bound();
    let clamped = tape.clamp(decoded, lo, 1.0 - lo)?;
    let rigids = Arc::new(rigids.to_vec());
    let resolved = tape.apply(
        PenetrationOp {
            rigids: rigids.clone(),
            margin: config.margin,
            resolution: config.resolution,
            straight_through: !config.penetration_loss,
        },
        &[clamped],
    )?;
    let pen_points = tensor_points(tape.value(resolved));
    let (reordered, matching) = resolve_smoothness(&truth.positions, &pen_points, config.match_iters)?;
    let positions = tape.apply(GatherRows::new(matching.permutation.clone()), &[resolved])?;

    let mut loss = if config.penetration_loss {
        tape.apply(
            PenetrationLossOp {
                rigids,
                margin: config.margin,
                resolution: config.resolution,
            },
            &[clamped],
        )?
    } else {
        tape.scalar(0.0)
    };
    if config.include_residual {
        let target = tape.constant(points_tensor(&truth.positions));
        let diff = tape.sub(positions, target)?;
        let sq = tape.square(diff)?;
        let residual = tape.sum(sq)?;
        loss = tape.add(loss, residual)?;
    }

    // splice: positions on the tape, everything else constant
    let packed = pack_state(truth);
    debug_assert_eq!(packed.ncols(), STATE_COLS);
    let rest = tape.constant(packed.slice(ndarray::s![..n, 3..]).to_owned());
    let mut state = tape.concat_cols(&[positions, rest])?;
    if packed.nrows() > n {
        let rigid_rows = tape.constant(packed.slice(ndarray::s![n.., ..]).to_owned());
        state = tape.concat_rows(&[state, rigid_rows])?;
    }

    let before = tape.value(clamped);
    let after = tape.value(resolved);
    let moved = (0..n).filter(|&i| before.row(i) != after.row(i)).count();
    let info = RegulatedState {
        state: splice(truth, reordered),
        constraint_loss: tape.scalar_value(loss),
        matching,
        moved,
    };
    Ok(TapeRegulated { state, loss, info })
}
