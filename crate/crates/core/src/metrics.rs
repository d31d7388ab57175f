//! Point-cloud distances: Chamfer, an auction-based one-to-one matching, and
//! an exact Hungarian oracle for small instances.

use crate::autodiff::{AdError, Op, Tape, Tensor, Var};
use crate::Vec3;

/// Default bidding-round budget of [`emd_match`].
pub const DEFAULT_MATCH_ITERS: usize = 3000;
/// Size cap of [`matching_oracle`].
pub const ORACLE_MAX: usize = 256;
/// Cells per axis of the nearest-neighbour hash.
const HASH_CELLS: usize = 32;
/// Query-target pair count below which neighbours are found by exhaustive scan.
const BRUTE_FORCE_PAIRS: usize = 1 << 22;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("point cloud {0} is empty")]
    Empty(&'static str),
    #[error("clouds must have equal size, got {a} and {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("exact matching is limited to {max} points, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("max_iters must be >= 1")]
    NoIterations,
    #[error("non-finite coordinate in cloud {0}")]
    NonFinite(&'static str),
}

/// A one-to-one correspondence: `permutation[i]` is the index in `B` matched
/// to `A[i]`; `cost` is the sum of matched squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

/// Uniform hash grid over the bounding box of a cloud.
struct NeighborGrid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    inv_cell: f64,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> NeighborGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-12);
        let cell = extent / HASH_CELLS as f64;
        let inv_cell = 1.0 / cell;
        let dims = [0, 1, 2].map(|d| (((hi[d] - lo[d]) * inv_cell) as usize + 1).min(HASH_CELLS + 1));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(p, &lo, inv_cell, &dims).map(|c| c as usize);
                (c[0] * dims[1] + c[1]) * dims[2] + c[2]
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k]] = i;
            fill[k] += 1;
        }
        Self {
            points,
            lo,
            inv_cell,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    /// Cell coordinates clamped into the grid.
    fn cell_of(p: &Vec3, lo: &Vec3, inv_cell: f64, dims: &[usize; 3]) -> [i64; 3] {
        [0, 1, 2].map(|d| {
            let c = ((p[d] - lo[d]) * inv_cell).floor();
            (c.max(0.0) as i64).min(dims[d] as i64 - 1)
        })
    }

    /// Index and squared distance of the nearest point; ties resolve to the
    /// smallest index.
    fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = Self::cell_of(q, &self.lo, self.inv_cell, &self.dims);
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        let mut best = (usize::MAX, f64::INFINITY);
        for r in 0..=max_ring {
            for i in (c[0] - r).max(0)..=(c[0] + r).min(self.dims[0] as i64 - 1) {
                for j in (c[1] - r).max(0)..=(c[1] + r).min(self.dims[1] as i64 - 1) {
                    let on_shell_ij = (i - c[0]).abs() == r || (j - c[1]).abs() == r;
                    let kr = (c[2] - r).max(0)..=(c[2] + r).min(self.dims[2] as i64 - 1);
                    for k in kr {
                        if !on_shell_ij && (k - c[2]).abs() != r {
                            continue;
                        }
                        let key = ((i as usize) * self.dims[1] + j as usize) * self.dims[2] + k as usize;
                        for &idx in &self.items[self.starts[key]..self.starts[key + 1]] {
                            let d = (self.points[idx] - q).norm_squared();
                            if d < best.1 || (d == best.1 && idx < best.0) {
                                best = (idx, d);
                            }
                        }
                    }
                }
            }
            if best.1 <= self.unvisited_bound(q, &c, r).powi(2) {
                break;
            }
        }
        best
    }

    /// Lower bound on the distance from `q` to any cell outside the cube of
    /// half width `r` around `c`: the nearest of the grid slabs beyond each
    /// face of the cube.
    fn unvisited_bound(&self, q: &Vec3, c: &[i64; 3], r: i64) -> f64 {
        let hi = Vec3::from_fn(|d, _| self.lo[d] + self.dims[d] as f64 * self.cell);
        let slab = |lo: Vec3, hi: Vec3| {
            (0..3)
                .map(|e| (lo[e] - q[e]).max(q[e] - hi[e]).max(0.0).powi(2))
                .sum::<f64>()
        };
        let mut bound = f64::INFINITY;
        for d in 0..3 {
            if c[d] - r > 0 {
                let mut top = hi;
                top[d] = self.lo[d] + (c[d] - r) as f64 * self.cell;
                bound = bound.min(slab(self.lo, top));
            }
            if c[d] + r + 1 < self.dims[d] as i64 {
                let mut bottom = self.lo;
                bottom[d] = self.lo[d] + (c[d] + r + 1) as f64 * self.cell;
                bound = bound.min(slab(bottom, hi));
            }
        }
        (bound.sqrt() - 1e-9 * self.cell).max(0.0)
    }
}

fn check_cloud(p: &[Vec3], name: &'static str) -> Result<(), MetricError> {
    if p.is_empty() {
        return Err(MetricError::Empty(name));
    }
    if !p.iter().all(|v| v.iter().all(|c| c.is_finite())) {
        return Err(MetricError::NonFinite(name));
    }
    Ok(())
}

/// For each point of `queries`, the index of its nearest point in `targets`.
pub fn nearest_neighbors(queries: &[Vec3], targets: &[Vec3]) -> Vec<(usize, f64)> {
    if queries.len() * targets.len() <= BRUTE_FORCE_PAIRS {
        return queries.iter().map(|q| brute_nearest(q, targets)).collect();
    }
    let grid = NeighborGrid::new(targets);
    queries.iter().map(|q| grid.nearest(q)).collect()
}

fn brute_nearest(q: &Vec3, targets: &[Vec3]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, t) in targets.iter().enumerate() {
        let d = (t - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Symmetric Chamfer distance: summed squared nearest-neighbour distances
/// from `a` to `b` plus from `b` to `a`.
///
/// ```
/// use softrep::metrics::chamfer;
/// use softrep::Vec3;
///
/// let a = [Vec3::new(0.0, 0.0, 0.0)];
/// let b = [Vec3::new(1.0, 0.0, 0.0)];
/// assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
/// ```
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    check_cloud(a, "A")?;
    check_cloud(b, "B")?;
    let ab: f64 = nearest_neighbors(a, b).iter().map(|x| x.1).sum();
    let ba: f64 = nearest_neighbors(b, a).iter().map(|x| x.1).sum();
    Ok(ab + ba)
}

/// Gradients of [`chamfer`] with the neighbour assignment held fixed.
pub fn chamfer_grad(a: &[Vec3], b: &[Vec3]) -> Result<(f64, Vec<Vec3>, Vec<Vec3>), MetricError> {
    check_cloud(a, "A")?;
    check_cloud(b, "B")?;
    let mut ga = vec![Vec3::zeros(); a.len()];
    let mut gb = vec![Vec3::zeros(); b.len()];
    let mut ab = 0.0;
    for (i, (j, d)) in nearest_neighbors(a, b).into_iter().enumerate() {
        ab += d;
        let diff = (a[i] - b[j]) * 2.0;
        ga[i] += diff;
        gb[j] -= diff;
    }
    let mut ba = 0.0;
    for (j, (i, d)) in nearest_neighbors(b, a).into_iter().enumerate() {
        ba += d;
        let diff = (b[j] - a[i]) * 2.0;
        gb[j] += diff;
        ga[i] -= diff;
    }
    Ok((ab + ba, ga, gb))
}

/// Reads an `n x 3` tensor as points.
pub fn tensor_points(t: &Tensor) -> Vec<Vec3> {
    t.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// Writes points as an `n x 3` tensor.
pub fn points_tensor(p: &[Vec3]) -> Tensor {
    let mut t = Tensor::zeros((p.len(), 3));
    for (i, v) in p.iter().enumerate() {
        t[[i, 0]] = v.x;
        t[[i, 1]] = v.y;
        t[[i, 2]] = v.z;
    }
    t
}

struct ChamferOp;

impl Op for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        check_points(inputs)?;
        let d = chamfer(&tensor_points(inputs[0]), &tensor_points(inputs[1])).map_err(kernel)?;
        Ok(Tensor::from_elem((1, 1), d))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (_, ga, gb) = chamfer_grad(&tensor_points(inputs[0]), &tensor_points(inputs[1])).map_err(kernel)?;
        let g = grad[[0, 0]];
        Ok(vec![Some(points_tensor(&ga) * g), Some(points_tensor(&gb) * g)])
    }
}

fn check_points(inputs: &[&Tensor]) -> Result<(), AdError> {
    if inputs.len() != 2 || inputs.iter().any(|t| t.ncols() != 3) {
        return Err(AdError::Shape {
            op: "chamfer",
            detail: "expected two n x 3 point tensors".into(),
        });
    }
    Ok(())
}

fn kernel(e: MetricError) -> AdError {
    AdError::Kernel {
        op: "chamfer",
        message: e.to_string(),
    }
}

impl Tape {
    /// Records [`chamfer`] between two `n x 3` point tensors.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(ChamferOp, &[a, b])
    }
}

fn check_pair(a: &[Vec3], b: &[Vec3]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch { a: a.len(), b: b.len() });
    }
    if !a.iter().chain(b).all(|v| v.iter().all(|c| c.is_finite())) {
        return Err(MetricError::NonFinite("A or B"));
    }
    Ok(())
}

fn matching_cost(a: &[Vec3], b: &[Vec3], perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| (a[i] - b[j]).norm_squared())
        .sum()
}

/// Greedy start: each point of `a`, in order, takes its nearest unused point
/// of `b`.
fn greedy_start(a: &[Vec3], b: &[Vec3]) -> Vec<usize> {
    let n = a.len();
    let mut used = vec![false; n];
    let mut perm = vec![usize::MAX; n];
    let nn = nearest_neighbors(a, b);
    for i in 0..n {
        let j = nn[i].0;
        if !used[j] {
            used[j] = true;
            perm[i] = j;
        }
    }
    for i in 0..n {
        if perm[i] == usize::MAX {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, &u) in used.iter().enumerate() {
                if !u {
                    let d = (a[i] - b[j]).norm_squared();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
            used[best.0] = true;
            perm[i] = best.0;
        }
    }
    perm
}

/// Minimum-cost one-to-one matching under squared Euclidean cost, by
/// ε-scaling forward auction warm-started from a greedy nearest-neighbour
/// assignment. `max_iters` bounds the total number of bidding rounds; the
/// cheapest complete assignment seen is returned, so the reported cost never
/// increases with more rounds.
pub fn emd_match(a: &[Vec3], b: &[Vec3], max_iters: usize) -> Result<MatchResult, MetricError> {
    check_pair(a, b)?;
    if max_iters == 0 {
        return Err(MetricError::NoIterations);
    }
    let n = a.len();
    if n == 0 {
        return Ok(MatchResult {
            permutation: vec![],
            cost: 0.0,
        });
    }
    let mut best = greedy_start(a, b);
    let mut best_cost = matching_cost(a, b, &best);
    if best_cost == 0.0 || n == 1 {
        return Ok(MatchResult {
            permutation: best,
            cost: best_cost,
        });
    }

    // persons are points of `a`, objects are points of `b`
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a[i] - b[j]).norm_squared())
        .collect();
    let c_max = cost.iter().cloned().fold(0.0, f64::max);
    // within n·ε of optimal; small enough to recover exact permutations
    let eps_final = (c_max * 1e-13 / n as f64).max(f64::MIN_POSITIVE);
    let mut eps = c_max / 4.0;
    let mut price = vec![0.0_f64; n];
    let mut owner = vec![usize::MAX; n];
    let mut assigned = vec![usize::MAX; n];
    let mut rounds = 0usize;

    'phases: loop {
        owner.iter_mut().for_each(|o| *o = usize::MAX);
        assigned.iter_mut().for_each(|o| *o = usize::MAX);
        let mut unassigned: Vec<usize> = (0..n).collect();
        while !unassigned.is_empty() {
            if rounds == max_iters {
                break 'phases;
            }
            rounds += 1;
            let mut next = Vec::new();
            for &i in &unassigned {
                let row = &cost[i * n..(i + 1) * n];
                let (mut j1, mut v1, mut v2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for j in 0..n {
                    let v = -row[j] - price[j];
                    if v > v1 {
                        v2 = v1;
                        v1 = v;
                        j1 = j;
                    } else if v > v2 {
                        v2 = v;
                    }
                }
                price[j1] += v1 - v2 + eps;
                let prev = owner[j1];
                owner[j1] = i;
                assigned[i] = j1;
                if prev != usize::MAX {
                    assigned[prev] = usize::MAX;
                    next.push(prev);
                }
            }
            unassigned = next;
        }
        let c = matching_cost(a, b, &assigned);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&assigned);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    Ok(MatchResult {
        permutation: best,
        cost: best_cost,
    })
}

/// Exact minimum-cost matching by the Hungarian method with potentials,
/// `O(n³)`.
pub fn matching_oracle(a: &[Vec3], b: &[Vec3]) -> Result<MatchResult, MetricError> {
    check_pair(a, b)?;
    let n = a.len();
    if n > ORACLE_MAX {
        return Err(MetricError::TooLarge { n, max: ORACLE_MAX });
    }
    // 1-based arrays; row 0 / column 0 are sentinels
    let cost = |i: usize, j: usize| (a[i - 1] - b[j - 1]).norm_squared();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    let cost = matching_cost(a, b, &perm);
    Ok(MatchResult {
        permutation: perm,
        cost,
    })
}
