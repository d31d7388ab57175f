//! Background grid and quadratic B-spline transfer weights.

use crate::Vec3;

use super::SimError;

/// One layer of padding nodes on each side so that every point of the closed
/// unit cube has its full 3x3x3 stencil inside the array.
pub(crate) const PAD: i64 = 1;

/// Quadratic B-spline weights of one particle along each axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    /// Unpadded index of the lowest stencil node per axis.
    pub base: [i64; 3],
    /// Position relative to `base`, in cell units.
    pub fx: Vec3,
    pub w: [[f64; 3]; 3],
    /// Derivatives of `w` with respect to `fx`.
    pub dw: [[f64; 3]; 3],
}

impl Stencil {
    pub fn new(x: &Vec3, inv_dx: f64) -> Self {
        let mut base = [0; 3];
        let mut fx = Vec3::zeros();
        let mut w = [[0.0; 3]; 3];
        let mut dw = [[0.0; 3]; 3];
        for d in 0..3 {
            let g = x[d] * inv_dx;
            let b = (g - 0.5).floor();
            let f = g - b;
            base[d] = b as i64;
            fx[d] = f;
            w[d] = [
                0.5 * (1.5 - f) * (1.5 - f),
                0.75 - (f - 1.0) * (f - 1.0),
                0.5 * (f - 0.5) * (f - 0.5),
            ];
            dw[d] = [f - 1.5, -2.0 * (f - 1.0), f - 0.5];
        }
        Self { base, fx, w, dw }
    }

    #[inline]
    pub fn weight(&self, o: [usize; 3]) -> f64 {
        self.w[0][o[0]] * self.w[1][o[1]] * self.w[2][o[2]]
    }

    /// Gradient of the weight with respect to the particle position.
    #[inline]
    pub fn grad(&self, o: [usize; 3], inv_dx: f64) -> Vec3 {
        let (w, dw) = (&self.w, &self.dw);
        Vec3::new(
            dw[0][o[0]] * w[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * dw[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * w[1][o[1]] * dw[2][o[2]],
        ) * inv_dx
    }

    /// Node minus particle position, in world units.
    #[inline]
    pub fn dpos(&self, o: [usize; 3], dx: f64) -> Vec3 {
        Vec3::new(
            o[0] as f64 - self.fx[0],
            o[1] as f64 - self.fx[1],
            o[2] as f64 - self.fx[2],
        ) * dx
    }
}

pub(crate) const OFFSETS: [[usize; 3]; 27] = {
    let mut out = [[0; 3]; 27];
    let mut n = 0;
    while n < 27 {
        out[n] = [n / 9, (n / 3) % 3, n % 3];
        n += 1;
    }
    out
};

/// Dense node layout shared by the simulator and [`GridField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub resolution: usize,
    pub dim: usize,
}

impl Layout {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            dim: resolution + 1 + 2 * PAD as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.dim * self.dim * self.dim
    }

    /// Flat index of the node at `base + o`.
    #[inline]
    pub fn index(&self, base: &[i64; 3], o: [usize; 3]) -> usize {
        let i = (base[0] + PAD) as usize + o[0];
        let j = (base[1] + PAD) as usize + o[1];
        let k = (base[2] + PAD) as usize + o[2];
        (i * self.dim + j) * self.dim + k
    }

    /// Unpadded integer coordinates of a flat index.
    #[inline]
    pub fn coords(&self, idx: usize) -> [i64; 3] {
        let k = idx % self.dim;
        let j = (idx / self.dim) % self.dim;
        let i = idx / (self.dim * self.dim);
        [i as i64 - PAD, j as i64 - PAD, k as i64 - PAD]
    }

    pub fn position(&self, idx: usize, dx: f64) -> Vec3 {
        let c = self.coords(idx);
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * dx
    }
}

/// Per-node mass and momentum on a `G³` grid over the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    layout: Layout,
    mass: Vec<f64>,
    momentum: Vec<Vec3>,
}

impl GridField {
    pub fn zeros(resolution: usize) -> Self {
        let layout = Layout::new(resolution);
        Self {
            layout,
            mass: vec![0.0; layout.len()],
            momentum: vec![Vec3::zeros(); layout.len()],
        }
    }

    pub fn resolution(&self) -> usize {
        self.layout.resolution
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.layout.resolution as f64
    }

    /// Mass at integer node `(i, j, k)`; nodes run from `-1` to `G + 1`.
    pub fn mass(&self, i: i64, j: i64, k: i64) -> f64 {
        self.lookup(i, j, k).map_or(0.0, |idx| self.mass[idx])
    }

    pub fn momentum(&self, i: i64, j: i64, k: i64) -> Vec3 {
        self.lookup(i, j, k).map_or(Vec3::zeros(), |idx| self.momentum[idx])
    }

    fn lookup(&self, i: i64, j: i64, k: i64) -> Option<usize> {
        let dim = self.layout.dim as i64;
        let (i, j, k) = (i + PAD, j + PAD, k + PAD);
        if [i, j, k].iter().all(|&c| (0..dim).contains(&c)) {
            Some(((i * dim + j) * dim + k) as usize)
        } else {
            None
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.momentum.iter().sum()
    }

    /// Nodes with positive mass as `([i, j, k], mass)`, in index order.
    pub fn occupied(&self) -> impl Iterator<Item = ([i64; 3], f64)> + '_ {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(idx, &m)| (self.layout.coords(idx), m))
    }

    /// Integer node nearest to `p`.
    pub fn nearest_node(&self, p: &Vec3) -> [i64; 3] {
        let g = self.layout.resolution as f64;
        [0, 1, 2].map(|d| (p[d] * g).round() as i64)
    }

    pub(crate) fn add(&mut self, idx: usize, mass: f64, momentum: Vec3) {
        self.mass[idx] += mass;
        self.momentum[idx] += momentum;
    }
}

/// Scatters `particle_mass` per point onto a `resolution³` grid with
/// quadratic B-spline weights.
pub fn compute_grid_mass(points: &[Vec3], resolution: usize, particle_mass: f64) -> Result<GridField, SimError> {
    if resolution < 4 {
        return Err(SimError::Config(format!(
            "grid resolution must be >= 4, got {resolution}"
        )));
    }
    let mut grid = GridField::zeros(resolution);
    let layout = grid.layout;
    let inv_dx = resolution as f64;
    for (i, p) in points.iter().enumerate() {
        check_inside(i, p)?;
        let st = Stencil::new(p, inv_dx);
        for o in OFFSETS {
            grid.add(layout.index(&st.base, o), st.weight(o) * particle_mass, Vec3::zeros());
        }
    }
    Ok(grid)
}

pub(crate) fn check_inside(index: usize, p: &Vec3) -> Result<(), SimError> {
    if p.iter().all(|c| (0.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(SimError::OutsideDomain {
            index,
            point: [p.x, p.y, p.z],
        })
    }
}
