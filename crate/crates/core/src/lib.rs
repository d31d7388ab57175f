//! Differentiable MLS-MPM soft-body simulation and dynamics-aware state
//! representation learning on particle point clouds.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod models;
pub mod mpm;
pub mod regulator;
pub mod scene;
pub mod training;

mod pool;

/// World-frame 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix (deformation gradients, rotations, affine velocity fields).
pub type Mat3 = nalgebra::Matrix3<f64>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/regulator.md")]
    mod regulator {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
