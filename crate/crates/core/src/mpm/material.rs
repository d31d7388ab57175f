//! Fixed-corotated elasticity with a von Mises return map in log-strain
//! space, and the reverse-mode adjoint of both.
//!
//! The polar decomposition `F = R S` is taken from the eigen decomposition
//! of `FᵀF`. The square-root rule `dŜ_ij = dĈ_ij / (σ_i + σ_j)` and the
//! divided differences used for the plastic stretch are well conditioned
//! even when singular values coincide (e.g. at `F = I`).

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub yield_stress: f64,
    pub density: f64,
    /// Coulomb coefficient for rigid contact.
    pub friction: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            youngs_modulus: 300.0,
            poisson_ratio: 0.2,
            yield_stress: 30.0,
            density: 1.0,
            friction: 0.5,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.youngs_modulus > 0.0) {
            return Err(format!("youngs_modulus must be > 0, got {}", self.youngs_modulus));
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(format!("poisson_ratio must be in (0, 0.5), got {}", self.poisson_ratio));
        }
        if !(self.yield_stress > 0.0) {
            return Err(format!("yield_stress must be > 0, got {}", self.yield_stress));
        }
        if !(self.density > 0.0) {
            return Err(format!("density must be > 0, got {}", self.density));
        }
        if !(self.friction >= 0.0) {
            return Err(format!("friction must be >= 0, got {}", self.friction));
        }
        Ok(())
    }

    /// Lamé parameters `(mu, lambda)`.
    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }
}

/// Everything the adjoint needs from one material update.
#[derive(Debug, Clone, Copy)]
pub struct MaterialTrace {
    /// Eigenvectors of `FᵀF` (columns).
    pub eigvecs: Mat3,
    /// Singular values of the trial deformation gradient.
    pub sigma: Vec3,
    /// Stretch after the return map (equal to `sigma` when elastic).
    pub stretch: Vec3,
    pub rotation: Mat3,
    pub plastic: bool,
    pub f_new: Mat3,
}

#[derive(Debug, Clone, Copy)]
pub struct Constitutive {
    pub mu: f64,
    pub lambda: f64,
    pub yield_stress: f64,
    pub plastic: bool,
}

impl Constitutive {
    pub fn new(params: &MaterialParams, plastic: bool) -> Self {
        let (mu, lambda) = params.lame();
        Self {
            mu,
            lambda,
            yield_stress: params.yield_stress,
            plastic,
        }
    }

    fn yield_strain(&self) -> f64 {
        self.yield_stress / (2.0 * self.mu)
    }

    /// Applies the return map to a trial deformation gradient. Returns `None`
    /// when the trial gradient is inverted or degenerate.
    pub fn project(&self, f_trial: &Mat3) -> Option<MaterialTrace> {
        if !(f_trial.determinant() > 0.0) {
            return None;
        }
        let eig = SymmetricEigen::new(f_trial.transpose() * f_trial);
        let v = eig.eigenvectors;
        let sigma = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        if !sigma.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return None;
        }
        let s_inv = v * Mat3::from_diagonal(&sigma.map(|s| 1.0 / s)) * v.transpose();
        let rotation = f_trial * s_inv;

        let (stretch, plastic) = if self.plastic {
            let eps = sigma.map(f64::ln);
            let mean = eps.sum() / 3.0;
            let dev = eps.add_scalar(-mean);
            let norm = dev.norm();
            let k = self.yield_strain();
            if norm > k {
                let c = k / norm;
                (dev.map(|d| (mean + c * d).exp()), true)
            } else {
                (sigma, false)
            }
        } else {
            (sigma, false)
        };
        let f_new = if plastic {
            rotation * (v * Mat3::from_diagonal(&stretch) * v.transpose())
        } else {
            *f_trial
        };
        Some(MaterialTrace {
            eigvecs: v,
            sigma,
            stretch,
            rotation,
            plastic,
            f_new,
        })
    }

    /// Kirchhoff stress `2μ(F - R)Fᵀ + λJ(J - 1)I`.
    pub fn kirchhoff(&self, f: &Mat3, rotation: &Mat3) -> Mat3 {
        let j = f.determinant();
        2.0 * self.mu * (f - rotation) * f.transpose() + Mat3::identity() * (self.lambda * j * (j - 1.0))
    }

    /// Pulls the stress adjoint back to `(F̄, R̄)`.
    pub fn kirchhoff_vjp(&self, f: &Mat3, rotation: &Mat3, tau_bar: &Mat3) -> (Mat3, Mat3) {
        let j = f.determinant();
        let cof = cofactor(f);
        let f_bar = 2.0 * self.mu * (tau_bar * f + tau_bar.transpose() * (f - rotation))
            + cof * (self.lambda * (2.0 * j - 1.0) * tau_bar.trace());
        let r_bar = -2.0 * self.mu * tau_bar * f;
        (f_bar, r_bar)
    }

    /// Adjoint of `f_trial -> (f_new, rotation)`.
    pub fn project_vjp(&self, f_trial: &Mat3, trace: &MaterialTrace, f_new_bar: &Mat3, rotation_bar: &Mat3) -> Mat3 {
        let v = &trace.eigvecs;
        let vt = v.transpose();
        let sigma = &trace.sigma;
        let r = &trace.rotation;
        let s_inv = v * Mat3::from_diagonal(&sigma.map(|s| 1.0 / s)) * vt;

        let mut f_bar = Mat3::zeros();
        let mut r_bar = *rotation_bar;
        // symmetric adjoint of S, accumulated in the eigenbasis
        let mut s_hat_bar = Mat3::zeros();

        if trace.plastic {
            // F_new = R S_new
            let s_new = v * Mat3::from_diagonal(&trace.stretch) * vt;
            r_bar += f_new_bar * s_new;
            let s_new_bar = sym(&(r.transpose() * f_new_bar));
            let hat = vt * s_new_bar * v;
            let h = &trace.stretch;
            let eps = sigma.map(f64::ln);
            let mean = eps.sum() / 3.0;
            let dev = eps.add_scalar(-mean);
            let norm = dev.norm();
            let k = self.yield_strain();
            let c = k / norm;
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let gamma =
                            mean.exp() * c * divided_exp(c * dev[i], c * dev[j]) * divided_log(sigma[i], sigma[j]);
                        s_hat_bar[(i, j)] += gamma * hat[(i, j)];
                    }
                }
            }
            // diagonal: stretch h_i = exp(mean + c dev_i) as a function of sigma
            let eps_new_bar = Vec3::from_fn(|i, _| hat[(i, i)] * h[i]);
            let mean_bar = eps_new_bar.sum();
            let c_bar = eps_new_bar.dot(&dev);
            let mut dev_bar = eps_new_bar * c;
            let norm_bar = -k * c_bar / (norm * norm);
            dev_bar += dev * (norm_bar / norm);
            let dev_mean = dev_bar.sum() / 3.0;
            let eps_bar = dev_bar.add_scalar(-dev_mean).add_scalar(mean_bar / 3.0);
            for i in 0..3 {
                s_hat_bar[(i, i)] += eps_bar[i] / sigma[i];
            }
        } else {
            // F_new = F_trial
            f_bar += f_new_bar;
        }

        // R = F S⁻¹
        f_bar += r_bar * s_inv;
        let s_inv_bar = f_trial.transpose() * r_bar;
        let s_bar = sym(&(-(s_inv * s_inv_bar * s_inv)));
        s_hat_bar += vt * s_bar * v;

        // S = sqrt(FᵀF)
        let s_hat_bar = sym(&s_hat_bar);
        let c_hat_bar = Mat3::from_fn(|i, j| s_hat_bar[(i, j)] / (sigma[i] + sigma[j]));
        let c_bar = v * c_hat_bar * vt;
        f_bar += 2.0 * f_trial * c_bar;
        f_bar
    }
}

fn sym(m: &Mat3) -> Mat3 {
    0.5 * (m + m.transpose())
}

/// `(e^a - e^b) / (a - b)`, continuous at `a = b`.
fn divided_exp(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() < 1e-12 {
        (0.5 * (a + b)).exp()
    } else {
        b.exp() * d.exp_m1() / d
    }
}

/// `(ln a - ln b) / (a - b)`, continuous at `a = b`.
fn divided_log(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() < 1e-12 * b {
        2.0 / (a + b)
    } else {
        (d / b).ln_1p() / d
    }
}

/// Cofactor matrix, `det(F) F⁻ᵀ`.
pub fn cofactor(f: &Mat3) -> Mat3 {
    Mat3::new(
        f[(1, 1)] * f[(2, 2)] - f[(1, 2)] * f[(2, 1)],
        f[(1, 2)] * f[(2, 0)] - f[(1, 0)] * f[(2, 2)],
        f[(1, 0)] * f[(2, 1)] - f[(1, 1)] * f[(2, 0)],
        f[(0, 2)] * f[(2, 1)] - f[(0, 1)] * f[(2, 2)],
        f[(0, 0)] * f[(2, 2)] - f[(0, 2)] * f[(2, 0)],
        f[(0, 1)] * f[(2, 0)] - f[(0, 0)] * f[(2, 1)],
        f[(0, 1)] * f[(1, 2)] - f[(0, 2)] * f[(1, 1)],
        f[(0, 2)] * f[(1, 0)] - f[(0, 0)] * f[(1, 2)],
        f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn near_identity(rng: &mut ChaCha8Rng, scale: f64) -> Mat3 {
        Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn weights(rng: &mut ChaCha8Rng) -> (Mat3, Mat3) {
        (
            Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        )
    }

    /// Scalar test functional `<A, F_new> + <B, R>` differentiated by central
    /// differences.
    fn check(model: &Constitutive, f: &Mat3, a: &Mat3, b: &Mat3) -> f64 {
        let eval = |f: &Mat3| {
            let t = model.project(f).unwrap();
            a.dot(&t.f_new) + b.dot(&t.rotation)
        };
        let trace = model.project(f).unwrap();
        let analytic = model.project_vjp(f, &trace, a, b);
        let h = 1e-6;
        let mut worst = 0.0_f64;
        for idx in 0..9 {
            let mut fp = *f;
            fp[idx] += h;
            let mut fm = *f;
            fm[idx] -= h;
            let fd = (eval(&fp) - eval(&fm)) / (2.0 * h);
            worst = worst.max((fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn lame_parameters() {
        let p = MaterialParams {
            youngs_modulus: 1000.0,
            poisson_ratio: 0.25,
            ..Default::default()
        };
        let (mu, lambda) = p.lame();
        assert!((mu - 400.0).abs() < 1e-12);
        assert!((lambda - 400.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = MaterialParams::default();
        p.poisson_ratio = 0.5;
        assert!(p.validate().is_err());
        let mut p = MaterialParams::default();
        p.friction = -0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn stress_vanishes_at_identity() {
        let model = Constitutive::new(&MaterialParams::default(), true);
        let t = model.project(&Mat3::identity()).unwrap();
        assert!(!t.plastic);
        assert!(model.kirchhoff(&t.f_new, &t.rotation).amax() < 1e-14);
    }

    #[test]
    fn rotation_is_orthonormal_with_positive_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Constitutive::new(&MaterialParams::default(), true);
        for _ in 0..200 {
            let f = near_identity(&mut rng, 0.4);
            if let Some(t) = model.project(&f) {
                assert!((t.rotation.transpose() * t.rotation - Mat3::identity()).amax() < 1e-10);
                assert!((t.rotation.determinant() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn return_map_lands_on_yield_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MaterialParams::default();
        let model = Constitutive::new(&params, true);
        let mut seen = 0;
        for _ in 0..200 {
            let f = near_identity(&mut rng, 0.5);
            let Some(t) = model.project(&f) else { continue };
            if t.plastic {
                seen += 1;
                let eps = t.stretch.map(f64::ln);
                let dev = eps.add_scalar(-eps.sum() / 3.0);
                assert!((dev.norm() - model.yield_strain()).abs() < 1e-10);
                // volume preserved by the deviatoric projection
                assert!((t.f_new.determinant() - f.determinant()).abs() < 1e-10);
            }
        }
        assert!(seen > 10);
    }

    #[test]
    fn inverted_gradient_is_rejected() {
        let model = Constitutive::new(&MaterialParams::default(), true);
        let f = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(model.project(&f).is_none());
    }

    #[test]
    fn elastic_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = MaterialParams::default();
        params.yield_stress = 1e9;
        let model = Constitutive::new(&params, true);
        for _ in 0..100 {
            let f = near_identity(&mut rng, 0.3);
            let (a, b) = weights(&mut rng);
            assert!(check(&model, &f, &a, &b) < 1e-6);
        }
    }

    #[test]
    fn plastic_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Constitutive::new(&MaterialParams::default(), true);
        let mut n = 0;
        while n < 100 {
            let f = near_identity(&mut rng, 0.5);
            let Some(t) = model.project(&f) else { continue };
            if !t.plastic {
                continue;
            }
            let (a, b) = weights(&mut rng);
            assert!(check(&model, &f, &a, &b) < 1e-5);
            n += 1;
        }
    }

    #[test]
    fn adjoint_is_stable_at_repeated_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Constitutive::new(&MaterialParams::default(), true);
        // identity, a pure rotation, and a uniaxial stretch past yield
        let rot = *nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.5).matrix();
        let cases = [
            Mat3::identity(),
            rot,
            rot * Mat3::from_diagonal(&Vec3::new(1.6, 1.0, 1.0)),
        ];
        for f in cases {
            let (a, b) = weights(&mut rng);
            let t = model.project(&f).unwrap();
            let g = model.project_vjp(&f, &t, &a, &b);
            assert!(g.iter().all(|v| v.is_finite()));
            assert!(check(&model, &f, &a, &b) < 1e-5, "{f}");
        }
    }

    #[test]
    fn stress_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = Constitutive::new(&MaterialParams::default(), true);
        for _ in 0..50 {
            let f = near_identity(&mut rng, 0.3);
            let r = *nalgebra::Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random()).matrix();
            let w = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let (fa, ra) = model.kirchhoff_vjp(&f, &r, &w);
            let h = 1e-6;
            for idx in 0..9 {
                let mut p = f;
                p[idx] += h;
                let mut m = f;
                m[idx] -= h;
                let fd = (w.dot(&model.kirchhoff(&p, &r)) - w.dot(&model.kirchhoff(&m, &r))) / (2.0 * h);
                assert!((fd - fa[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
                let mut p = r;
                p[idx] += h;
                let mut m = r;
                m[idx] -= h;
                let fd = (w.dot(&model.kirchhoff(&f, &p)) - w.dot(&model.kirchhoff(&f, &m))) / (2.0 * h);
                assert!((fd - ra[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
