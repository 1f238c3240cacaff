use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, Vector3};

use super::linalg::pseudo_inverse;
use crate::error::{Error, Result};
use crate::model::complete_rotation;

/// Nearest matrix with orthonormal rows (the polar factor `U Vᵀ`).
pub fn project_row_orthonormal(m: &Matrix2x3<f64>) -> Result<Matrix2x3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::IllPosed("projection input is not finite".into()));
    }
    let svd = m.svd(true, true);
    let (s0, s1) = (svd.singular_values[0].max(svd.singular_values[1]), svd.singular_values[0].min(svd.singular_values[1]));
    if s0 == 0.0 || s1 <= 1e-12 * s0 {
        return Err(Error::IllPosed("2x3 matrix has rank below 2".into()));
    }
    Ok(svd.u.expect("u requested") * svd.v_t.expect("v requested"))
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    let s = skew_part(m);
    Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)])
}

pub fn skew_part(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m - m.transpose()) * 0.5
}

/// Exact exponential of the skew part of `xi`.
pub fn exp_so3(xi: &Matrix3<f64>) -> Matrix3<f64> {
    *Rotation3::from_scaled_axis(vee(xi)).matrix()
}

/// Quadratic camera objective `tr(R Φ Rᵀ) − 2 tr(R Bᵀ)` over row-orthonormal `R`.
///
/// Both pipelines reduce their per-image rotation update to this form.
#[derive(Debug, Clone, Copy)]
pub struct RotationProblem {
    pub phi: Matrix3<f64>,
    pub b: Matrix2x3<f64>,
}

impl RotationProblem {
    pub fn objective(&self, r: &Matrix2x3<f64>) -> f64 {
        (r * self.phi * r.transpose()).trace() - 2.0 * (r * self.b.transpose()).trace()
    }

    /// `objective(to) − objective(from)` without cancellation: the rounding
    /// error scales with `‖to − from‖`, so descent stays detectable near the optimum.
    pub fn change(&self, from: &Matrix2x3<f64>, to: &Matrix2x3<f64>) -> f64 {
        let d = to - from;
        (d * self.phi * (to + from).transpose()).trace() - 2.0 * (d * self.b.transpose()).trace()
    }
}

/// Solves the linearized stationarity condition `M ξ Q Φ = B − M Q Φ` for `ξ`
/// in the least-norm sense and returns its skew part.
pub fn rotation_increment(q: &Matrix3<f64>, problem: &RotationProblem) -> Option<Matrix3<f64>> {
    let sel = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let qphi = q * problem.phi;
    let left = DMatrix::from_iterator(3, 3, qphi.transpose().iter().copied());
    let alpha = left.kronecker(&sel);
    let rhs = problem.b - q.fixed_rows::<2>(0) * problem.phi;
    let beta = DVector::from_iterator(6, rhs.iter().copied());
    if !alpha.iter().all(|v| v.is_finite()) || !beta.iter().all(|v| v.is_finite()) {
        return None;
    }
    let xi = pseudo_inverse(&alpha, 1e-12) * beta;
    let xi = Matrix3::from_iterator(xi.iter().copied());
    Some(skew_part(&xi))
}

/// Outcome of one monotone rotation update.
#[derive(Debug, Clone, Copy)]
pub struct RotationStep {
    pub r: Matrix2x3<f64>,
    /// Frobenius norm of the skew increment proposed by the linearized solve.
    pub xi_norm: f64,
    /// Whether the objective strictly decreased.
    pub improved: bool,
    /// Set when the linearized solve failed and the pose was kept.
    pub flagged: bool,
}

fn apply_increment(q: &Matrix3<f64>, xi: &Matrix3<f64>, t: f64) -> Option<Matrix2x3<f64>> {
    let rotated = exp_so3(&(xi * t)) * q;
    project_row_orthonormal(&rotated.fixed_rows::<2>(0).into_owned()).ok()
}

/// One rotation update: the linearized increment, applied through the exponential
/// map and backtracked until the objective does not increase. Falls back to the
/// Riemannian gradient direction when the increment fails to descend.
pub fn rotation_step(r: &Matrix2x3<f64>, problem: &RotationProblem) -> RotationStep {
    let q = complete_rotation(r);
    let Some(xi) = rotation_increment(&q, problem) else {
        return RotationStep { r: *r, xi_norm: f64::NAN, improved: false, flagged: true };
    };
    let xi_norm = xi.norm();
    if xi_norm <= 1e-14 {
        return RotationStep { r: *r, xi_norm, improved: false, flagged: false };
    }
    let try_direction = |dir: &Matrix3<f64>, t0: f64| -> Option<Matrix2x3<f64>> {
        let mut t = t0;
        for _ in 0..40 {
            if let Some(cand) = apply_increment(&q, dir, t) {
                if problem.change(r, &cand) < 0.0 {
                    return Some(cand);
                }
            }
            t *= 0.5;
        }
        None
    };
    if let Some(cand) = try_direction(&xi, 1.0) {
        return RotationStep { r: cand, xi_norm, improved: true, flagged: false };
    }
    // Gradient of the objective in the tangent space at Q, for a left increment exp(ω̂) Q.
    let e = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    let c = q * problem.phi * q.transpose();
    let sel = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let f = q * problem.b.transpose() * sel;
    let grad = -2.0 * vee(&(c * e - e * c - 2.0 * f));
    if grad.norm() > 0.0 {
        let dir = hat(&(-grad / (2.0 * problem.phi.norm() + problem.b.norm() + 1e-300)));
        if let Some(cand) = try_direction(&dir, 1.0) {
            return RotationStep { r: cand, xi_norm, improved: true, flagged: false };
        }
    }
    RotationStep { r: *r, xi_norm, improved: false, flagged: false }
}
