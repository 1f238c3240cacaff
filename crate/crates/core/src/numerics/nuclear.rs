//! Affine-constrained nuclear-norm minimization of stacked per-image shapes.
//!
//! Each image contributes a linear map from its `3 × P` shape to its 2D
//! observations. The solver minimizes the nuclear norm of the compact `N × 3P`
//! rearrangement over all least-squares-consistent shapes, alternating singular
//! value thresholding with exact projection onto the affine set (ADMM).

use nalgebra::{DMatrix, Matrix2x3, Matrix3};

use super::linalg::{pseudo_inverse, sorted_svd};
use crate::error::{dim_check, Result};
use crate::model::{rearrange_compact, restore_compact, SymmetryOp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuclearConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NuclearConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct NuclearResult {
    /// `3N × P` stacked shapes.
    pub s: DMatrix<f64>,
    /// Nuclear norm of the compact shapes at each accepted iterate.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖b − T s‖_F / ‖b‖_F` over all images.
    pub constraint_residual: f64,
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sorted_svd(m).s.sum()
}

/// Symmetric form: `[Y_n; Ydag_n] = [R_n; R_n A] S_n` for every image.
pub fn nuclear_min_structure(
    y: &DMatrix<f64>,
    y_dag: &DMatrix<f64>,
    rotations: &[Matrix2x3<f64>],
    op: &SymmetryOp,
    cfg: &NuclearConfig,
) -> Result<NuclearResult> {
    dim_check(y.shape() == y_dag.shape(), || "Y and Ydag differ in shape".into())?;
    dim_check(y.nrows() == 2 * rotations.len(), || {
        format!("{} observation rows for {} cameras", y.nrows(), rotations.len())
    })?;
    let a = op.matrix();
    let blocks = rotations
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let ra = r * a;
            let t = DMatrix::from_fn(4, 3, |i, j| if i < 2 { r[(i, j)] } else { ra[(i - 2, j)] });
            let mut b = DMatrix::zeros(4, y.ncols());
            b.rows_mut(0, 2).copy_from(&y.rows(2 * n, 2));
            b.rows_mut(2, 2).copy_from(&y_dag.rows(2 * n, 2));
            (t, b)
        })
        .collect();
    solve(blocks, cfg)
}

/// Plain form without a mirror half: `W_n = R_n S_n`.
pub fn nuclear_min_structure_plain(
    w: &DMatrix<f64>,
    rotations: &[Matrix2x3<f64>],
    cfg: &NuclearConfig,
) -> Result<NuclearResult> {
    dim_check(w.nrows() == 2 * rotations.len(), || {
        format!("{} observation rows for {} cameras", w.nrows(), rotations.len())
    })?;
    let blocks = rotations
        .iter()
        .enumerate()
        .map(|(n, r)| (DMatrix::from_iterator(2, 3, r.iter().copied()), w.rows(2 * n, 2).into_owned()))
        .collect();
    solve(blocks, cfg)
}

struct ImageOperator {
    base: DMatrix<f64>,
    null_proj: Matrix3<f64>,
}

fn singular_value_threshold(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let svd = sorted_svd(m);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..svd.s.len() {
        let s = svd.s[i] - tau;
        if s <= 0.0 {
            break;
        }
        out += svd.u.column(i) * svd.v.column(i).transpose() * s;
    }
    out
}

fn solve(blocks: Vec<(DMatrix<f64>, DMatrix<f64>)>, cfg: &NuclearConfig) -> Result<NuclearResult> {
    let n = blocks.len();
    let p = blocks.first().map(|(_, b)| b.ncols()).unwrap_or(0);
    let data_norm = blocks.iter().map(|(_, b)| b.norm_squared()).sum::<f64>().sqrt();
    let ops: Vec<ImageOperator> = blocks
        .iter()
        .map(|(t, b)| {
            let pinv = pseudo_inverse(t, 1e-10);
            let proj = DMatrix::identity(3, 3) - &pinv * t;
            ImageOperator { base: &pinv * b, null_proj: Matrix3::from_iterator(proj.iter().copied()) }
        })
        .collect();
    let stack = |parts: &dyn Fn(usize) -> DMatrix<f64>| -> DMatrix<f64> {
        let mut s = DMatrix::zeros(3 * n, p);
        for i in 0..n {
            s.rows_mut(3 * i, 3).copy_from(&parts(i));
        }
        s
    };
    let project = |v: &DMatrix<f64>| -> DMatrix<f64> {
        stack(&|i| {
            let np = DMatrix::from_iterator(3, 3, ops[i].null_proj.iter().copied());
            &ops[i].base + np * v.rows(3 * i, 3)
        })
    };
    let residual = |s: &DMatrix<f64>| -> f64 {
        if data_norm == 0.0 {
            return 0.0;
        }
        let r2: f64 = blocks.iter().enumerate().map(|(i, (t, b))| (b - t * s.rows(3 * i, 3)).norm_squared()).sum();
        r2.sqrt() / data_norm
    };

    let s0 = stack(&|i| ops[i].base.clone());
    let x0 = rearrange_compact(&s0)?;
    let obj0 = nuclear_norm(&x0);
    let injective = ops.iter().all(|op| op.null_proj.norm() <= 1e-9);
    if injective || obj0 == 0.0 || n == 0 {
        let constraint_residual = residual(&s0);
        return Ok(NuclearResult { s: s0, objective_trace: vec![obj0], iterations: 0, converged: true, constraint_residual });
    }

    let mut tau = 0.1 * sorted_svd(&x0).s[0];
    let mut s = s0.clone();
    let mut x = x0;
    let mut z = x.clone();
    let mut u = DMatrix::zeros(x.nrows(), x.ncols());
    let mut trace = vec![obj0];
    let mut best = (obj0, s.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let z_prev = z.clone();
        z = singular_value_threshold(&(&x + &u), tau);
        s = project(&restore_compact(&(&z - &u))?);
        x = rearrange_compact(&s)?;
        u += &x - &z;
        let obj = nuclear_norm(&x);
        let prev = *trace.last().expect("trace is seeded");
        trace.push(obj);
        if obj < best.0 {
            best = (obj, s.clone());
        }
        let scale = x.norm().max(1e-300);
        let primal = (&x - &z).norm();
        let dual = (&z - &z_prev).norm();
        let rel_change = (prev - obj).abs() / prev.max(1e-300);
        if (primal / scale).max(rel_change) <= cfg.tol {
            converged = true;
            break;
        }
        if it % 10 == 9 {
            if primal > 10.0 * dual {
                tau *= 0.5;
                u *= 2.0;
            } else if dual > 10.0 * primal {
                tau *= 2.0;
                u *= 0.5;
            }
        }
    }
    let (_, s_best) = best;
    let constraint_residual = residual(&s_best);
    Ok(NuclearResult { s: s_best, objective_trace: trace, iterations, converged, constraint_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotations(rng: &mut ChaCha8Rng, n: usize) -> Vec<Matrix2x3<f64>> {
        (0..n)
            .map(|_| {
                let q = Rotation3::from_euler_angles(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                );
                q.matrix().fixed_rows::<2>(0).into_owned()
            })
            .collect()
    }

    #[test]
    fn zero_observations_give_zero_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rots = random_rotations(&mut rng, 3);
        let y = DMatrix::zeros(6, 4);
        let res = nuclear_min_structure(&y, &y, &rots, &SymmetryOp::x(), &NuclearConfig::default()).unwrap();
        assert!(res.s.iter().all(|v| *v == 0.0));
        let res = nuclear_min_structure_plain(&y, &rots, &NuclearConfig::default()).unwrap();
        assert!(res.s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rigid_symmetric_scene_gives_rank_one_compact_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let rots = random_rotations(&mut rng, n);
        let shape = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_iterator(3, 3, SymmetryOp::x().matrix().iter().copied());
        let mut y = DMatrix::zeros(2 * n, 5);
        let mut yd = DMatrix::zeros(2 * n, 5);
        for (i, r) in rots.iter().enumerate() {
            let r = DMatrix::from_iterator(2, 3, r.iter().copied());
            y.rows_mut(2 * i, 2).copy_from(&(&r * &shape));
            yd.rows_mut(2 * i, 2).copy_from(&(&r * &a * &shape));
        }
        let res = nuclear_min_structure(&y, &yd, &rots, &SymmetryOp::x(), &NuclearConfig::default()).unwrap();
        let sv = sorted_svd(&rearrange_compact(&res.s).unwrap()).s;
        assert!(sv[1] <= 1e-6 * sv[0]);
        assert!(res.constraint_residual <= 1e-10);
    }

    #[test]
    fn plain_solver_keeps_constraints_and_never_exceeds_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let p = 6;
        let rots = random_rotations(&mut rng, n);
        let b1 = DMatrix::from_fn(3, p, |_, _| rng.random_range(-1.0..1.0));
        let b2 = DMatrix::from_fn(3, p, |_, _| rng.random_range(-1.0..1.0));
        let mut w = DMatrix::zeros(2 * n, p);
        for (i, r) in rots.iter().enumerate() {
            let r = DMatrix::from_iterator(2, 3, r.iter().copied());
            let s = &b1 + &b2 * rng.random_range(-0.5..0.5);
            w.rows_mut(2 * i, 2).copy_from(&(r * s));
        }
        let res = nuclear_min_structure_plain(&w, &rots, &NuclearConfig::default()).unwrap();
        assert!(res.constraint_residual <= 1e-6);
        let final_obj = nuclear_norm(&rearrange_compact(&res.s).unwrap());
        assert!(final_obj <= res.objective_trace[0] + 1e-9);
    }

    #[test]
    fn threshold_shrinks_singular_values() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.5]));
        let t = singular_value_threshold(&m, 0.75);
        assert!((t[(0, 0)] - 2.25).abs() < 1e-12);
        assert!((t[(1, 1)] - 0.25).abs() < 1e-12);
        assert!(t[(2, 2)].abs() < 1e-12);
    }
}
