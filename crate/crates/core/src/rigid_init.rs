//! Occlusion fill-in and rigid initializers.
//!
//! [`init_missing_rank3`] completes occluded entries with a rank-3 model that
//! ignores symmetry. [`sym_rigid_sfm`] is the symmetric rigid reconstruction
//! used to seed the probabilistic model; it is the one-basis case of the
//! prior-free factorization. [`rigid_rank3_sfm`] is the classic
//! symmetry-ignoring rank-3 factorization, kept as a baseline.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{CameraPose, ObservationSet, SymmetryOp};
use crate::numerics::{project_row_orthonormal, symmetric_eigen_desc, truncated_factorization};
use crate::priorfree::{self, GramNormalization};

/// Output of the symmetric rigid initializer.
#[derive(Debug, Clone)]
pub struct RigidInitResult {
    pub poses: Vec<CameraPose>,
    /// `3 × P` rigid shape; its mirror half is `A · sbar`.
    pub sbar: DMatrix<f64>,
    /// Input observations with occluded entries filled.
    pub completed: ObservationSet,
    /// Images whose camera could not be recovered directly.
    pub flagged_images: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Fills occluded entries of `[Y, Ydag]` from a rank-3 model of the whole stack.
///
/// Occluded entries start at their image's visible centroid. Each iteration
/// truncates the filled matrix to rank 3, takes one damped Gauss-Newton step
/// on the factors against the visible entries only, and refills the occluded
/// entries from the product. Visible entries are never modified.
pub fn init_missing_rank3(obs: &ObservationSet, iters: usize) -> ObservationSet {
    if iters == 0 || obs.is_fully_visible() {
        return obs.clone();
    }
    let mut w = obs.concatenated();
    let mask = obs.concatenated_mask();
    let (rows, cols) = w.shape();
    let visible = |i: usize, j: usize| mask[(i / 2, j)];
    for i in 0..rows {
        let (sum, count) = (0..cols).filter(|&j| visible(i, j)).fold((0.0, 0usize), |(s, c), j| (s + w[(i, j)], c + 1));
        let centroid = if count > 0 { sum / count as f64 } else { 0.0 };
        for j in 0..cols {
            if !visible(i, j) {
                w[(i, j)] = centroid;
            }
        }
    }
    let rank = 3.min(rows).min(cols);
    for _ in 0..iters {
        let f = truncated_factorization(&w, rank).expect("rank bounded by dimensions");
        let (a, b) = refine_factors_on_visible(&w, &mask, f.a, f.b);
        let fit = &a * &b;
        for i in 0..rows {
            for j in 0..cols {
                if !visible(i, j) {
                    w[(i, j)] = fit[(i, j)];
                }
            }
        }
    }
    obs.with_concatenated(&w)
}

/// One Levenberg-Marquardt step on `W ≈ A B` restricted to visible entries.
/// The normal equations are reduced onto the column factors by a Schur complement.
fn refine_factors_on_visible(
    w: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = w.shape();
    let r = a.ncols();
    let visible = |i: usize, j: usize| mask[(i / 2, j)];
    let vis_cols: Vec<Vec<usize>> = (0..rows).map(|i| (0..cols).filter(|&j| visible(i, j)).collect()).collect();
    let cost = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
        let mut c = 0.0;
        for i in 0..rows {
            for &j in &vis_cols[i] {
                let e = w[(i, j)] - a.row(i).dot(&b.column(j).transpose());
                c += e * e;
            }
        }
        c
    };
    let cost0 = cost(&a, &b);
    if cost0 == 0.0 {
        return (a, b);
    }
    let mut haa = vec![DMatrix::zeros(r, r); rows];
    let mut ga = vec![DVector::zeros(r); rows];
    let mut hbb = vec![DMatrix::zeros(r, r); cols];
    let mut gb = vec![DVector::zeros(r); cols];
    for i in 0..rows {
        let ai = a.row(i).transpose();
        for &j in &vis_cols[i] {
            let bj = b.column(j).into_owned();
            let e = w[(i, j)] - ai.dot(&bj);
            haa[i] += &bj * bj.transpose();
            ga[i] += &bj * e;
            hbb[j] += &ai * ai.transpose();
            gb[j] += &ai * e;
        }
    }
    let mut lambda = 1e-6;
    for _ in 0..12 {
        let damp = |h: &DMatrix<f64>| -> DMatrix<f64> {
            let mut d = h.clone();
            for k in 0..r {
                d[(k, k)] += lambda * h[(k, k)] + 1e-12;
            }
            d
        };
        let haa_inv: Vec<DMatrix<f64>> =
            haa.iter().map(|h| damp(h).try_inverse().unwrap_or_else(|| DMatrix::zeros(r, r))).collect();
        let mut schur = DMatrix::zeros(r * cols, r * cols);
        let mut rhs = DVector::zeros(r * cols);
        for j in 0..cols {
            schur.view_mut((r * j, r * j), (r, r)).copy_from(&damp(&hbb[j]));
            rhs.rows_mut(r * j, r).copy_from(&gb[j]);
        }
        for i in 0..rows {
            let ai = a.row(i).transpose();
            let aat = &ai * ai.transpose();
            let hinv_ga = &haa_inv[i] * &ga[i];
            let hinv_b: Vec<DVector<f64>> = vis_cols[i].iter().map(|&j| &haa_inv[i] * b.column(j)).collect();
            for &j in &vis_cols[i] {
                let bj = b.column(j);
                let mut rj = rhs.rows_mut(r * j, r);
                rj -= &ai * bj.dot(&hinv_ga);
                for (y, &jj) in vis_cols[i].iter().enumerate() {
                    let coeff = hinv_b[y].dot(&bj);
                    let mut blk = schur.view_mut((r * j, r * jj), (r, r));
                    blk -= &aat * coeff;
                }
            }
        }
        let delta_b = match schur.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match schur.lu().solve(&rhs) {
                Some(x) => x,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            },
        };
        let mut a_new = a.clone();
        let mut b_new = b.clone();
        for j in 0..cols {
            let d = delta_b.rows(r * j, r);
            let mut col = b_new.column_mut(j);
            col += d;
        }
        for i in 0..rows {
            let ai = a.row(i).transpose();
            let mut g = ga[i].clone();
            for &j in &vis_cols[i] {
                g -= b.column(j) * ai.dot(&delta_b.rows(r * j, r));
            }
            let d = &haa_inv[i] * g;
            let mut row = a_new.row_mut(i);
            row += d.transpose();
        }
        if cost(&a_new, &b_new) <= cost0 {
            return (a_new, b_new);
        }
        lambda *= 10.0;
    }
    (a, b)
}

/// Rigid shape minimizing the reprojection error of both halves for fixed cameras.
pub(crate) fn rigid_symmetric_shape(obs: &ObservationSet, rotations: &[Matrix2x3<f64>]) -> DMatrix<f64> {
    let a = SymmetryOp::x().matrix();
    let p = obs.n_points();
    let mut lhs = Matrix3::zeros();
    for r in rotations {
        let rtr = r.transpose() * r;
        lhs += rtr + a * rtr * a;
    }
    let lhs_inv = pseudo_inverse3(&lhs);
    let mut s = DMatrix::zeros(3, p);
    for j in 0..p {
        let mut rhs = Vector3::zeros();
        for (n, r) in rotations.iter().enumerate() {
            let y = nalgebra::Vector2::new(obs.y[(2 * n, j)], obs.y[(2 * n + 1, j)]);
            let yd = nalgebra::Vector2::new(obs.y_dag[(2 * n, j)], obs.y_dag[(2 * n + 1, j)]);
            rhs += r.transpose() * y + a * (r.transpose() * yd);
        }
        s.set_column(j, &(lhs_inv * rhs));
    }
    s
}

pub(crate) fn pseudo_inverse3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let d = DMatrix::from_iterator(3, 3, m.iter().copied());
    Matrix3::from_iterator(crate::numerics::pseudo_inverse(&d, 1e-12).iter().copied())
}

/// Symmetric rigid reconstruction of centered, filled observations.
pub fn sym_rigid_sfm(obs: &ObservationSet) -> Result<RigidInitResult> {
    let mut warnings = Vec::new();
    let (l, m) = priorfree::decouple(obs);
    let pair = priorfree::factorize_decoupled(&l, &m, 1)?;
    let total = (l.norm_squared() + m.norm_squared()).sqrt();
    let res = (pair.res_l * pair.res_l + pair.res_m * pair.res_m).sqrt();
    if total > 0.0 && res > 0.5 * total {
        let msg = format!("rigid symmetric factorization leaves {:.1}% of the data unexplained", 100.0 * res / total);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let a = priorfree::build_orthonormality_system(&pair);
    let gram = priorfree::solve_pair_gram(&pair, &a, GramNormalization::Data)?;
    let recovery = priorfree::recover_cameras(&pair, &gram)?;
    let rotations: Vec<Matrix2x3<f64>> = recovery.poses.iter().map(|p| p.r).collect();
    let sbar = rigid_symmetric_shape(obs, &rotations);
    let poses = recovery.poses.iter().zip(&obs.t).map(|(p, t)| CameraPose::new(p.r, 1.0, *t)).collect();
    Ok(RigidInitResult { poses, sbar, completed: obs.clone(), flagged_images: recovery.flagged, warnings })
}

/// Rank-3 rigid factorization with metric upgrade, treating every column as an
/// independent point. Returns per-image rotations and one `3 × P` shape.
pub fn rigid_rank3_sfm(w: &DMatrix<f64>) -> Result<(Vec<Matrix2x3<f64>>, DMatrix<f64>)> {
    let n = w.nrows() / 2;
    if n == 0 || w.ncols() < 3 {
        return Err(Error::DegenerateInput("rank-3 factorization needs at least 3 points".into()));
    }
    let f = truncated_factorization(w, 3)?;
    // Metric constraints on the symmetric 3x3 Gram matrix of the corrective transform.
    let sym_index = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
    let coeffs = |x: &nalgebra::RowDVector<f64>, y: &nalgebra::RowDVector<f64>| -> Vec<f64> {
        sym_index
            .iter()
            .map(|&(i, j)| if i == j { x[i] * y[j] } else { x[i] * y[j] + x[j] * y[i] })
            .collect()
    };
    let mut lhs = DMatrix::zeros(3 * n, 6);
    let mut rhs = DVector::zeros(3 * n);
    for k in 0..n {
        let r1 = f.a.row(2 * k).into_owned();
        let r2 = f.a.row(2 * k + 1).into_owned();
        let c11 = coeffs(&r1, &r1);
        let c22 = coeffs(&r2, &r2);
        let c12 = coeffs(&r1, &r2);
        for c in 0..6 {
            lhs[(3 * k, c)] = c11[c];
            lhs[(3 * k + 1, c)] = c22[c];
            lhs[(3 * k + 2, c)] = c12[c];
        }
        rhs[3 * k] = 1.0;
        rhs[3 * k + 1] = 1.0;
    }
    let q = crate::numerics::pseudo_inverse(&lhs, 1e-12) * rhs;
    let gram = DMatrix::from_row_slice(3, 3, &[q[0], q[3], q[4], q[3], q[1], q[5], q[4], q[5], q[2]]);
    let (vals, vecs) = symmetric_eigen_desc(&gram);
    let floor = vals[0].abs().max(1e-12) * 1e-6;
    let mut h = DMatrix::zeros(3, 3);
    for i in 0..3 {
        h.set_column(i, &(vecs.column(i) * vals[i].max(floor).sqrt()));
    }
    let mut rotations = Vec::with_capacity(n);
    for k in 0..n {
        let m = f.a.rows(2 * k, 2) * &h;
        let m = Matrix2x3::from_iterator(m.iter().copied());
        rotations.push(project_row_orthonormal(&m).unwrap_or(Matrix2x3::identity()));
    }
    let mut lhs = Matrix3::zeros();
    for r in &rotations {
        lhs += r.transpose() * r;
    }
    let lhs_inv = pseudo_inverse3(&lhs);
    let mut s = DMatrix::zeros(3, w.ncols());
    for j in 0..w.ncols() {
        let mut acc = Vector3::zeros();
        for (k, r) in rotations.iter().enumerate() {
            acc += r.transpose() * nalgebra::Vector2::new(w[(2 * k, j)], w[(2 * k + 1, j)]);
        }
        s.set_column(j, &(lhs_inv * acc));
    }
    Ok((rotations, s))
}
