use nalgebra::{DMatrix, Matrix2x3, Matrix3};

use super::decouple::DecoupledPair;
use crate::error::{Error, Result};
use crate::model::{CameraPose, SymmetryOp};
use crate::numerics::{project_row_orthonormal, sorted_svd, GramSolution};
use crate::rigid_init::pseudo_inverse3;

/// Cameras recovered from a Gram solution.
#[derive(Debug, Clone)]
pub struct CameraRecovery {
    pub poses: Vec<CameraPose>,
    /// Images whose corrected camera was near zero; their pose was copied or
    /// interpolated from the nearest valid neighbours in index order.
    pub flagged: Vec<usize>,
}

/// Normalizes rows and projects each corrected camera onto row-orthonormal matrices.
pub(crate) fn cameras_from_products(products: &[Matrix2x3<f64>]) -> Result<(Vec<Matrix2x3<f64>>, Vec<usize>)> {
    let mut norms: Vec<f64> = products.iter().flat_map(|m| [m.row(0).norm(), m.row(1).norm()]).collect();
    norms.sort_by(|a, b| a.total_cmp(b));
    let typical = norms.get(norms.len() / 2).copied().unwrap_or(0.0);
    let mut out: Vec<Option<Matrix2x3<f64>>> = products
        .iter()
        .map(|m| {
            let (n0, n1) = (m.row(0).norm(), m.row(1).norm());
            if n0.min(n1) < 1e-8 * typical.max(f64::MIN_POSITIVE) || !n0.is_finite() || !n1.is_finite() {
                return None;
            }
            let mut scaled = *m;
            scaled.row_mut(0).unscale_mut(n0);
            scaled.row_mut(1).unscale_mut(n1);
            project_row_orthonormal(&scaled).ok()
        })
        .collect();
    let flagged: Vec<usize> = out.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(i, _)| i).collect();
    if flagged.len() == out.len() {
        return Err(Error::DegenerateInput("no image yields a usable camera".into()));
    }
    let valid: Vec<Option<Matrix2x3<f64>>> = out.clone();
    for &i in &flagged {
        let prev = (0..i).rev().find_map(|j| valid[j]);
        let next = (i + 1..valid.len()).find_map(|j| valid[j]);
        out[i] = match (prev, next) {
            (Some(p), Some(n)) => project_row_orthonormal(&((p + n) * 0.5)).ok().or(Some(p)),
            (Some(p), None) => Some(p),
            (None, n) => n,
        };
        log::warn!("image {i}: camera undetermined by the factorization, filled from neighbours");
    }
    Ok((out.into_iter().map(|r| r.expect("filled above")).collect(), flagged))
}

/// Picks the overall sign of every camera so that all images agree on one shape.
///
/// `halves` pairs each `2N × P` observation stack with the operator mapping the
/// shared shape onto it. Signs start from the leading singular vector of the
/// per-image back-projections and are then refined against a rigid reference
/// shape: each image keeps the sign with the smaller reprojection residual.
pub(crate) fn synchronize_signs(rotations: &mut [Matrix2x3<f64>], halves: &[(&DMatrix<f64>, Matrix3<f64>)]) {
    let n = rotations.len();
    if n == 0 {
        return;
    }
    let p = halves[0].0.ncols();
    let back: Vec<DMatrix<f64>> = rotations
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rt = DMatrix::from_iterator(3, 2, r.transpose().iter().copied());
            let mut b = DMatrix::zeros(3, p);
            for (data, op) in halves {
                let opd = DMatrix::from_iterator(3, 3, op.iter().copied());
                b += opd * &rt * data.rows(2 * i, 2);
            }
            b
        })
        .collect();
    let stacked = DMatrix::from_fn(3 * p, n, |k, i| back[i][(k % 3, k / 3)]);
    let lead = sorted_svd(&stacked).v.column(0).into_owned();
    let mut signs: Vec<f64> = lead.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();

    let mut lhs = Matrix3::zeros();
    for r in rotations.iter() {
        let rtr = r.transpose() * r;
        for (_, op) in halves {
            lhs += op * rtr * op;
        }
    }
    let lhs_inv = DMatrix::from_iterator(3, 3, pseudo_inverse3(&lhs).iter().copied());
    for _ in 0..20 {
        let mut acc = DMatrix::zeros(3, p);
        for (b, s) in back.iter().zip(&signs) {
            acc += b * *s;
        }
        let reference = &lhs_inv * acc;
        let mut changed = false;
        for (i, b) in back.iter().enumerate() {
            let score = b.dot(&reference);
            let s = if score < 0.0 { -1.0 } else if score > 0.0 { 1.0 } else { signs[i] };
            if s != signs[i] {
                signs[i] = s;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (r, s) in rotations.iter_mut().zip(signs) {
        *r *= s;
    }
}

/// Recovers one row-orthonormal camera per image from `[Π̂¹_n h1, Π̂²_n h2]`.
pub fn recover_cameras(pair: &DecoupledPair, gram: &GramSolution) -> Result<CameraRecovery> {
    let n = pair.n_images();
    let products: Vec<Matrix2x3<f64>> = (0..n)
        .map(|i| {
            let x = pair.pi1.rows(2 * i, 2) * &gram.h1;
            let yz = pair.pi2.rows(2 * i, 2) * &gram.h2;
            Matrix2x3::new(x[0], yz[(0, 0)], yz[(0, 1)], x[1], yz[(1, 0)], yz[(1, 1)])
        })
        .collect();
    let (mut rotations, flagged) = cameras_from_products(&products)?;
    let y = pair.y();
    let y_dag = pair.y_dag();
    synchronize_signs(&mut rotations, &[(&y, Matrix3::identity()), (&y_dag, SymmetryOp::x().matrix())]);
    Ok(CameraRecovery { poses: rotations.into_iter().map(|r| CameraPose::new(r, 1.0, Default::default())).collect(), flagged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_product_is_filled_from_neighbours() {
        let eye = Matrix2x3::identity();
        let (rots, flagged) = cameras_from_products(&[eye, Matrix2x3::zeros(), eye * 3.0]).unwrap();
        assert_eq!(flagged, vec![1]);
        assert!((rots[1] - eye).norm() < 1e-12);
        assert!((rots[2] - eye).norm() < 1e-12);
    }

    #[test]
    fn all_zero_products_fail() {
        assert!(cameras_from_products(&[Matrix2x3::zeros(); 3]).is_err());
    }
}
