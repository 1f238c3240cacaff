use nalgebra::{DMatrix, DVector};

use super::linalg::sorted_svd;
use crate::error::{Error, Result};

/// Balanced rank-`r` factorization `A B` of a matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    /// `m × r`, equal to `U_r Σ_r^{1/2}`.
    pub a: DMatrix<f64>,
    /// `r × p`, equal to `Σ_r^{1/2} V_rᵀ`.
    pub b: DMatrix<f64>,
    /// `‖M − A B‖_F`.
    pub residual: f64,
    /// All singular values of the input, decreasing.
    pub singular_values: DVector<f64>,
}

/// Best rank-`r` approximation split evenly between the two factors.
pub fn truncated_factorization(m: &DMatrix<f64>, r: usize) -> Result<Factorization> {
    let (rows, cols) = m.shape();
    if r > rows.min(cols) {
        return Err(Error::InvalidConfig(format!("rank {r} exceeds min({rows}, {cols})")));
    }
    let svd = sorted_svd(m);
    let mut a = DMatrix::zeros(rows, r);
    let mut b = DMatrix::zeros(r, cols);
    for i in 0..r {
        let w = svd.s[i].sqrt();
        a.set_column(i, &(svd.u.column(i) * w));
        b.set_row(i, &(svd.v.column(i).transpose() * w));
    }
    let residual = (m - &a * &b).norm();
    Ok(Factorization { a, b, residual, singular_values: svd.s })
}

/// Full set of right singular vectors (`p × p`) and `p` singular values, zero-padded.
fn right_singular_full(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = m.ncols();
    let padded = if m.nrows() < p {
        let mut z = DMatrix::zeros(p, p);
        z.rows_mut(0, m.nrows()).copy_from(m);
        z
    } else {
        m.clone()
    };
    let svd = sorted_svd(&padded);
    (svd.v, svd.s)
}

/// Orthonormal basis of the numerical null space: right singular vectors whose
/// singular value is at most `tol · σ_max`.
pub fn nullspace(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let p = m.ncols();
    if p == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (v, s) = right_singular_full(m);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..p).filter(|&i| smax == 0.0 || s[i] <= tol * smax).collect();
    DMatrix::from_fn(p, keep.len(), |i, j| v[(i, keep[j])])
}

/// The `d` right singular vectors with the smallest singular values, and those values.
pub fn smallest_right_singular_vectors(m: &DMatrix<f64>, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let p = m.ncols();
    let d = d.min(p);
    let (v, s) = right_singular_full(m);
    (v.columns(p - d, d).into_owned(), s.rows(p - d, d).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rank_one_outer_product() {
        let u = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        let v = DMatrix::from_row_slice(1, 3, &[2.0, 1.0, -1.0]);
        let f = truncated_factorization(&(&u * &v), 1).unwrap();
        assert!(f.residual <= 1e-12);
    }

    #[test]
    fn identity_full_rank() {
        let f = truncated_factorization(&DMatrix::identity(3, 3), 3).unwrap();
        assert_relative_eq!(&f.a * &f.b, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn residual_matches_singular_tail() {
        let m = random(1, 6, 5);
        let f = truncated_factorization(&m, 2).unwrap();
        let s = m.singular_values();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let tail = (s[2] * s[2] + s[3] * s[3] + s[4] * s[4]).sqrt();
        assert_relative_eq!(f.residual, tail, epsilon = 1e-10);
    }

    #[test]
    fn factors_are_balanced() {
        let m = random(2, 5, 7);
        let f = truncated_factorization(&m, 3).unwrap();
        assert_relative_eq!(f.a.transpose() * &f.a, &f.b * f.b.transpose(), epsilon = 1e-10);
    }

    #[test]
    fn rank_above_dimensions_is_rejected() {
        assert!(truncated_factorization(&DMatrix::zeros(2, 5), 3).is_err());
    }

    #[test]
    fn nullspace_of_single_row() {
        let ns = nullspace(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 1e-10);
        assert_eq!(ns.ncols(), 1);
        assert_relative_eq!(ns[(1, 0)].abs(), 1.0, epsilon = 1e-12);
        assert!(ns[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn nullspace_of_full_rank_square_is_empty() {
        let m = random(3, 4, 4) + DMatrix::identity(4, 4) * 3.0;
        assert_eq!(nullspace(&m, 1e-10).ncols(), 0);
    }

    #[test]
    fn nullspace_columns_are_orthonormal_and_annihilated() {
        let m = random(4, 3, 7);
        let ns = nullspace(&m, 1e-10);
        assert_eq!(ns.ncols(), 4);
        assert_relative_eq!(ns.transpose() * &ns, DMatrix::identity(4, 4), epsilon = 1e-12);
        assert!((&m * &ns).norm() < 1e-10 * m.norm());
    }

    #[test]
    fn smallest_vectors_span_nullspace_when_exact() {
        let m = random(5, 2, 4);
        let (v, s) = smallest_right_singular_vectors(&m, 2);
        assert!(s.iter().all(|x| *x < 1e-12));
        assert!((&m * &v).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn residual_is_non_increasing_in_rank(seed in any::<u64>(), rows in 2usize..8, cols in 2usize..8) {
            let m = random(seed, rows, cols);
            let mut prev = f64::INFINITY;
            for r in 0..=rows.min(cols) {
                let f = truncated_factorization(&m, r).unwrap();
                prop_assert!(f.residual <= prev + 1e-12);
                prev = f.residual;
            }
            prop_assert!(prev < 1e-10);
        }
    }
}
