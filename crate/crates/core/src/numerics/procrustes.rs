use nalgebra::{DMatrix, Matrix3};

use crate::error::{dim_check, Error, Result};

/// Proper rotation maximizing `tr(Rᵀ H)`, i.e. the rotation nearest to `H`.
pub fn nearest_rotation(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let d = (u * vt).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    u * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * vt
}

/// Proper rotation minimizing `‖R S_est − S_gt‖_F` for centered `3 × P` point sets.
pub fn procrustes_rotation(s_est: &DMatrix<f64>, s_gt: &DMatrix<f64>) -> Result<Matrix3<f64>> {
    dim_check(s_est.nrows() == 3 && s_est.shape() == s_gt.shape(), || {
        format!("point sets are {:?} and {:?}", s_est.shape(), s_gt.shape())
    })?;
    if s_est.ncols() < 3 {
        return Err(Error::IllPosed(format!("{} points are too few to align", s_est.ncols())));
    }
    for (name, s) in [("estimate", s_est), ("reference", s_gt)] {
        let sv = super::linalg::sorted_svd(s).s;
        if sv[0] == 0.0 || sv[1] <= 1e-12 * sv[0] {
            return Err(Error::IllPosed(format!("{name} point set has rank below 2")));
        }
    }
    let h = s_gt * s_est.transpose();
    Ok(nearest_rotation(&Matrix3::from_iterator(h.iter().copied())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn centered_cloud(seed: u64, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = DMatrix::from_fn(3, p, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..3 {
            let m = s.row(i).mean();
            s.row_mut(i).add_scalar_mut(-m);
        }
        s
    }

    fn to_dyn(r: &Matrix3<f64>) -> DMatrix<f64> {
        DMatrix::from_iterator(3, 3, r.iter().copied())
    }

    #[test]
    fn recovers_exact_rotation() {
        let s = centered_cloud(1, 8);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), 30f64.to_radians());
        let r = procrustes_rotation(&s, &(to_dyn(rz.matrix()) * &s)).unwrap();
        assert_relative_eq!(r, *rz.matrix(), epsilon = 1e-10);
    }

    #[test]
    fn identical_sets_give_identity() {
        let s = centered_cloud(2, 6);
        assert_relative_eq!(procrustes_rotation(&s, &s).unwrap(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn beats_random_rotations_on_noisy_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = centered_cloud(4, 10);
        let rot = Rotation3::from_euler_angles(0.4, -0.2, 1.0);
        let noisy = to_dyn(rot.matrix()) * &s + DMatrix::from_fn(3, 10, |_, _| rng.random_range(-0.1..0.1));
        let best = procrustes_rotation(&s, &noisy).unwrap();
        let res = (to_dyn(&best) * &s - &noisy).norm();
        for _ in 0..1000 {
            let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let cand = q.to_rotation_matrix();
            assert!(res <= (to_dyn(cand.matrix()) * &s - &noisy).norm() + 1e-12);
        }
    }

    #[test]
    fn collinear_points_are_ill_posed() {
        let s = DMatrix::from_fn(3, 5, |i, j| if i == 0 { j as f64 - 2.0 } else { 0.0 });
        assert!(matches!(procrustes_rotation(&s, &s), Err(Error::IllPosed(_))));
    }

    #[test]
    fn reflection_is_not_returned() {
        let s = centered_cloud(5, 7);
        let mut mirrored = s.clone();
        mirrored.row_mut(0).neg_mut();
        let r = procrustes_rotation(&s, &mirrored).unwrap();
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn output_is_a_proper_rotation(seed in any::<u64>()) {
            let a = centered_cloud(seed, 6);
            let b = centered_cloud(seed.wrapping_add(1), 6);
            let r = procrustes_rotation(&a, &b).unwrap();
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        }
    }
}
