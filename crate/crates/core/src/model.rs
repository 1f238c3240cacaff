//! Domain types and the symmetry algebra shared by both pipelines.
//!
//! Stacked matrices follow one convention throughout: image `n` owns rows
//! `2n..2n+2` of a 2D observation stack and rows `3n..3n+3` of a shape stack.
//! Flattened shape vectors are point-major, `[x1, y1, z1, x2, ...]`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, RowVector3, Vector2};

use crate::error::{dim_check, Error, Result};

/// Minimum number of visible keypoints per image, counting both halves.
pub const MIN_VISIBLE_PER_IMAGE: usize = 5;

/// The plane a symmetric object is mirrored across.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryAxis {
    /// Mirror across the `x = 0` plane.
    #[default]
    X,
}

/// Reflection operator `diag(-1, 1, 1)` and its block expansions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SymmetryOp {
    pub axis: SymmetryAxis,
}

impl SymmetryOp {
    pub fn x() -> Self {
        Self { axis: SymmetryAxis::X }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, 1.0, 1.0))
    }

    /// Block-diagonal `I_n ⊗ A`, a `3n × 3n` matrix.
    pub fn expand(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::identity(3 * n, 3 * n);
        for i in 0..n {
            out[(3 * i, 3 * i)] = -1.0;
        }
        out
    }

    /// Applies `I_n ⊗ A` to a point-major vector without forming the matrix.
    pub fn apply_stacked(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for i in (0..v.len()).step_by(3) {
            out[i] = -out[i];
        }
        out
    }

    /// Applies `I_n ⊗ A` to every column of a point-major matrix.
    pub fn apply_stacked_cols(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for i in (0..m.nrows()).step_by(3) {
            out.row_mut(i).neg_mut();
        }
        out
    }
}

/// Negates the first row of a `3 × P` shape (or of every 3-row block of a stack).
pub fn reflect_shape(s: &DMatrix<f64>, op: &SymmetryOp) -> DMatrix<f64> {
    op.apply_stacked_cols(s)
}

/// 2D keypoint pairs of `N` images, with visibility and per-image translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// `2N × P` stacked keypoints.
    pub y: DMatrix<f64>,
    /// `2N × P` stacked mirror keypoints.
    pub y_dag: DMatrix<f64>,
    /// `N × P` visibility of `y`.
    pub vis: DMatrix<bool>,
    /// `N × P` visibility of `y_dag`.
    pub vis_dag: DMatrix<bool>,
    /// Translation removed from each image so far.
    pub t: Vec<Vector2<f64>>,
}

impl ObservationSet {
    pub fn new(
        y: DMatrix<f64>,
        y_dag: DMatrix<f64>,
        vis: DMatrix<bool>,
        vis_dag: DMatrix<bool>,
    ) -> Result<Self> {
        dim_check(y.nrows() % 2 == 0, || format!("Y has {} rows, expected an even count", y.nrows()))?;
        dim_check(y.shape() == y_dag.shape(), || {
            format!("Y is {:?} but Ydag is {:?}", y.shape(), y_dag.shape())
        })?;
        let n = y.nrows() / 2;
        let p = y.ncols();
        dim_check(vis.shape() == (n, p) && vis_dag.shape() == (n, p), || {
            format!("visibility masks must be {n}x{p}")
        })?;
        Ok(Self { y, y_dag, vis, vis_dag, t: vec![Vector2::zeros(); n] })
    }

    /// Observation set with every keypoint visible.
    pub fn fully_visible(y: DMatrix<f64>, y_dag: DMatrix<f64>) -> Result<Self> {
        let n = y.nrows() / 2;
        let p = y.ncols();
        Self::new(y, y_dag, DMatrix::from_element(n, p, true), DMatrix::from_element(n, p, true))
    }

    pub fn n_images(&self) -> usize {
        self.y.nrows() / 2
    }

    pub fn n_points(&self) -> usize {
        self.y.ncols()
    }

    pub fn visible_count(&self, n: usize) -> usize {
        self.vis.row(n).iter().chain(self.vis_dag.row(n).iter()).filter(|v| **v).count()
    }

    pub fn is_fully_visible(&self) -> bool {
        self.vis.iter().chain(self.vis_dag.iter()).all(|v| *v)
    }

    pub fn occluded_fraction(&self) -> f64 {
        let total = 2 * self.vis.len();
        let hidden = self.vis.iter().chain(self.vis_dag.iter()).filter(|v| !**v).count();
        hidden as f64 / total as f64
    }

    /// Checks dimensions (the fields are public and may have been edited since
    /// construction) and the visibility floor required by the estimators.
    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.n_images(), self.n_points());
        dim_check(self.y.nrows() % 2 == 0 && self.y.shape() == self.y_dag.shape(), || {
            format!("Y is {:?} but Ydag is {:?}", self.y.shape(), self.y_dag.shape())
        })?;
        dim_check(self.vis.shape() == (n, p) && self.vis_dag.shape() == (n, p), || {
            format!("visibility masks must be {n}x{p}")
        })?;
        dim_check(self.t.len() == n, || format!("{} translations for {n} images", self.t.len()))?;
        if n == 0 || p == 0 {
            return Err(Error::DegenerateInput("observation set is empty".into()));
        }
        for n in 0..self.n_images() {
            let c = self.visible_count(n);
            if c < MIN_VISIBLE_PER_IMAGE {
                return Err(Error::DegenerateInput(format!(
                    "image {n} has {c} visible keypoints, at least {MIN_VISIBLE_PER_IMAGE} required"
                )));
            }
        }
        if self.y.iter().chain(self.y_dag.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("observations contain non-finite values".into()));
        }
        Ok(())
    }

    /// `[Y, Ydag]` as one `2N × 2P` matrix.
    pub fn concatenated(&self) -> DMatrix<f64> {
        let (rows, p) = self.y.shape();
        let mut w = DMatrix::zeros(rows, 2 * p);
        w.columns_mut(0, p).copy_from(&self.y);
        w.columns_mut(p, p).copy_from(&self.y_dag);
        w
    }

    /// Visibility of [`Self::concatenated`] as an `N × 2P` mask.
    pub fn concatenated_mask(&self) -> DMatrix<bool> {
        let (n, p) = self.vis.shape();
        DMatrix::from_fn(n, 2 * p, |i, j| if j < p { self.vis[(i, j)] } else { self.vis_dag[(i, j - p)] })
    }

    /// Replaces both halves from a `2N × 2P` concatenation, keeping masks and translation.
    pub fn with_concatenated(&self, w: &DMatrix<f64>) -> Self {
        let p = self.n_points();
        let mut out = self.clone();
        out.y.copy_from(&w.columns(0, p));
        out.y_dag.copy_from(&w.columns(p, p));
        out
    }

    /// Image `n` as a pair of `2 × P` blocks.
    pub fn image(&self, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.y.rows(2 * n, 2).into_owned(), self.y_dag.rows(2 * n, 2).into_owned())
    }
}

/// Per-image weak-perspective camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Orthographic projection rows; `r rᵀ = I₂`.
    pub r: Matrix2x3<f64>,
    /// Weak-perspective scale.
    pub c: f64,
    /// Image translation.
    pub t: Vector2<f64>,
}

impl CameraPose {
    pub fn new(r: Matrix2x3<f64>, c: f64, t: Vector2<f64>) -> Self {
        Self { r, c, t }
    }

    /// Camera taking the first two rows of a rotation, unit scale, no translation.
    pub fn from_rotation(q: &Matrix3<f64>) -> Self {
        Self { r: q.fixed_rows::<2>(0).into_owned(), c: 1.0, t: Vector2::zeros() }
    }

    /// Completes `r` to a 3×3 rotation by appending the cross product of its rows.
    pub fn q_completion(&self) -> Matrix3<f64> {
        complete_rotation(&self.r)
    }

    /// `‖R Rᵀ − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.r * self.r.transpose() - nalgebra::Matrix2::identity()).norm()
    }
}

/// Third row = cross product of the first two.
pub fn complete_rotation(r: &Matrix2x3<f64>) -> Matrix3<f64> {
    let r1: RowVector3<f64> = r.row(0).into_owned();
    let r2: RowVector3<f64> = r.row(1).into_owned();
    let r3 = r1.cross(&r2);
    Matrix3::from_rows(&[r1, r2, r3])
}

/// Unknowns of the probabilistic (mean shape plus bases) model.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanShapeModel {
    /// Mean shape, point-major `3P` vector.
    pub sbar: DVector<f64>,
    /// `3P × K` deformation bases.
    pub v: DMatrix<f64>,
    /// `3P × K` bases of the mirror half.
    pub v_dag: DMatrix<f64>,
    /// `N × K` per-image coefficients (posterior means).
    pub z: DMatrix<f64>,
    pub sigma2: f64,
    pub lambda: f64,
}

impl MeanShapeModel {
    pub fn n_bases(&self) -> usize {
        self.v.ncols()
    }

    pub fn n_points(&self) -> usize {
        self.sbar.len() / 3
    }

    /// Mirror of the mean shape, always derived, never stored.
    pub fn sbar_dag(&self) -> DVector<f64> {
        SymmetryOp::x().apply_stacked(&self.sbar)
    }

    /// `3 × P` shape `Sbar + V z` for the given coefficients.
    pub fn shape_for(&self, z: &DVector<f64>) -> DMatrix<f64> {
        unflatten_shape(&(&self.sbar + &self.v * z))
    }
}

/// Per-image shapes of the prior-free model and an optional basis factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct PerImageShapeSet {
    /// `3N × P` stacked shapes.
    pub s: DMatrix<f64>,
    /// `N × K` coefficients.
    pub z: DMatrix<f64>,
    /// `3K × P` stacked bases.
    pub v: DMatrix<f64>,
    pub k: usize,
}

impl PerImageShapeSet {
    /// Builds `S_n = (z_n ⊗ I₃) V` for every image.
    pub fn from_bases(z: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let k = z.ncols();
        dim_check(v.nrows() == 3 * k, || format!("bases have {} rows, expected {}", v.nrows(), 3 * k))?;
        let n = z.nrows();
        let p = v.ncols();
        let mut s = DMatrix::zeros(3 * n, p);
        for i in 0..n {
            let mut block = s.rows_mut(3 * i, 3);
            for j in 0..k {
                block += v.rows(3 * j, 3) * z[(i, j)];
            }
        }
        Ok(Self { s, z, v, k })
    }

    /// Shapes without a basis factorization attached.
    pub fn from_shapes(s: DMatrix<f64>, k: usize) -> Self {
        let n = s.nrows() / 3;
        let p = s.ncols();
        Self { s, z: DMatrix::zeros(n, k), v: DMatrix::zeros(3 * k, p), k }
    }

    pub fn n_images(&self) -> usize {
        self.s.nrows() / 3
    }

    pub fn shape(&self, n: usize) -> DMatrix<f64> {
        self.s.rows(3 * n, 3).into_owned()
    }
}

/// Posterior moments of one image's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub mu: DVector<f64>,
    /// Second moment `E[z zᵀ]`.
    pub phi: DMatrix<f64>,
    /// `(Mᵀ M + M†ᵀ M† + σ² I)⁻¹`.
    pub gamma: DMatrix<f64>,
}

impl PosteriorStats {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.phi - &self.mu * self.mu.transpose()
    }
}

/// Removes the mean of the visible entries (both halves) from every image.
pub fn center_observations(obs: &ObservationSet) -> Result<(ObservationSet, Vec<Vector2<f64>>)> {
    let n = obs.n_images();
    let p = obs.n_points();
    let mut out = obs.clone();
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = Vector2::zeros();
        let mut count = 0usize;
        for j in 0..p {
            if obs.vis[(i, j)] {
                sum += Vector2::new(obs.y[(2 * i, j)], obs.y[(2 * i + 1, j)]);
                count += 1;
            }
            if obs.vis_dag[(i, j)] {
                sum += Vector2::new(obs.y_dag[(2 * i, j)], obs.y_dag[(2 * i + 1, j)]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegenerateInput(format!("image {i} has no visible keypoints")));
        }
        let t = sum / count as f64;
        for j in 0..p {
            for d in 0..2 {
                out.y[(2 * i + d, j)] -= t[d];
                out.y_dag[(2 * i + d, j)] -= t[d];
            }
        }
        out.t[i] += t;
        ts.push(t);
    }
    Ok((out, ts))
}

/// Rearranges a `3N × P` shape stack so row `n` is `[x_n, y_n, z_n]` (length `3P`).
pub fn rearrange_compact(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    dim_check(s.nrows() % 3 == 0, || format!("shape stack has {} rows, not a multiple of 3", s.nrows()))?;
    let n = s.nrows() / 3;
    let p = s.ncols();
    Ok(DMatrix::from_fn(n, 3 * p, |i, j| s[(3 * i + j / p, j % p)]))
}

/// Inverse of [`rearrange_compact`].
pub fn restore_compact(s_sharp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    dim_check(s_sharp.ncols() % 3 == 0, || {
        format!("compact shape has {} columns, not a multiple of 3", s_sharp.ncols())
    })?;
    let n = s_sharp.nrows();
    let p = s_sharp.ncols() / 3;
    Ok(DMatrix::from_fn(3 * n, p, |i, j| s_sharp[(i / 3, (i % 3) * p + j)]))
}

/// Stacks `Π_n = R_n (z_n ⊗ I₃)` into a `2N × 3K` matrix.
pub fn stack_model(poses: &[CameraPose], z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    dim_check(poses.len() == z.nrows(), || {
        format!("{} poses but {} coefficient rows", poses.len(), z.nrows())
    })?;
    let k = z.ncols();
    let mut pi = DMatrix::zeros(2 * poses.len(), 3 * k);
    for (n, pose) in poses.iter().enumerate() {
        for j in 0..k {
            pi.view_mut((2 * n, 3 * j), (2, 3)).copy_from(&(pose.r * z[(n, j)]));
        }
    }
    Ok(pi)
}

/// `3P` point-major vector to a `3 × P` matrix.
pub fn unflatten_shape(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, v.len() / 3, v.as_slice())
}

/// `3 × P` matrix to a `3P` point-major vector.
pub fn flatten_shape(s: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(s.as_slice())
}

/// `2 × P` image block to a `2P` point-major vector.
pub fn flatten_image(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(y.as_slice())
}

/// `[S, A S]`: a `3 × P` half shape extended with its mirror half.
pub fn full_symmetric_shape(s: &DMatrix<f64>) -> DMatrix<f64> {
    let p = s.ncols();
    let mut out = DMatrix::zeros(3, 2 * p);
    out.columns_mut(0, p).copy_from(s);
    out.columns_mut(p, p).copy_from(&reflect_shape(s, &SymmetryOp::x()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn symmetry_op_is_an_involution_with_negative_determinant() {
        let a = SymmetryOp::x().matrix();
        assert_eq!(a * a, Matrix3::identity());
        assert_relative_eq!(a.determinant(), -1.0);
        for n in 1..5 {
            let e = SymmetryOp::x().expand(n);
            assert_eq!(&e * &e, DMatrix::identity(3 * n, 3 * n));
            assert_eq!(&e * e.transpose(), DMatrix::identity(3 * n, 3 * n));
        }
    }

    #[test]
    fn reflect_negates_first_row() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = reflect_shape(&s, &SymmetryOp::x());
        assert_eq!(r, DMatrix::from_row_slice(3, 2, &[-1.0, -2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(reflect_shape(&r, &SymmetryOp::x()), s);
    }

    #[test]
    fn reflected_columns_mirror_across_x_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_matrix(&mut rng, 3, 8);
        let r = reflect_shape(&s, &SymmetryOp::x());
        for j in 0..8 {
            let mid = (s.column(j) + r.column(j)) / 2.0;
            assert_eq!(mid[0], 0.0);
            assert_eq!(r[(1, j)], s[(1, j)]);
            assert_eq!(r[(2, j)], s[(2, j)]);
        }
    }

    #[test]
    fn projection_of_reflection_matches_operator_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_matrix(&mut rng, 3, 6);
        let r = Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let rd = DMatrix::from_iterator(2, 3, r.iter().copied());
        let a = DMatrix::from_iterator(3, 3, SymmetryOp::x().matrix().iter().copied());
        assert_eq!(&rd * reflect_shape(&s, &SymmetryOp::x()), &rd * &a * &s);
    }

    #[test]
    fn expand_matches_per_point_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let a = SymmetryOp::x().matrix();
        let blockwise = SymmetryOp::x().expand(4) * &v;
        for p in 0..4 {
            let pt = a * v.fixed_rows::<3>(3 * p);
            assert_eq!(blockwise.fixed_rows::<3>(3 * p), pt);
        }
        assert_eq!(SymmetryOp::x().apply_stacked(&v), blockwise);
    }

    #[test]
    fn centering_constant_image() {
        let y = DMatrix::from_fn(2, 4, |i, _| if i == 0 { 3.0 } else { 4.0 });
        let obs = ObservationSet::fully_visible(y.clone(), y).unwrap();
        let (c, t) = center_observations(&obs).unwrap();
        assert_eq!(t[0], Vector2::new(3.0, 4.0));
        assert!(c.y.iter().all(|v| *v == 0.0));
        assert_eq!(c.t[0], Vector2::new(3.0, 4.0));
    }

    #[test]
    fn centering_symmetric_means_cancel() {
        let y = DMatrix::from_row_slice(2, 2, &[0.5, 1.5, 1.0, -1.0]);
        let yd = DMatrix::from_row_slice(2, 2, &[-0.5, -1.5, 2.0, -2.0]);
        let (_, t) = center_observations(&ObservationSet::fully_visible(y, yd).unwrap()).unwrap();
        assert_relative_eq!(t[0], Vector2::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn centering_matches_masked_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = random_matrix(&mut rng, 4, 6);
        let yd = random_matrix(&mut rng, 4, 6);
        let vis = DMatrix::from_fn(2, 6, |_, _| rng.random_bool(0.6));
        let mut vis_dag = DMatrix::from_fn(2, 6, |_, _| rng.random_bool(0.6));
        vis_dag[(0, 0)] = true;
        vis_dag[(1, 0)] = true;
        let obs = ObservationSet::new(y.clone(), yd.clone(), vis.clone(), vis_dag.clone()).unwrap();
        let (c, t) = center_observations(&obs).unwrap();
        for n in 0..2 {
            for d in 0..2 {
                let mut acc = Vec::new();
                for j in 0..6 {
                    if vis[(n, j)] {
                        acc.push(y[(2 * n + d, j)]);
                    }
                    if vis_dag[(n, j)] {
                        acc.push(yd[(2 * n + d, j)]);
                    }
                }
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                assert_relative_eq!(t[n][d], mean, epsilon = 1e-12);
                let mut centered = 0.0;
                for j in 0..6 {
                    if vis[(n, j)] {
                        centered += c.y[(2 * n + d, j)];
                    }
                    if vis_dag[(n, j)] {
                        centered += c.y_dag[(2 * n + d, j)];
                    }
                }
                assert!(centered.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn centering_rejects_blind_image() {
        let y = DMatrix::zeros(2, 3);
        let obs = ObservationSet::new(y.clone(), y, DMatrix::from_element(1, 3, false), DMatrix::from_element(1, 3, false))
            .unwrap();
        assert!(matches!(center_observations(&obs), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn rearrange_single_image() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = rearrange_compact(&s).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(restore_compact(&c).unwrap(), s);
    }

    #[test]
    fn rearrange_matches_permutation_form() {
        // [P_x, P_y, P_z](I_3 ⊗ S) with P_x(i, 3i-2) = 1 and so on.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let p = 4;
        let s = random_matrix(&mut rng, 3 * n, p);
        let mut perm = DMatrix::zeros(n, 9 * n);
        for i in 0..n {
            for axis in 0..3 {
                perm[(i, axis * 3 * n + 3 * i + axis)] = 1.0;
            }
        }
        let mut kron = DMatrix::zeros(9 * n, 3 * p);
        for b in 0..3 {
            kron.view_mut((3 * n * b, p * b), (3 * n, p)).copy_from(&s);
        }
        assert_eq!(perm * kron, rearrange_compact(&s).unwrap());
    }

    #[test]
    fn rearranged_single_basis_scene_has_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let basis = random_matrix(&mut rng, 3, 5);
        let z = DMatrix::from_column_slice(3, 1, &[0.7, -1.3, 2.1]);
        let shapes = PerImageShapeSet::from_bases(z, basis).unwrap();
        let sv = rearrange_compact(&shapes.s).unwrap().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[0] > 1.0);
        assert!(sv[1] < 1e-12 * sv[0]);
    }

    #[test]
    fn rearrange_rejects_bad_rows() {
        assert!(rearrange_compact(&DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn stack_model_examples() {
        let eye = CameraPose::new(Matrix2x3::identity(), 1.0, Vector2::zeros());
        let pi = stack_model(&[eye], &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(pi, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let pi2 = stack_model(&[eye], &DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).unwrap();
        assert_eq!(pi2.columns(0, 3), pi.columns(0, 3) * 2.0);
        assert!(pi2.columns(3, 3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stack_model_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (n, k, p) = (4, 3, 5);
        let poses: Vec<CameraPose> = (0..n)
            .map(|_| {
                let q = nalgebra::Rotation3::from_scaled_axis(nalgebra::Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ));
                CameraPose::from_rotation(q.matrix())
            })
            .collect();
        let z = random_matrix(&mut rng, n, k);
        let v = random_matrix(&mut rng, 3 * k, p);
        let pv = stack_model(&poses, &z).unwrap() * &v;
        for i in 0..n {
            let r = DMatrix::from_iterator(2, 3, poses[i].r.iter().copied());
            let mut direct = DMatrix::zeros(2, p);
            for j in 0..k {
                direct += &r * v.rows(3 * j, 3) * z[(i, j)];
            }
            assert_relative_eq!(pv.rows(2 * i, 2).into_owned(), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn q_completion_is_proper() {
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let pose = CameraPose::from_rotation(q.matrix());
        assert_relative_eq!(pose.q_completion(), *q.matrix(), epsilon = 1e-12);
        assert!(pose.orthonormality_error() < 1e-12);
    }

    #[test]
    fn posterior_covariance_subtracts_outer_product() {
        let stats = PosteriorStats {
            mu: DVector::from_vec(vec![1.0, 2.0]),
            phi: DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 5.0]),
            gamma: DMatrix::identity(2, 2),
        };
        assert_eq!(stats.covariance(), DMatrix::identity(2, 2));
    }

    proptest! {
        #[test]
        fn rearrange_round_trips(n in 1usize..5, p in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, 3 * n, p);
            prop_assert_eq!(restore_compact(&rearrange_compact(&s).unwrap()).unwrap(), s);
        }

        #[test]
        fn reflection_is_involutive(p in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, 3, p);
            let op = SymmetryOp::x();
            prop_assert_eq!(reflect_shape(&reflect_shape(&s, &op), &op), s);
        }
    }
}
