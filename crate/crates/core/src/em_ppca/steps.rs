//! E and M steps of the probabilistic model, written for one or two observed
//! halves. Half 0 is explained by `(Sbar, V)`, the mirror half by `(A Sbar, Vdag)`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{dim_check, Error, Result};
use crate::model::{CameraPose, MeanShapeModel, PosteriorStats, SymmetryOp};
use crate::numerics::{rotation_step, RotationProblem};

/// Observations in the layout the EM steps consume: one `2N × P` stack per
/// half, with occluded entries already imputed.
#[derive(Debug, Clone)]
pub(crate) struct Halves {
    pub data: Vec<DMatrix<f64>>,
    pub vis: Vec<DMatrix<bool>>,
}

impl Halves {
    pub fn mirror(&self) -> bool {
        self.data.len() == 2
    }

    pub fn n_images(&self) -> usize {
        self.data[0].nrows() / 2
    }

    pub fn n_points(&self) -> usize {
        self.data[0].ncols()
    }

    /// Image `n` of half `h` as a `2 × P` block.
    pub fn block(&self, h: usize, n: usize) -> DMatrix<f64> {
        self.data[h].rows(2 * n, 2).into_owned()
    }
}

/// Mean shape and bases explaining half `h`.
pub(crate) fn half_model(model: &MeanShapeModel, h: usize) -> (DVector<f64>, &DMatrix<f64>) {
    if h == 0 {
        (model.sbar.clone(), &model.v)
    } else {
        (model.sbar_dag(), &model.v_dag)
    }
}

/// `[mean_p, V_p]`: the `3 × (K+1)` homogenized bases of point `p`.
fn point_bases(mean: &DVector<f64>, v: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let k = v.ncols();
    let mut out = DMatrix::zeros(3, k + 1);
    out.set_column(0, &mean.rows(3 * p, 3));
    out.columns_mut(1, k).copy_from(&v.rows(3 * p, 3));
    out
}

fn camera(pose: &CameraPose) -> DMatrix<f64> {
    DMatrix::from_iterator(2, 3, (pose.r * pose.c).iter().copied())
}

/// `G V` and the residual `y − G mean − T` of one image and half, point-major.
fn design(model: &MeanShapeModel, pose: &CameraPose, h: usize, y: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (mean, v) = half_model(model, h);
    let p = y.ncols();
    let k = v.ncols();
    let g = camera(pose);
    let mut w = DMatrix::zeros(2 * p, k);
    let mut r = DVector::zeros(2 * p);
    for j in 0..p {
        w.rows_mut(2 * j, 2).copy_from(&(&g * v.rows(3 * j, 3)));
        let pred = &g * mean.rows(3 * j, 3) + pose.t;
        r[2 * j] = y[(0, j)] - pred[0];
        r[2 * j + 1] = y[(1, j)] - pred[1];
    }
    (w, r)
}

/// Stacked design and residual over all halves of image `n`.
pub(crate) fn stacked_design(model: &MeanShapeModel, pose: &CameraPose, halves: &Halves, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> =
        (0..halves.data.len()).map(|h| design(model, pose, h, &halves.block(h, n))).collect();
    let rows: usize = parts.iter().map(|(w, _)| w.nrows()).sum();
    let k = model.n_bases();
    let mut w = DMatrix::zeros(rows, k);
    let mut r = DVector::zeros(rows);
    let mut off = 0;
    for (wh, rh) in parts {
        w.rows_mut(off, wh.nrows()).copy_from(&wh);
        r.rows_mut(off, rh.len()).copy_from(&rh);
        off += rh.len();
    }
    (w, r)
}

fn posterior_from_design(w: &DMatrix<f64>, r: &DVector<f64>, sigma2: f64) -> Result<(PosteriorStats, DMatrix<f64>)> {
    let k = w.ncols();
    let m = w.transpose() * w + DMatrix::identity(k, k) * sigma2;
    let gamma = m
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
        .ok_or_else(|| Error::Numerical("posterior precision is singular".into()))?;
    let mu = &gamma * (w.transpose() * r);
    let phi = &gamma * sigma2 + &mu * mu.transpose();
    Ok((PosteriorStats { mu, phi, gamma }, m))
}

pub(crate) fn posterior(model: &MeanShapeModel, pose: &CameraPose, halves: &Halves, n: usize) -> Result<PosteriorStats> {
    if !(model.sigma2 > 0.0) {
        return Err(Error::Numerical(format!("noise variance {} is not positive", model.sigma2)));
    }
    let (w, r) = stacked_design(model, pose, halves, n);
    Ok(posterior_from_design(&w, &r, model.sigma2)?.0)
}

/// Negative log marginal likelihood of image `n` with `z` integrated out.
pub(crate) fn image_objective(model: &MeanShapeModel, pose: &CameraPose, halves: &Halves, n: usize) -> Result<f64> {
    let (w, r) = stacked_design(model, pose, halves, n);
    let s2 = model.sigma2;
    let (stats, m) = posterior_from_design(&w, &r, s2)?;
    let d = r.len() as f64;
    let k = w.ncols() as f64;
    let quad = ((&r - &w * &stats.mu).norm_squared() + s2 * stats.mu.norm_squared()) / s2;
    let logdet = m.cholesky().map(|c| 2.0 * c.l().diagonal().map(f64::ln).sum()).unwrap_or(f64::INFINITY);
    Ok(0.5 * quad + 0.5 * ((d - k) * s2.ln() + logdet) + 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Coupling penalty `λ ‖Vdag − A V‖²`.
pub(crate) fn coupling_penalty(model: &MeanShapeModel) -> f64 {
    let mirrored = SymmetryOp::x().apply_stacked_cols(&model.v);
    model.lambda * (&model.v_dag - mirrored).norm_squared()
}

/// Posterior moments of one image's coefficients given both halves.
///
/// `yn` and `yn_dag` are point-major `2P` vectors `[u1, v1, u2, ...]`.
pub fn e_step(model: &MeanShapeModel, pose: &CameraPose, yn: &DVector<f64>, yn_dag: &DVector<f64>) -> Result<PosteriorStats> {
    let p = model.n_points();
    dim_check(yn.len() == 2 * p && yn_dag.len() == 2 * p, || format!("image vectors must have length {}", 2 * p))?;
    let halves = Halves {
        data: vec![DMatrix::from_column_slice(2, p, yn.as_slice()), DMatrix::from_column_slice(2, p, yn_dag.as_slice())],
        vis: vec![DMatrix::from_element(1, p, true); 2],
    };
    posterior(model, pose, &halves, 0)
}

fn homogenized(stats: &PosteriorStats) -> (DVector<f64>, DMatrix<f64>) {
    let k = stats.mu.len();
    let mut mu = DVector::zeros(k + 1);
    mu[0] = 1.0;
    mu.rows_mut(1, k).copy_from(&stats.mu);
    let mut phi = DMatrix::zeros(k + 1, k + 1);
    phi[(0, 0)] = 1.0;
    phi.view_mut((0, 1), (1, k)).copy_from(&stats.mu.transpose());
    phi.view_mut((1, 0), (k, 1)).copy_from(&stats.mu);
    phi.view_mut((1, 1), (k, k)).copy_from(&stats.phi);
    (mu, phi)
}

/// New mean shape and bases.
#[derive(Debug, Clone)]
pub struct ShapeUpdate {
    pub sbar: DVector<f64>,
    pub v: DMatrix<f64>,
    pub v_dag: DMatrix<f64>,
    /// Set when some point's normal equations needed damping.
    pub regularized: bool,
}

/// Joint update of mean shape and both basis sets.
///
/// Cameras act point by point, so the stationarity system is block diagonal
/// with one block per keypoint, unknowns `[Sbar_p; vec(V_p); vec(Vdag_p)]`.
/// The mirror term couples `Vdag_p` to `A V_p` with weight `2 λ σ²`.
pub(crate) fn shape_update(
    halves: &Halves,
    poses: &[CameraPose],
    stats: &[PosteriorStats],
    k: usize,
    sigma2: f64,
    lambda: f64,
) -> Result<ShapeUpdate> {
    let mirror = halves.mirror();
    let p = halves.n_points();
    let a = SymmetryOp::x().matrix();
    let dim0 = 3 + 3 * k;
    let dim = if mirror { 3 + 6 * k } else { dim0 };
    // Selection of [mean; vec(V)] of each half from the per-point unknowns.
    let mut sel0 = DMatrix::zeros(dim0, dim);
    for i in 0..dim0 {
        sel0[(i, i)] = 1.0;
    }
    let mut sel1 = DMatrix::zeros(dim0, dim);
    let mut coupling = DMatrix::zeros(3 * k, dim);
    if mirror {
        for i in 0..3 {
            sel1[(i, i)] = a[(i, i)];
        }
        for i in 0..3 * k {
            sel1[(3 + i, 3 + 3 * k + i)] = 1.0;
            coupling[(i, 3 + 3 * k + i)] = 1.0;
            coupling[(i, 3 + i)] = -a[(i % 3, i % 3)];
        }
    }
    let homog: Vec<(DVector<f64>, DMatrix<f64>)> = stats.iter().map(homogenized).collect();
    let mut sbar = DVector::zeros(3 * p);
    let mut v = DMatrix::zeros(3 * p, k);
    let mut v_dag = DMatrix::zeros(3 * p, k);
    let mut regularized = false;
    for j in 0..p {
        let mut rhs = [DVector::zeros(dim0), DVector::zeros(dim0)];
        let mut lhs_h = [DMatrix::zeros(dim0, dim0), DMatrix::zeros(dim0, dim0)];
        for (n, pose) in poses.iter().enumerate() {
            let g = camera(pose);
            let gtg = g.transpose() * &g;
            let (mu, phi) = &homog[n];
            for h in 0..halves.data.len() {
                let r = halves.data[h].view((2 * n, j), (2, 1)) - DMatrix::from_column_slice(2, 1, pose.t.as_slice());
                lhs_h[h] += phi.kronecker(&gtg);
                rhs[h] += mu.kronecker(&(g.transpose() * r));
            }
        }
        let mut full_lhs = sel0.transpose() * &lhs_h[0] * &sel0;
        let mut full_rhs = sel0.transpose() * &rhs[0];
        if mirror {
            full_lhs += sel1.transpose() * &lhs_h[1] * &sel1 + coupling.transpose() * &coupling * (2.0 * lambda * sigma2);
            full_rhs += sel1.transpose() * &rhs[1];
        }
        let x = match full_lhs.clone().cholesky() {
            Some(c) => c.solve(&full_rhs),
            None => {
                regularized = true;
                let damp = 1e-9 * (full_lhs.trace() / dim as f64).max(1.0);
                let damped = &full_lhs + DMatrix::identity(dim, dim) * damp;
                damped
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&full_rhs))
                    .or_else(|| damped.lu().solve(&full_rhs))
                    .ok_or_else(|| Error::Numerical(format!("shape system of point {j} is singular")))?
            }
        };
        sbar.rows_mut(3 * j, 3).copy_from(&x.rows(0, 3));
        for b in 0..k {
            v.view_mut((3 * j, b), (3, 1)).copy_from(&x.rows(3 + 3 * b, 3));
            if mirror {
                v_dag.view_mut((3 * j, b), (3, 1)).copy_from(&x.rows(3 + 3 * k + 3 * b, 3));
            }
        }
    }
    if regularized {
        log::warn!("shape update needed diagonal damping; viewpoints may lack diversity");
    }
    Ok(ShapeUpdate { sbar, v, v_dag, regularized })
}

/// Shape update for the symmetric model.
pub fn m_step_shape(
    data: &crate::model::ObservationSet,
    poses: &[CameraPose],
    stats: &[PosteriorStats],
    sigma2: f64,
    lambda: f64,
) -> Result<ShapeUpdate> {
    dim_check(poses.len() == data.n_images() && stats.len() == data.n_images(), || {
        "poses, posteriors and images disagree in count".into()
    })?;
    let k = stats.first().map(|s| s.mu.len()).unwrap_or(0);
    let halves = Halves { data: vec![data.y.clone(), data.y_dag.clone()], vis: vec![data.vis.clone(), data.vis_dag.clone()] };
    shape_update(&halves, poses, stats, k, sigma2, lambda)
}

/// Expected residual energy of one image under the posterior, summed over halves.
fn expected_energy(model: &MeanShapeModel, pose: &CameraPose, halves: &Halves, n: usize, stats: &PosteriorStats) -> f64 {
    let (mu, phi) = homogenized(stats);
    let g = camera(pose);
    let gtg = g.transpose() * &g;
    let mut e = 0.0;
    for h in 0..halves.data.len() {
        let (mean, v) = half_model(model, h);
        for j in 0..halves.n_points() {
            let r = Vector2::new(halves.data[h][(2 * n, j)], halves.data[h][(2 * n + 1, j)]) - pose.t;
            let r = DVector::from_column_slice(r.as_slice());
            let vt = point_bases(&mean, v, j);
            e += r.norm_squared() - 2.0 * (r.transpose() * &g * &vt * &mu)[(0, 0)] + (vt.transpose() * &gtg * &vt * &phi).trace();
        }
    }
    e
}

/// New noise variance, translations and scales.
#[derive(Debug, Clone)]
pub struct CameraNoiseUpdate {
    pub sigma2: f64,
    pub t: Vec<Vector2<f64>>,
    pub c: Vec<f64>,
    /// Images whose scale came out negative; their rotation is negated so
    /// that the scale stays positive and the projection is unchanged.
    pub flipped: Vec<usize>,
}

/// Closed-form updates of `σ²`, then each `t_n` (if `update_t`), then each `c_n`.
pub(crate) fn camera_noise_update(
    model: &MeanShapeModel,
    poses: &[CameraPose],
    halves: &Halves,
    stats: &[PosteriorStats],
    update_t: bool,
) -> Result<CameraNoiseUpdate> {
    let n_img = halves.n_images();
    let p = halves.n_points();
    let entries = (2 * p * halves.data.len() * n_img) as f64;
    let total: f64 = (0..n_img).map(|n| expected_energy(model, &poses[n], halves, n, &stats[n])).sum();
    let sigma2 = total / entries;
    let mut ts = Vec::with_capacity(n_img);
    let mut cs = Vec::with_capacity(n_img);
    let mut flipped = Vec::new();
    for n in 0..n_img {
        let pose = &poses[n];
        let (mu, phi) = homogenized(&stats[n]);
        let bases: Vec<(usize, DMatrix<f64>)> = (0..halves.data.len())
            .flat_map(|h| {
                let (mean, v) = half_model(model, h);
                (0..p).map(move |j| (h, point_bases(&mean, v, j))).collect::<Vec<_>>()
            })
            .collect();
        let r = DMatrix::from_iterator(2, 3, pose.r.iter().copied());
        let t = if update_t {
            let mut acc = Vector2::zeros();
            for (idx, (h, vt)) in bases.iter().enumerate() {
                let j = idx % p;
                let pred = &r * vt * &mu * pose.c;
                acc += Vector2::new(halves.data[*h][(2 * n, j)] - pred[0], halves.data[*h][(2 * n + 1, j)] - pred[1]);
            }
            acc / bases.len() as f64
        } else {
            pose.t
        };
        let rtr = r.transpose() * &r;
        let mut num = 0.0;
        let mut den = 0.0;
        for (idx, (h, vt)) in bases.iter().enumerate() {
            let j = idx % p;
            let y = DVector::from_vec(vec![halves.data[*h][(2 * n, j)] - t[0], halves.data[*h][(2 * n + 1, j)] - t[1]]);
            num += (mu.transpose() * vt.transpose() * r.transpose() * y)[(0, 0)];
            den += (vt.transpose() * &rtr * vt * &phi).trace();
        }
        if !(den > 0.0) {
            return Err(Error::DegeneratePose { image: n, reason: format!("scale denominator {den} is not positive") });
        }
        let c = num / den;
        if c < 0.0 {
            flipped.push(n);
        }
        ts.push(t);
        cs.push(c);
    }
    Ok(CameraNoiseUpdate { sigma2, t: ts, c: cs, flipped })
}

/// Noise, translation and scale update for the symmetric model.
pub fn m_step_camera_noise(
    data: &crate::model::ObservationSet,
    model: &MeanShapeModel,
    poses: &[CameraPose],
    stats: &[PosteriorStats],
) -> Result<CameraNoiseUpdate> {
    let halves = Halves { data: vec![data.y.clone(), data.y_dag.clone()], vis: vec![data.vis.clone(), data.vis_dag.clone()] };
    camera_noise_update(model, poses, &halves, stats, true)
}

/// Quadratic model of the expected energy in the rotation of image `n`.
fn rotation_problem(model: &MeanShapeModel, pose: &CameraPose, halves: &Halves, n: usize, stats: &PosteriorStats) -> RotationProblem {
    let (mu, phi) = homogenized(stats);
    let mut phi3 = Matrix3::zeros();
    let mut b = Matrix2x3::zeros();
    for h in 0..halves.data.len() {
        let (mean, v) = half_model(model, h);
        for j in 0..halves.n_points() {
            let vt = point_bases(&mean, v, j);
            let second = &vt * &phi * vt.transpose();
            phi3 += Matrix3::from_iterator(second.iter().copied()) * (pose.c * pose.c);
            let first = &vt * &mu;
            let first = Vector3::new(first[0], first[1], first[2]);
            let y = Vector2::new(halves.data[h][(2 * n, j)], halves.data[h][(2 * n + 1, j)]) - pose.t;
            b += y * first.transpose() * pose.c;
        }
    }
    RotationProblem { phi: phi3, b }
}

pub(crate) fn rotation_update(
    model: &MeanShapeModel,
    pose: &CameraPose,
    halves: &Halves,
    n: usize,
    stats: &PosteriorStats,
) -> (CameraPose, bool) {
    let problem = rotation_problem(model, pose, halves, n, stats);
    let step = rotation_step(&pose.r, &problem);
    (CameraPose::new(step.r, pose.c, pose.t), step.flagged)
}

/// One rotation increment for a single image of the symmetric model.
///
/// Returns the updated pose and whether the linearized solve failed (in which
/// case the pose is unchanged).
pub fn update_rotation_increment(
    pose: &CameraPose,
    model: &MeanShapeModel,
    stats: &PosteriorStats,
    yn: &DVector<f64>,
    yn_dag: &DVector<f64>,
) -> Result<(CameraPose, bool)> {
    let p = model.n_points();
    dim_check(yn.len() == 2 * p && yn_dag.len() == 2 * p, || format!("image vectors must have length {}", 2 * p))?;
    let halves = Halves {
        data: vec![DMatrix::from_column_slice(2, p, yn.as_slice()), DMatrix::from_column_slice(2, p, yn_dag.as_slice())],
        vis: vec![DMatrix::from_element(1, p, true); 2],
    };
    Ok(rotation_update(model, pose, &halves, 0, stats))
}

/// Model prediction `c R (mean_p + V_p μ) + t` for occluded entries.
pub(crate) fn impute(model: &MeanShapeModel, poses: &[CameraPose], halves: &mut Halves, stats: &[PosteriorStats]) {
    for h in 0..halves.data.len() {
        let (mean, v) = half_model(model, h);
        let (rows, p) = halves.data[h].shape();
        for n in 0..rows / 2 {
            if halves.vis[h].row(n).iter().all(|x| *x) {
                continue;
            }
            let g = camera(&poses[n]);
            let shape = &mean + v * &stats[n].mu;
            for j in 0..p {
                if !halves.vis[h][(n, j)] {
                    let pred = &g * shape.rows(3 * j, 3) + poses[n].t;
                    halves.data[h][(2 * n, j)] = pred[0];
                    halves.data[h][(2 * n + 1, j)] = pred[1];
                }
            }
        }
    }
}
