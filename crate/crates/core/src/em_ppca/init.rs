//! Basis initialization by PCA of lifted rigid residuals.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::steps::{half_model, rotation_update, stacked_design, Halves};
use crate::error::Result;
use crate::model::{CameraPose, MeanShapeModel, ObservationSet, PosteriorStats, SymmetryOp};
use crate::numerics::{pseudo_inverse, sorted_svd};
use crate::rigid_init::{pseudo_inverse3, RigidInitResult};

/// Cap on rounds of lift → PCA → pose update.
const MAX_PCA_ROUNDS: usize = 50;
/// Rounds stop once the basis span moves less than this (sine of the largest principal angle).
const SUBSPACE_TOL: f64 = 1e-4;

/// Squared reprojection residual of the current model on the visible entries.
fn fit_residual(model: &MeanShapeModel, poses: &[CameraPose], halves: &Halves) -> f64 {
    poses
        .iter()
        .enumerate()
        .map(|(n, pose)| {
            let (w, r) = stacked_design(model, pose, halves, n);
            (&r - &w * model.z.row(n).transpose()).norm_squared()
        })
        .sum()
}

/// Sine of the largest principal angle between the column spans of `a` and `b`.
fn subspace_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qa - &qb * (qb.transpose() * &qa);
    sorted_svd(&resid).s.get(0).copied().unwrap_or(0.0)
}

/// Initial mean shape, bases and poses.
#[derive(Debug, Clone)]
pub struct BasisInit {
    /// Mean shape, point-major.
    pub sbar: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Always `A · v` at initialization.
    pub v_dag: DMatrix<f64>,
    pub poses: Vec<CameraPose>,
    /// Least-squares coefficients of every image on the initial bases.
    pub z: DMatrix<f64>,
    /// Set when the residuals carried no deformation and random bases were used.
    pub random_fallback: bool,
    pub warnings: Vec<String>,
}

/// Least-squares 3D lift of each image's residual from the current model.
fn lift_residuals(model: &MeanShapeModel, poses: &[CameraPose], halves: &Halves) -> DMatrix<f64> {
    let a = SymmetryOp::x().matrix();
    let ops: Vec<Matrix3<f64>> = (0..halves.data.len()).map(|h| if h == 0 { Matrix3::identity() } else { a }).collect();
    let (n_img, p) = (halves.n_images(), halves.n_points());
    let mut lifts = DMatrix::zeros(n_img, 3 * p);
    for (n, pose) in poses.iter().enumerate() {
        let cam = pose.r * pose.c;
        let mut normal = Matrix3::zeros();
        for op in &ops {
            normal += op * cam.transpose() * cam * op;
        }
        let inv = pseudo_inverse3(&normal);
        for j in 0..p {
            let mut rhs = Vector3::zeros();
            for (h, op) in ops.iter().enumerate() {
                let (mean, _) = half_model(model, h);
                let pred = cam * Vector3::new(mean[3 * j], mean[3 * j + 1], mean[3 * j + 2]) + pose.t;
                let r = Vector2::new(halves.data[h][(2 * n, j)], halves.data[h][(2 * n + 1, j)]) - pred;
                rhs += op * cam.transpose() * r;
            }
            let d = inv * rhs;
            for c in 0..3 {
                lifts[(n, 3 * j + c)] = d[c];
            }
        }
    }
    lifts
}

/// Least-squares coefficients of every image on the current bases.
fn fit_coefficients(model: &MeanShapeModel, poses: &[CameraPose], halves: &Halves) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(halves.n_images(), model.n_bases());
    for (n, pose) in poses.iter().enumerate() {
        let (w, r) = stacked_design(model, pose, halves, n);
        let coeffs = pseudo_inverse(&w, 1e-10) * r;
        z.row_mut(n).copy_from(&coeffs.transpose());
    }
    z
}

pub(crate) fn init_bases(
    halves: &Halves,
    poses: &[CameraPose],
    sbar: DVector<f64>,
    k: usize,
    update_t: bool,
) -> Result<BasisInit> {
    let mirror = halves.mirror();
    let op = SymmetryOp::x();
    let (n_img, p) = (halves.n_images(), halves.n_points());
    let mut warnings = Vec::new();
    let mut k_eff = k.min(3 * p);
    if n_img < k_eff {
        let msg = format!("{n_img} images cannot support {k_eff} bases; using {n_img}");
        log::warn!("{msg}");
        warnings.push(msg);
        k_eff = n_img;
    }
    let mut model = MeanShapeModel {
        sbar,
        v: DMatrix::zeros(3 * p, k_eff),
        v_dag: DMatrix::zeros(3 * p, k_eff),
        z: DMatrix::zeros(n_img, k_eff),
        sigma2: 1.0,
        lambda: 0.0,
    };
    let mut poses = poses.to_vec();
    let mut random_fallback = false;
    let scale = model.sbar.norm().max(1e-300);
    let mut accepted: Option<(MeanShapeModel, Vec<CameraPose>, f64)> = None;
    for round in 0..MAX_PCA_ROUNDS {
        let previous = model.v.clone();
        let lifts = lift_residuals(&model, &poses, halves);
        let mean = DVector::from_iterator(3 * p, lifts.row_mean().iter().copied());
        model.sbar += &mean;
        let centered = DMatrix::from_fn(n_img, 3 * p, |i, j| lifts[(i, j)] - mean[j]);
        let svd = sorted_svd(&centered);
        let usable = (0..k_eff).filter(|&i| svd.s.get(i).copied().unwrap_or(0.0) > 1e-10 * scale).count();
        if usable < k_eff {
            random_fallback = true;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            model.v = DMatrix::from_fn(3 * p, k_eff, |_, _| { let g: f64 = StandardNormal.sample(&mut rng); 1e-3 * scale * g });
            if usable > 0 {
                for i in 0..usable {
                    model.v.set_column(i, &(svd.v.column(i) * (svd.s[i] / (n_img as f64).sqrt())));
                }
            }
        } else {
            for i in 0..k_eff {
                model.v.set_column(i, &(svd.v.column(i) * (svd.s[i] / (n_img as f64).sqrt())));
            }
            random_fallback = false;
        }
        if mirror {
            model.v_dag = op.apply_stacked_cols(&model.v);
        }
        let z = fit_coefficients(&model, &poses, halves);
        for (n, pose) in poses.iter_mut().enumerate() {
            let mu = z.row(n).transpose();
            let stats = PosteriorStats { phi: &mu * mu.transpose(), gamma: DMatrix::zeros(k_eff, k_eff), mu };
            let (updated, _) = rotation_update(&model, pose, halves, n, &stats);
            *pose = updated;
            if update_t {
                let shape_pred = |h: usize| -> DVector<f64> {
                    let (m, v) = half_model(&model, h);
                    m + v * &stats.mu
                };
                let mut acc = Vector2::zeros();
                let mut count = 0;
                for h in 0..halves.data.len() {
                    let s = shape_pred(h);
                    for j in 0..p {
                        let pred = pose.r * pose.c * Vector3::new(s[3 * j], s[3 * j + 1], s[3 * j + 2]);
                        acc += Vector2::new(halves.data[h][(2 * n, j)], halves.data[h][(2 * n + 1, j)]) - pred;
                        count += 1;
                    }
                }
                pose.t = acc / count as f64;
            }
        }
        model.z = z;
        // On noisy data the lifts can feed back into the poses and drift away;
        // a round that worsens the fit is undone and ends the loop.
        let residual = fit_residual(&model, &poses, halves);
        if let Some((kept_model, kept_poses, kept_residual)) = &accepted {
            if residual > *kept_residual {
                model = kept_model.clone();
                poses = kept_poses.clone();
                break;
            }
        }
        accepted = Some((model.clone(), poses.clone(), residual));
        if random_fallback || (round > 0 && subspace_gap(&previous, &model.v) < SUBSPACE_TOL) {
            break;
        }
    }
    if random_fallback {
        let msg = "residuals carry no deformation; bases initialized at random with scale 1e-3".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        model.z = fit_coefficients(&model, &poses, halves);
    }
    let v_dag = if mirror { op.apply_stacked_cols(&model.v) } else { DMatrix::zeros(3 * p, k_eff) };
    Ok(BasisInit { sbar: model.sbar, v: model.v, v_dag, poses, z: model.z, random_fallback, warnings })
}

/// Initializes the bases of the symmetric model from a rigid reconstruction of
/// centered, filled observations.
pub fn init_bases_pca(obs: &ObservationSet, rigid: &RigidInitResult, k: usize) -> Result<BasisInit> {
    let halves = Halves { data: vec![obs.y.clone(), obs.y_dag.clone()], vis: vec![obs.vis.clone(), obs.vis_dag.clone()] };
    let poses: Vec<CameraPose> = rigid.poses.iter().map(|p| CameraPose::new(p.r, 1.0, nalgebra::Vector2::zeros())).collect();
    let sbar = DVector::from_column_slice(rigid.sbar.as_slice());
    init_bases(&halves, &poses, sbar, k, true)
}
