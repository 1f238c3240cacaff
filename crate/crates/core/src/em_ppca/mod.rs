//! Probabilistic reconstruction: a mean shape plus Gaussian-weighted deformation
//! bases, one set for each half of the symmetric keypoint pairs, fitted by EM.
//!
//! The mirror mean shape is always `A · Sbar`. The mirror bases `Vdag` are free
//! parameters tied to `A · V` by a quadratic penalty of weight `λ`.

mod init;
mod steps;

pub use init::{init_bases_pca, BasisInit};
pub use steps::{e_step, m_step_camera_noise, m_step_shape, update_rotation_increment, CameraNoiseUpdate, ShapeUpdate};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{center_observations, full_symmetric_shape, unflatten_shape, CameraPose, MeanShapeModel, ObservationSet, PosteriorStats};
use crate::rigid_init::{init_missing_rank3, rigid_rank3_sfm, sym_rigid_sfm};
use steps::{camera_noise_update, coupling_penalty, image_objective, impute, posterior, rotation_update, shape_update, stacked_design, Halves};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    /// Number of deformation bases on top of the mean shape.
    pub k: usize,
    /// Weight of the penalty tying the mirror bases to the reflected bases.
    pub lambda: f64,
    pub max_em_iters: usize,
    /// Stop once the objective changes by less than this fraction.
    pub rel_tol: f64,
    pub rank3_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { k: 3, lambda: 1.0, max_em_iters: 100, rel_tol: 1e-6, rank3_iters: 10 }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("the number of bases must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be a non-negative number", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmReport {
    /// Negative log marginal likelihood plus the coupling penalty, once per iteration.
    pub objective_trace: Vec<f64>,
    /// Number of completed M-steps.
    pub iterations: usize,
    pub converged: bool,
    /// M-steps whose shape system needed damping.
    pub regularized_steps: usize,
    /// Images whose rotation update was rejected by the linearized solve, per step.
    pub flagged_rotations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    /// Mean shape over all modelled points; `z` holds the posterior means.
    pub model: MeanShapeModel,
    pub poses: Vec<CameraPose>,
    /// Observations with occluded entries imputed from the model.
    pub completed: ObservationSet,
    /// Whether the model has a mirror half (`false` for the baseline, whose
    /// points are the `2P` keypoints taken independently).
    pub symmetric: bool,
    pub report: EmReport,
}

impl EmFit {
    /// `3 × 2P` reconstruction of image `n` at its posterior mean.
    pub fn full_shape(&self, n: usize) -> DMatrix<f64> {
        let z = self.model.z.row(n).transpose();
        let first = unflatten_shape(&(&self.model.sbar + &self.model.v * &z));
        if !self.symmetric {
            return first;
        }
        let mirror = unflatten_shape(&(self.model.sbar_dag() + &self.model.v_dag * &z));
        let mut out = full_symmetric_shape(&first);
        out.columns_mut(first.ncols(), first.ncols()).copy_from(&mirror);
        out
    }
}

struct EmState {
    model: MeanShapeModel,
    poses: Vec<CameraPose>,
    halves: Halves,
}

fn e_step_all(state: &EmState) -> Result<Vec<PosteriorStats>> {
    (0..state.poses.len()).into_par_iter().map(|n| posterior(&state.model, &state.poses[n], &state.halves, n)).collect()
}

fn objective(state: &EmState) -> Result<f64> {
    let per_image: Result<Vec<f64>> =
        (0..state.poses.len()).into_par_iter().map(|n| image_objective(&state.model, &state.poses[n], &state.halves, n)).collect();
    Ok(per_image?.iter().sum::<f64>() + if state.halves.mirror() { coupling_penalty(&state.model) } else { 0.0 })
}

/// Mean squared residual of the model evaluated at the coefficients in `model.z`.
fn residual_variance(state: &EmState) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, pose) in state.poses.iter().enumerate() {
        let (w, r) = stacked_design(&state.model, pose, &state.halves, n);
        let z = state.model.z.row(n).transpose();
        count += w.nrows();
        total += (r - w * z).norm_squared();
    }
    total / count.max(1) as f64
}

fn run_em(mut state: EmState, cfg: &EmConfig, update_t: bool) -> Result<(EmState, EmReport)> {
    let entries: usize = state.halves.data.iter().map(|d| d.len()).sum();
    let data_ms = state.halves.data.iter().map(|d| d.norm_squared()).sum::<f64>() / entries.max(1) as f64;
    let floor = 1e-12 * data_ms.max(f64::MIN_POSITIVE);
    let occluded = state.halves.vis.iter().any(|v| v.iter().any(|x| !*x));
    let mut report = EmReport::default();
    loop {
        let mut stats = e_step_all(&state)?;
        if occluded {
            impute(&state.model, &state.poses, &mut state.halves, &stats);
            stats = e_step_all(&state)?;
        }
        let j = objective(&state)?;
        if !j.is_finite() {
            return Err(Error::Numerical("EM objective is not finite".into()));
        }
        let prev = report.objective_trace.last().copied();
        report.objective_trace.push(j);
        state.model.z = DMatrix::from_fn(state.poses.len(), state.model.n_bases(), |n, k| stats[n].mu[k]);
        if let Some(prev) = prev {
            if (prev - j).abs() <= cfg.rel_tol * prev.abs().max(1.0) {
                report.converged = true;
                break;
            }
        }
        if report.iterations >= cfg.max_em_iters {
            break;
        }

        let shape = shape_update(&state.halves, &state.poses, &stats, state.model.n_bases(), state.model.sigma2, state.model.lambda)?;
        if shape.regularized {
            report.regularized_steps += 1;
        }
        state.model.sbar = shape.sbar;
        state.model.v = shape.v;
        if state.halves.mirror() {
            state.model.v_dag = shape.v_dag;
        }
        let cams = camera_noise_update(&state.model, &state.poses, &state.halves, &stats, update_t)?;
        state.model.sigma2 = cams.sigma2.max(floor);
        for (n, pose) in state.poses.iter_mut().enumerate() {
            pose.t = cams.t[n];
            if cams.c[n] < 0.0 {
                pose.r = -pose.r;
            }
            pose.c = cams.c[n].abs();
        }
        let updated: Vec<(CameraPose, bool)> = (0..state.poses.len())
            .into_par_iter()
            .map(|n| rotation_update(&state.model, &state.poses[n], &state.halves, n, &stats[n]))
            .collect();
        for (n, (pose, flagged)) in updated.into_iter().enumerate() {
            if flagged {
                report.flagged_rotations += 1;
                log::warn!("image {n}: rotation update rejected, pose kept");
            }
            state.poses[n] = pose;
        }
        report.iterations += 1;
    }
    if !report.converged {
        let msg = format!("EM stopped after {} iterations without meeting the tolerance", report.iterations);
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    Ok((state, report))
}

fn initial_variance(state: &EmState) -> f64 {
    let entries: usize = state.halves.data.iter().map(|d| d.len()).sum();
    let data_ms = state.halves.data.iter().map(|d| d.norm_squared()).sum::<f64>() / entries.max(1) as f64;
    residual_variance(state).max(1e-6 * data_ms).max(f64::MIN_POSITIVE)
}

fn restore_translations(poses: &mut [CameraPose], offsets: &[nalgebra::Vector2<f64>]) {
    for (pose, t) in poses.iter_mut().zip(offsets) {
        pose.t += t;
    }
}

/// Symmetric probabilistic reconstruction.
pub fn fit_sym_em_ppca(obs: &ObservationSet, cfg: &EmConfig) -> Result<EmFit> {
    obs.validate()?;
    cfg.validate()?;
    let (centered, _) = center_observations(obs)?;
    let filled = init_missing_rank3(&centered, cfg.rank3_iters);
    let rigid = sym_rigid_sfm(&filled)?;
    let init = init_bases_pca(&filled, &rigid, cfg.k)?;
    let halves = Halves { data: vec![filled.y.clone(), filled.y_dag.clone()], vis: vec![filled.vis.clone(), filled.vis_dag.clone()] };
    let k = init.v.ncols();
    let mut state = EmState {
        model: MeanShapeModel { sbar: init.sbar, v: init.v, v_dag: init.v_dag, z: init.z, sigma2: 1.0, lambda: cfg.lambda },
        poses: init.poses,
        halves,
    };
    state.model.sigma2 = initial_variance(&state);
    debug_assert_eq!(state.model.n_bases(), k);
    let (mut state, mut report) = run_em(state, cfg, true)?;
    report.warnings.splice(0..0, rigid.warnings.into_iter().chain(init.warnings));
    restore_translations(&mut state.poses, &filled.t);
    let mut completed = filled;
    completed.y = state.halves.data[0].clone();
    completed.y_dag = state.halves.data[1].clone();
    Ok(EmFit { model: state.model, poses: state.poses, completed, symmetric: true, report })
}

/// Probabilistic baseline ignoring symmetry: the `2P` keypoints are modelled as
/// independent points with one mean shape and one basis set. Translations are
/// estimated at initialization only.
pub fn fit_em_ppca_baseline(obs: &ObservationSet, cfg: &EmConfig) -> Result<EmFit> {
    obs.validate()?;
    cfg.validate()?;
    let (centered, _) = center_observations(obs)?;
    let filled = init_missing_rank3(&centered, cfg.rank3_iters);
    let w = filled.concatenated();
    let mask = filled.concatenated_mask();
    let (rotations, shape) = rigid_rank3_sfm(&w)?;
    let halves = Halves { data: vec![w], vis: vec![mask] };
    let poses: Vec<CameraPose> = rotations.iter().map(|r| CameraPose::new(*r, 1.0, nalgebra::Vector2::zeros())).collect();
    let init = init::init_bases(&halves, &poses, DVector::from_column_slice(shape.as_slice()), cfg.k, true)?;
    let mut state = EmState {
        model: MeanShapeModel {
            sbar: init.sbar,
            v_dag: DMatrix::zeros(init.v.nrows(), init.v.ncols()),
            v: init.v,
            z: init.z,
            sigma2: 1.0,
            lambda: 0.0,
        },
        poses: init.poses,
        halves,
    };
    state.model.sigma2 = initial_variance(&state);
    let (mut state, mut report) = run_em(state, cfg, false)?;
    report.warnings.splice(0..0, init.warnings);
    restore_translations(&mut state.poses, &filled.t);
    let completed = filled.with_concatenated(&state.halves.data[0]);
    Ok(EmFit { model: state.model, poses: state.poses, completed, symmetric: false, report })
}
