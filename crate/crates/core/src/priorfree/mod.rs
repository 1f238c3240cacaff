//! Prior-free reconstruction: per-image shapes constrained only to be low rank.
//!
//! The pipeline splits the symmetric observations into two independent
//! factorizations ([`decouple`], [`factorize_decoupled`]), resolves their
//! ambiguity through orthonormality constraints and a small semidefinite
//! program ([`build_orthonormality_system`], [`solve_pair_gram`]), reads off the
//! cameras ([`recover_cameras`]), recovers shapes by nuclear-norm minimization
//! and finally refines everything by coordinate descent
//! ([`coordinate_descent_refine`]).

mod cameras;
mod decouple;
mod orthonormality;
mod refine;

pub use cameras::{recover_cameras, CameraRecovery};
pub use decouple::{decouple, factorize_decoupled, DecoupledPair};
pub use orthonormality::{
    build_orthonormality_system, build_plain_orthonormality_system, solve_pair_gram, solve_plain_gram,
    GramNormalization,
};
pub use refine::{coordinate_descent_refine, coordinate_descent_refine_plain, PlainRefineResult, RefineConfig, RefineResult};

use nalgebra::{DMatrix, Matrix2x3, Matrix3};

use crate::error::{Error, Result};
use crate::model::{center_observations, rearrange_compact, restore_compact, CameraPose, ObservationSet, PerImageShapeSet, SymmetryOp};
use crate::numerics::{nuclear_min_structure, nuclear_min_structure_plain, truncated_factorization, NuclearConfig};
use crate::rigid_init::init_missing_rank3;

/// Relative orthonormality residual above which the camera recovery is flagged.
const GRAM_RESIDUAL_WARN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorFreeConfig {
    /// Number of shape bases.
    pub k: usize,
    /// Iterations of the rank-3 occlusion fill.
    pub rank3_iters: usize,
    pub refine: RefineConfig,
}

impl Default for PriorFreeConfig {
    fn default() -> Self {
        Self { k: 3, rank3_iters: 10, refine: RefineConfig::default() }
    }
}

impl PriorFreeConfig {
    pub fn nuclear(&self) -> NuclearConfig {
        self.refine.nuclear
    }
}

/// Diagnostics collected along the pipeline.
#[derive(Debug, Clone, Default)]
pub struct PriorFreeReport {
    /// Refinement energy, initial value first.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Dimension of the feasible subspace used by the Gram solve.
    pub nullspace_dim: usize,
    /// Relative residual of the Gram solution in the orthonormality system.
    pub gram_residual: f64,
    /// Frobenius residuals of the initial factorizations.
    pub factorization_residuals: Vec<f64>,
    /// Images whose camera was interpolated from neighbours.
    pub flagged_images: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PriorFreeFit {
    /// Per-image shapes. For the symmetric estimator each block holds one half
    /// of the keypoint pairs (`3 × P`); for the baseline it holds all `2P` points.
    pub shapes: PerImageShapeSet,
    pub poses: Vec<CameraPose>,
    /// Observations with occluded entries estimated.
    pub completed: ObservationSet,
    /// Whether `shapes` holds half shapes to be completed by reflection.
    pub symmetric: bool,
    pub report: PriorFreeReport,
}

impl PriorFreeFit {
    /// `3 × 2P` shape of image `n`, the mirror half appended when symmetric.
    pub fn full_shape(&self, n: usize) -> DMatrix<f64> {
        let s = self.shapes.shape(n);
        if self.symmetric {
            crate::model::full_symmetric_shape(&s)
        } else {
            s
        }
    }
}

/// Attaches a rank-`k` coefficient/basis factorization to refined shapes.
fn with_bases(s: DMatrix<f64>, k: usize) -> Result<PerImageShapeSet> {
    let compact = rearrange_compact(&s)?;
    let rank = k.min(compact.nrows()).min(compact.ncols());
    let f = truncated_factorization(&compact, rank)?;
    let v = restore_compact(&f.b)?;
    Ok(PerImageShapeSet { s, z: f.a, v, k: rank })
}

fn validate_k(k: usize, obs: &ObservationSet) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("the number of bases must be positive".into()));
    }
    if 2 * k > (2 * obs.n_images()).min(obs.n_points()) {
        return Err(Error::InvalidConfig(format!(
            "{k} bases need 2K <= min(2N, P) = {}",
            (2 * obs.n_images()).min(obs.n_points())
        )));
    }
    Ok(())
}

/// Symmetric prior-free reconstruction.
pub fn fit_sym_priorfree(obs: &ObservationSet, cfg: &PriorFreeConfig) -> Result<PriorFreeFit> {
    obs.validate()?;
    validate_k(cfg.k, obs)?;
    let (centered, _) = center_observations(obs)?;
    let filled = init_missing_rank3(&centered, cfg.rank3_iters);
    let mut warnings = Vec::new();

    let (l, m) = decouple(&filled);
    let pair = factorize_decoupled(&l, &m, cfg.k)?;
    if pair.l_degenerate {
        warnings.push("mirror-axis component vanishes in every image".to_string());
    }
    let a = build_orthonormality_system(&pair);
    let gram = solve_pair_gram(&pair, &a, GramNormalization::Data)?;
    if gram.affine_residual > GRAM_RESIDUAL_WARN {
        warnings.push(format!("Gram blocks violate the orthonormality system by {:.3e}", gram.affine_residual));
    }
    let cams = recover_cameras(&pair, &gram)?;
    let rotations: Vec<Matrix2x3<f64>> = cams.poses.iter().map(|p| p.r).collect();
    let s0 = nuclear_min_structure(&filled.y, &filled.y_dag, &rotations, &SymmetryOp::x(), &cfg.nuclear())?.s;

    let refined = coordinate_descent_refine(&filled, &cams.poses, &s0, &cfg.refine)?;
    if !refined.converged {
        warnings.push(format!("refinement did not converge in {} sweeps", refined.iterations));
    }
    let report = PriorFreeReport {
        energy_trace: refined.energy_trace,
        iterations: refined.iterations,
        converged: refined.converged,
        nullspace_dim: gram.nullspace_dim,
        gram_residual: gram.affine_residual,
        factorization_residuals: vec![pair.res_l, pair.res_m],
        flagged_images: cams.flagged,
        warnings,
    };
    Ok(PriorFreeFit {
        shapes: with_bases(refined.s, cfg.k)?,
        poses: refined.poses,
        completed: refined.obs,
        symmetric: true,
        report,
    })
}

/// Prior-free baseline that ignores symmetry: `Y` and `Ydag` are treated as
/// `2P` unrelated points and factorized jointly at rank `3K`.
pub fn fit_priorfree_baseline(obs: &ObservationSet, cfg: &PriorFreeConfig) -> Result<PriorFreeFit> {
    obs.validate()?;
    let k = cfg.k;
    if k == 0 || 3 * k > (2 * obs.n_images()).min(2 * obs.n_points()) {
        return Err(Error::InvalidConfig(format!("{k} bases need 3K <= min(2N, 2P)")));
    }
    let (centered, _) = center_observations(obs)?;
    let filled = init_missing_rank3(&centered, cfg.rank3_iters);
    let w = filled.concatenated();
    let mask = filled.concatenated_mask();
    let mut warnings = Vec::new();

    let f = truncated_factorization(&w, 3 * k)?;
    let a = build_plain_orthonormality_system(&f.a);
    let gram = solve_plain_gram(&f.a, &a, k)?;
    if gram.affine_residual > GRAM_RESIDUAL_WARN {
        warnings.push(format!("Gram block violates the orthonormality system by {:.3e}", gram.affine_residual));
    }
    let h = &gram.factors[0];
    let products: Vec<Matrix2x3<f64>> = (0..filled.n_images())
        .map(|n| Matrix2x3::from_iterator((f.a.rows(2 * n, 2) * h).iter().copied()))
        .collect();
    let (mut rotations, flagged) = cameras::cameras_from_products(&products)?;
    cameras::synchronize_signs(&mut rotations, &[(&w, Matrix3::identity())]);
    let s0 = nuclear_min_structure_plain(&w, &rotations, &cfg.nuclear())?.s;

    let refined = coordinate_descent_refine_plain(&w, &mask, &filled.t, &rotations, &s0, &cfg.refine)?;
    if !refined.converged {
        warnings.push(format!("refinement did not converge in {} sweeps", refined.iterations));
    }
    let completed = filled.with_concatenated(&refined.w);
    let completed = ObservationSet { t: refined.t.clone(), ..completed };
    let poses = refined.rotations.iter().zip(&refined.t).map(|(r, t)| CameraPose::new(*r, 1.0, *t)).collect();
    let report = PriorFreeReport {
        energy_trace: refined.energy_trace,
        iterations: refined.iterations,
        converged: refined.converged,
        nullspace_dim: gram.nullspace_dim,
        gram_residual: gram.affine_residual,
        factorization_residuals: vec![f.residual],
        flagged_images: flagged,
        warnings,
    };
    Ok(PriorFreeFit { shapes: with_bases(refined.s, k)?, poses, completed, symmetric: false, report })
}
