//! Symmetric non-rigid structure from motion.
//!
//! Reconstructs per-image 3D keypoint structure and weak-perspective cameras
//! from 2D annotations of mirror-symmetric keypoint pairs. Two estimators are
//! provided, a probabilistic one ([`em_ppca`]) and a prior-free factorization
//! one ([`priorfree`]), together with the symmetry-ignoring baselines they are
//! compared against, a synthetic scene generator ([`synth`]) and the error
//! metrics used to score reconstructions ([`eval`]).

pub mod dataset;
pub mod em_ppca;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod priorfree;
pub mod rigid_init;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    center_observations, rearrange_compact, reflect_shape, restore_compact, stack_model, CameraPose,
    MeanShapeModel, ObservationSet, PerImageShapeSet, PosteriorStats, SymmetryAxis, SymmetryOp,
};
