//! Numerical kernels shared by the reconstruction pipelines.

mod factorization;
mod gram_sdp;
mod linalg;
mod nuclear;
mod procrustes;
mod rotation;

pub use factorization::{nullspace, smallest_right_singular_vectors, truncated_factorization, Factorization};
pub use gram_sdp::{
    solve_gram_blocks, solve_gram_sdp, solve_gram_sdp_with, GramBlocksSolution, GramLayout, GramSolution,
    NullspaceRule, SdpConfig,
};
pub use linalg::{pseudo_inverse, sorted_svd, symmetric_eigen_desc, SortedSvd};
pub use nuclear::{
    nuclear_min_structure, nuclear_min_structure_plain, nuclear_norm, NuclearConfig, NuclearResult,
};
pub use procrustes::{nearest_rotation, procrustes_rotation};
pub use rotation::{
    exp_so3, hat, project_row_orthonormal, rotation_increment, rotation_step, skew_part, vee, RotationProblem,
    RotationStep,
};
