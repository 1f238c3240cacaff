use nalgebra::{DMatrix, DVector, RowDVector};

use super::decouple::DecoupledPair;
use crate::error::Result;
use crate::numerics::{solve_gram_blocks, solve_gram_sdp_with, GramBlocksSolution, GramLayout, GramSolution, NullspaceRule, SdpConfig};

/// `vec(xᵀ y)` for row vectors, column-major: the coefficients of `x G yᵀ` in `vec(G)`.
fn bilinear_coeffs(x: &RowDVector<f64>, y: &RowDVector<f64>) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d * d, |idx, _| x[idx % d] * y[idx / d])
}

/// Two constraint rows per image from the camera rows of each Gram block:
/// equal row norms, and orthogonal rows, of the corrected camera.
fn constraint_rows(factors: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = factors[0].nrows();
    let width: usize = factors.iter().map(|f| f.ncols() * f.ncols()).sum();
    let mut a = DMatrix::zeros(rows, width);
    for n in 0..rows / 2 {
        let mut off = 0;
        for f in factors {
            let d = f.ncols();
            let top = f.row(2 * n).into_owned();
            let bottom = f.row(2 * n + 1).into_owned();
            let diff = bilinear_coeffs(&top, &top) - bilinear_coeffs(&bottom, &bottom);
            let cross = bilinear_coeffs(&top, &bottom);
            a.view_mut((2 * n, off), (1, d * d)).copy_from(&diff.transpose());
            a.view_mut((2 * n + 1, off), (1, d * d)).copy_from(&cross.transpose());
            off += d * d;
        }
    }
    a
}

/// Linear constraints on `[vec(G1); vec(G2)]` forcing every corrected camera
/// `[Π̂¹_n h1, Π̂²_n h2]` to have orthogonal rows of equal norm.
pub fn build_orthonormality_system(pair: &DecoupledPair) -> DMatrix<f64> {
    constraint_rows(&[&pair.pi1, &pair.pi2])
}

/// Constraints for a single `3K × 3K` Gram block of an unsplit rank-`3K` camera factor.
pub fn build_plain_orthonormality_system(pi: &DMatrix<f64>) -> DMatrix<f64> {
    constraint_rows(&[pi])
}

/// `Σ_n vec(Π_nᵀ Π_n)` per block: the functional `Σ_n tr(Π_n G Π_nᵀ)`.
fn data_normalization(factors: &[&DMatrix<f64>]) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = factors
        .iter()
        .map(|f| {
            let g = f.transpose() * *f;
            DVector::from_column_slice(g.as_slice())
        })
        .collect();
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(&p);
        off += p.len();
    }
    out
}

/// Which functional fixes the scale of the Gram blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramNormalization {
    /// Unit total trace.
    Trace,
    /// Unit total energy of the corrected cameras, `Σ_n ‖[Π̂¹_n h1, Π̂²_n h2]‖²`.
    Data,
}

/// Solves for the symmetric-layout Gram blocks of a decoupled factorization.
///
/// The feasible subspace is taken as the `K²` least-singular directions of the
/// constraint system restricted to symmetric blocks, which is its exact null
/// space on noiseless data.
pub fn solve_pair_gram(pair: &DecoupledPair, a: &DMatrix<f64>, normalization: GramNormalization) -> Result<GramSolution> {
    let k = pair.k();
    let cfg = SdpConfig {
        nullspace: NullspaceRule::Dimension(k * k),
        normalization: match normalization {
            GramNormalization::Trace => None,
            GramNormalization::Data => Some(data_normalization(&[&pair.pi1, &pair.pi2])),
        },
        ..SdpConfig::default()
    };
    solve_gram_sdp_with(a, k, &cfg)
}

/// Plain-layout counterpart of [`solve_pair_gram`]; the feasible subspace has
/// dimension `2K² − K`.
pub fn solve_plain_gram(pi: &DMatrix<f64>, a: &DMatrix<f64>, k: usize) -> Result<GramBlocksSolution> {
    let cfg = SdpConfig {
        nullspace: NullspaceRule::Dimension(2 * k * k - k),
        normalization: Some(data_normalization(&[pi])),
        ..SdpConfig::default()
    };
    solve_gram_blocks(a, &GramLayout::plain(k), &cfg)
}
