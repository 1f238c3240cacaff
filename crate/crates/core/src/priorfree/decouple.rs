use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ObservationSet;
use crate::numerics::truncated_factorization;

/// The two independent factorization problems obtained from a symmetric stack.
#[derive(Debug, Clone)]
pub struct DecoupledPair {
    /// `(Y − Ydag) / 2`: depends only on the mirror-axis coordinate.
    pub l: DMatrix<f64>,
    /// `(Y + Ydag) / 2`: depends only on the two in-plane coordinates.
    pub m: DMatrix<f64>,
    /// `2N × K` camera factor of `l`.
    pub pi1: DMatrix<f64>,
    /// `K × P` structure factor of `l`.
    pub vx: DMatrix<f64>,
    /// `2N × 2K` camera factor of `m`.
    pub pi2: DMatrix<f64>,
    /// `2K × P` structure factor of `m`.
    pub vyz: DMatrix<f64>,
    pub res_l: f64,
    pub res_m: f64,
    /// Set when `l` vanishes (every view is degenerate for the mirror axis).
    pub l_degenerate: bool,
}

impl DecoupledPair {
    pub fn k(&self) -> usize {
        self.pi1.ncols()
    }

    pub fn n_images(&self) -> usize {
        self.l.nrows() / 2
    }

    /// `Y = M + L`.
    pub fn y(&self) -> DMatrix<f64> {
        &self.m + &self.l
    }

    /// `Ydag = M − L`.
    pub fn y_dag(&self) -> DMatrix<f64> {
        &self.m - &self.l
    }
}

/// Splits centered, filled observations into their mirror-odd and mirror-even parts.
pub fn decouple(obs: &ObservationSet) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = (&obs.y - &obs.y_dag) * 0.5;
    let m = (&obs.y + &obs.y_dag) * 0.5;
    (l, m)
}

/// Rank-`K` factorization of `l` and rank-`2K` factorization of `m`.
pub fn factorize_decoupled(l: &DMatrix<f64>, m: &DMatrix<f64>, k: usize) -> Result<DecoupledPair> {
    let (rows, p) = l.shape();
    if k == 0 || 2 * k > rows.min(p) {
        return Err(Error::InvalidConfig(format!(
            "{k} bases need 2K <= min(2N, P) = {}",
            rows.min(p)
        )));
    }
    let fl = truncated_factorization(l, k)?;
    let fm = truncated_factorization(m, 2 * k)?;
    let scale = l.norm() + m.norm();
    let l_degenerate = l.norm() <= 1e-12 * scale.max(f64::MIN_POSITIVE);
    if l_degenerate {
        log::warn!("mirror-axis component vanishes; every view is degenerate for the symmetry axis");
    }
    Ok(DecoupledPair {
        l: l.clone(),
        m: m.clone(),
        pi1: fl.a,
        vx: fl.b,
        pi2: fm.a,
        vyz: fm.b,
        res_l: fl.residual,
        res_m: fm.residual,
        l_degenerate,
    })
}
