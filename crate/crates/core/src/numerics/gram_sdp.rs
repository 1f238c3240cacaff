//! Small semidefinite program over Gram blocks of the factorization ambiguity.
//!
//! Unknown: a tuple of symmetric PSD blocks `G_b` whose column-major
//! vectorizations, stacked, lie in the null space of a linear system `A`.
//! The solver minimizes the total trace over that set subject to one
//! normalization row, using ADMM in null-space coordinates, then polishes the
//! result onto the prescribed block ranks by alternating projections and a
//! Levenberg-Marquardt pass on the low-rank factors.

use nalgebra::{DMatrix, DVector};

use super::factorization::{nullspace, smallest_right_singular_vectors};
use super::linalg::symmetric_eigen_desc;
use crate::error::{dim_check, Error, Result};

/// Block sizes and target ranks of the Gram unknowns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GramLayout {
    /// `(dimension, target rank)` per block.
    pub blocks: Vec<(usize, usize)>,
}

impl GramLayout {
    /// `K × K` rank-1 block for the mirror axis and `2K × 2K` rank-2 block for the other two.
    pub fn symmetric(k: usize) -> Self {
        Self { blocks: vec![(k, 1), (2 * k, 2)] }
    }

    /// One `3K × 3K` rank-3 block, for factorizations that ignore symmetry.
    pub fn plain(k: usize) -> Self {
        Self { blocks: vec![(3 * k, 3)] }
    }

    pub fn vec_len(&self) -> usize {
        self.blocks.iter().map(|(d, _)| d * d).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for (d, _) in &self.blocks {
            off.push(acc);
            acc += d * d;
        }
        off
    }

    /// Orthonormal basis of the symmetric-block subspace, as columns of a `vec_len × m` matrix.
    pub fn symmetric_basis(&self) -> DMatrix<f64> {
        let m: usize = self.blocks.iter().map(|(d, _)| d * (d + 1) / 2).sum();
        let mut e = DMatrix::zeros(self.vec_len(), m);
        let mut col = 0;
        for ((d, _), off) in self.blocks.iter().zip(self.offsets()) {
            for j in 0..*d {
                for i in j..*d {
                    if i == j {
                        e[(off + j * d + i, col)] = 1.0;
                    } else {
                        let w = std::f64::consts::FRAC_1_SQRT_2;
                        e[(off + j * d + i, col)] = w;
                        e[(off + i * d + j, col)] = w;
                    }
                    col += 1;
                }
            }
        }
        e
    }

    /// Trace functional as a vector: `vec(I)` per block.
    pub fn trace_vector(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.vec_len());
        for ((d, _), off) in self.blocks.iter().zip(self.offsets()) {
            for i in 0..*d {
                t[off + i * d + i] = 1.0;
            }
        }
        t
    }

    pub fn split(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .zip(self.offsets())
            .map(|((d, _), off)| DMatrix::from_column_slice(*d, *d, &x.as_slice()[off..off + d * d]))
            .collect()
    }

    pub fn join(&self, blocks: &[DMatrix<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.vec_len());
        for (b, off) in blocks.iter().zip(self.offsets()) {
            x.rows_mut(off, b.len()).copy_from_slice(b.as_slice());
        }
        x
    }

    fn project(&self, x: &DVector<f64>, truncate: bool) -> DVector<f64> {
        let blocks: Vec<DMatrix<f64>> = self
            .split(x)
            .into_iter()
            .zip(&self.blocks)
            .map(|(b, (d, rank))| {
                let (w, v) = symmetric_eigen_desc(&b);
                let keep = if truncate { *rank } else { *d };
                let mut out = DMatrix::zeros(*d, *d);
                for i in 0..keep.min(*d) {
                    if w[i] > 0.0 {
                        out += v.column(i) * v.column(i).transpose() * w[i];
                    }
                }
                out
            })
            .collect();
        self.join(&blocks)
    }
}

/// How the feasible subspace is extracted from the constraint matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullspaceRule {
    /// Singular values at most `tol · σ_max` count as zero.
    Tolerance(f64),
    /// Keep exactly this many least-singular directions (robust to noise).
    Dimension(usize),
}

#[derive(Debug, Clone)]
pub struct SdpConfig {
    pub nullspace: NullspaceRule,
    /// Normalization functional; defaults to the total trace.
    pub normalization: Option<DVector<f64>>,
    pub max_iter: usize,
    pub tol: f64,
    pub polish_iter: usize,
}

impl Default for SdpConfig {
    fn default() -> Self {
        Self { nullspace: NullspaceRule::Tolerance(1e-6), normalization: None, max_iter: 5000, tol: 1e-10, polish_iter: 2000 }
    }
}

/// Gram blocks after truncation to their target ranks, scaled to unit total trace.
#[derive(Debug, Clone)]
pub struct GramBlocksSolution {
    pub blocks: Vec<DMatrix<f64>>,
    /// `d × rank` factors with `F Fᵀ = G`.
    pub factors: Vec<DMatrix<f64>>,
    /// `‖A g‖ / (‖A‖_F ‖g‖)` of the truncated blocks.
    pub affine_residual: f64,
    pub nullspace_dim: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Gram blocks of the symmetric layout.
#[derive(Debug, Clone)]
pub struct GramSolution {
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub h1: DVector<f64>,
    /// `2K × 2` factor of `g2`.
    pub h2: DMatrix<f64>,
    pub affine_residual: f64,
    pub nullspace_dim: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the symmetric-layout program with default settings.
pub fn solve_gram_sdp(a: &DMatrix<f64>, k: usize) -> Result<GramSolution> {
    solve_gram_sdp_with(a, k, &SdpConfig::default())
}

pub fn solve_gram_sdp_with(a: &DMatrix<f64>, k: usize, cfg: &SdpConfig) -> Result<GramSolution> {
    let sol = solve_gram_blocks(a, &GramLayout::symmetric(k), cfg)?;
    let h1 = sol.factors[0].column(0).into_owned();
    Ok(GramSolution {
        g1: sol.blocks[0].clone(),
        g2: sol.blocks[1].clone(),
        h1,
        h2: sol.factors[1].clone(),
        affine_residual: sol.affine_residual,
        nullspace_dim: sol.nullspace_dim,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Minimizes the total trace of PSD blocks in the null space of `a`, normalized.
pub fn solve_gram_blocks(a: &DMatrix<f64>, layout: &GramLayout, cfg: &SdpConfig) -> Result<GramBlocksSolution> {
    let p = layout.vec_len();
    dim_check(a.ncols() == p, || format!("constraint matrix has {} columns, layout needs {p}", a.ncols()))?;
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("constraint matrix is not finite".into()));
    }
    let sym = layout.symmetric_basis();
    let a_norm = a.norm();
    let a_sym = if a_norm > 0.0 { a * &sym / a_norm } else { DMatrix::zeros(a.nrows().max(1), sym.ncols()) };
    let basis_sym = match cfg.nullspace {
        NullspaceRule::Tolerance(tol) => nullspace(&a_sym, tol),
        NullspaceRule::Dimension(d) => smallest_right_singular_vectors(&a_sym, d).0,
    };
    let r = basis_sym.ncols();
    if r == 0 {
        return Err(Error::Infeasible("constraint system has an empty null space".into()));
    }
    let basis = &sym * basis_sym;

    let trace = layout.trace_vector();
    let normal = cfg.normalization.clone().unwrap_or_else(|| trace.clone());
    dim_check(normal.len() == p, || format!("normalization has length {}, expected {p}", normal.len()))?;
    let normal = &normal / normal.norm().max(f64::MIN_POSITIVE);
    let a_red = basis.transpose() * &normal;
    let a_red_sq = a_red.norm_squared();
    if a_red_sq <= 1e-20 {
        return Err(Error::Infeasible("normalization vanishes on the feasible subspace".into()));
    }
    let cost = basis.transpose() * (&trace / trace.norm());
    let project_affine = |w: DVector<f64>| -> DVector<f64> {
        let gap = 1.0 - a_red.dot(&w);
        w + &a_red * (gap / a_red_sq)
    };

    // ADMM on: min costᵀw  s.t.  aᵀw = 1,  basis·w = z,  z ∈ PSD blocks.
    let rho = 1.0;
    let mut z = layout.project(&(&basis * project_affine(DVector::zeros(r))), false);
    let mut u = DVector::zeros(p);
    let mut x = z.clone();
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let w = project_affine(basis.transpose() * (&z - &u) - &cost / rho);
        x = &basis * w;
        let z_prev = z;
        z = layout.project(&(&x + &u), false);
        u += &x - &z;
        let scale = x.norm().max(1.0);
        let primal = (&x - &z).norm();
        let dual = rho * (&z - &z_prev).norm();
        if primal <= cfg.tol * scale && dual <= cfg.tol * scale {
            converged = true;
            break;
        }
    }
    let _ = x;

    // Polish onto the target ranks by alternating projections.
    let residual_of = |g: &DVector<f64>| -> f64 {
        let gn = g.norm();
        if a_norm == 0.0 || gn == 0.0 {
            0.0
        } else {
            (a * g).norm() / (a_norm * gn)
        }
    };
    let mut best = layout.project(&z, true);
    let mut best_res = residual_of(&best);
    let mut cur = best.clone();
    for _ in 0..cfg.polish_iter {
        let onto = &basis * project_affine(basis.transpose() * &cur);
        let next = layout.project(&onto, true);
        let gap = (&next - &onto).norm();
        cur = next;
        let res = residual_of(&cur);
        if res < best_res {
            best = cur.clone();
            best_res = res;
        }
        if gap <= 1e-15 * cur.norm().max(1e-300) {
            break;
        }
    }

    let total_trace = trace.dot(&best);
    if !(total_trace > 0.0) {
        return Err(Error::Numerical("Gram solution collapsed to zero".into()));
    }
    let best = best / total_trace;
    let factors = factorize_blocks(layout, &layout.split(&best));
    let factors = refine_factors(a, layout, factors, &normal, cfg.polish_iter.min(200));
    let mut best = layout.join(&factors.iter().map(|f| f * f.transpose()).collect::<Vec<_>>());
    let total_trace = trace.dot(&best);
    if !(total_trace > 0.0) {
        return Err(Error::Numerical("Gram solution collapsed to zero".into()));
    }
    best /= total_trace;
    let blocks = layout.split(&best);
    let factors = factorize_blocks(layout, &blocks);
    Ok(GramBlocksSolution {
        affine_residual: residual_of(&best),
        blocks,
        factors,
        nullspace_dim: r,
        iterations,
        converged,
    })
}

/// `d × rank` factors of each block from its leading eigenpairs, sign-fixed by the largest entry.
fn factorize_blocks(layout: &GramLayout, blocks: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    blocks
        .iter()
        .zip(&layout.blocks)
        .map(|(b, (d, rank))| {
            let (w, v) = symmetric_eigen_desc(b);
            let mut f = DMatrix::zeros(*d, *rank);
            for j in 0..(*rank).min(*d) {
                let mut col = v.column(j) * w[j].max(0.0).sqrt();
                let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if pivot < 0.0 {
                    col.neg_mut();
                }
                f.set_column(j, &col);
            }
            f
        })
        .collect()
}

/// Levenberg-Marquardt on the factors themselves: drives `A vec(F Fᵀ)` to zero
/// while a penalty row holds the normalization at its starting value. The
/// convex relaxation lands near a feasible low-rank point; this closes the gap.
fn refine_factors(
    a: &DMatrix<f64>,
    layout: &GramLayout,
    factors: Vec<DMatrix<f64>>,
    normal: &DVector<f64>,
    max_iter: usize,
) -> Vec<DMatrix<f64>> {
    let a_norm = a.norm();
    if a_norm == 0.0 || max_iter == 0 {
        return factors;
    }
    let gram = |fs: &[DMatrix<f64>]| layout.join(&fs.iter().map(|f| f * f.transpose()).collect::<Vec<_>>());
    let target = normal.dot(&gram(&factors));
    if !(target.abs() > 1e-12) {
        return factors;
    }
    let residual = |fs: &[DMatrix<f64>]| -> DVector<f64> {
        let g = gram(fs);
        let mut r = DVector::zeros(a.nrows() + 1);
        r.rows_mut(0, a.nrows()).copy_from(&(a * &g / a_norm));
        r[a.nrows()] = (normal.dot(&g) - target) / target;
        r
    };
    let n_params: usize = factors.iter().map(|f| f.len()).sum();
    let offsets = layout.offsets();
    let jacobian = |fs: &[DMatrix<f64>]| -> DMatrix<f64> {
        // Columns of d vec(G) / d F_{ij}: rows of dG = e_i f_jᵀ + f_j e_iᵀ.
        let mut d = DMatrix::zeros(layout.vec_len(), n_params);
        let mut col = 0;
        for ((f, (dim, _)), off) in fs.iter().zip(&layout.blocks).zip(&offsets) {
            for j in 0..f.ncols() {
                for i in 0..f.nrows() {
                    for c in 0..*dim {
                        d[(off + c * dim + i, col)] += f[(c, j)];
                        d[(off + i * dim + c, col)] += f[(c, j)];
                    }
                    col += 1;
                }
            }
        }
        let mut j = DMatrix::zeros(a.nrows() + 1, n_params);
        j.rows_mut(0, a.nrows()).copy_from(&(a * &d / a_norm));
        j.row_mut(a.nrows()).copy_from(&((normal.transpose() * &d) / target));
        j
    };
    let unpack = |x: &DVector<f64>| -> Vec<DMatrix<f64>> {
        let mut at = 0;
        factors
            .iter()
            .map(|f| {
                let m = DMatrix::from_column_slice(f.nrows(), f.ncols(), &x.as_slice()[at..at + f.len()]);
                at += f.len();
                m
            })
            .collect()
    };
    let mut x = DVector::from_iterator(n_params, factors.iter().flat_map(|f| f.iter().copied()));
    let mut cur = unpack(&x);
    let mut cost = residual(&cur).norm_squared();
    let mut mu = 1e-6;
    for _ in 0..max_iter {
        if cost <= 1e-30 {
            break;
        }
        let jac = jacobian(&cur);
        let r = residual(&cur);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * r;
        let scale = jtj.diagonal().max().max(1e-300);
        let mut improved = false;
        for _ in 0..30 {
            let mut h = jtj.clone();
            for i in 0..n_params {
                h[(i, i)] += mu * scale;
            }
            let Some(step) = h.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let trial_x = &x + &step;
            let trial = unpack(&trial_x);
            let trial_cost = residual(&trial).norm_squared();
            if trial_cost < cost {
                let small = step.norm() <= 1e-15 * x.norm().max(1e-300);
                x = trial_x;
                cur = trial;
                cost = trial_cost;
                mu = (mu / 10.0).max(1e-15);
                improved = !small;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    cur
}
