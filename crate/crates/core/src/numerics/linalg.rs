use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    /// Right singular vectors as columns.
    pub v: DMatrix<f64>,
}

/// Thin SVD, singular values decreasing.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// reproduce an exactly rank-deficient input; such results are detected by
/// recomposition and recomputed with one-sided Jacobi.
pub fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return SortedSvd {
            u: DMatrix::zeros(m.nrows(), 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(m.ncols(), 0),
        };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let out = SortedSvd {
        u: DMatrix::from_fn(m.nrows(), k, |i, j| u[(i, order[j])]),
        s: DVector::from_fn(k, |j, _| svd.singular_values[order[j]]),
        v: DMatrix::from_fn(m.ncols(), k, |i, j| vt[(order[j], i)]),
    };
    let rebuilt = &out.u * DMatrix::from_diagonal(&out.s) * out.v.transpose();
    let tol = 1e3 * f64::EPSILON * (m.nrows().max(m.ncols()) as f64) * m.norm();
    if (rebuilt - m).norm() <= tol && out.s.iter().all(|v| v.is_finite()) {
        out
    } else {
        log::debug!("bidiagonal SVD failed to reconstruct a {}x{} matrix; using Jacobi", m.nrows(), m.ncols());
        jacobi_svd(m)
    }
}

/// One-sided (Hestenes) Jacobi SVD: rotates column pairs until all are orthogonal.
fn jacobi_svd(m: &DMatrix<f64>) -> SortedSvd {
    let tall = m.nrows() >= m.ncols();
    let mut a = if tall { m.clone() } else { m.transpose() };
    let (rows, n) = a.shape();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms[order[0]];
    let mut u = DMatrix::zeros(rows, n);
    let mut s = DVector::zeros(n);
    let mut vs = DMatrix::zeros(n, n);
    for (j, &src) in order.iter().enumerate() {
        s[j] = norms[src];
        vs.set_column(j, &v.column(src));
        if norms[src] > f64::EPSILON * smax && norms[src] > 0.0 {
            u.set_column(j, &(a.column(src) / norms[src]));
        }
    }
    // Columns for vanishing singular values: complete to an orthonormal set.
    let mut e = 0;
    for j in 0..n {
        if u.column(j).norm_squared() > 0.0 {
            continue;
        }
        while e < rows {
            let mut cand = DVector::zeros(rows);
            cand[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for i in 0..n {
                    let proj = u.column(i).dot(&cand);
                    cand -= u.column(i) * proj;
                }
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                u.set_column(j, &(cand / norm));
                break;
            }
        }
    }
    if tall {
        SortedSvd { u, s, v: vs }
    } else {
        SortedSvd { u: vs, s, v: u }
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in decreasing order.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (
        DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]),
        DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]),
    )
}

/// Moore-Penrose inverse; singular values below `rtol · σ_max` are dropped.
pub fn pseudo_inverse(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let svd = sorted_svd(m);
    let smax = svd.s.iter().copied().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.s.iter().enumerate() {
        if s > rtol * smax && s > 0.0 {
            out += svd.v.column(i) * svd.u.column(i).transpose() / s;
        }
    }
    out
}
