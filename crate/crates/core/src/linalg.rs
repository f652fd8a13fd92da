//! Small dense helpers shared by the predictor, filter and controller.

use nalgebra::{DMatrix, DVector};

use crate::error::{DdpcError, Result};

/// Singular values below this fraction of the largest one count as zero.
pub const PINV_RTOL: f64 = 1e-10;

/// Moore–Penrose pseudoinverse with the relative rank tolerance.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let smax = svd.singular_values.max();
    let cut = PINV_RTOL * smax;
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank at the pseudoinverse tolerance.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    s.iter().filter(|&&v| v > PINV_RTOL * smax && v > 0.0).count()
}

/// Two-norm condition number.
pub fn cond(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn psd_floor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if s.nrows() == 0 {
        return s;
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()))
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// Accepts a matrix as PSD when it is symmetric and its smallest eigenvalue is
/// above `-tol · max(1, ‖m‖_max)`.
pub fn check_psd(what: &'static str, m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(DdpcError::NotPsd(what));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(DdpcError::NotPsd(what));
    }
    if min_eigenvalue(m) < -tol * scale {
        return Err(DdpcError::NotPsd(what));
    }
    Ok(())
}

/// Symmetric square-root-type factor `L` with `L Lᵀ = m` for a PSD matrix.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if s.nrows() == 0 {
        return s;
    }
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = s.symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// `I_n ⊗ m`.
pub fn kron_identity(n: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(n * r, n * c);
    for k in 0..n {
        out.view_mut((k * r, k * c), (r, c)).copy_from(m);
    }
    out
}

/// Stacks vectors vertically.
pub fn vcat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut o = 0;
    for p in parts {
        out.rows_mut(o, p.len()).copy_from(p);
        o += p.len();
    }
    out
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let c = parts.first().map_or(0, |p| p.ncols());
    let r = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut o = 0;
    for p in parts {
        out.view_mut((o, 0), (p.nrows(), c)).copy_from(p);
        o += p.nrows();
    }
    out
}
