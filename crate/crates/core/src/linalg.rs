//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

/// Largest absolute entry; 0 for an empty matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub struct Spd {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Spd {
    pub fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!("{what}: not square")));
        }
        m.clone()
            .cholesky()
            .map(|chol| Spd { chol })
            .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(Spd::new(m, what)?.inverse())
}

/// Inverse of a general square matrix, rejecting near-singular input.
pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{what}: not square")));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let scale = max_abs(m);
    if scale == 0.0 || rcond_estimate(m) < 1e-13 {
        return Err(Error::Singular(what.to_string()));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Ratio of smallest to largest singular value.
pub fn rcond_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Numerical rank from the singular values, relative tolerance `rtol`.
pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * max).count()
}

/// Clip the eigenvalues of a symmetric matrix from below at
/// `rel_floor * max(trace, tiny)`. Returns the clipped matrix and whether any
/// eigenvalue was changed.
pub fn clip_psd(m: &DMatrix<f64>, rel_floor: f64) -> (DMatrix<f64>, bool) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let trace = sym.trace().abs().max(f64::MIN_POSITIVE);
    let floor = rel_floor * trace;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (sym, false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    (out, true)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// A factor `F` with `F Fᵀ = m` for a positive semidefinite `m`.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let scale = max_abs(&sym).max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) {
        return Err(Error::Input(format!("{what} is not positive semidefinite")));
    }
    let sd = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sd))
}

/// `(Xᵀ W X)⁻¹ Xᵀ W y` for a positive definite weight `W`, given as an
/// already-applied `W X` and `W y`.
pub fn weighted_ls(
    x: &DMatrix<f64>,
    wx: &DMatrix<f64>,
    wy: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let xtwx = x.transpose() * wx;
    let info = Spd::new(&xtwx, "XᵀWX")?;
    let beta = info.solve_vec(&(x.transpose() * wy));
    Ok((beta, info.inverse()))
}

/// Ordinary least squares fit `y ~ X`, returning coefficients and residuals.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (beta, _) = weighted_ls(x, x, y)?;
    let resid = y - x * &beta;
    Ok((beta, resid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_matches_definition() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (4, 2));
        assert_eq!(k[(1, 0)], -1.0);
        assert_eq!(k[(2, 1)], 4.0);
        assert_eq!(k[(3, 0)], -3.0);
    }

    #[test]
    fn clip_psd_fixes_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (c, changed) = clip_psd(&m, 1e-12);
        assert!(changed);
        assert!(min_eigenvalue(&c) >= 0.0);
    }

    #[test]
    fn rank_detects_collinearity() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(rank(&m, 1e-10), 1);
    }

    #[test]
    fn psd_factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_factor(&m, "m").is_err());
        let f = psd_factor(&DMatrix::identity(2, 2), "i").unwrap();
        assert!(max_abs(&(&f * f.transpose() - DMatrix::identity(2, 2))) < 1e-14);
    }
}
