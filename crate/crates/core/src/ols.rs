//! Ordinary least squares on single and stacked datasets.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Below this reciprocal condition number the Gram matrix is singular.
pub const RCOND_SINGULAR: f64 = 1e-12;
/// Above this condition number the solve goes through QR of X.
pub const COND_QR: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta_hat: DVector<f64>,
    /// (XᵀX)⁻¹
    pub gram_inverse: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
    /// ‖y − Xβ̂‖²
    pub rss: f64,
}

#[derive(Debug, Clone)]
pub struct CombinedFit {
    pub fit: OlsFit,
    /// rss / (n₁ + n₂ − p)
    pub sigma2_hat: f64,
    pub n1: usize,
    pub n2: usize,
}

impl CombinedFit {
    pub fn n0(&self) -> usize {
        self.n1 + self.n2 - self.fit.p
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&x.tr_mul(x))
}

/// Inverse of a symmetric positive definite matrix by Cholesky, rejecting
/// matrices whose Cholesky diagonal spread implies rcond below the threshold.
pub(crate) fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || (lo / hi).powi(2) < RCOND_SINGULAR {
        return None;
    }
    Some(symmetrize(&chol.inverse()))
}

pub fn fit_ols(d: &Dataset) -> Result<OlsFit> {
    let (n, p) = (d.n(), d.p());
    if n <= p {
        return Err(Error::Invalid(format!("dataset {:?}: n = {n} must exceed p = {p}", d.id)));
    }
    let x = &d.features;
    let g = gram(x);
    let eig = g.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let rcond = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(rcond >= RCOND_SINGULAR) {
        return Err(Error::Singular { id: d.id.clone(), rcond: rcond.max(0.0) });
    }
    let xty = x.tr_mul(&d.targets);
    let (beta_hat, gram_inverse) = if 1.0 / rcond > COND_QR {
        qr_solve(x, &d.targets).ok_or_else(|| Error::Singular { id: d.id.clone(), rcond })?
    } else {
        let chol = g.cholesky().ok_or_else(|| Error::Singular { id: d.id.clone(), rcond })?;
        (chol.solve(&xty), symmetrize(&chol.inverse()))
    };
    let resid = &d.targets - x * &beta_hat;
    Ok(OlsFit { beta_hat, gram_inverse, n, p, rss: resid.norm_squared() })
}

/// β̂ and (XᵀX)⁻¹ = R⁻¹R⁻ᵀ from a thin QR of X.
fn qr_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().tr_mul(y);
    let beta = r.solve_upper_triangular(&qty)?;
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(r.nrows(), r.ncols()))?;
    Some((beta, symmetrize(&(&r_inv * r_inv.transpose()))))
}

pub fn fit_combined(d1: &Dataset, d2: &Dataset) -> Result<CombinedFit> {
    if d1.p() != d2.p() {
        return Err(Error::Dimension(format!(
            "{:?} has p={} but {:?} has p={}",
            d1.id,
            d1.p(),
            d2.id,
            d2.p()
        )));
    }
    let stacked = Dataset::stack(&[d1, d2])?;
    let fit = fit_ols(&stacked)?;
    let dof = (d1.n() + d2.n() - fit.p) as f64;
    let sigma2_hat = fit.rss / dof;
    Ok(CombinedFit { fit, sigma2_hat, n1: d1.n(), n2: d2.n() })
}

/// Upper-triangular D with DᵀD = ((X₁ᵀX₁)⁻¹ + (X₂ᵀX₂)⁻¹)⁻¹.
pub fn whitening_matrix_d(f1: &OlsFit, f2: &OlsFit) -> Result<DMatrix<f64>> {
    if f1.p != f2.p {
        return Err(Error::Dimension(format!("fits have p={} and p={}", f1.p, f2.p)));
    }
    let s = symmetrize(&(&f1.gram_inverse + &f2.gram_inverse));
    let s_inv = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("sum of Gram inverses".into()))?
        .inverse();
    let l = symmetrize(&s_inv)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("inverse of the sum of Gram inverses".into()))?
        .l();
    Ok(l.transpose())
}

pub fn predict(f: &OlsFit, x: &DVector<f64>) -> Result<f64> {
    if x.len() != f.p {
        return Err(Error::Dimension(format!("feature vector of length {} for p = {}", x.len(), f.p)));
    }
    Ok(x.dot(&f.beta_hat))
}

pub fn predict_batch(f: &OlsFit, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != f.p {
        return Err(Error::Dimension(format!("design with {} columns for p = {}", x.ncols(), f.p)));
    }
    Ok(x * &f.beta_hat)
}
