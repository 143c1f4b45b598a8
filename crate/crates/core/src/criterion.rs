//! The computable merge criterion: φ lower-bounds h(σ²), ψ upper-bounds
//! g(β₁, β₂), and a pair is merged when φ > ψ. Everywhere below `alpha`
//! stands in for log(1/δ).

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moments::MomentSet;
use crate::ols::{fit_combined, fit_ols, symmetrize, whitening_matrix_d, CombinedFit, OlsFit};
use crate::oracle::{gap_quantities, GapQuantities};

#[derive(Debug, Clone, Copy)]
pub struct CriterionInputs<'a> {
    pub fit1: &'a OlsFit,
    pub fit2: &'a OlsFit,
    pub combined: &'a CombinedFit,
    pub d_matrix: &'a DMatrix<f64>,
    pub b_factor: &'a DMatrix<f64>,
    pub moment_set: &'a MomentSet,
    pub alpha: f64,
}

/// Trace terms of Σ = X⁰(X⁰ᵀX⁰)⁻¹CᵀBᵀBC(X⁰ᵀX⁰)⁻¹X⁰ᵀ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaTraces {
    pub trace: f64,
    pub trace_sq: f64,
    pub spectral: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct C0Solution {
    pub c0: f64,
    pub discriminant_clamped: bool,
    pub c0_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionOutput {
    pub phi: f64,
    pub psi: f64,
    pub merge_suggested: bool,
    pub c0: f64,
    pub sigma_trace_terms: SigmaTraces,
    pub discriminant_clamped: bool,
    pub c0_clamped: bool,
    /// g(β̂₁, β̂₂)
    pub g_hat: f64,
}

/// (Ã₁, Ã₂)
pub fn a_tilde_coefficients(n0: usize, a0: f64, alpha: f64) -> (f64, f64) {
    let n0 = n0 as f64;
    let l = alpha;
    let den = (n0 + 2.0 * (n0 * l).sqrt() + 2.0 * l) * (3.0 + 4.0 * (l / n0).sqrt());
    let a1 = n0 * a0 / den;
    let a2 = -2.0 * a0 * (1.0 + 2.0 * (l / n0).sqrt()) / den;
    (a1, a2)
}

/// Σ has the same nonzero spectrum as the p×p matrix
/// M = B((X₁ᵀX₁)⁻¹ + (X₂ᵀX₂)⁻¹)Bᵀ, because X⁰ is block diagonal.
pub fn sigma_traces(b_factor: &DMatrix<f64>, f1: &OlsFit, f2: &OlsFit) -> SigmaTraces {
    let s = &f1.gram_inverse + &f2.gram_inverse;
    let m = symmetrize(&(b_factor * s * b_factor.transpose()));
    let spectral = m.clone().symmetric_eigenvalues().max().max(0.0);
    SigmaTraces { trace: m.trace(), trace_sq: m.norm_squared(), spectral }
}

pub fn c_constants(n0: usize, sigma2_hat: f64, d_norm: f64, alpha: f64) -> CConstants {
    let n0 = n0 as f64;
    let l = alpha;
    let delta = (-alpha).exp();
    let q = n0 + 2.0 * (n0 * l).sqrt() + 2.0 * l;
    let lg = (4.0 / (1.0 + delta)).ln();
    let kappa = lg.sqrt() + 1.0 / (2.0 * lg.sqrt());
    let root = (n0 * sigma2_hat).sqrt();
    let c1 = root * q.sqrt();
    let c2 = root * d_norm;
    let c3 = -(n0 / 8.0) * (1.0 + delta) / (std::f64::consts::E * lg).sqrt() - (2.0 * n0).sqrt() * kappa * q.sqrt() + q;
    let c4 = d_norm * ((2.0 * n0).sqrt() * kappa - 2.0 * q.sqrt());
    let c5 = d_norm * d_norm;
    CConstants { c1, c2, c3, c4, c5 }
}

/// c₀ = (c₁ − c₄ + √((c₁ − c₄)² − 4c₃(c₅ − c₂)))/(2c₃), with a negative
/// discriminant and a negative root both clamped to zero.
pub fn solve_c0(c: &CConstants) -> Result<C0Solution> {
    if c.c3 == 0.0 {
        return Err(Error::Invalid("c3 = 0 in the sigma upper bound".into()));
    }
    let b = c.c1 - c.c4;
    let mut disc = b * b - 4.0 * c.c3 * (c.c5 - c.c2);
    let discriminant_clamped = disc < 0.0;
    if discriminant_clamped {
        disc = 0.0;
    }
    let mut c0 = (b + disc.sqrt()) / (2.0 * c.c3);
    let c0_clamped = !(c0 >= 0.0);
    if c0_clamped {
        c0 = 0.0;
    }
    Ok(C0Solution { c0, discriminant_clamped, c0_clamped })
}

/// Everything the criterion needs from one pair of fits; only the cheap
/// scalar algebra depends on alpha.
#[derive(Debug, Clone, Copy)]
pub struct PairStatistics {
    pub n0: usize,
    pub sigma2_hat: f64,
    /// ‖D(β̂₁ − β̂₂)‖²
    pub d_norm_sq: f64,
    pub g_hat: f64,
    pub traces: SigmaTraces,
}

impl PairStatistics {
    pub fn new(
        f1: &OlsFit,
        f2: &OlsFit,
        combined: &CombinedFit,
        d_matrix: &DMatrix<f64>,
        b_factor: &DMatrix<f64>,
    ) -> Result<Self> {
        if combined.n1 + combined.n2 <= f1.p {
            return Err(Error::Invalid("n1 + n2 must exceed p".into()));
        }
        let diff = &f1.beta_hat - &f2.beta_hat;
        Ok(Self {
            n0: combined.n0(),
            sigma2_hat: combined.sigma2_hat,
            d_norm_sq: (d_matrix * &diff).norm_squared(),
            g_hat: (b_factor * &diff).norm_squared(),
            traces: sigma_traces(b_factor, f1, f2),
        })
    }

    pub fn from_inputs(ci: &CriterionInputs<'_>) -> Result<Self> {
        Self::new(ci.fit1, ci.fit2, ci.combined, ci.d_matrix, ci.b_factor)
    }

    pub fn phi(&self, a0: f64, alpha: f64) -> f64 {
        let (a1, a2) = a_tilde_coefficients(self.n0, a0, alpha);
        a1 * self.sigma2_hat + a2 * self.d_norm_sq
    }

    pub fn psi(&self, alpha: f64) -> Result<(f64, C0Solution)> {
        let c = c_constants(self.n0, self.sigma2_hat, self.d_norm_sq.sqrt(), alpha);
        let sol = solve_c0(&c)?;
        let t = &self.traces;
        let spread = t.trace + 2.0 * (t.trace_sq * alpha).sqrt() + 2.0 * t.spectral * alpha;
        let root = self.g_hat.sqrt() + sol.c0 * spread.max(0.0).sqrt();
        Ok((root * root, sol))
    }

    pub fn evaluate(&self, a0: f64, alpha: f64) -> Result<CriterionOutput> {
        if !(alpha > 0.0) {
            return Err(Error::Invalid(format!("alpha = {alpha} must be positive")));
        }
        let phi = self.phi(a0, alpha);
        let (psi, sol) = self.psi(alpha)?;
        Ok(CriterionOutput {
            phi,
            psi,
            merge_suggested: phi > psi,
            c0: sol.c0,
            sigma_trace_terms: self.traces,
            discriminant_clamped: sol.discriminant_clamped,
            c0_clamped: sol.c0_clamped,
            g_hat: self.g_hat,
        })
    }
}

pub fn phi(ci: &CriterionInputs<'_>, q: &GapQuantities) -> Result<f64> {
    Ok(PairStatistics::from_inputs(ci)?.phi(q.a0, ci.alpha))
}

pub fn psi(ci: &CriterionInputs<'_>, _q: &GapQuantities) -> Result<f64> {
    Ok(PairStatistics::from_inputs(ci)?.psi(ci.alpha)?.0)
}

/// Fit both datasets and their union, then compare φ with ψ.
pub fn criterion_at_alpha(d1: &Dataset, d2: &Dataset, alpha: f64, m: &MomentSet) -> Result<CriterionOutput> {
    let q = gap_quantities(m)?;
    let f1 = fit_ols(d1)?;
    let f2 = fit_ols(d2)?;
    let c = fit_combined(d1, d2)?;
    let d = whitening_matrix_d(&f1, &f2)?;
    PairStatistics::new(&f1, &f2, &c, &d, &q.b0_factor)?.evaluate(q.a0, alpha)
}
