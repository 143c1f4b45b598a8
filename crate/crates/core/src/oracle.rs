//! Exact out-of-sample error under a known Gaussian law, the merge
//! functions h and g, and the ground-truth merge oracle.

use nalgebra::{DMatrix, DVector};

use crate::data::GaussianSpec;
use crate::error::{Error, Result};
use crate::moments::{aggregate, closed_form_omega, spec_replicates, MomentSet};
use crate::ols::symmetrize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct GapQuantities {
    pub a0: f64,
    pub b0: DMatrix<f64>,
    /// B with BᵀB = B₀ (after clipping negative eigenvalues).
    pub b0_factor: DMatrix<f64>,
}

impl GapQuantities {
    /// h(x) = A₀·x
    pub fn h(&self, x: f64) -> f64 {
        self.a0 * x
    }

    /// g(u, v) = ‖B(u − v)‖²
    pub fn g(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (&self.b0_factor * (u - v)).norm_squared()
    }
}

pub fn gap_quantities(m: &MomentSet) -> Result<GapQuantities> {
    let a0 = (&m.w1 * (&m.omega1 - &m.omega_c) + &m.w2 * (&m.omega2 - &m.omega_c)).trace();
    let b0 = symmetrize(&(&m.zwz_12 + &m.zwz_21));
    let eig = b0.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    let lo = eig.eigenvalues.min();
    if lo < -1e-6 * scale {
        return Err(Error::MonteCarloNoise(format!(
            "B0 has eigenvalue {lo:.3e} against norm {scale:.3e}; increase the replicate count"
        )));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let projected = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()));
    let b0_factor = match projected.clone().cholesky() {
        Some(c) => c.l().transpose(),
        None => DMatrix::from_diagonal(&clipped.map(f64::sqrt)) * eig.eigenvectors.transpose(),
    };
    Ok(GapQuantities { a0, b0: projected, b0_factor })
}

/// σ²(1 + tr(W_k Ω_k))
pub fn exact_ose_single(spec: &GaussianSpec, m: &MomentSet, which: Which) -> f64 {
    let (w, omega) = match which {
        Which::First => (&m.w1, &m.omega1),
        Which::Second => (&m.w2, &m.omega2),
    };
    spec.noise_var * (1.0 + (w * omega).trace())
}

/// σ²(1 + tr(W_k Ω_c)) + Δᵀ E[Z_{3−k}ᵀ W_k Z_{3−k}] Δ with σ² taken from spec1.
pub fn exact_ose_combined(spec1: &GaussianSpec, spec2: &GaussianSpec, m: &MomentSet, which: Which) -> Result<f64> {
    if spec1.p() != spec2.p() || spec1.p() != m.p() {
        return Err(Error::Dimension(format!(
            "specs with p={} and p={} against moments with p={}",
            spec1.p(),
            spec2.p(),
            m.p()
        )));
    }
    let delta = &spec1.beta - &spec2.beta;
    let (w, zwz) = match which {
        Which::First => (&m.w1, &m.zwz_21),
        Which::Second => (&m.w2, &m.zwz_12),
    };
    let s2 = spec1.noise_var;
    Ok(s2 * (1.0 + (w * &m.omega_c).trace()) + delta.dot(&(zwz * &delta)))
}

/// OSE of a fixed coefficient vector: σ² + (β̂ − β)ᵀ W (β̂ − β).
pub fn exact_conditional_ose(spec: &GaussianSpec, beta_hat: &DVector<f64>) -> f64 {
    let e = beta_hat - &spec.beta;
    spec.noise_var + e.dot(&(spec.second_moment() * &e))
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub merge: bool,
    /// Σ OSE individual − Σ OSE combined
    pub margin: f64,
    /// Monte Carlo standard error of the margin.
    pub std_err: f64,
    /// h(σ²) − g(β₁, β₂)
    pub h_minus_g: f64,
    /// |margin| within three standard errors.
    pub indeterminate: bool,
    pub moments: MomentSet,
}

pub fn ground_truth_merge(
    spec1: &GaussianSpec,
    spec2: &GaussianSpec,
    n1: usize,
    n2: usize,
    mc_reps: usize,
    seed: u64,
) -> Result<GroundTruth> {
    let reps = spec_replicates(spec1, spec2, n1, n2, mc_reps, seed)?;
    let overrides = (closed_form_omega(spec1, n1)?, closed_form_omega(spec2, n2)?);
    let m = aggregate(spec1.second_moment(), spec2.second_moment(), &reps, overrides.clone(), n1, n2);

    let individual = exact_ose_single(spec1, &m, Which::First) + exact_ose_single(spec1, &m, Which::Second);
    let combined = exact_ose_combined(spec1, spec2, &m, Which::First)? + exact_ose_combined(spec1, spec2, &m, Which::Second)?;
    let margin = individual - combined;

    // Per-replicate margins share the replicate draws, so their spread gives
    // the standard error of the Monte Carlo average.
    let s2 = spec1.noise_var;
    let delta = &spec1.beta - &spec2.beta;
    let samples: Vec<f64> = reps
        .iter()
        .map(|r| {
            let o1 = overrides.0.as_ref().unwrap_or(&r.omega1);
            let o2 = overrides.1.as_ref().unwrap_or(&r.omega2);
            let a = (&m.w1 * (o1 - &r.omega_c) + &m.w2 * (o2 - &r.omega_c)).trace();
            s2 * a - delta.dot(&((&r.zwz_12 + &r.zwz_21) * &delta))
        })
        .collect();
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let std_err = if samples.len() > 1 {
        (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };

    let q = gap_quantities(&m)?;
    let h_minus_g = q.h(s2) - q.g(&spec1.beta, &spec2.beta);
    let indeterminate = margin.abs() <= 3.0 * std_err;
    if !indeterminate && margin.signum() != h_minus_g.signum() {
        return Err(Error::Consistency(format!(
            "OSE margin {margin:.6e} and h - g = {h_minus_g:.6e} disagree in sign"
        )));
    }
    Ok(GroundTruth { merge: margin > 0.0, margin, std_err, h_minus_g, indeterminate, moments: m })
}
