//! Distributional moments: W_k, Ω_k = E[(X_kᵀX_k)⁻¹], Ω_c and E[Z_kᵀ W Z_k].

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{Dataset, GaussianSpec};
use crate::error::{Error, Result};
use crate::ols::{gram, invert_spd, symmetrize};
use crate::rng;

/// Redraw budget for a singular replicate.
const MAX_ATTEMPTS_PER_REP: u64 = 10;

#[derive(Debug, Clone)]
pub struct MomentSet {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub omega1: DMatrix<f64>,
    pub omega2: DMatrix<f64>,
    pub omega_c: DMatrix<f64>,
    /// E[Z₁ᵀ W₂ Z₁]
    pub zwz_12: DMatrix<f64>,
    /// E[Z₂ᵀ W₁ Z₂]
    pub zwz_21: DMatrix<f64>,
    pub mc_reps: usize,
    /// Largest entrywise standard error among the Monte Carlo averages.
    pub mc_std_err: f64,
    pub n1: usize,
    pub n2: usize,
}

impl MomentSet {
    pub fn p(&self) -> usize {
        self.w1.nrows()
    }
}

/// One Monte Carlo (or bootstrap) draw of the random matrices.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub omega1: DMatrix<f64>,
    pub omega2: DMatrix<f64>,
    pub omega_c: DMatrix<f64>,
    pub zwz_12: DMatrix<f64>,
    pub zwz_21: DMatrix<f64>,
}

fn replicate_from_designs(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
) -> Option<Replicate> {
    let g1 = gram(x1);
    let g2 = gram(x2);
    let gc = &g1 + &g2;
    let omega1 = invert_spd(&g1)?;
    let omega2 = invert_spd(&g2)?;
    let omega_c = invert_spd(&gc)?;
    let z1 = &omega_c * &g1;
    let z2 = &omega_c * &g2;
    let zwz_12 = symmetrize(&(z1.transpose() * w2 * &z1));
    let zwz_21 = symmetrize(&(z2.transpose() * w1 * &z2));
    Some(Replicate { omega1, omega2, omega_c, zwz_12, zwz_21 })
}

fn draw_with_retries<F>(seed: u64, label: &str, rep: u64, mut draw: F) -> Result<Replicate>
where
    F: FnMut(&mut rng::Rng) -> Option<Replicate>,
{
    for attempt in 0..MAX_ATTEMPTS_PER_REP {
        let mut r = rng::stream2(seed, label, rep, attempt);
        if let Some(rep) = draw(&mut r) {
            return Ok(rep);
        }
    }
    Err(Error::Invalid(format!(
        "replicate {rep}: every one of {MAX_ATTEMPTS_PER_REP} redraws had a singular Gram matrix"
    )))
}

fn check_sizes(p: usize, n1: usize, n2: usize, reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(Error::Invalid("need at least one replicate".into()));
    }
    if n1 <= p || n2 <= p {
        return Err(Error::Invalid(format!("sample sizes {n1}, {n2} must exceed p = {p}")));
    }
    Ok(())
}

/// Monte Carlo replicates for two Gaussian specs at sizes (n1, n2).
pub fn spec_replicates(
    spec1: &GaussianSpec,
    spec2: &GaussianSpec,
    n1: usize,
    n2: usize,
    mc_reps: usize,
    seed: u64,
) -> Result<Vec<Replicate>> {
    let p = spec1.p();
    if spec2.p() != p {
        return Err(Error::Dimension(format!("specs have p={p} and p={}", spec2.p())));
    }
    check_sizes(p, n1, n2, mc_reps)?;
    let (w1, w2) = (spec1.second_moment(), spec2.second_moment());
    (0..mc_reps as u64)
        .into_par_iter()
        .map(|rep| {
            draw_with_retries(seed, "mc-design", rep, |r| {
                let x1 = spec1.sample_design(n1, r);
                let x2 = spec2.sample_design(n2, r);
                replicate_from_designs(&x1, &x2, &w1, &w2)
            })
        })
        .collect()
}

struct Accumulator {
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
}

impl Accumulator {
    fn new(p: usize) -> Self {
        Self { sum: DMatrix::zeros(p, p), sum_sq: DMatrix::zeros(p, p) }
    }

    fn add(&mut self, m: &DMatrix<f64>) {
        self.sum += m;
        self.sum_sq += m.component_mul(m);
    }

    /// (mean, largest entrywise standard error)
    fn finish(self, reps: usize) -> (DMatrix<f64>, f64) {
        let r = reps as f64;
        let mean = &self.sum / r;
        let se = if reps > 1 {
            self.sum_sq
                .iter()
                .zip(mean.iter())
                .map(|(&s2, &m)| ((s2 / r - m * m).max(0.0) * r / (r - 1.0) / r).sqrt())
                .fold(0.0, f64::max)
        } else {
            0.0
        };
        (symmetrize(&mean), se)
    }
}

/// Averages replicates into a MomentSet. `omega_override` replaces the Monte
/// Carlo Ω₁ / Ω₂ by a closed form when given.
pub fn aggregate(
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    reps: &[Replicate],
    omega_override: (Option<DMatrix<f64>>, Option<DMatrix<f64>>),
    n1: usize,
    n2: usize,
) -> MomentSet {
    let p = w1.nrows();
    let mut acc: Vec<Accumulator> = (0..5).map(|_| Accumulator::new(p)).collect();
    for r in reps {
        acc[0].add(&r.omega1);
        acc[1].add(&r.omega2);
        acc[2].add(&r.omega_c);
        acc[3].add(&r.zwz_12);
        acc[4].add(&r.zwz_21);
    }
    let mut it = acc.into_iter().map(|a| a.finish(reps.len()));
    let (o1, se1) = it.next().unwrap();
    let (o2, se2) = it.next().unwrap();
    let (oc, sec) = it.next().unwrap();
    let (z12, se12) = it.next().unwrap();
    let (z21, se21) = it.next().unwrap();
    let mut se = sec.max(se12).max(se21);
    let omega1 = match omega_override.0 {
        Some(o) => o,
        None => {
            se = se.max(se1);
            o1
        }
    };
    let omega2 = match omega_override.1 {
        Some(o) => o,
        None => {
            se = se.max(se2);
            o2
        }
    };
    MomentSet {
        w1: symmetrize(&w1),
        w2: symmetrize(&w2),
        omega1,
        omega2,
        omega_c: oc,
        zwz_12: z12,
        zwz_21: z21,
        mc_reps: reps.len(),
        mc_std_err: se,
        n1,
        n2,
    }
}

/// E[(XᵀX)⁻¹] = Σ⁻¹/(n−p−1) for zero-mean Gaussian rows, if applicable.
pub fn closed_form_omega(spec: &GaussianSpec, n: usize) -> Result<Option<DMatrix<f64>>> {
    if !spec.is_centered() {
        return Ok(None);
    }
    let p = spec.p();
    if n <= p + 1 {
        return Err(Error::Invalid(format!(
            "closed-form inverse-Wishart mean needs n > p+1, got n={n}, p={p}"
        )));
    }
    let inv = spec
        .sigma_x
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("sigma_x".into()))?
        .inverse();
    Ok(Some(symmetrize(&inv) / (n - p - 1) as f64))
}

pub fn moments_from_spec(
    spec1: &GaussianSpec,
    spec2: &GaussianSpec,
    n1: usize,
    n2: usize,
    mc_reps: usize,
    seed: u64,
) -> Result<MomentSet> {
    let reps = spec_replicates(spec1, spec2, n1, n2, mc_reps, seed)?;
    let overrides = (closed_form_omega(spec1, n1)?, closed_form_omega(spec2, n2)?);
    Ok(aggregate(spec1.second_moment(), spec2.second_moment(), &reps, overrides, n1, n2))
}

/// Plug-in moments at the datasets' own sizes.
pub fn moments_from_data(d1: &Dataset, d2: &Dataset, boot_reps: usize, seed: u64) -> Result<MomentSet> {
    moments_from_data_sized(d1, d2, d1.n(), d2.n(), boot_reps, seed)
}

/// Plug-in moments for designs of n1 (resp. n2) rows resampled with
/// replacement from d1 (resp. d2).
pub fn moments_from_data_sized(
    d1: &Dataset,
    d2: &Dataset,
    n1: usize,
    n2: usize,
    boot_reps: usize,
    seed: u64,
) -> Result<MomentSet> {
    let p = d1.p();
    if d2.p() != p {
        return Err(Error::Dimension(format!("{:?} has p={p} but {:?} has p={}", d1.id, d2.id, d2.p())));
    }
    check_sizes(p, n1, n2, boot_reps)?;
    let w1 = gram(&d1.features) / d1.n() as f64;
    let w2 = gram(&d2.features) / d2.n() as f64;
    let reps: Vec<Replicate> = (0..boot_reps as u64)
        .into_par_iter()
        .map(|rep| {
            draw_with_retries(seed, "bootstrap-design", rep, |r| {
                let rows1: Vec<usize> = (0..n1).map(|_| r.random_range(0..d1.n())).collect();
                let rows2: Vec<usize> = (0..n2).map(|_| r.random_range(0..d2.n())).collect();
                replicate_from_designs(&d1.features.select_rows(&rows1), &d2.features.select_rows(&rows2), &w1, &w2)
            })
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(w1, w2, &reps, (None, None), n1, n2))
}
