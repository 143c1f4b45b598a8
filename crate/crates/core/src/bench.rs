//! Synthetic accuracy benchmark: two Gaussian sources per cell, ground truth
//! from the exact out-of-sample errors, and agreement rates of the tuned
//! decision and of the in-sample baseline.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::data::{sample_synthetic, Dataset, GaussianSpec};
use crate::error::{Error, Result};
use crate::ols::{fit_combined, fit_ols};
use crate::oracle::ground_truth_merge;
use crate::rng;
use crate::tuner::{decide_pair, TunerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub p_values: Vec<usize>,
    /// β₂ − β₁ = d·1_p
    pub d_values: Vec<f64>,
    /// false: both means zero; true: μ₂ = 1_p.
    pub mu_shifts: Vec<bool>,
    pub n: usize,
    pub trials: usize,
    /// Monte Carlo replicates for the per-cell ground truth.
    pub truth_reps: usize,
    pub seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            p_values: vec![10, 20],
            d_values: vec![0.0, 0.1, 0.3],
            mu_shifts: vec![false],
            n: 50,
            trials: 1000,
            truth_reps: 20_000,
            seed: 0,
        }
    }
}

impl ExperimentGrid {
    pub fn desk() -> Self {
        Self { trials: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.p_values.is_empty() || self.d_values.is_empty() || self.mu_shifts.is_empty() {
            return bad("grid axes must be nonempty");
        }
        if self.p_values.iter().any(|&p| p == 0 || p + 2 >= self.n) {
            return bad("every p must satisfy 0 < p < n - 2");
        }
        if self.d_values.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("d values must be finite and nonnegative");
        }
        if self.trials == 0 || self.truth_reps < 2 {
            return bad("need trials >= 1 and truth_reps >= 2");
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(v) = kv.vector("p_values")? {
            if v.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                return Err(Error::Config("p_values must be positive integers".into()));
            }
            self.p_values = v.into_iter().map(|x| x as usize).collect();
        }
        if let Some(v) = kv.vector("d_values")? {
            self.d_values = v;
        }
        match kv.get("mu_shift") {
            Some("false") => self.mu_shifts = vec![false],
            Some("true") => self.mu_shifts = vec![true],
            Some("both") => self.mu_shifts = vec![false, true],
            Some(other) => return Err(Error::Config(format!("mu_shift must be false, true or both, got {other:?}"))),
            None => {}
        }
        if let Some(v) = kv.usize("n")? {
            self.n = v;
        }
        if let Some(v) = kv.usize("trials")? {
            self.trials = v;
        }
        if let Some(v) = kv.usize("truth_reps")? {
            self.truth_reps = v;
        }
        if let Some(v) = kv.u64("seed")? {
            self.seed = v;
        }
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let join = |v: Vec<String>| v.join(",");
        let mut kv = KvConfig::default();
        kv.set("p_values", join(self.p_values.iter().map(|p| p.to_string()).collect()));
        kv.set("d_values", join(self.d_values.iter().map(|d| d.to_string()).collect()));
        let mu = match self.mu_shifts.as_slice() {
            [false] => "false",
            [true] => "true",
            _ => "both",
        };
        kv.set("mu_shift", mu);
        kv.set("n", self.n);
        kv.set("trials", self.trials);
        kv.set("truth_reps", self.truth_reps);
        kv.set("seed", self.seed);
        kv
    }

    /// (mu_shift, p, d) in emission order.
    pub fn cells(&self) -> Vec<(bool, usize, f64)> {
        let mut out = Vec::new();
        for &mu in &self.mu_shifts {
            for &p in &self.p_values {
                for &d in &self.d_values {
                    out.push((mu, p, d));
                }
            }
        }
        out
    }
}

/// β₁ = 1_p, β₂ = (1 + d)1_p, Σ = I, σ² = 1; μ₂ = 1_p when shifted.
pub fn cell_specs(p: usize, d: f64, mu_shift: bool) -> Result<(GaussianSpec, GaussianSpec)> {
    let beta1 = DVector::from_element(p, 1.0);
    let beta2 = DVector::from_element(p, 1.0 + d);
    let s1 = GaussianSpec::standard(beta1, 1.0)?;
    let mu2 = DVector::from_element(p, if mu_shift { 1.0 } else { 0.0 });
    let s2 = GaussianSpec::new(mu2, nalgebra::DMatrix::identity(p, p), beta2, 1.0)?;
    Ok((s1, s2))
}

/// Merge iff the pooled fit's per-dataset mean squared residuals sum below
/// the individual fits'. OLS optimality makes this false except for ties.
pub fn direct_comparison(d1: &Dataset, d2: &Dataset) -> Result<bool> {
    let f1 = fit_ols(d1)?;
    let f2 = fit_ols(d2)?;
    let c = fit_combined(d1, d2)?;
    let mse = |d: &Dataset, b: &DVector<f64>| (&d.targets - &d.features * b).norm_squared() / d.n() as f64;
    let combined = mse(d1, &c.fit.beta_hat) + mse(d2, &c.fit.beta_hat);
    let individual = mse(d1, &f1.beta_hat) + mse(d2, &f2.beta_hat);
    Ok(combined < individual)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub mu_shift: bool,
    pub p: usize,
    pub d: f64,
    pub truth_merge: bool,
    pub truth_margin: f64,
    pub truth_std_err: f64,
    pub truth_indeterminate: bool,
    pub tuned_accuracy: f64,
    pub direct_accuracy: f64,
    pub tuned_merge_rate: f64,
    pub direct_merge_rate: f64,
    pub mean_proxy_acc: f64,
    pub mean_suggestion_rate: f64,
    pub trials_ok: usize,
    pub trials_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub grid: ExperimentGrid,
    pub tuner: TunerConfig,
    pub cells: Vec<CellResult>,
}

struct TrialOutcome {
    tuned: bool,
    direct: bool,
    proxy_acc: f64,
    suggestion_rate: f64,
}

pub fn run_cell(grid: &ExperimentGrid, cfg: &TunerConfig, index: usize, (mu_shift, p, d): (bool, usize, f64)) -> Result<CellResult> {
    let (s1, s2) = cell_specs(p, d, mu_shift)?;
    let cell = index as u64;
    let truth = ground_truth_merge(&s1, &s2, grid.n, grid.n, grid.truth_reps, rng::derive_indexed(grid.seed, "bench-truth", &[cell]))?;
    let outcomes: Vec<Option<TrialOutcome>> = (0..grid.trials as u64)
        .into_par_iter()
        .map(|t| {
            let d1 = sample_synthetic(&s1, grid.n, rng::derive_indexed(grid.seed, "bench-data", &[cell, t, 0]));
            let d2 = sample_synthetic(&s2, grid.n, rng::derive_indexed(grid.seed, "bench-data", &[cell, t, 1]));
            let tcfg = cfg.with_seed(rng::derive_indexed(grid.seed, "bench-tuner", &[cell, t]));
            let dec = decide_pair(&d1, &d2, &tcfg).ok()?;
            let direct = direct_comparison(&d1, &d2).ok()?;
            Some(TrialOutcome { tuned: dec.merge, direct, proxy_acc: dec.proxy_acc, suggestion_rate: dec.suggestion_rate })
        })
        .collect();
    let ok: Vec<&TrialOutcome> = outcomes.iter().flatten().collect();
    let k = ok.len() as f64;
    let rate = |f: &dyn Fn(&TrialOutcome) -> bool| if ok.is_empty() { f64::NAN } else { ok.iter().filter(|o| f(o)).count() as f64 / k };
    let mean = |f: &dyn Fn(&TrialOutcome) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|o| f(o)).sum::<f64>() / k };
    Ok(CellResult {
        mu_shift,
        p,
        d,
        truth_merge: truth.merge,
        truth_margin: truth.margin,
        truth_std_err: truth.std_err,
        truth_indeterminate: truth.indeterminate,
        tuned_accuracy: rate(&|o| o.tuned == truth.merge),
        direct_accuracy: rate(&|o| o.direct == truth.merge),
        tuned_merge_rate: rate(&|o| o.tuned),
        direct_merge_rate: rate(&|o| o.direct),
        mean_proxy_acc: mean(&|o| o.proxy_acc),
        mean_suggestion_rate: mean(&|o| o.suggestion_rate),
        trials_ok: ok.len(),
        trials_failed: outcomes.len() - ok.len(),
    })
}

pub fn run_grid(grid: &ExperimentGrid, cfg: &TunerConfig) -> Result<BenchTable> {
    grid.validate()?;
    cfg.validate()?;
    let cells = grid.cells().into_iter().enumerate().map(|(i, c)| run_cell(grid, cfg, i, c)).collect::<Result<Vec<_>>>()?;
    Ok(BenchTable { grid: grid.clone(), tuner: cfg.clone(), cells })
}

impl BenchTable {
    fn header(&self) -> String {
        let mut out = String::new();
        for (k, v) in [("grid", self.grid.to_kv()), ("tuner", self.tuner.to_kv())] {
            for line in v.render().lines() {
                let _ = writeln!(out, "# {k}.{line}");
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("mu_shift,p,d,truth_merge,truth_margin,truth_std_err,truth_indeterminate,tuned_accuracy,direct_accuracy,tuned_merge_rate,direct_merge_rate,mean_proxy_acc,mean_suggestion_rate,trials_ok,trials_failed\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.mu_shift,
                c.p,
                c.d,
                c.truth_merge,
                c.truth_margin,
                c.truth_std_err,
                c.truth_indeterminate,
                c.tuned_accuracy,
                c.direct_accuracy,
                c.tuned_merge_rate,
                c.direct_merge_rate,
                c.mean_proxy_acc,
                c.mean_suggestion_rate,
                c.trials_ok,
                c.trials_failed
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header();
        let _ = writeln!(
            out,
            "{:>8} {:>4} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6}",
            "mu_shift", "p", "d", "merge?", "tuned_acc", "direct_acc", "tuned_rate", "proxy_acc", "trials", "failed"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>8} {:>4} {:>6.2} {:>6} {:>9.1}% {:>9.1}% {:>9.1}% {:>10.3} {:>8} {:>6}",
                if c.mu_shift { "yes" } else { "no" },
                c.p,
                c.d,
                if c.truth_merge { "Yes" } else { "No" },
                100.0 * c.tuned_accuracy,
                100.0 * c.direct_accuracy,
                100.0 * c.tuned_merge_rate,
                c.mean_proxy_acc,
                c.trials_ok,
                c.trials_failed
            );
        }
        out
    }
}
