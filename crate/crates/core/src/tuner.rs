//! Pairwise merge decision: grid search over alpha by estimated success
//! rate, with bootstrap out-of-sample errors standing in for the truth.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::criterion::PairStatistics;
use crate::data::{split, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::moments::moments_from_data_sized;
use crate::ols::{fit_combined, fit_ols, whitening_matrix_d, OlsFit};
use crate::oracle::{gap_quantities, GapQuantities};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// merge iff proxy_acc > λ
    Threshold,
    /// merge iff proxy_acc > λ and the criterion said "merge" in most trials
    Majority,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Threshold => "threshold",
            MergeMode::Majority => "majority",
        })
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(MergeMode::Threshold),
            "majority" => Ok(MergeMode::Majority),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eta: f64,
    pub max_iterations: usize,
    pub lambda_threshold: f64,
    /// Rows drawn from each train side per trial; `None` picks 50 for
    /// p ≤ 10 and 100 otherwise.
    pub subsample_n: Option<usize>,
    pub oos_count: usize,
    pub boot_reps_m: usize,
    pub split_fraction: f64,
    /// Bootstrap replicates for the plug-in moments.
    pub moment_reps: usize,
    pub mode: MergeMode,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            alpha_min: 2.0,
            alpha_max: 10.0,
            eta: 0.01,
            max_iterations: 1000,
            lambda_threshold: 0.9,
            subsample_n: None,
            oos_count: 1000,
            boot_reps_m: 100,
            split_fraction: 0.5,
            moment_reps: 500,
            mode: MergeMode::Majority,
            seed: 0,
        }
    }
}

impl TunerConfig {
    /// Smaller trial and resample counts for laptop-scale benchmark runs.
    pub fn desk() -> Self {
        Self { max_iterations: 100, boot_reps_m: 20, oos_count: 500, moment_reps: 200, ..Self::default() }
    }

    pub fn subsample_for(&self, p: usize) -> usize {
        self.subsample_n.unwrap_or(if p <= 10 { 50 } else { 100 })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max) {
            return bad("need 0 < alpha_min <= alpha_max");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if self.max_iterations == 0 || self.oos_count == 0 || self.boot_reps_m == 0 || self.moment_reps == 0 {
            return bad("counts must be at least 1");
        }
        if self.subsample_n == Some(0) {
            return bad("subsample_n must be at least 1");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie in (0,1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_threshold) {
            return bad("lambda_threshold must lie in [0,1]");
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(v) = kv.f64("alpha_min")? {
            self.alpha_min = v;
        }
        if let Some(v) = kv.f64("alpha_max")? {
            self.alpha_max = v;
        }
        if let Some(v) = kv.f64("eta")? {
            self.eta = v;
        }
        if let Some(v) = kv.usize("max_iterations")? {
            self.max_iterations = v;
        }
        if let Some(v) = kv.f64("lambda_threshold")? {
            self.lambda_threshold = v;
        }
        match kv.get("subsample_n") {
            Some("auto") => self.subsample_n = None,
            Some(_) => self.subsample_n = kv.usize("subsample_n")?,
            None => {}
        }
        if let Some(v) = kv.usize("oos_count")? {
            self.oos_count = v;
        }
        if let Some(v) = kv.usize("boot_reps_m")? {
            self.boot_reps_m = v;
        }
        if let Some(v) = kv.f64("split_fraction")? {
            self.split_fraction = v;
        }
        if let Some(v) = kv.usize("moment_reps")? {
            self.moment_reps = v;
        }
        if let Some(v) = kv.get("mode") {
            self.mode = v.parse()?;
        }
        if let Some(v) = kv.u64("seed")? {
            self.seed = v;
        }
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("alpha_min", self.alpha_min);
        kv.set("alpha_max", self.alpha_max);
        kv.set("eta", self.eta);
        kv.set("max_iterations", self.max_iterations);
        kv.set("lambda_threshold", self.lambda_threshold);
        kv.set("subsample_n", self.subsample_n.map_or("auto".to_string(), |v| v.to_string()));
        kv.set("oos_count", self.oos_count);
        kv.set("boot_reps_m", self.boot_reps_m);
        kv.set("split_fraction", self.split_fraction);
        kv.set("moment_reps", self.moment_reps);
        kv.set("mode", self.mode);
        kv.set("seed", self.seed);
        kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeDecision {
    pub merge: bool,
    pub proxy_acc: f64,
    pub alpha_opt: f64,
    /// (alpha, successes) over the grid
    pub per_alpha_acc: Vec<(f64, usize)>,
    /// Fraction of final-stage trials with φ > ψ.
    pub suggestion_rate: f64,
    pub failed_trials: usize,
    pub mode: MergeMode,
    pub a0: f64,
}

/// floor((alpha_max − alpha_min)/eta) + 1 points.
pub fn alpha_grid(cfg: &TunerConfig) -> Vec<f64> {
    let steps = ((cfg.alpha_max - cfg.alpha_min) / cfg.eta + 1e-9).floor() as usize;
    (0..=steps).map(|i| cfg.alpha_min + i as f64 * cfg.eta).collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Resample {
    Seeded(u64),
    /// Every resample is rows 0..oos_n (cycled), for exact checks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapEstimate {
    pub mean: f64,
    /// Spread of the M resample means.
    pub std_err: f64,
}

fn summarize(means: &[f64]) -> BootstrapEstimate {
    let m = means.len() as f64;
    let mean = means.iter().sum::<f64>() / m;
    let std_err = if means.len() > 1 {
        (means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    BootstrapEstimate { mean, std_err }
}

fn squared_residuals(fit: &OlsFit, held_out: &Dataset) -> Result<Vec<f64>> {
    if held_out.n() == 0 {
        return Err(Error::Invalid("empty held-out set".into()));
    }
    if held_out.p() != fit.p {
        return Err(Error::Dimension(format!("held-out p={} for a fit with p={}", held_out.p(), fit.p)));
    }
    let r = &held_out.targets - &held_out.features * &fit.beta_hat;
    Ok(r.iter().map(|v| v * v).collect())
}

pub fn bootstrap_ose_estimate(
    fit: &OlsFit,
    held_out: &Dataset,
    m: usize,
    oos_n: usize,
    resample: Resample,
) -> Result<BootstrapEstimate> {
    if m == 0 || oos_n == 0 {
        return Err(Error::Invalid("bootstrap needs m >= 1 and oos_n >= 1".into()));
    }
    let sq = squared_residuals(fit, held_out)?;
    let n = sq.len();
    let means: Vec<f64> = match resample {
        Resample::Identity => {
            let v = (0..oos_n).map(|i| sq[i % n]).sum::<f64>() / oos_n as f64;
            vec![v; m]
        }
        Resample::Seeded(seed) => {
            let mut r = rng::stream(seed, "bootstrap-ose", 0);
            (0..m)
                .map(|_| (0..oos_n).map(|_| sq[r.random_range(0..n)]).sum::<f64>() / oos_n as f64)
                .collect()
        }
    };
    Ok(summarize(&means))
}

/// (1/M) Σ_m mean of squared errors over oos_n rows resampled from held_out.
pub fn bootstrap_ose(fit: &OlsFit, held_out: &Dataset, m: usize, oos_n: usize, seed: u64) -> Result<f64> {
    Ok(bootstrap_ose_estimate(fit, held_out, m, oos_n, Resample::Seeded(seed))?.mean)
}

/// Σ_k ÔSE(β̂_k) − Σ_k ÔSE(β̂_c) with paired resamples: each resample of a
/// held-out side scores the individual and the combined model on the same rows.
fn paired_ose_dif(
    fits: [&OlsFit; 2],
    combined: &OlsFit,
    held: [&Dataset; 2],
    m: usize,
    oos_n: usize,
    r: &mut rng::Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..2 {
        let own = squared_residuals(fits[k], held[k])?;
        let comb = squared_residuals(combined, held[k])?;
        let n = own.len();
        let mut acc = 0.0;
        for _ in 0..m * oos_n {
            let i = r.random_range(0..n);
            acc += own[i] - comb[i];
        }
        total += acc / (m * oos_n) as f64;
    }
    Ok(total)
}

/// Bootstrap estimate of the OSE gain from merging; positive favors merging.
pub fn ose_dif_hat(pair: (&SplitDataset, &SplitDataset), cfg: &TunerConfig, seed: u64) -> Result<f64> {
    let (a, b) = pair;
    let f1 = fit_ols(&a.train)?;
    let f2 = fit_ols(&b.train)?;
    let c = fit_combined(&a.train, &b.train)?;
    let mut r = rng::stream(seed, "ose-dif", 0);
    paired_ose_dif([&f1, &f2], &c.fit, [&a.held_out, &b.held_out], cfg.boot_reps_m, cfg.oos_count, &mut r)
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    stats: PairStatistics,
    ose_dif: f64,
}

fn run_trial(
    pair: (&SplitDataset, &SplitDataset),
    q: &GapQuantities,
    s: usize,
    cfg: &TunerConfig,
    part: u64,
    t: u64,
) -> Result<Trial> {
    let (a, b) = pair;
    let mut r = rng::stream2(cfg.seed, "tuner-trial", part, t);
    let rows1: Vec<usize> = (0..s).map(|_| r.random_range(0..a.train.n())).collect();
    let rows2: Vec<usize> = (0..s).map(|_| r.random_range(0..b.train.n())).collect();
    let sub1 = a.train.select_rows(&rows1);
    let sub2 = b.train.select_rows(&rows2);
    let f1 = fit_ols(&sub1)?;
    let f2 = fit_ols(&sub2)?;
    let c = fit_combined(&sub1, &sub2)?;
    let d = whitening_matrix_d(&f1, &f2)?;
    let stats = PairStatistics::new(&f1, &f2, &c, &d, &q.b0_factor)?;
    let ose_dif = paired_ose_dif([&f1, &f2], &c.fit, [&a.held_out, &b.held_out], cfg.boot_reps_m, cfg.oos_count, &mut r)?;
    Ok(Trial { stats, ose_dif })
}

fn run_trials(
    pair: (&SplitDataset, &SplitDataset),
    q: &GapQuantities,
    s: usize,
    cfg: &TunerConfig,
    part: u64,
) -> Vec<Option<Trial>> {
    (0..cfg.max_iterations as u64)
        .into_par_iter()
        .map(|t| run_trial(pair, q, s, cfg, part, t).ok())
        .collect()
}

/// φ − ψ, or None when the c₀ solve is undefined.
fn margin(stats: &PairStatistics, a0: f64, alpha: f64) -> Option<f64> {
    stats.evaluate(a0, alpha).ok().map(|o| o.phi - o.psi)
}

struct Prepared {
    q: GapQuantities,
    s: usize,
}

fn prepare(pair: (&SplitDataset, &SplitDataset), cfg: &TunerConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (a, b) = pair;
    if a.train.p() != b.train.p() {
        return Err(Error::Dimension(format!(
            "{:?} has p={} but {:?} has p={}",
            a.train.id,
            a.train.p(),
            b.train.id,
            b.train.p()
        )));
    }
    let s = cfg.subsample_for(a.train.p());
    let m = moments_from_data_sized(&a.train, &b.train, s, s, cfg.moment_reps, rng::derive_seed(cfg.seed, "moments"))?;
    Ok(Prepared { q: gap_quantities(&m)?, s })
}

struct Tuned {
    alpha_opt: f64,
    per_alpha_acc: Vec<(f64, usize)>,
    failed: usize,
}

// Every alpha sees the same trials (common random numbers), so one pass
// of fits serves the whole grid.
fn tune_prepared(pair: (&SplitDataset, &SplitDataset), cfg: &TunerConfig, prep: &Prepared) -> Result<Tuned> {
    let grid = alpha_grid(cfg);
    let trials = run_trials(pair, &prep.q, prep.s, cfg, 0);
    let ok: Vec<Trial> = trials.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::AllTrialsFailed(grid[0]));
    }
    let a0 = prep.q.a0;
    let per_alpha_acc: Vec<(f64, usize)> = grid
        .par_iter()
        .map(|&alpha| {
            let correct = ok
                .iter()
                .filter(|t| margin(&t.stats, a0, alpha).is_some_and(|m| m * t.ose_dif > 0.0))
                .count();
            (alpha, correct)
        })
        .collect();
    let best = per_alpha_acc
        .iter()
        .fold((grid[0], 0usize, false), |acc, &(alpha, c)| if !acc.2 || c > acc.1 { (alpha, c, true) } else { acc });
    Ok(Tuned { alpha_opt: best.0, per_alpha_acc, failed: trials.len() - ok.len() })
}

pub fn tune_alpha(pair: (&SplitDataset, &SplitDataset), cfg: &TunerConfig) -> Result<(f64, Vec<(f64, usize)>)> {
    let prep = prepare(pair, cfg)?;
    let t = tune_prepared(pair, cfg, &prep)?;
    Ok((t.alpha_opt, t.per_alpha_acc))
}

/// Tune alpha, then rerun fresh trials at the chosen alpha.
pub fn decide_split_pair(pair: (&SplitDataset, &SplitDataset), cfg: &TunerConfig) -> Result<MergeDecision> {
    let prep = prepare(pair, cfg)?;
    let tuned = tune_prepared(pair, cfg, &prep)?;
    let trials = run_trials(pair, &prep.q, prep.s, cfg, 1);
    let a0 = prep.q.a0;
    let mut correct = 0usize;
    let mut suggested = 0usize;
    let mut failed = tuned.failed;
    for t in &trials {
        match t.and_then(|t| margin(&t.stats, a0, tuned.alpha_opt).map(|m| (m, t.ose_dif))) {
            Some((m, dif)) => {
                if m * dif > 0.0 {
                    correct += 1;
                }
                if m > 0.0 {
                    suggested += 1;
                }
            }
            None => failed += 1,
        }
    }
    let iters = cfg.max_iterations as f64;
    let proxy_acc = correct as f64 / iters;
    let suggestion_rate = suggested as f64 / iters;
    let agree = proxy_acc > cfg.lambda_threshold;
    let merge = match cfg.mode {
        MergeMode::Threshold => agree,
        MergeMode::Majority => agree && suggestion_rate > 0.5,
    };
    Ok(MergeDecision {
        merge,
        proxy_acc,
        alpha_opt: tuned.alpha_opt,
        per_alpha_acc: tuned.per_alpha_acc,
        suggestion_rate,
        failed_trials: failed,
        mode: cfg.mode,
        a0,
    })
}

pub fn decide_pair(d1: &Dataset, d2: &Dataset, cfg: &TunerConfig) -> Result<MergeDecision> {
    let a = split(d1, cfg.split_fraction, rng::derive_indexed(cfg.seed, "split", &[0]))?;
    let b = split(d2, cfg.split_fraction, rng::derive_indexed(cfg.seed, "split", &[1]))?;
    decide_split_pair((&a, &b), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_synthetic, GaussianSpec};
    use nalgebra::DVector;

    fn spec(p: usize, shift: f64, s2: f64) -> GaussianSpec {
        GaussianSpec::standard(DVector::from_element(p, 1.0 + shift), s2).unwrap()
    }

    fn quick() -> TunerConfig {
        TunerConfig { max_iterations: 40, boot_reps_m: 5, oos_count: 100, moment_reps: 50, eta: 0.5, ..TunerConfig::default() }
    }

    #[test]
    fn grid_size_and_bounds() {
        let cfg = TunerConfig::default();
        let g = alpha_grid(&cfg);
        assert_eq!(g.len(), 801);
        assert_eq!(g[0], 2.0);
        assert!((g[800] - 10.0).abs() < 1e-9);
        let one = TunerConfig { alpha_min: 3.0, alpha_max: 3.0, ..cfg.clone() };
        assert_eq!(alpha_grid(&one), vec![3.0]);
        let odd = TunerConfig { alpha_min: 2.0, alpha_max: 3.05, eta: 0.5, ..cfg };
        assert_eq!(alpha_grid(&odd).len(), 3);
    }

    #[test]
    fn bootstrap_reductions() {
        let s = spec(3, 0.0, 0.0);
        let train = sample_synthetic(&s, 20, 1);
        let held = sample_synthetic(&s, 15, 2);
        let f = fit_ols(&train).unwrap();
        assert!(bootstrap_ose(&f, &held, 10, 50, 3).unwrap() < 1e-20);

        let noisy = spec(3, 0.0, 1.0);
        let train = sample_synthetic(&noisy, 20, 1);
        let held = sample_synthetic(&noisy, 15, 2);
        let f = fit_ols(&train).unwrap();
        let est = bootstrap_ose_estimate(&f, &held, 1, held.n(), Resample::Identity).unwrap();
        let mse = (&held.targets - &held.features * &f.beta_hat).norm_squared() / held.n() as f64;
        assert!((est.mean - mse).abs() < 1e-12);
        let empty = Dataset { features: nalgebra::DMatrix::zeros(0, 3), targets: DVector::zeros(0), id: "e".into() };
        assert!(bootstrap_ose(&f, &empty, 1, 1, 0).is_err());
    }

    #[test]
    fn ose_dif_zero_for_noiseless_duplicates() {
        let s = spec(3, 0.0, 0.0);
        let d = sample_synthetic(&s, 40, 4);
        let sp = split(&d, 0.5, 1).unwrap();
        assert!(ose_dif_hat((&sp, &sp), &quick(), 5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ose_dif_sign_regimes() {
        let cfg = quick();
        let mut pos = 0;
        let mut neg = 0;
        for seed in 0..20 {
            let a = split(&sample_synthetic(&spec(5, 0.0, 1.0), 400, seed), 0.5, seed).unwrap();
            let b = split(&sample_synthetic(&spec(5, 0.0, 1.0), 400, seed + 100), 0.5, seed).unwrap();
            let small = |sd: &SplitDataset| SplitDataset { train: sd.train.select_rows(&(0..20).collect::<Vec<_>>()), ..sd.clone() };
            if ose_dif_hat((&small(&a), &small(&b)), &cfg, seed).unwrap() > 0.0 {
                pos += 1;
            }
            let c = split(&sample_synthetic(&spec(5, 1.0, 1.0), 400, seed + 200), 0.5, seed).unwrap();
            if ose_dif_hat((&a, &c), &cfg, seed).unwrap() < 0.0 {
                neg += 1;
            }
        }
        assert!(pos >= 15, "positive {pos}/20");
        assert!(neg >= 18, "negative {neg}/20");
    }

    #[test]
    fn degenerate_grid_returns_its_point() {
        let a = split(&sample_synthetic(&spec(3, 0.0, 1.0), 80, 1), 0.5, 1).unwrap();
        let b = split(&sample_synthetic(&spec(3, 0.0, 1.0), 80, 2), 0.5, 1).unwrap();
        let cfg = TunerConfig { alpha_min: 4.0, alpha_max: 4.0, subsample_n: Some(30), ..quick() };
        let (alpha, acc) = tune_alpha((&a, &b), &cfg).unwrap();
        assert_eq!(alpha, 4.0);
        assert_eq!(acc.len(), 1);
    }

    #[test]
    fn constant_sign_gives_flat_accuracy() {
        // Far-apart coefficients: φ < ψ at every alpha and merging always hurts.
        let a = split(&sample_synthetic(&spec(3, 0.0, 1.0), 120, 1), 0.5, 1).unwrap();
        let b = split(&sample_synthetic(&spec(3, 3.0, 1.0), 120, 2), 0.5, 1).unwrap();
        let cfg = TunerConfig { subsample_n: Some(40), ..quick() };
        let (alpha, acc) = tune_alpha((&a, &b), &cfg).unwrap();
        let counts: Vec<usize> = acc.iter().map(|x| x.1).collect();
        assert!(counts.iter().all(|&c| c == counts[0]));
        assert_eq!(alpha, cfg.alpha_min);
        assert!(counts[0] >= 38);
    }

    #[test]
    fn decision_is_deterministic_and_bounded() {
        let d1 = sample_synthetic(&spec(3, 0.0, 1.0), 100, 1);
        let d2 = sample_synthetic(&spec(3, 0.0, 1.0), 100, 2);
        let cfg = TunerConfig { subsample_n: Some(30), ..quick() };
        let a = decide_pair(&d1, &d2, &cfg).unwrap();
        let b = decide_pair(&d1, &d2, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.proxy_acc));
        assert!(alpha_grid(&cfg).contains(&a.alpha_opt));
        let strict = TunerConfig { lambda_threshold: 1.0, ..cfg.clone() };
        assert!(!decide_pair(&d1, &d2, &strict).unwrap().merge);
    }

    #[test]
    fn extreme_separation_keeps_datasets_apart() {
        let mut b1 = DVector::zeros(4);
        b1[0] = 10.0;
        let mut b2 = DVector::zeros(4);
        b2[1] = 10.0;
        let s1 = GaussianSpec::standard(b1, 0.01).unwrap();
        let s2 = GaussianSpec::standard(b2, 0.01).unwrap();
        let d1 = sample_synthetic(&s1, 100, 3);
        let d2 = sample_synthetic(&s2, 100, 4);
        let cfg = TunerConfig { subsample_n: Some(30), ..quick() };
        let dec = decide_pair(&d1, &d2, &cfg).unwrap();
        assert!(!dec.merge);
        assert!(dec.suggestion_rate < 0.1);
        assert!(dec.proxy_acc > 0.9);
        // The literal rule reads high agreement as "merge".
        let lit = decide_pair(&d1, &d2, &TunerConfig { mode: MergeMode::Threshold, ..cfg }).unwrap();
        assert!(lit.merge);
    }

    #[test]
    fn config_round_trip() {
        let cfg = TunerConfig { seed: 9, subsample_n: Some(70), mode: MergeMode::Threshold, ..TunerConfig::desk() };
        let mut back = TunerConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let mut kv = KvConfig::default();
        kv.set("mode", "sideways");
        assert!(TunerConfig::default().apply_kv(&kv).is_err());
    }
}
