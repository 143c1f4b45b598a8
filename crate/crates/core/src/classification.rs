//! Multiclass linear classification: margin-separable sampling, the ramp
//! surrogate loss, projected subgradient training and the Φ/Ψ bound
//! comparison that decides whether two datasets should share one model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub betas: Vec<DVector<f64>>,
    /// γ₀
    pub margin: f64,
    /// Bound B on ‖x‖.
    pub feature_bound: f64,
}

impl ClassSpec {
    pub fn new(betas: Vec<DVector<f64>>, margin: f64, feature_bound: f64) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        let p = betas[0].len();
        if p == 0 || betas.iter().any(|b| b.len() != p) {
            return Err(Error::Dimension("class parameters must share a nonzero length".into()));
        }
        if !(margin > 0.0) || !(feature_bound > 0.0) {
            return Err(Error::Invalid("margin and feature bound must be positive".into()));
        }
        Ok(Self { betas, margin, feature_bound })
    }

    pub fn num_classes(&self) -> usize {
        self.betas.len()
    }

    pub fn p(&self) -> usize {
        self.betas[0].len()
    }

    /// The label x would get, if it clears the margin.
    pub fn label_of(&self, x: &DVector<f64>) -> Option<usize> {
        let mut label = None;
        for (c, b) in self.betas.iter().enumerate() {
            let s = b.dot(x);
            if s < 0.0 {
                if label.is_some() {
                    return None;
                }
                label = Some(c);
            } else if !(s > self.margin) {
                return None;
            }
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub features: DMatrix<f64>,
    /// Zero-based class per row.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ClassData {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension(format!("{} rows but {} labels", features.nrows(), labels.len())));
        }
        if num_classes < 2 || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Invalid(format!("labels must lie in 0..{num_classes} with at least two classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("features contain NaN or Inf".into()));
        }
        Ok(Self { features, labels, num_classes })
    }

    /// Targets must be the integers 0..C−1; C is taken from the largest label.
    pub fn from_dataset(d: &Dataset, num_classes: Option<usize>) -> Result<Self> {
        let mut labels = Vec::with_capacity(d.n());
        for (i, &t) in d.targets.iter().enumerate() {
            if t < 0.0 || t.fract() != 0.0 {
                return Err(Error::Invalid(format!("{}: row {} has non-integer label {t}", d.id, i + 1)));
            }
            labels.push(t as usize);
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        Self::new(d.features.clone(), labels, c)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.features.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    fn row_norms(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.features.row_iter().map(|r| r.norm()))
    }
}

/// Draw x uniformly from the radius-B ball and keep it only when exactly
/// one class score is negative and the rest exceed the margin.
pub fn sample_separable(spec: &ClassSpec, n: usize, seed: u64) -> Result<ClassData> {
    let p = spec.p();
    let mut r = rng::stream(seed, "separable", 0);
    let mut rows = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut attempts = 0;
    while labels.len() < n {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::Infeasible(attempts));
        }
        attempts += 1;
        let x = uniform_ball(p, spec.feature_bound, &mut r);
        if let Some(c) = spec.label_of(&x) {
            rows.extend(x.iter());
            labels.push(c);
        }
    }
    ClassData::new(DMatrix::from_row_slice(n, p, &rows), labels, spec.num_classes())
}

pub fn uniform_ball(p: usize, radius: f64, r: &mut rng::Rng) -> DVector<f64> {
    let dir = DVector::from_fn(p, |_, _| StandardNormal.sample(r));
    let u: f64 = r.random();
    dir.normalize() * (radius * u.powf(1.0 / p as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub beta_hats: Vec<DVector<f64>>,
    pub reg_lambda: f64,
    pub gamma: f64,
}

impl ClassModel {
    pub fn zeros(c: usize, p: usize, reg_lambda: f64, gamma: f64) -> Self {
        Self { beta_hats: vec![DVector::zeros(p); c], reg_lambda, gamma }
    }
}

/// √(2 log C / λ)
pub fn norm_cap(c: usize, lambda: f64) -> f64 {
    (2.0 * (c as f64).ln() / lambda).sqrt()
}

/// |||β||| = Σ‖β_c‖
pub fn triple_norm(betas: &[DVector<f64>]) -> f64 {
    betas.iter().map(|b| b.norm()).sum()
}

pub fn ramp(t: f64, gamma: f64) -> f64 {
    if t < 0.0 {
        1.0
    } else if t <= gamma {
        1.0 - t / gamma
    } else {
        0.0
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|s| (s - m).exp()).sum::<f64>().ln()
}

fn reg(betas: &[DVector<f64>], lambda: f64) -> f64 {
    0.5 * lambda * betas.iter().map(|b| b.norm_squared()).sum::<f64>()
}

pub fn cross_entropy_loss(m: &ClassModel, x: &DVector<f64>, y: usize) -> f64 {
    let scores: Vec<f64> = m.beta_hats.iter().map(|b| b.dot(x)).collect();
    log_sum_exp(scores.iter().copied()) - scores[y] + reg(&m.beta_hats, m.reg_lambda)
}

pub fn surrogate_loss(m: &ClassModel, betas: &[DVector<f64>], x: &DVector<f64>) -> f64 {
    let xn = x.norm();
    let mut v = 0.0;
    for (b, bh) in betas.iter().zip(&m.beta_hats) {
        let s = b.dot(x);
        v += (b - bh).norm() * xn - s * ramp(s, m.gamma);
    }
    v + log_sum_exp(m.beta_hats.iter().map(|bh| bh.dot(x))) + reg(&m.beta_hats, m.reg_lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// η_k = a/k
    Harmonic(f64),
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub rule: StepRule,
    pub steps: usize,
}

impl StepSchedule {
    pub fn harmonic(steps: usize) -> Self {
        Self { rule: StepRule::Harmonic(1.0), steps }
    }

    pub fn eta(&self, k: usize) -> f64 {
        match self.rule {
            StepRule::Harmonic(a) => a / k as f64,
            StepRule::Constant(a) => a,
        }
    }

    /// (Σ η_k, Σ η_k²) over k = 1..K.
    pub fn sums(&self) -> (f64, f64) {
        (1..=self.steps).map(|k| self.eta(k)).fold((0.0, 0.0), |(s1, s2), e| (s1 + e, s2 + e * e))
    }

    fn validate(&self) -> Result<()> {
        let a = match self.rule {
            StepRule::Harmonic(a) | StepRule::Constant(a) => a,
        };
        if self.steps == 0 || !(a > 0.0) {
            return Err(Error::Invalid("need at least one step and a positive step size".into()));
        }
        Ok(())
    }
}

/// One dataset in a training objective with the parameters that generated it.
#[derive(Debug, Clone, Copy)]
pub struct TrainPart<'a> {
    pub data: &'a ClassData,
    pub betas: &'a [DVector<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Surrogate(f64),
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// The iterate with the lowest objective.
    pub model: ClassModel,
    /// Objective at iterates 1..K.
    pub loss_trace: Vec<f64>,
    /// One-based index of the returned iterate.
    pub best_step: usize,
}

struct Prepared {
    x: DMatrix<f64>,
    onehot: DMatrix<f64>,
    betas: DMatrix<f64>,
    mean_xnorm: f64,
    ramp_const: f64,
    n: f64,
}

fn stack_betas(betas: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(betas.len(), betas[0].len(), |c, j| betas[c][j])
}

fn prepare(part: &TrainPart, gamma: f64) -> Result<Prepared> {
    let d = part.data;
    if part.betas.len() != d.num_classes || part.betas.iter().any(|b| b.len() != d.p()) {
        return Err(Error::Dimension("class parameters do not match the data".into()));
    }
    let n = d.n() as f64;
    let betas = stack_betas(part.betas);
    let scores = &d.features * betas.transpose();
    let ramp_const = scores.iter().map(|&s| -s * ramp(s, gamma)).sum::<f64>() / n;
    let mut onehot = DMatrix::zeros(d.n(), d.num_classes);
    for (i, &l) in d.labels.iter().enumerate() {
        onehot[(i, l)] = 1.0;
    }
    Ok(Prepared { x: d.features.clone(), onehot, betas, mean_xnorm: d.row_norms().mean(), ramp_const, n })
}

/// Objective and a subgradient at bh (C×p). At β̂_c = β_c the norm term
/// contributes the zero vector.
fn objective(parts: &[Prepared], bh: &DMatrix<f64>, lambda: f64, obj: Objective) -> (f64, DMatrix<f64>) {
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(bh.nrows(), bh.ncols());
    let reg_value = 0.5 * lambda * bh.norm_squared();
    for pr in parts {
        let mut probs = &pr.x * bh.transpose();
        let mut lse_sum = 0.0;
        for mut row in probs.row_iter_mut() {
            let m = row.max();
            row.apply(|s| *s = (*s - m).exp());
            let z = row.sum();
            lse_sum += m + z.ln();
            row /= z;
        }
        loss += lse_sum / pr.n + reg_value;
        grad += lambda * bh;
        match obj {
            Objective::Surrogate(_) => {
                grad += probs.transpose() * &pr.x / pr.n;
                loss += pr.ramp_const;
                for c in 0..bh.nrows() {
                    let diff = bh.row(c) - pr.betas.row(c);
                    let dn = diff.norm();
                    loss += dn * pr.mean_xnorm;
                    if dn > 0.0 {
                        let mut g = grad.row_mut(c);
                        g += diff * (pr.mean_xnorm / dn);
                    }
                }
            }
            Objective::CrossEntropy => {
                let picked: f64 = (&pr.x * bh.transpose()).component_mul(&pr.onehot).sum();
                loss -= picked / pr.n;
                grad += (probs - &pr.onehot).transpose() * &pr.x / pr.n;
            }
        }
    }
    (loss, grad)
}

fn project(bh: &mut DMatrix<f64>, cap: f64) {
    for mut row in bh.row_iter_mut() {
        let n = row.norm();
        if n > cap {
            row *= cap / n;
        }
    }
}

fn run(
    parts: &[TrainPart],
    lambda: f64,
    obj: Objective,
    schedule: &StepSchedule,
    init: Option<&[DVector<f64>]>,
) -> Result<TrainResult> {
    schedule.validate()?;
    if !(lambda > 0.0) {
        return Err(Error::Invalid("lambda must be positive".into()));
    }
    let gamma = match obj {
        Objective::Surrogate(g) if !(g > 0.0) => return Err(Error::Invalid("gamma must be positive".into())),
        Objective::Surrogate(g) => g,
        Objective::CrossEntropy => 1.0,
    };
    let first = parts.first().ok_or_else(|| Error::Invalid("no training data".into()))?;
    let (c, p) = (first.data.num_classes, first.data.p());
    let prepared = parts.iter().map(|pt| prepare(pt, gamma)).collect::<Result<Vec<_>>>()?;
    if prepared.iter().any(|pr| pr.betas.shape() != (c, p)) {
        return Err(Error::Dimension("training parts disagree on C or p".into()));
    }
    let cap = norm_cap(c, lambda);
    let mut bh = match init {
        Some(b) if b.len() == c && b.iter().all(|v| v.len() == p) => stack_betas(b),
        Some(_) => return Err(Error::Dimension("initial iterate has the wrong shape".into())),
        None => DMatrix::zeros(c, p),
    };
    let mut trace = Vec::with_capacity(schedule.steps);
    let mut best = (f64::INFINITY, 0, bh.clone());
    for k in 1..=schedule.steps {
        let (loss, grad) = objective(&prepared, &bh, lambda, obj);
        trace.push(loss);
        if loss < best.0 {
            best = (loss, k, bh.clone());
        }
        if k < schedule.steps {
            bh -= grad * schedule.eta(k);
            project(&mut bh, cap);
        }
    }
    let beta_hats = best.2.row_iter().map(|r| r.transpose()).collect();
    Ok(TrainResult { model: ClassModel { beta_hats, reg_lambda: lambda, gamma }, loss_trace: trace, best_step: best.1 })
}

/// Projected subgradient descent on Σ_m L̂_{λ,γ}(β̂, β^(m); D_m), starting at
/// `init` or zero.
pub fn subgradient_train(
    parts: &[TrainPart],
    lambda: f64,
    gamma: f64,
    schedule: &StepSchedule,
    init: Option<&[DVector<f64>]>,
) -> Result<TrainResult> {
    run(parts, lambda, Objective::Surrogate(gamma), schedule, init)
}

/// Same iteration on regularized cross-entropy, which needs no true parameters.
pub fn train_cross_entropy(data: &[&ClassData], lambda: f64, schedule: &StepSchedule) -> Result<TrainResult> {
    let first = data.first().ok_or_else(|| Error::Invalid("no training data".into()))?;
    let dummy = vec![DVector::zeros(first.p()); first.num_classes];
    let parts: Vec<TrainPart> = data.iter().map(|d| TrainPart { data: d, betas: &dummy }).collect();
    run(&parts, lambda, Objective::CrossEntropy, schedule, None)
}

/// Empirical surrogate objective Σ_m L̂_{λ,γ}(β̂, β^(m); D_m).
pub fn empirical_surrogate(parts: &[TrainPart], m: &ClassModel) -> Result<f64> {
    let prepared = parts.iter().map(|pt| prepare(pt, m.gamma)).collect::<Result<Vec<_>>>()?;
    Ok(objective(&prepared, &stack_betas(&m.beta_hats), m.reg_lambda, Objective::Surrogate(m.gamma)).0)
}

/// G = 2CB + C√(2λ log C)
pub fn subgradient_bound_g(c: usize, b: f64, lambda: f64) -> f64 {
    let c = c as f64;
    2.0 * c * b + c * (2.0 * lambda * c.ln()).sqrt()
}

/// (8 log C + Gλ Σ η²)/(2λ Σ η)
pub fn subgradient_gap_bound(c: usize, b: f64, lambda: f64, schedule: &StepSchedule) -> f64 {
    let (s1, s2) = schedule.sums();
    let g = subgradient_bound_g(c, b, lambda);
    (8.0 * (c as f64).ln() + g * lambda * s2) / (2.0 * lambda * s1)
}

/// Shared inputs to the Φ and Ψ bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSetting {
    pub num_classes: usize,
    pub feature_bound: f64,
    pub lambda: f64,
    pub delta: f64,
    pub schedule: StepSchedule,
}

impl BoundSetting {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || !(self.feature_bound > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Invalid("need C ≥ 2, B > 0 and lambda > 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invalid(format!("delta {} outside (0, 1)", self.delta)));
        }
        self.schedule.validate()
    }

    fn c(&self) -> f64 {
        self.num_classes as f64
    }

    fn log_c(&self) -> f64 {
        self.c().ln()
    }

    fn log_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }

    /// ω(β) = 2CB√(log C/λ) + 2B|||β||| + (C+1) log C
    pub fn omega(&self, norm: f64) -> f64 {
        let (c, b) = (self.c(), self.feature_bound);
        2.0 * c * b * (self.log_c() / self.lambda).sqrt() + 2.0 * b * norm + (c + 1.0) * self.log_c()
    }

    pub fn a1(&self) -> f64 {
        let (c, b) = (self.c(), self.feature_bound);
        (2.0 * (6.0 / PI).sqrt() + 4.0 * 2f64.sqrt()) * (self.log_c() / self.lambda).sqrt() * b * c
            + 2.0 * (3.0 / PI).sqrt() * c * self.log_c()
    }

    pub fn a2(&self) -> f64 {
        2.0 * (3.0 / PI).sqrt() * self.feature_bound
    }

    pub fn b1(&self) -> f64 {
        0.5 * (3.0 / PI).sqrt() * self.feature_bound
    }

    pub fn b2(&self) -> f64 {
        let (c, b) = (self.c(), self.feature_bound);
        (4.0 + 2.0 * (3.0 / PI).sqrt()) * b * c * (2.0 * self.log_c() / self.lambda).sqrt()
            + 2.0 * (3.0 / PI).sqrt() * c * self.log_c()
    }

    pub fn b3(&self) -> f64 {
        (3.0 / PI).sqrt() * self.feature_bound
    }

    pub fn g(&self) -> f64 {
        subgradient_bound_g(self.num_classes, self.feature_bound, self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Phi,
    Psi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub sampling: f64,
    pub complexity: f64,
    pub subgradient: f64,
    pub constants: Vec<(&'static str, f64)>,
}

impl BoundReport {
    pub fn total(&self) -> f64 {
        self.sampling + self.complexity + self.subgradient
    }
}

/// Φ(n, β; δ) from |||β|||.
pub fn phi_bound(n: usize, norm: f64, s: &BoundSetting) -> Result<BoundReport> {
    s.validate()?;
    if n == 0 || !(norm >= 0.0) {
        return Err(Error::Invalid("need n > 0 and a nonnegative norm".into()));
    }
    let nf = n as f64;
    let omega = s.omega(norm);
    let (s1, s2) = s.schedule.sums();
    let (a1, a2, g) = (s.a1(), s.a2(), s.g());
    Ok(BoundReport {
        kind: BoundKind::Phi,
        sampling: (2.0 / nf * s.log_inv_delta()).sqrt() * omega,
        complexity: (a1 + a2 * norm) / nf.sqrt(),
        subgradient: (8.0 * s.log_c() + g * s.lambda * s2) / (2.0 * s.lambda * s1),
        constants: vec![("omega", omega), ("a1", a1), ("a2", a2), ("G", g)],
    })
}

/// |||β^(1)|||, |||β^(2)|||, |||β^(1) − β^(2)||| and |||β^(1) + β^(2)|||.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairNorms {
    pub first: f64,
    pub second: f64,
    pub diff: f64,
    pub sum: f64,
}

impl PairNorms {
    pub fn from_params(b1: &[DVector<f64>], b2: &[DVector<f64>]) -> Self {
        let diff: Vec<_> = b1.iter().zip(b2).map(|(a, b)| a - b).collect();
        let sum: Vec<_> = b1.iter().zip(b2).map(|(a, b)| a + b).collect();
        Self { first: triple_norm(b1), second: triple_norm(b2), diff: triple_norm(&diff), sum: triple_norm(&sum) }
    }

    fn validate(&self) -> Result<()> {
        if [self.first, self.second, self.diff, self.sum].iter().all(|v| *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid("norms must be nonnegative".into()))
        }
    }
}

pub fn psi_bound(n1: usize, n2: usize, norms: &PairNorms, s: &BoundSetting) -> Result<BoundReport> {
    s.validate()?;
    norms.validate()?;
    if n1 == 0 || n2 == 0 {
        return Err(Error::Invalid("need n1, n2 > 0".into()));
    }
    let (r1, r2) = ((n1 as f64).sqrt(), (n2 as f64).sqrt());
    let (w1, w2) = (s.omega(norms.first), s.omega(norms.second));
    let (s1, s2) = s.schedule.sums();
    let (b1, b2, b3, g) = (s.b1(), s.b2(), s.b3(), s.g());
    Ok(BoundReport {
        kind: BoundKind::Psi,
        sampling: (2.0 * (w1 * w1 / (r1 * r1) + w2 * w2 / (r2 * r2)) * s.log_inv_delta()).sqrt(),
        complexity: (1.0 / r1 + 1.0 / r2) * (b1 * (norms.diff + norms.sum) + b2) + b3 * (norms.first / r1 + norms.second / r2),
        subgradient: (8.0 * s.log_c() + 2.0 * g * s.lambda * s2) / (s.lambda * s1),
        constants: vec![("omega1", w1), ("omega2", w2), ("b1", b1), ("b2", b2), ("b3", b3), ("G", g)],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDecision {
    pub merge: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub phi1: BoundReport,
    pub phi2: BoundReport,
    pub psi: BoundReport,
    /// Whether the norms came from trained estimates instead of true parameters.
    pub plug_in: bool,
}

impl ClassDecision {
    /// Ψ ≤ Φ₁ + Φ₂ computed from the full bounds.
    pub fn bound_comparison(&self) -> bool {
        self.psi.total() <= self.phi1.total() + self.phi2.total()
    }

    pub fn csv_header() -> &'static str {
        "n1,n2,norm1,norm2,norm_diff,norm_sum,classes,feature_bound,lambda,delta,steps,phi1,phi2,psi,lhs,rhs,merge,plug_in"
    }

    pub fn csv_row(&self, n1: usize, n2: usize, norms: &PairNorms, s: &BoundSetting) -> String {
        format!(
            "{n1},{n2},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            norms.first,
            norms.second,
            norms.diff,
            norms.sum,
            s.num_classes,
            s.feature_bound,
            s.lambda,
            s.delta,
            s.schedule.steps,
            self.phi1.total(),
            self.phi2.total(),
            self.psi.total(),
            self.lhs,
            self.rhs,
            self.merge,
            self.plug_in
        )
    }
}

/// The final pooled-vs-separate inequality, evaluated term by term as
/// displayed; merge when LHS ≤ RHS.
pub fn decide_merge_classification(n1: usize, n2: usize, norms: &PairNorms, s: &BoundSetting) -> Result<ClassDecision> {
    let phi1 = phi_bound(n1, norms.first, s)?;
    let phi2 = phi_bound(n2, norms.second, s)?;
    let psi = psi_bound(n1, n2, norms, s)?;
    let (r1, r2) = ((n1 as f64).sqrt(), (n2 as f64).sqrt());
    let (w1, w2) = (s.omega(norms.first), s.omega(norms.second));
    let l = s.log_inv_delta();
    let k = (3.0 / PI).sqrt() * s.feature_bound;
    let lhs = (2.0 * l * (w1 * w1 / (r1 * r1) + w2 * w2 / (r2 * r2))).sqrt()
        + k * (1.0 / r1 + 1.0 / r2) * (norms.diff / 2.0 + norms.sum / 2.0);
    let rhs = (2.0 * l).sqrt() * (w1 / r1 + w2 / r2)
        + k * (norms.first / r1 + norms.second / r2)
        + 4.0 * s.log_c() / (s.lambda * s.schedule.sums().0);
    Ok(ClassDecision { merge: lhs <= rhs, lhs, rhs, phi1, phi2, psi, plug_in: false })
}

/// Plug-in version: train each dataset alone with regularized cross-entropy
/// and use the estimated norms in place of the true ones. B is the largest
/// row norm seen.
pub fn decide_from_data(d1: &ClassData, d2: &ClassData, lambda: f64, delta: f64, schedule: StepSchedule) -> Result<(ClassDecision, PairNorms, BoundSetting)> {
    if d1.p() != d2.p() || d1.num_classes != d2.num_classes {
        return Err(Error::Dimension("the two datasets disagree on p or C".into()));
    }
    let m1 = train_cross_entropy(&[d1], lambda, &schedule)?.model;
    let m2 = train_cross_entropy(&[d2], lambda, &schedule)?.model;
    let norms = PairNorms::from_params(&m1.beta_hats, &m2.beta_hats);
    let setting = BoundSetting {
        num_classes: d1.num_classes,
        feature_bound: d1.max_row_norm().max(d2.max_row_norm()).max(f64::MIN_POSITIVE),
        lambda,
        delta,
        schedule,
    };
    let mut dec = decide_merge_classification(d1.n(), d2.n(), &norms, &setting)?;
    dec.plug_in = true;
    Ok((dec, norms, setting))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec3(seed: u64) -> ClassSpec {
        let mut r = rng::stream(seed, "test-spec", 0);
        let betas = (0..3).map(|_| DVector::from_fn(5, |_, _| StandardNormal.sample(&mut r))).collect();
        ClassSpec::new(betas, 0.05, 1.0).unwrap()
    }

    fn setting() -> BoundSetting {
        BoundSetting { num_classes: 3, feature_bound: 1.0, lambda: 0.1, delta: 0.05, schedule: StepSchedule::harmonic(500) }
    }

    #[test]
    fn one_dimensional_geometry() {
        let spec = ClassSpec::new(vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)], 0.1, 1.0).unwrap();
        let d = sample_separable(&spec, 500, 1).unwrap();
        for (i, &l) in d.labels.iter().enumerate() {
            let x = d.features[(i, 0)];
            assert!(x.abs() <= 1.0);
            if l == 0 {
                assert!(x < -0.1);
            } else {
                assert!(x > 0.1);
            }
        }
    }

    #[test]
    fn class_frequencies_match_region_measure() {
        let spec = spec3(2);
        let n = 4000;
        let d = sample_separable(&spec, n, 3).unwrap();
        let mut r = rng::stream(99, "region", 0);
        let mut hits = [0usize; 3];
        let mut accepted = 0;
        for _ in 0..200_000 {
            if let Some(c) = spec.label_of(&uniform_ball(5, 1.0, &mut r)) {
                hits[c] += 1;
                accepted += 1;
            }
        }
        for c in 0..3 {
            let q = hits[c] as f64 / accepted as f64;
            let f = d.labels.iter().filter(|&&l| l == c).count() as f64 / n as f64;
            let sd = (q * (1.0 - q) / n as f64).sqrt();
            assert!((f - q).abs() < 3.0 * sd + 1e-3, "class {c}: {f} vs {q}");
        }
    }

    #[test]
    fn infeasible_spec_errors() {
        let spec = ClassSpec::new(vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)], 0.1, 1.0).unwrap();
        assert!(matches!(sample_separable(&spec, 1, 0), Err(Error::Infeasible(MAX_ATTEMPTS))));
    }

    #[test]
    fn zero_model_cross_entropy_is_log_c() {
        let m = ClassModel::zeros(4, 3, 0.5, 0.1);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        assert!((cross_entropy_loss(&m, &x, 2) - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ramp_vanishes_at_truth_in_safe_region() {
        let spec = spec3(4);
        let d = sample_separable(&spec, 50, 5).unwrap();
        let m = ClassModel { beta_hats: spec.betas.clone(), reg_lambda: 0.2, gamma: 0.05 };
        for (i, &l) in d.labels.iter().enumerate() {
            let x = d.features.row(i).transpose();
            let scores: Vec<f64> = spec.betas.iter().map(|b| b.dot(&x)).collect();
            let want = log_sum_exp(scores.iter().copied()) - scores[l] + reg(&spec.betas, 0.2);
            assert!((surrogate_loss(&m, &spec.betas, &x) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_dominates_cross_entropy() {
        let spec = spec3(6);
        let d = sample_separable(&spec, 10_000, 7).unwrap();
        let mut r = rng::stream(8, "models", 0);
        let mut violations = 0;
        for (i, &l) in d.labels.iter().enumerate() {
            let bh = (0..3).map(|_| DVector::from_fn(5, |_, _| { let z: f64 = StandardNormal.sample(&mut r); 2.0 * z })).collect();
            let m = ClassModel { beta_hats: bh, reg_lambda: 0.1, gamma: spec.margin };
            let x = d.features.row(i).transpose();
            if cross_entropy_loss(&m, &x, l) > surrogate_loss(&m, &spec.betas, &x) + 1e-12 {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn vectorized_objective_matches_pointwise() {
        let spec = spec3(9);
        let d = sample_separable(&spec, 40, 10).unwrap();
        let m = ClassModel { beta_hats: spec3(11).betas, reg_lambda: 0.3, gamma: 0.05 };
        let part = TrainPart { data: &d, betas: &spec.betas };
        let want: f64 = (0..40).map(|i| surrogate_loss(&m, &spec.betas, &d.features.row(i).transpose())).sum::<f64>() / 40.0;
        assert!((empirical_surrogate(&[part], &m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let spec = spec3(12);
        let d = sample_separable(&spec, 30, 13).unwrap();
        let pr = prepare(&TrainPart { data: &d, betas: &spec.betas }, 0.05).unwrap();
        let bh = stack_betas(&spec3(14).betas);
        for obj in [Objective::Surrogate(0.05), Objective::CrossEntropy] {
            let (_, g) = objective(std::slice::from_ref(&pr), &bh, 0.2, obj);
            for c in 0..3 {
                for j in 0..5 {
                    let h = 1e-6;
                    let mut up = bh.clone();
                    up[(c, j)] += h;
                    let mut dn = bh.clone();
                    dn[(c, j)] -= h;
                    let fd = (objective(std::slice::from_ref(&pr), &up, 0.2, obj).0 - objective(std::slice::from_ref(&pr), &dn, 0.2, obj).0) / (2.0 * h);
                    assert!((fd - g[(c, j)]).abs() < 1e-6, "{obj:?} {c} {j}: {fd} vs {}", g[(c, j)]);
                }
            }
        }
    }

    #[test]
    fn single_step_returns_initial_iterate() {
        let spec = spec3(15);
        let d = sample_separable(&spec, 20, 16).unwrap();
        let init = spec3(17).betas;
        let r = subgradient_train(&[TrainPart { data: &d, betas: &spec.betas }], 0.1, 0.05, &StepSchedule::harmonic(1), Some(&init)).unwrap();
        assert_eq!(r.model.beta_hats, init);
        assert_eq!(r.best_step, 1);
        assert_eq!(r.loss_trace.len(), 1);
    }

    #[test]
    fn training_respects_cap_and_improves() {
        let spec = spec3(18);
        let d = sample_separable(&spec, 100, 19).unwrap();
        let lambda = 0.5;
        let r = subgradient_train(&[TrainPart { data: &d, betas: &spec.betas }], lambda, 0.05, &StepSchedule::harmonic(300), None).unwrap();
        let cap = norm_cap(3, lambda);
        assert!(r.model.beta_hats.iter().all(|b| b.norm() <= cap * (1.0 + 1e-12)));
        assert!(r.loss_trace[r.best_step - 1] <= r.loss_trace[0]);
        let running: Vec<f64> = r.loss_trace.iter().scan(f64::INFINITY, |m, &v| { *m = m.min(v); Some(*m) }).collect();
        assert!(running.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(running.last().copied(), Some(r.loss_trace[r.best_step - 1]));
        let ce = train_cross_entropy(&[&d], lambda, &StepSchedule::harmonic(300)).unwrap();
        assert!(ce.loss_trace[ce.best_step - 1] < 3f64.ln());
    }

    #[test]
    fn frozen_constants() {
        // mpmath at 30 digits, C=3, B=1, λ=0.1.
        let s = setting();
        assert!((s.a1() - 90.1745258503050171).abs() < 1e-10);
        assert!((s.b2() - 90.1745258503050171).abs() < 1e-10);
        assert!((s.a2() - 1.95441004761167969).abs() < 1e-12);
        assert!((s.b1() - 0.488602511902919922).abs() < 1e-12);
        assert!((s.b3() - 0.977205023805839843).abs() < 1e-12);
        assert!((s.omega(2.0) - 28.2816416141554889).abs() < 1e-10);
        assert!((s.g() - 7.40623686468624390).abs() < 1e-12);
        assert!((subgradient_gap_bound(3, 1.0, 0.1, &s.schedule) - 7.36490192770455460).abs() < 1e-10);
    }

    #[test]
    fn bounds_scale_with_sample_size() {
        let s = setting();
        let a = phi_bound(100, 3.0, &s).unwrap();
        let b = phi_bound(400, 3.0, &s).unwrap();
        assert!((b.sampling - a.sampling / 2.0).abs() < 1e-12);
        assert!((b.complexity - a.complexity / 2.0).abs() < 1e-12);
        assert_eq!(a.subgradient, b.subgradient);
        assert!((a.total() - (a.sampling + a.complexity + a.subgradient)).abs() < 1e-15);
        let norms = PairNorms { first: 3.0, second: 2.0, diff: 1.0, sum: 4.0 };
        let p = psi_bound(100, 60, &norms, &s).unwrap();
        let q = psi_bound(400, 240, &norms, &s).unwrap();
        assert!((q.sampling - p.sampling / 2.0).abs() < 1e-12);
        assert!((q.complexity - p.complexity / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_params_have_no_diff_term() {
        let b = spec3(20).betas;
        let n = PairNorms::from_params(&b, &b);
        assert_eq!(n.diff, 0.0);
        assert!((n.sum - 2.0 * n.first).abs() < 1e-12);
        let s = setting();
        let d = decide_merge_classification(100, 100, &n, &s).unwrap();
        assert!(d.merge);
        let with_diff = psi_bound(100, 100, &PairNorms { diff: 1.0, ..n }, &s).unwrap();
        let b1_term = s.b1() * 2.0 / 10.0;
        assert!((with_diff.complexity - d.psi.complexity - b1_term).abs() < 1e-12);
    }

    #[test]
    fn certain_delta_leaves_complexity_and_step_terms() {
        let s = BoundSetting { delta: 1.0 - 1e-15, ..setting() };
        let n = PairNorms { first: 3.0, second: 3.0, diff: 0.5, sum: 5.5 };
        let d = decide_merge_classification(50, 80, &n, &s).unwrap();
        let k = (3.0 / PI).sqrt();
        let (r1, r2) = (50f64.sqrt(), 80f64.sqrt());
        let lhs = k * (1.0 / r1 + 1.0 / r2) * 3.0;
        let rhs = k * (3.0 / r1 + 3.0 / r2) + 4.0 * 3f64.ln() / (0.1 * s.schedule.sums().0);
        assert!((d.lhs - lhs).abs() < 1e-6 && (d.rhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn data_driven_decision_is_flagged() {
        let spec = spec3(21);
        let d1 = sample_separable(&spec, 200, 22).unwrap();
        let d2 = sample_separable(&spec, 200, 23).unwrap();
        let (dec, norms, s) = decide_from_data(&d1, &d2, 0.1, 0.05, StepSchedule::harmonic(200)).unwrap();
        assert!(dec.plug_in);
        assert!(s.feature_bound <= 1.0);
        assert_eq!(ClassDecision::csv_header().split(',').count(), dec.csv_row(200, 200, &norms, &s).split(',').count());
    }

    #[test]
    fn labels_from_dataset() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.2, 0.3]);
        let d = Dataset::new(x.clone(), DVector::from_vec(vec![0.0, 2.0, 1.0]), "c").unwrap();
        assert_eq!(ClassData::from_dataset(&d, None).unwrap().num_classes, 3);
        let bad = Dataset::new(x, DVector::from_vec(vec![0.0, 0.5, 1.0]), "c").unwrap();
        assert!(ClassData::from_dataset(&bad, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decision_flips_at_most_once(first in 0.0f64..10.0, second in 0.0f64..10.0, diff in 0.01f64..10.0,
                                       n1 in 10usize..2000, n2 in 10usize..2000, delta in 0.001f64..0.5) {
            let s = BoundSetting { delta, ..setting() };
            let sum = first + second;
            let mut flips = 0;
            let mut prev = true;
            let mut prev_lhs = f64::NEG_INFINITY;
            for i in 0..=16 {
                let t = i as f64 * 0.25;
                let d = decide_merge_classification(n1, n2, &PairNorms { first, second, diff: t * diff, sum }, &s).unwrap();
                prop_assert!(d.lhs > prev_lhs);
                prev_lhs = d.lhs;
                if prev && !d.merge && i > 0 { flips += 1; }
                prop_assert!(!( !prev && d.merge && i > 0));
                prev = d.merge;
            }
            prop_assert!(flips <= 1);
        }

        #[test]
        fn bound_parts_nonnegative(n in 1usize..5000, norm in 0.0f64..20.0, delta in 0.001f64..0.999) {
            let r = phi_bound(n, norm, &BoundSetting { delta, ..setting() }).unwrap();
            prop_assert!(r.sampling >= 0.0 && r.complexity >= 0.0 && r.subgradient >= 0.0);
        }
    }
}
