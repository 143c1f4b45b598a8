//! Datasets, train/held-out splits, Gaussian generating specs and CSV I/O.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub id: String,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: DVector<f64>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if features.nrows() != targets.len() {
            return Err(Error::Dimension(format!(
                "dataset {id:?}: {} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::Invalid(format!("dataset {id:?} is empty")));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("dataset {id:?} contains NaN or Inf")));
        }
        Ok(Self { features, targets, id })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            targets: self.targets.select_rows(rows),
            id: self.id.clone(),
        }
    }

    /// Row-stack several datasets sharing p.
    pub fn stack(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
        let p = first.p();
        if let Some(bad) = parts.iter().find(|d| d.p() != p) {
            return Err(Error::Dimension(format!(
                "dataset {:?} has p={} but {:?} has p={p}",
                bad.id,
                bad.p(),
                first.id
            )));
        }
        let n: usize = parts.iter().map(|d| d.n()).sum();
        let mut features = DMatrix::zeros(n, p);
        let mut targets = DVector::zeros(n);
        let mut at = 0;
        for d in parts {
            features.rows_mut(at, d.n()).copy_from(&d.features);
            targets.rows_mut(at, d.n()).copy_from(&d.targets);
            at += d.n();
        }
        let id = parts.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join("+");
        Ok(Dataset { features, targets, id })
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub held_out: Dataset,
    pub split_fraction: f64,
}

impl SplitDataset {
    /// Union of several splits, side by side.
    pub fn stack(parts: &[&SplitDataset]) -> Result<SplitDataset> {
        let train: Vec<&Dataset> = parts.iter().map(|s| &s.train).collect();
        let held: Vec<&Dataset> = parts.iter().map(|s| &s.held_out).collect();
        Ok(SplitDataset {
            train: Dataset::stack(&train)?,
            held_out: Dataset::stack(&held)?,
            split_fraction: parts.first().map_or(0.5, |s| s.split_fraction),
        })
    }
}

/// Seeded shuffle; the first floor(fraction·n) rows go to train.
pub fn split(d: &Dataset, fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction {fraction} not in (0,1)")));
    }
    let n_train = (fraction * d.n() as f64).floor() as usize;
    if n_train < d.p() + 2 {
        return Err(Error::Invalid(format!(
            "dataset {:?}: train side would have {n_train} rows, need at least p+2 = {}",
            d.id,
            d.p() + 2
        )));
    }
    if n_train >= d.n() {
        return Err(Error::Invalid(format!("dataset {:?}: held-out side is empty", d.id)));
    }
    let mut idx: Vec<usize> = (0..d.n()).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let (tr, ho) = idx.split_at(n_train);
    Ok(SplitDataset {
        train: d.select_rows(tr),
        held_out: d.select_rows(ho),
        split_fraction: fraction,
    })
}

/// Known generating law: x ~ N(mu, sigma_x), y = xᵀbeta + N(0, noise_var).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mu: DVector<f64>,
    pub sigma_x: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub noise_var: f64,
    chol: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mu: DVector<f64>, sigma_x: DMatrix<f64>, beta: DVector<f64>, noise_var: f64) -> Result<Self> {
        let p = mu.len();
        if p == 0 || sigma_x.shape() != (p, p) || beta.len() != p {
            return Err(Error::Dimension(format!(
                "spec with mu of length {p}, sigma_x {:?}, beta of length {}",
                sigma_x.shape(),
                beta.len()
            )));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Invalid(format!("noise variance {noise_var} must be >= 0")));
        }
        if (&sigma_x - sigma_x.transpose()).amax() > 1e-10 * sigma_x.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite("sigma_x is not symmetric".into()));
        }
        let chol = sigma_x
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("sigma_x".into()))?
            .l();
        Ok(Self { mu, sigma_x, beta, noise_var, chol })
    }

    /// N(0, I_p) covariates.
    pub fn standard(beta: DVector<f64>, noise_var: f64) -> Result<Self> {
        let p = beta.len();
        Self::new(DVector::zeros(p), DMatrix::identity(p, p), beta, noise_var)
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    /// Lower Cholesky factor of sigma_x.
    pub fn sigma_chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// W = E[x xᵀ] = Σ + μμᵀ.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.sigma_x + &self.mu * self.mu.transpose()
    }

    pub fn is_centered(&self) -> bool {
        self.mu.iter().all(|&m| m == 0.0)
    }

    /// n×p design matrix with rows iid N(mu, sigma_x).
    pub fn sample_design(&self, n: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
        let p = self.p();
        let z: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(rng)).collect();
        let z = DMatrix::from_row_slice(n, p, &z);
        let mut x = z * self.chol.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mu.transpose();
        }
        x
    }
}

pub fn sample_synthetic(spec: &GaussianSpec, n: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, "synthetic", 0);
    let features = spec.sample_design(n, &mut rng);
    let sd = spec.noise_var.sqrt();
    let mut targets = &features * &spec.beta;
    if sd > 0.0 {
        for t in targets.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *t += sd * e;
        }
    }
    Dataset { features, targets, id: format!("synthetic-{seed}") }
}

/// Read a headed CSV; every column except `target_column` becomes a feature.
pub fn ingest_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    read_csv(file, target_column, &id, path)
}

fn read_csv(reader: impl std::io::Read, target_column: &str, id: &str, path: &Path) -> Result<Dataset> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), msg: e.to_string() };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingTarget(target_column.to_string()))?;
    let p = headers.len() - 1;
    if p == 0 {
        return Err(Error::Csv { path: path.to_path_buf(), msg: "no feature columns".into() });
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: headers[c].clone(),
                    value: cell.to_string(),
                })?;
            if c == target_idx {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Csv { path: path.to_path_buf(), msg: "no data rows".into() });
    }
    Dataset::new(DMatrix::from_row_slice(n, p, &x), DVector::from_vec(y), id)
}

/// Feature column names of a headed CSV, in file order, without the target.
pub fn csv_feature_columns(path: impl AsRef<Path>, target_column: &str) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), msg: e.to_string() })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv { path: path.to_path_buf(), msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if !headers.iter().any(|h| h == target_column) {
        return Err(Error::MissingTarget(target_column.to_string()));
    }
    Ok(headers.into_iter().filter(|h| h != target_column).collect())
}

/// Write with header x1..xp plus the target column last. Values use the
/// shortest round-trip representation, so re-reading is exact.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>, target_column: &str) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut header: Vec<String> = (1..=d.p()).map(|j| format!("x{j}")).collect();
    header.push(target_column.to_string());
    let csv_io = |e: csv::Error| Error::Csv { path: path.to_path_buf(), msg: e.to_string() };
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..d.n() {
        let mut row: Vec<String> = d.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(d.targets[i].to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush().map_err(io)
}
