//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; `#` starts a comment. Vectors are comma or
//! whitespace separated; matrix rows are separated by `;`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::GaussianSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Later entries win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| parse_f64(key, v)).transpose()
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}"))))
            .transpose()
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}"))))
            .transpose()
    }

    pub fn vector(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key).map(|v| parse_list(key, v)).transpose()
    }

    pub fn matrix(&self, key: &str) -> Result<Option<DMatrix<f64>>> {
        self.get(key).map(|v| parse_matrix(key, v)).transpose()
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_f64(key, s))
        .collect()
}

fn parse_matrix(key: &str, v: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = v
        .split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|r| parse_list(key, r))
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{key}: ragged or empty matrix")));
    }
    let flat: Vec<f64> = rows.concat();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// Keys: `mu`, `sigma_x` (row-major, `;` between rows, or `identity`),
/// `beta`, `noise_var`. A missing `mu` means zero mean.
pub fn gaussian_spec_from_kv(kv: &KvConfig) -> Result<GaussianSpec> {
    let beta = kv.vector("beta")?.ok_or_else(|| Error::Config("missing key beta".into()))?;
    let p = beta.len();
    let mu = kv.vector("mu")?.unwrap_or_else(|| vec![0.0; p]);
    let sigma_x = match kv.get("sigma_x") {
        None | Some("identity") => DMatrix::identity(p, p),
        Some(_) => kv.matrix("sigma_x")?.unwrap_or_else(|| DMatrix::identity(p, p)),
    };
    let noise_var = kv.f64("noise_var")?.ok_or_else(|| Error::Config("missing key noise_var".into()))?;
    GaussianSpec::new(DVector::from_vec(mu), sigma_x, DVector::from_vec(beta), noise_var)
}
