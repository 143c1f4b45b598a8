//! Greedy clustering of many datasets by repeated pairwise merge decisions.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{split, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::ols::fit_ols;
use crate::rng;
use crate::tuner::{bootstrap_ose_estimate, decide_split_pair, MergeDecision, MergeMode, Resample, TunerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Cluster id per dataset.
    pub assignments: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub per_cluster_ose: Vec<f64>,
    pub total_ose: f64,
    pub comparisons_made: usize,
    /// Candidates dropped because their comparison failed.
    pub excluded: Vec<String>,
}

impl Partition {
    pub fn from_clusters(clusters: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        let mut assignments = vec![usize::MAX; k];
        for (c, members) in clusters.iter().enumerate() {
            for &j in members {
                if j >= k || assignments[j] != usize::MAX {
                    return Err(Error::Invalid(format!("dataset {j} is out of range or in two clusters")));
                }
                assignments[j] = c;
            }
        }
        if assignments.contains(&usize::MAX) {
            return Err(Error::Invalid("some dataset has no cluster".into()));
        }
        Ok(Self {
            assignments,
            clusters,
            per_cluster_ose: Vec::new(),
            total_ose: f64::NAN,
            comparisons_made: 0,
            excluded: Vec::new(),
        })
    }

    pub fn singletons(k: usize) -> Self {
        Self::from_clusters((0..k).map(|j| vec![j]).collect(), k).expect("singletons are a partition")
    }

    /// Disjoint, covering and consistent with `assignments`.
    pub fn is_valid(&self) -> bool {
        let k = self.assignments.len();
        let mut seen = vec![false; k];
        for (c, members) in self.clusters.iter().enumerate() {
            if members.is_empty() {
                return false;
            }
            for &j in members {
                if j >= k || seen[j] || self.assignments[j] != c {
                    return false;
                }
                seen[j] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Rows of (dataset_id, cluster_id).
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("dataset_id,cluster_id\n");
        for (k, c) in self.assignments.iter().enumerate() {
            out.push_str(&format!("{},{}\n", ids[k], c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEvaluation {
    pub total_ose: f64,
    pub per_dataset: Vec<f64>,
    pub per_dataset_se: Vec<f64>,
    /// Root sum of squared per-dataset bootstrap standard errors.
    pub total_se: f64,
}

pub fn split_all(datasets: &[Dataset], cfg: &TunerConfig) -> Result<Vec<SplitDataset>> {
    datasets
        .iter()
        .enumerate()
        .map(|(k, d)| split(d, cfg.split_fraction, rng::derive_indexed(cfg.seed, "split", &[k as u64])))
        .collect()
}

fn check_inputs(datasets: &[Dataset]) -> Result<()> {
    let first = datasets.first().ok_or_else(|| Error::Invalid("no datasets".into()))?;
    if let Some(bad) = datasets.iter().find(|d| d.p() != first.p()) {
        return Err(Error::Dimension(format!(
            "{:?} has p={} but {:?} has p={}",
            bad.id,
            bad.p(),
            first.id,
            first.p()
        )));
    }
    Ok(())
}

/// One OLS fit per cluster on the union of its train sides, scored by
/// bootstrap on each member's own held-out side.
pub fn evaluate_partition(datasets: &[Dataset], part: &Partition, cfg: &TunerConfig) -> Result<PartitionEvaluation> {
    check_inputs(datasets)?;
    if part.assignments.len() != datasets.len() || !part.is_valid() {
        return Err(Error::Invalid("partition does not match the datasets".into()));
    }
    let splits = split_all(datasets, cfg)?;
    evaluate_on_splits(&splits, &part.clusters, cfg)
}

fn evaluate_on_splits(splits: &[SplitDataset], clusters: &[Vec<usize>], cfg: &TunerConfig) -> Result<PartitionEvaluation> {
    let k = splits.len();
    let mut per_dataset = vec![0.0; k];
    let mut per_dataset_se = vec![0.0; k];
    for members in clusters {
        let trains: Vec<&Dataset> = members.iter().map(|&j| &splits[j].train).collect();
        let fit = fit_ols(&Dataset::stack(&trains)?)?;
        for &j in members {
            // The resample stream depends only on j, so partitions are compared on paired draws.
            let seed = rng::derive_indexed(cfg.seed, "evaluate", &[j as u64]);
            let est = bootstrap_ose_estimate(&fit, &splits[j].held_out, cfg.boot_reps_m, cfg.oos_count, Resample::Seeded(seed))?;
            per_dataset[j] = est.mean;
            per_dataset_se[j] = est.std_err;
        }
    }
    Ok(PartitionEvaluation {
        total_ose: per_dataset.iter().sum(),
        total_se: per_dataset_se.iter().map(|s| s * s).sum::<f64>().sqrt(),
        per_dataset,
        per_dataset_se,
    })
}

fn pair_seed(cfg: &TunerConfig, members: &[usize], candidate: usize) -> u64 {
    let mut path: Vec<u64> = members.iter().map(|&m| m as u64).collect();
    path.push(u64::MAX);
    path.push(candidate as u64);
    rng::derive_indexed(cfg.seed, "pair", &path)
}

/// Seed a cluster with the first unclustered dataset, then keep absorbing
/// the candidate with the highest proxy accuracy while the decision says merge.
pub fn greedy_cluster(datasets: &[Dataset], cfg: &TunerConfig) -> Result<Partition> {
    check_inputs(datasets)?;
    cfg.validate()?;
    let k = datasets.len();
    let splits = split_all(datasets, cfg)?;
    let mut clustered = vec![false; k];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut comparisons = 0usize;
    let mut excluded = Vec::new();

    while let Some(start) = clustered.iter().position(|c| !c) {
        clustered[start] = true;
        let mut members = vec![start];
        loop {
            let candidates: Vec<usize> = (0..k).filter(|&j| !clustered[j]).collect();
            if candidates.is_empty() {
                break;
            }
            let parts: Vec<&SplitDataset> = members.iter().map(|&m| &splits[m]).collect();
            let union = SplitDataset::stack(&parts)?;
            let results: Vec<(usize, Result<MergeDecision>)> = candidates
                .par_iter()
                .map(|&j| (j, decide_split_pair((&union, &splits[j]), &cfg.with_seed(pair_seed(cfg, &members, j)))))
                .collect();
            comparisons += candidates.len();
            let mut best: Option<(usize, MergeDecision)> = None;
            for (j, r) in results {
                match r {
                    Ok(dec) => {
                        if cfg.mode == MergeMode::Majority && dec.suggestion_rate <= 0.5 {
                            continue;
                        }
                        if best.as_ref().is_none_or(|(_, b)| dec.proxy_acc > b.proxy_acc) {
                            best = Some((j, dec));
                        }
                    }
                    Err(e) => excluded.push(format!("{} against cluster {:?}: {e}", datasets[j].id, members)),
                }
            }
            match best {
                Some((j, dec)) if dec.merge => {
                    clustered[j] = true;
                    members.push(j);
                }
                _ => break,
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }

    let eval = evaluate_on_splits(&splits, &clusters, cfg)?;
    let per_cluster_ose = clusters.iter().map(|m| m.iter().map(|&j| eval.per_dataset[j]).sum()).collect();
    let mut part = Partition::from_clusters(clusters, k)?;
    part.per_cluster_ose = per_cluster_ose;
    part.total_ose = eval.total_ose;
    part.comparisons_made = comparisons;
    part.excluded = excluded;
    Ok(part)
}

/// A seeded permutation of 0..k for order-sensitivity runs.
pub fn shuffled_order(k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", 0));
    order
}
