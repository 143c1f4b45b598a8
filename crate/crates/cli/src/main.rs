use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collabpred::bench::{run_grid, ExperimentGrid};
use collabpred::classification::{
    decide_from_data, decide_merge_classification, BoundSetting, ClassData, ClassDecision, PairNorms, StepSchedule,
};
use collabpred::cluster::{evaluate_partition, greedy_cluster, shuffled_order, Partition};
use collabpred::config::KvConfig;
use collabpred::data::{csv_feature_columns, ingest_csv, sample_synthetic, write_csv, Dataset, GaussianSpec};
use collabpred::tuner::{decide_pair, MergeMode, TunerConfig};
use collabpred::{Error, Result};

/// Decide whether to pool datasets before fitting linear models.
#[derive(Debug, Parser)]
#[command(name = "collabpred", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Flat key = value file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<MergeMode>,
    /// Laptop-scale trial and resample counts.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exit 0 to merge, 1 to keep separate, 2 on error.
    DecidePair {
        first: PathBuf,
        second: PathBuf,
        #[arg(long, default_value = "y")]
        target: String,
    },
    /// Greedy clustering; writes dataset_id,cluster_id rows.
    Cluster {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "y")]
        target: String,
        /// Permute the input order before clustering.
        #[arg(long)]
        shuffle_seed: Option<u64>,
    },
    /// Synthetic accuracy grid; writes bench.csv and bench.txt under --out.
    Bench,
    /// Classification bound comparison from norms in the config, or from two
    /// labelled CSVs with plug-in norms. Exit 0 to merge, 1 otherwise.
    ClassBound {
        files: Vec<PathBuf>,
        #[arg(long, default_value = "y")]
        target: String,
    },
    /// Write synthetic regression CSVs, one per entry of --shifts.
    Synth {
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Per-file shift d, so that β = (1 + d)·1_p.
        #[arg(long, value_delimiter = ',', default_value = "0,0,1,1")]
        shifts: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        noise_var: f64,
        #[arg(long, default_value = "y")]
        target: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let file_kv = match &g.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    let mut cfg = if g.desk { TunerConfig::desk() } else { TunerConfig::default() };
    cfg.apply_kv(&file_kv)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    cfg.validate()?;

    match &cli.command {
        Command::DecidePair { first, second, target } => decide_pair_cmd(first, second, target, &cfg, g.out.as_deref()),
        Command::Cluster { files, target, shuffle_seed } => cluster_cmd(files, target, *shuffle_seed, &cfg, g.out.as_deref()),
        Command::Bench => {
            let mut grid = if g.desk { ExperimentGrid::desk() } else { ExperimentGrid::default() };
            grid.apply_kv(&file_kv)?;
            grid.seed = cfg.seed;
            print_config(&[("grid", grid.to_kv()), ("tuner", cfg.to_kv())], cfg.seed);
            let table = run_grid(&grid, &cfg)?;
            let text = table.to_text();
            print!("{text}");
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
            write_text(&dir.join("bench.csv"), &table.to_csv())?;
            write_text(&dir.join("bench.txt"), &text)?;
            Ok(0)
        }
        Command::ClassBound { files, target } => class_bound_cmd(files, target, &file_kv, &cfg, g.out.as_deref()),
        Command::Synth { p, n, shifts, noise_var, target } => {
            print_config(&[("synth", synth_kv(*p, *n, shifts, *noise_var))], cfg.seed);
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
            for (k, d) in synth_datasets(*p, *n, shifts, *noise_var, cfg.seed)?.iter().enumerate() {
                let path = dir.join(format!("synth_{k}.csv"));
                write_csv(d, &path, target)?;
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn print_config(sections: &[(&str, KvConfig)], seed: u64) {
    println!("seed = {seed}");
    for (name, kv) in sections {
        for line in kv.render().lines() {
            println!("{name}.{line}");
        }
    }
    println!();
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Ingest every file, insisting on identical feature columns.
fn load_all(files: &[PathBuf], target: &str) -> Result<Vec<Dataset>> {
    let reference = csv_feature_columns(&files[0], target)?;
    files
        .iter()
        .map(|f| {
            let cols = csv_feature_columns(f, target)?;
            if cols != reference {
                return Err(Error::Dimension(format!(
                    "{} has feature columns {cols:?} but {} has {reference:?}",
                    f.display(),
                    files[0].display()
                )));
            }
            ingest_csv(f, target)
        })
        .collect()
}

fn decide_pair_cmd(first: &Path, second: &Path, target: &str, cfg: &TunerConfig, out: Option<&Path>) -> Result<u8> {
    print_config(&[("tuner", cfg.to_kv())], cfg.seed);
    let ds = load_all(&[first.to_path_buf(), second.to_path_buf()], target)?;
    let dec = decide_pair(&ds[0], &ds[1], cfg)?;
    let rows = [
        ("merge", dec.merge.to_string()),
        ("proxy_acc", dec.proxy_acc.to_string()),
        ("alpha_opt", dec.alpha_opt.to_string()),
        ("suggestion_rate", dec.suggestion_rate.to_string()),
        ("failed_trials", dec.failed_trials.to_string()),
        ("mode", dec.mode.to_string()),
        ("a0", dec.a0.to_string()),
    ];
    for (k, v) in &rows {
        println!("{k} = {v}");
    }
    if let Some(path) = out {
        let header: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let values: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
        let mut csv = format!("{}\n{}\n", header.join(","), values.join(","));
        csv.push_str("\nalpha,successes\n");
        for (a, c) in &dec.per_alpha_acc {
            csv.push_str(&format!("{a},{c}\n"));
        }
        write_text(path, &csv)?;
    }
    Ok(if dec.merge { 0 } else { 1 })
}

fn cluster_cmd(files: &[PathBuf], target: &str, shuffle: Option<u64>, cfg: &TunerConfig, out: Option<&Path>) -> Result<u8> {
    let mut kv = cfg.to_kv();
    if let Some(s) = shuffle {
        kv.set("shuffle_seed", s);
    }
    print_config(&[("tuner", kv)], cfg.seed);
    let loaded = load_all(files, target)?;
    let order = match shuffle {
        Some(s) => shuffled_order(loaded.len(), s),
        None => (0..loaded.len()).collect(),
    };
    let datasets: Vec<Dataset> = order.iter().map(|&i| loaded[i].clone()).collect();
    let part = greedy_cluster(&datasets, cfg)?;
    let singles = evaluate_partition(&datasets, &Partition::singletons(datasets.len()), cfg)?;
    let eval = evaluate_partition(&datasets, &part, cfg)?;
    let ids: Vec<String> = datasets.iter().map(|d| d.id.clone()).collect();

    for (c, members) in part.clusters.iter().enumerate() {
        let names: Vec<&str> = members.iter().map(|&j| ids[j].as_str()).collect();
        println!("cluster {c}: ose = {:.6} members = {}", part.per_cluster_ose[c], names.join(" "));
    }
    println!("total_ose = {:.6} (se {:.6})", eval.total_ose, eval.total_se);
    println!("singleton_total_ose = {:.6} (se {:.6})", singles.total_ose, singles.total_se);
    println!("comparisons = {}", part.comparisons_made);
    for e in &part.excluded {
        println!("excluded: {e}");
    }
    let csv = part.to_csv(&ids);
    match out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn class_setting(kv: &KvConfig, classes: usize, feature_bound: f64) -> Result<BoundSetting> {
    Ok(BoundSetting {
        num_classes: classes,
        feature_bound,
        lambda: kv.f64("lambda")?.unwrap_or(0.1),
        delta: kv.f64("delta")?.unwrap_or(0.05),
        schedule: StepSchedule::harmonic(kv.usize("steps")?.unwrap_or(500)),
    })
}

fn class_bound_cmd(files: &[PathBuf], target: &str, kv: &KvConfig, cfg: &TunerConfig, out: Option<&Path>) -> Result<u8> {
    let need = |k: &str| Error::Config(format!("missing key {k}"));
    let (dec, n1, n2, norms, setting) = match files {
        [] => {
            let setting = class_setting(kv, kv.usize("classes")?.ok_or_else(|| need("classes"))?, kv.f64("feature_bound")?.ok_or_else(|| need("feature_bound"))?)?;
            let norms = PairNorms {
                first: kv.f64("norm1")?.ok_or_else(|| need("norm1"))?,
                second: kv.f64("norm2")?.ok_or_else(|| need("norm2"))?,
                diff: kv.f64("norm_diff")?.ok_or_else(|| need("norm_diff"))?,
                sum: kv.f64("norm_sum")?.ok_or_else(|| need("norm_sum"))?,
            };
            let n1 = kv.usize("n1")?.ok_or_else(|| need("n1"))?;
            let n2 = kv.usize("n2")?.ok_or_else(|| need("n2"))?;
            print_config(&[("class", kv.clone())], cfg.seed);
            (decide_merge_classification(n1, n2, &norms, &setting)?, n1, n2, norms, setting)
        }
        [a, b] => {
            let ds = load_all(&[a.clone(), b.clone()], target)?;
            let c = kv.usize("classes")?;
            let d1 = ClassData::from_dataset(&ds[0], c)?;
            let d2 = ClassData::from_dataset(&ds[1], c)?;
            let classes = c.unwrap_or(d1.num_classes.max(d2.num_classes));
            let d1 = ClassData::new(d1.features, d1.labels, classes)?;
            let d2 = ClassData::new(d2.features, d2.labels, classes)?;
            let s = class_setting(kv, classes, 1.0)?;
            print_config(&[("class", kv.clone())], cfg.seed);
            println!("norms are plug-in estimates from regularized cross-entropy fits");
            let (dec, norms, setting) = decide_from_data(&d1, &d2, s.lambda, s.delta, s.schedule)?;
            (dec, d1.n(), d2.n(), norms, setting)
        }
        _ => return Err(Error::Invalid("class-bound takes zero or two CSV files".into())),
    };
    println!("phi1 = {} phi2 = {} psi = {}", dec.phi1.total(), dec.phi2.total(), dec.psi.total());
    println!("lhs = {} rhs = {} merge = {}", dec.lhs, dec.rhs, dec.merge);
    let csv = format!("{}\n{}\n", ClassDecision::csv_header(), dec.csv_row(n1, n2, &norms, &setting));
    match out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(if dec.merge { 0 } else { 1 })
}

fn synth_kv(p: usize, n: usize, shifts: &[f64], noise_var: f64) -> KvConfig {
    let mut kv = KvConfig::default();
    kv.set("p", p);
    kv.set("n", n);
    kv.set("shifts", shifts.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    kv.set("noise_var", noise_var);
    kv
}

fn synth_datasets(p: usize, n: usize, shifts: &[f64], noise_var: f64, seed: u64) -> Result<Vec<Dataset>> {
    shifts
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let spec = GaussianSpec::standard(nalgebra::DVector::from_element(p, 1.0 + d), noise_var)?;
            let mut ds = sample_synthetic(&spec, n, collabpred::rng::derive_indexed(seed, "synth", &[k as u64]));
            ds.id = format!("synth_{k}");
            Ok(ds)
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> Result<u8> {
        run(Cli::try_parse_from(std::iter::once("collabpred").chain(args.iter().copied())).unwrap())
    }

    fn synth_into(dir: &Path, p: usize, shifts: &str) -> Vec<String> {
        let d = dir.to_str().unwrap();
        let k = shifts.split(',').count();
        assert_eq!(run_args(&["--seed", "1", "--out", d, "synth", "--p", &p.to_string(), "--n", "120", "--shifts", shifts]).unwrap(), 0);
        (0..k).map(|i| dir.join(format!("synth_{i}.csv")).to_str().unwrap().to_string()).collect()
    }

    #[test]
    fn decide_pair_exit_code_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let f = synth_into(dir.path(), 4, "0,0");
        let out = dir.path().join("pair.csv");
        let code = run_args(&["--desk", "--out", out.to_str().unwrap(), "decide-pair", &f[0], &f[1]]).unwrap();
        assert!(code <= 1);
        let text = std::fs::read_to_string(out).unwrap();
        assert!(text.lines().count() >= 2);
    }

    #[test]
    fn mismatched_columns_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "x1,x2,y\n1,2,3\n2,1,0\n3,3,1\n4,0,2\n").unwrap();
        std::fs::write(&b, "x1,z,y\n1,2,3\n2,1,0\n3,3,1\n4,0,2\n").unwrap();
        assert!(run_args(&["--desk", "decide-pair", a.to_str().unwrap(), b.to_str().unwrap()]).is_err());
    }

    #[test]
    fn missing_target_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = synth_into(dir.path(), 3, "0,0");
        assert!(run_args(&["--desk", "decide-pair", &f[0], &f[1], "--target", "nope"]).is_err());
    }

    #[test]
    fn single_file_is_one_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let f = synth_into(dir.path(), 3, "0");
        let out = dir.path().join("part.csv");
        assert_eq!(run_args(&["--desk", "--out", out.to_str().unwrap(), "cluster", &f[0]]).unwrap(), 0);
        let text = std::fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().collect::<Vec<_>>(), vec!["dataset_id,cluster_id", "synth_0,0"]);
    }

    #[test]
    fn cluster_writes_every_dataset_once() {
        let dir = tempfile::tempdir().unwrap();
        let f = synth_into(dir.path(), 3, "0,0,1");
        let out = dir.path().join("part.csv");
        let mut args = vec!["--desk", "--mode", "majority", "--out", out.to_str().unwrap(), "cluster", "--shuffle-seed", "4"];
        args.extend(f.iter().map(String::as_str));
        assert_eq!(run_args(&args).unwrap(), 0);
        let text = std::fs::read_to_string(out).unwrap();
        let mut ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        ids.sort();
        assert_eq!(ids, vec!["synth_0", "synth_1", "synth_2"]);
    }

    #[test]
    fn bench_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("tiny.cfg");
        std::fs::write(
            &cfg,
            "p_values = 2\nd_values = 0\nn = 20\ntrials = 3\ntruth_reps = 200\nmax_iterations = 5\nboot_reps_m = 3\noos_count = 50\nmoment_reps = 20\n",
        )
        .unwrap();
        let mut texts = Vec::new();
        for sub in ["a", "b"] {
            let out = dir.path().join(sub);
            let args = ["--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap(), "bench"];
            assert_eq!(run_args(&args).unwrap(), 0);
            texts.push(std::fs::read_to_string(out.join("bench.csv")).unwrap());
            assert!(out.join("bench.txt").exists());
        }
        assert_eq!(texts[0], texts[1]);
    }

    #[test]
    fn class_bound_from_norms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("class.cfg");
        let base = "classes = 3\nfeature_bound = 1\nn1 = 100\nn2 = 100\nnorm1 = 2\nnorm2 = 2\nnorm_sum = 4\n";
        std::fs::write(&cfg, format!("{base}norm_diff = 0\n")).unwrap();
        assert_eq!(run_args(&["--config", cfg.to_str().unwrap(), "class-bound"]).unwrap(), 0);
        std::fs::write(&cfg, format!("{base}norm_diff = 500\n")).unwrap();
        assert_eq!(run_args(&["--config", cfg.to_str().unwrap(), "class-bound"]).unwrap(), 1);
        std::fs::write(&cfg, "classes = 3\n").unwrap();
        assert!(run_args(&["--config", cfg.to_str().unwrap(), "class-bound"]).is_err());
    }

    #[test]
    fn bad_flags_are_rejected() {
        assert!(Cli::try_parse_from(["collabpred", "--mode", "sometimes", "bench"]).is_err());
        assert!(Cli::try_parse_from(["collabpred", "cluster"]).is_err());
    }
}
