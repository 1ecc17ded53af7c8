//! `evoiqa` command-line interface: feature extraction, metric training,
//! pairwise scoring, cross-dataset evaluation, and report aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evoiqa_core::aggd::feature_names;
use evoiqa_core::data::{self, FeatureCache, PairRecord};
use evoiqa_core::eval;
use evoiqa_core::gp::{self, Program};
use evoiqa_core::metrics;
use evoiqa_core::{ColorImage, Error, FeatureVector, Result, FEATURE_COUNT};

#[derive(Parser)]
#[command(name = "evoiqa", version, about = "Full-reference IQA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum DatasetKind {
    Tid2013,
    Manifest,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features for every pair of a dataset into a cache file
    Extract {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        /// Dataset root directory (tid2013) or manifest CSV path
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Worker threads; defaults to the number of cores
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the seeded training protocol and write models plus reports
    Train {
        #[arg(long)]
        cache: PathBuf,
        /// Dataset source: a tid2013 root directory or a manifest CSV file
        #[arg(long)]
        records: PathBuf,
        /// Evolution config file (key = value); defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset tag used in output file names
        #[arg(long, default_value = "tid2013")]
        dataset_id: String,
    },
    /// Score one reference/distorted pair with a trained or built-in model
    Score {
        /// Model file path, or builtin:evoiqa-full | builtin:evoiqa-subset | builtin:haarpsi
        #[arg(long)]
        model: String,
        #[arg(long)]
        r#ref: PathBuf,
        #[arg(long)]
        dist: PathBuf,
    },
    /// Evaluate a model against a cached dataset (cross-dataset protocol)
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = false)]
        per_distortion: bool,
    },
    /// Aggregate run CSVs from a training output directory
    Report {
        #[arg(long)]
        runs_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

/// Loads records from either supported source, inferring by path kind.
fn load_records(path: &Path) -> Result<Vec<PairRecord>> {
    if path.is_dir() {
        data::load_tid2013(path)
    } else {
        data::load_manifest(path)
    }
}

enum Model {
    Trained(Program),
    EvoFull,
    EvoSubset,
    HaarPsi,
}

impl Model {
    fn parse(spec: &str) -> Result<Model> {
        match spec {
            "builtin:evoiqa-full" => Ok(Model::EvoFull),
            "builtin:evoiqa-subset" => Ok(Model::EvoSubset),
            "builtin:haarpsi" => Ok(Model::HaarPsi),
            other if other.starts_with("builtin:") => Err(Error::Config(format!(
                "unknown builtin model '{}'",
                other
            ))),
            path => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(Path::new(path), e))?;
                Ok(Model::Trained(gp::deserialize_model(
                    &text,
                    FEATURE_COUNT,
                    64,
                )?))
            }
        }
    }

    fn expression(&self) -> String {
        match self {
            Model::Trained(p) => gp::to_expression_string(p, &feature_names()),
            Model::EvoFull => metrics::EVOIQA_FULL_EXPR.to_string(),
            Model::EvoSubset => metrics::EVOIQA_SUBSET_EXPR.to_string(),
            Model::HaarPsi => "haarpsi".to_string(),
        }
    }

    /// Raw model output on one feature vector; HaarPSI needs images instead.
    fn eval_features(&self, fv: &FeatureVector) -> Result<f64> {
        match self {
            Model::Trained(p) => Ok(gp::eval_program(p, fv)),
            Model::EvoFull => {
                let (full, _) = metrics::bind_features(fv)?;
                Ok(metrics::evoiqa_full(&full))
            }
            Model::EvoSubset => {
                let (_, subset) = metrics::bind_features(fv)?;
                Ok(metrics::evoiqa_subset(&subset))
            }
            Model::HaarPsi => Err(Error::Config(
                "builtin:haarpsi scores image pairs, not cached features".into(),
            )),
        }
    }

    /// Sign that turns the raw output into a quality-aligned (higher is
    /// better) score: the evolved metrics grow with distortion severity.
    fn mos_alignment(&self) -> f64 {
        match self {
            Model::EvoFull | Model::EvoSubset => -1.0,
            _ => 1.0,
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Extract {
            dataset,
            root,
            cache,
            workers,
        } => {
            let records = match dataset {
                DatasetKind::Tid2013 => data::load_tid2013(&root)?,
                DatasetKind::Manifest => data::load_manifest(&root)?,
            };
            if let Some(n) = workers {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
            }
            let mut store = if cache.exists() {
                FeatureCache::load(&cache)?
            } else {
                FeatureCache::new()
            };
            let (added, failures) = data::extract_and_cache(&records, &mut store);
            store.save(&cache)?;
            println!(
                "extracted {} new pairs ({} cached total, extractor {})",
                added,
                store.len(),
                data::extractor_config_hash()
            );
            for f in &failures {
                eprintln!("failed {}: {}", f.pair_key, f.error);
            }
            Ok(if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Train {
            cache,
            records,
            config,
            runs,
            seed,
            out,
            dataset_id,
        } => {
            let records = load_records(&records)?;
            let store = FeatureCache::load(&cache)?;
            let cfg = match config {
                Some(path) => data::load_evolution_config(&path, seed)?,
                None => evoiqa_core::EvolutionConfig {
                    seed,
                    ..Default::default()
                },
            };
            let report = eval::run_experiment(&cfg, &records, &store, runs, cfg.seed)?;
            eval::write_report(
                &report,
                &cfg,
                &data::extractor_config_hash(),
                &dataset_id,
                &out,
            )?;
            println!(
                "runs {}  mean |srocc| {:.4}  std {:.4}  max {:.4}",
                runs, report.mean, report.std, report.max
            );
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { model, r#ref, dist } => {
            let model = Model::parse(&model)?;
            let reference = ColorImage::load(&r#ref)?;
            let distorted = ColorImage::load(&dist)?;
            let raw = match &model {
                Model::HaarPsi => metrics::haarpsi_score(&reference, &distorted)?,
                m => {
                    let maps = evoiqa_core::extract_all(&reference, &distorted)?;
                    let fv = evoiqa_core::featurize(&maps)?;
                    m.eval_features(&fv)?
                }
            };
            println!("raw {:.6}", raw);
            println!("aligned {:.6}", raw * model.mos_alignment());
            println!("expression {}", model.expression());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            model,
            cache,
            records,
            per_distortion,
        } => {
            let model = Model::parse(&model)?;
            let records = load_records(&records)?;
            let store = FeatureCache::load(&cache)?;
            let rows = eval::join_features(&records, &store)?;
            let preds: Vec<f64> = match &model {
                Model::HaarPsi => records
                    .iter()
                    .map(|r| {
                        let reference = ColorImage::load(&r.ref_path)?;
                        let distorted = ColorImage::load(&r.dist_path)?;
                        metrics::haarpsi_score(&reference, &distorted)
                    })
                    .collect::<Result<_>>()?,
                m => rows
                    .iter()
                    .map(|r| m.eval_features(&r.features))
                    .collect::<Result<_>>()?,
            };
            let mos: Vec<f64> = rows.iter().map(|r| r.mos).collect();
            let rho = eval::srocc(&preds, &mos)?;
            println!("pairs {}", rows.len());
            println!("srocc_abs {:.6}", rho.rho.abs());
            if per_distortion {
                let ids: Vec<u32> = rows.iter().map(|r| r.distortion_id).collect();
                let table = eval::per_distortion_report(&preds, &mos, &ids)?;
                println!("distortion_id,srocc,count,flagged");
                for (d, entry) in &table {
                    match entry.srocc {
                        Some(s) => println!("{},{:.6},{},", d, s.abs(), entry.count),
                        None => println!("{},,{},too_few_samples", d, entry.count),
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs_dir } => {
            report_aggregate(&runs_dir)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Re-aggregates the per-run CSVs of a training output directory into a
/// mean/std/max line per dataset and a mean per-distortion table.
fn report_aggregate(dir: &Path) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs_files: Vec<PathBuf> = Vec::new();
    let mut dist_files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("runs_") && name.ends_with(".csv") {
            runs_files.push(path);
        } else if path.is_dir() {
            let sub = fs::read_dir(&path).map_err(|e| Error::io(&path, e))?;
            for e in sub {
                let p = e.map_err(|e| Error::io(&path, e))?.path();
                let n = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                if n.starts_with("per_distortion_") && n.ends_with(".csv") {
                    dist_files.push(p);
                }
            }
        }
    }
    if runs_files.is_empty() {
        return Err(Error::Ingestion(format!(
            "no runs_*.csv found in {}",
            dir.display()
        )));
    }
    runs_files.sort();
    for path in &runs_files {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::new();
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let _seed = parts.next();
            if let Some(v) = parts.next().and_then(|p| p.parse::<f64>().ok()) {
                values.push(v);
            }
        }
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        println!(
            "{}: runs {} mean {:.4} std {:.4} max {:.4}",
            name,
            values.len(),
            mean,
            var.sqrt(),
            max
        );
    }
    if !dist_files.is_empty() {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for path in &dist_files {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines().skip(1) {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() < 3 {
                    continue;
                }
                if let (Ok(d), Ok(s)) = (parts[0].parse::<u32>(), parts[1].parse::<f64>()) {
                    let e = sums.entry(d).or_insert((0.0, 0));
                    e.0 += s;
                    e.1 += 1;
                }
            }
        }
        println!("distortion_id,mean_srocc,runs");
        for (d, (s, c)) in &sums {
            println!("{},{:.4},{}", d, s / *c as f64, c);
        }
    }
    Ok(())
}
