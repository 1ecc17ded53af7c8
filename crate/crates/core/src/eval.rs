//! Evaluation harness: Spearman rank correlation, reference-level dataset
//! partitioning, multi-run experiments, and per-distortion / cross-dataset
//! reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::aggd::FeatureVector;
use crate::data::PairRecord;
use crate::error::{Error, Result};
use crate::gp::{
    self, eval_program, EvolutionConfig, ParetoFront, Program,
};

/// Spearman correlation plus a degeneracy flag for constant inputs
/// (undefined correlation is reported as 0 with the flag set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SroccResult {
    pub rho: f64,
    pub degenerate: bool,
}

/// Mid-ranks (average-rank tie handling).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Spearman rank-order correlation: Pearson correlation of mid-ranks.
pub fn srocc(pred: &[f64], target: &[f64]) -> Result<SroccResult> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::DimensionMismatch(
            "srocc needs at least 3 samples".into(),
        ));
    }
    let ra = midranks(pred);
    let rb = midranks(target);
    match pearson(&ra, &rb) {
        Some(rho) => Ok(SroccResult {
            rho: rho.clamp(-1.0, 1.0),
            degenerate: false,
        }),
        None => Ok(SroccResult {
            rho: 0.0,
            degenerate: true,
        }),
    }
}

/// Reference-level train/validation/test split: 20% of reference ids are
/// held out for test, the rest split 80/20 into train and validation.
/// Every distorted image follows its reference's assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub test_refs: BTreeSet<String>,
    pub train_refs: BTreeSet<String>,
    pub val_refs: BTreeSet<String>,
    pub seed: u64,
}

pub fn reference_partition(records: &[PairRecord], seed: u64) -> Result<SplitSpec> {
    let mut refs: Vec<String> = records
        .iter()
        .map(|r| r.reference_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if refs.len() < 5 {
        return Err(Error::Partition(format!(
            "need at least 5 distinct references, got {}",
            refs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.shuffle(&mut rng);
    let n = refs.len();
    let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
    let remaining = n - n_test;
    let n_val = ((remaining as f64) * 0.2).round().max(1.0) as usize;
    let test_refs: BTreeSet<String> = refs[..n_test].iter().cloned().collect();
    let val_refs: BTreeSet<String> = refs[n_test..n_test + n_val].iter().cloned().collect();
    let train_refs: BTreeSet<String> = refs[n_test + n_val..].iter().cloned().collect();
    Ok(SplitSpec {
        test_refs,
        train_refs,
        val_refs,
        seed,
    })
}

/// SROCC per distortion id; groups with fewer than 3 samples are flagged
/// instead of scored.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionEntry {
    pub srocc: Option<f64>,
    pub count: usize,
}

pub fn per_distortion_report(
    preds: &[f64],
    targets: &[f64],
    distortion_ids: &[u32],
) -> Result<BTreeMap<u32, DistortionEntry>> {
    if preds.len() != targets.len() || preds.len() != distortion_ids.len() {
        return Err(Error::DimensionMismatch(
            "per-distortion inputs must have equal lengths".into(),
        ));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in distortion_ids.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (d, idx) in groups {
        let entry = if idx.len() < 3 {
            DistortionEntry {
                srocc: None,
                count: idx.len(),
            }
        } else {
            let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            DistortionEntry {
                srocc: Some(srocc(&p, &t)?.rho),
                count: idx.len(),
            }
        };
        out.insert(d, entry);
    }
    Ok(out)
}

/// |SROCC| of a model's predictions over a whole foreign dataset.
pub fn cross_dataset_eval(
    model: &Program,
    features: &[FeatureVector],
    mos: &[f64],
) -> Result<f64> {
    let preds: Vec<f64> = features.iter().map(|x| eval_program(model, x)).collect();
    Ok(srocc(&preds, mos)?.rho.abs())
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub model: Program,
    pub test_srocc: f64,
    pub per_distortion: BTreeMap<u32, DistortionEntry>,
    pub history: Vec<f64>,
}

/// Aggregated report across independent runs.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_run: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Mean per-distortion SROCC across runs (flagged groups skipped).
    pub per_distortion_mean: BTreeMap<u32, f64>,
}

fn aggregate(per_run: Vec<RunResult>) -> EvalReport {
    let values: Vec<f64> = per_run.iter().map(|r| r.test_srocc).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for run in &per_run {
        for (&d, entry) in &run.per_distortion {
            if let Some(s) = entry.srocc {
                let e = sums.entry(d).or_insert((0.0, 0));
                e.0 += s;
                e.1 += 1;
            }
        }
    }
    let per_distortion_mean = sums
        .into_iter()
        .map(|(d, (s, c))| (d, s / c as f64))
        .collect();
    EvalReport {
        per_run,
        mean,
        std: var.sqrt(),
        max,
        per_distortion_mean,
    }
}

/// Joined record + feature row, the unit the experiment runner consumes.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub reference_id: String,
    pub distortion_id: u32,
    pub mos: f64,
    pub features: FeatureVector,
}

fn subset<'a>(
    rows: &'a [LabeledFeatures],
    refs: &BTreeSet<String>,
) -> (Vec<FeatureVector>, Vec<f64>, Vec<u32>) {
    let picked: Vec<&LabeledFeatures> = rows
        .iter()
        .filter(|r| refs.contains(&r.reference_id))
        .collect();
    (
        picked.iter().map(|r| r.features.clone()).collect(),
        picked.iter().map(|r| r.mos).collect(),
        picked.iter().map(|r| r.distortion_id).collect(),
    )
}

/// One full run of the experimental protocol for a single seed: partition,
/// warm start + evolve, select on validation, score the held-out test set.
pub fn single_run(
    cfg: &EvolutionConfig,
    records: &[PairRecord],
    rows: &[LabeledFeatures],
    seed: u64,
) -> Result<RunResult> {
    let split = reference_partition(records, seed)?;
    let (xs_train, ys_train, _) = subset(rows, &split.train_refs);
    let (xs_val, ys_val, _) = subset(rows, &split.val_refs);
    let (xs_test, ys_test, test_dist) = subset(rows, &split.test_refs);

    let run_cfg = EvolutionConfig { seed, ..cfg.clone() };
    let (front, history): (ParetoFront, Vec<f64>) =
        gp::run_evolution(&run_cfg, crate::aggd::FEATURE_COUNT, &xs_train, &ys_train)?;
    let model = gp::select_final(&front, &xs_val, &ys_val)?;

    let preds: Vec<f64> = xs_test.iter().map(|x| eval_program(&model, x)).collect();
    let test_srocc = srocc(&preds, &ys_test)?.rho.abs();
    let per_distortion = per_distortion_report(&preds, &ys_test, &test_dist)?;
    Ok(RunResult {
        seed,
        model,
        test_srocc,
        per_distortion,
        history,
    })
}

/// Joins records with cached features; every record must have a row.
pub fn join_features(
    records: &[PairRecord],
    cache: &crate::data::FeatureCache,
) -> Result<Vec<LabeledFeatures>> {
    records
        .iter()
        .map(|r| {
            let features = cache.get(&r.pair_key()).ok_or_else(|| {
                Error::Ingestion(format!("no cached features for pair {}", r.pair_key()))
            })?;
            Ok(LabeledFeatures {
                reference_id: r.reference_id.clone(),
                distortion_id: r.distortion_id,
                mos: r.mos,
                features: features.clone(),
            })
        })
        .collect()
}

/// Runs `n_runs` independent seeded experiments and aggregates. Seeds are
/// `base_seed..base_seed + n_runs`, results collected in seed order.
pub fn run_experiment(
    cfg: &EvolutionConfig,
    records: &[PairRecord],
    cache: &crate::data::FeatureCache,
    n_runs: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    let rows = join_features(records, cache)?;
    let mut per_run = Vec::with_capacity(n_runs);
    for i in 0..n_runs {
        per_run.push(single_run(cfg, records, &rows, base_seed + i as u64)?);
    }
    Ok(aggregate(per_run))
}

/// Writes the run artifacts: one model file and one per-distortion CSV per
/// run in a seed-named subdirectory, a runs CSV, and a JSON summary.
pub fn write_report(
    report: &EvalReport,
    cfg: &EvolutionConfig,
    config_hash: &str,
    dataset_id: &str,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = crate::aggd::feature_names();

    let mut runs_csv = String::from("seed,test_srocc,model_complexity\n");
    for run in &report.per_run {
        runs_csv.push_str(&format!(
            "{},{},{}\n",
            run.seed,
            run.test_srocc,
            run.model.complexity()
        ));
        let run_dir = out_dir.join(format!("seed_{}", run.seed));
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

        let model_path = run_dir.join("model.txt");
        std::fs::write(
            &model_path,
            gp::serialize_model(&run.model, &names, config_hash, run.seed),
        )
        .map_err(|e| Error::io(&model_path, e))?;

        let mut dist_csv = String::from("distortion_id,srocc,count,flagged\n");
        for (d, entry) in &run.per_distortion {
            match entry.srocc {
                Some(s) => dist_csv.push_str(&format!("{},{},{},\n", d, s, entry.count)),
                None => dist_csv.push_str(&format!("{},,{},too_few_samples\n", d, entry.count)),
            }
        }
        let dist_path = run_dir.join(format!("per_distortion_{}_seed{}.csv", dataset_id, run.seed));
        std::fs::write(&dist_path, dist_csv).map_err(|e| Error::io(&dist_path, e))?;
    }
    let runs_path = out_dir.join(format!("runs_{}.csv", dataset_id));
    std::fs::write(&runs_path, runs_csv).map_err(|e| Error::io(&runs_path, e))?;

    let summary = serde_json::json!({
        "dataset": dataset_id,
        "config_hash": config_hash,
        "runs": report.per_run.len(),
        "mean_srocc": report.mean,
        "std_srocc": report.std,
        "max_srocc": report.max,
        "per_run": report.per_run.iter().map(|r| r.test_srocc).collect::<Vec<_>>(),
        "seeds": report.per_run.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "per_distortion_mean": report.per_distortion_mean,
        "config": cfg,
    });
    let json_path = out_dir.join(format!("summary_{}.json", dataset_id));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("serializable summary"),
    )
    .map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
