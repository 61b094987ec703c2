//! Experiment, training and inference subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use capsprom_core::capsnet::predict as threshold_prob;
use capsprom_core::checkpoint::Checkpoint;
use capsprom_core::data::registry::file_sha256;
use capsprom_core::data::{
    load_dataset, parse_fasta, stratified_holdout, Dataset, DatasetKey, DatasetManifest, FoldPlan, LoadOptions,
};
use capsprom_core::encode::tokenize;
use capsprom_core::metrics::{ConfusionMatrix, Metrics};
use capsprom_core::model::{Model, ModelKind};
use capsprom_core::train::{
    cross_validate, evaluate, fold_seeds, train, write_run, ExperimentConfig, ExperimentResult, RunOptions,
    RUN_MANIFEST_FILE,
};
use serde::Serialize;

use crate::error::{io_error, CliError};

pub const METRIC_NAMES: [&str; 6] = ["prec", "sn", "f1", "sp", "acc", "mcc"];

/// Reads an experiment file and applies command-line overrides before
/// validation, so an override that conflicts with the file is reported
/// against the offending field.
pub fn load_config(path: &Path, model: Option<ModelKind>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_for(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Dataset, CliError> {
    let opts = LoadOptions {
        strict_counts: cfg.data.strict_counts,
        drop_invalid: cfg.data.drop_invalid,
    };
    let data = load_dataset(cfg.dataset, data_dir, &opts)?;
    Ok(match cfg.data.subsample {
        Some(n) => data.stratified_subsample(n, cfg.seed),
        None => data,
    })
}

/// Source file name to SHA-256 for the files backing `key`.
pub fn data_file_digests(key: DatasetKey, data_dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let entry = DatasetManifest::load_or_default(data_dir)?.entry(key);
    let mut out = BTreeMap::new();
    for src in [entry.positive, entry.negative] {
        let digest = match src.sha256 {
            Some(d) => d,
            None => file_sha256(&data_dir.join(&src.file))?,
        };
        out.insert(src.file, digest);
    }
    Ok(out)
}

pub fn format_metrics(m: &Metrics, sd: Option<&Metrics>) -> String {
    let mut s = String::new();
    for (i, (name, v)) in METRIC_NAMES.iter().zip(m.values()).enumerate() {
        if i > 0 {
            s.push_str("  ");
        }
        match sd {
            Some(sd) => write!(s, "{name} {v:.4} ± {:.4}", sd.values()[i]).unwrap(),
            None => write!(s, "{name} {v:.4}").unwrap(),
        }
    }
    s
}

fn summary(result: &ExperimentResult) -> String {
    let mut s = format!(
        "{} {} k={} seed={} records={} fold plan {}\n",
        result.dataset,
        result.model,
        result.k,
        result.seed,
        result.records,
        &result.fold_plan_digest[..16]
    );
    for f in &result.folds {
        writeln!(
            s,
            "  fold {}: {}  (best epoch {}, {:.1}s)",
            f.fold,
            format_metrics(&f.metrics, None),
            f.best_epoch,
            f.wall_clock_secs
        )
        .unwrap();
    }
    writeln!(s, "  mean:   {}", format_metrics(&result.report.mean, Some(&result.report.sd))).unwrap();
    s
}

#[derive(Debug, Clone)]
pub struct CrossValidateArgs {
    pub config: PathBuf,
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub folds_file: Option<PathBuf>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub force: bool,
}

pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.dataset, cfg.model, cfg.seed))
}

/// Runs cross-validation and writes the run directory. Returns `None`
/// when the run directory is already complete and `force` is off.
pub fn cross_validate_cmd(args: &CrossValidateArgs) -> Result<Option<(ExperimentResult, PathBuf)>, CliError> {
    let cfg = load_config(&args.config, args.model, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    if out.join(RUN_MANIFEST_FILE).exists() && !args.force {
        println!("{} already holds a finished run; pass --force to redo it", out.display());
        return Ok(None);
    }
    let data = load_for(&cfg, &args.data_dir)?;
    let imported = match &args.folds_file {
        Some(p) if p.exists() => Some(FoldPlan::load(p)?),
        _ => None,
    };
    let opts = RunOptions {
        jobs: args.jobs.max(1),
        keep_models: true,
    };
    let (result, plan) = cross_validate(&cfg, &data, imported.as_ref(), &opts)?;
    if let (Some(p), None) = (&args.folds_file, &imported) {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        plan.save(p)?;
    }
    let files = data_file_digests(cfg.dataset, &args.data_dir)?;
    write_run(&result, &plan, &out, files)?;
    print!("{}", summary(&result));
    println!("results written to {}", out.display());
    Ok(Some((result, out)))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub force: bool,
}

/// Trains one model on the whole dataset, holding out the configured
/// validation fraction for model selection, and saves a checkpoint.
pub fn train_cmd(args: &TrainArgs) -> Result<bool, CliError> {
    if args.out.exists() && !args.force {
        println!("{} exists; pass --force to retrain", args.out.display());
        return Ok(false);
    }
    let cfg = load_config(&args.config, args.model, args.seed)?;
    let data = load_for(&cfg, &args.data_dir)?;
    let encoded = data.encode()?;
    let labels = data.labels();
    let all: Vec<usize> = (0..data.len()).collect();
    let seeds = fold_seeds(cfg.seed, 0);
    let (train_idx, val_idx) = stratified_holdout(&all, &labels, cfg.train.validation_fraction, seeds.validation);
    let mut model = Model::build(&cfg.architecture()?, seeds.init)?;
    let outcome = train(&mut model, &encoded, &train_idx, &val_idx, &cfg.train, seeds.shuffle)?;
    let mut meta = BTreeMap::new();
    meta.insert("dataset".to_string(), cfg.dataset.to_string());
    meta.insert("records_digest".to_string(), data.digest());
    meta.insert("best_epoch".to_string(), outcome.best_epoch.to_string());
    meta.insert("experiment_seed".to_string(), cfg.seed.to_string());
    if let Some(parent) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    Checkpoint::from_model(&model, seeds.init, meta).save(&args.out)?;
    let last = outcome.history.last().map_or(f64::NAN, |h| h.train_loss);
    println!(
        "{} on {}: {} epochs, best epoch {}, final train loss {last:.5}",
        cfg.model,
        cfg.dataset,
        outcome.history.len(),
        outcome.best_epoch
    );
    if let Some(m) = outcome.history.get(outcome.best_epoch).and_then(|h| h.val_metrics) {
        println!("validation: {}", format_metrics(&m, None));
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(true)
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub dataset: DatasetKey,
    pub data_dir: PathBuf,
    pub folds_file: Option<PathBuf>,
    pub fold: Option<usize>,
    pub threshold: f64,
}

/// Scores a checkpoint on a dataset, or on one test fold of a plan.
pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(ConfusionMatrix, Metrics), CliError> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::usage(format!("--threshold {} is outside [0, 1]", args.threshold)));
    }
    let model = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let data = load_dataset(args.dataset, &args.data_dir, &LoadOptions::default())?;
    let idx: Vec<usize> = match (&args.folds_file, args.fold) {
        (Some(p), Some(fold)) => {
            let plan = FoldPlan::load(p)?;
            plan.check_records(&data.records)?;
            if fold >= plan.k {
                return Err(CliError::usage(format!("--fold {fold} out of range for k = {}", plan.k)));
            }
            plan.test_indices(fold)
        }
        (None, None) => (0..data.len()).collect(),
        _ => return Err(CliError::usage("--folds-file and --fold must be given together")),
    };
    let encoded = data.encode()?;
    let (cm, _) = evaluate(&model, &encoded, &idx, args.threshold)?;
    let m = cm.compute().map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "{} checkpoint on {} ({} records): tp {} tn {} fp {} fn {}",
        model.kind(),
        args.dataset,
        idx.len(),
        cm.tp,
        cm.tn,
        cm.fp,
        cm.fn_
    );
    println!("{}", format_metrics(&m, None));
    if m.undefined.any() {
        log::warn!("undefined metrics reported as 0: {}", m.undefined.describe());
    }
    Ok((cm, m))
}

#[derive(Debug, Clone)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub fasta: PathBuf,
    pub out: PathBuf,
    pub threshold: f64,
    pub force: bool,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    probability: f64,
    predicted: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictSummary {
    pub predicted: usize,
    pub skipped: Vec<(String, String)>,
}

/// Scores every record of a FASTA file. Records that cannot be scored are
/// reported one per line on stderr and left out of the output.
pub fn predict_cmd(args: &PredictArgs) -> Result<Option<PredictSummary>, CliError> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::usage(format!("--threshold {} is outside [0, 1]", args.threshold)));
    }
    if args.out.exists() && !args.force {
        println!("{} exists; pass --force to overwrite", args.out.display());
        return Ok(None);
    }
    let model = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let records = parse_fasta(&args.fasta)?;
    let mut summary = PredictSummary::default();
    let mut valid = Vec::new();
    for r in &records {
        let problem = match tokenize(&r.sequence) {
            Ok(t) if t.len() == model.seq_len() => {
                valid.push((r.id.as_str(), t));
                continue;
            }
            Ok(t) => format!("sequence length {} does not match model input length {}", t.len(), model.seq_len()),
            Err(e) => e.to_string(),
        };
        eprintln!("error: record {}: {problem}", r.id);
        summary.skipped.push((r.id.clone(), problem));
    }
    let probs = model.predict_proba(valid.iter().map(|(_, t)| t.as_slice()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::runtime(e.to_string());
    w.write_record(["id", "probability", "predicted"]).map_err(csv_err)?;
    for ((id, _), p) in valid.iter().zip(&probs) {
        w.serialize(PredictionRow {
            id,
            probability: *p,
            predicted: threshold_prob(*p, args.threshold),
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(&args.out, bytes).map_err(|e| io_error(&args.out, e))?;
    summary.predicted = valid.len();
    println!(
        "{} records scored, {} skipped; written to {}",
        summary.predicted,
        summary.skipped.len(),
        args.out.display()
    );
    Ok(Some(summary))
}
