//! On-disk run layout and CSV schemas.
//!
//! ```text
//! <run>/manifest.json          config, seeds, digests, per-fold timing
//! <run>/folds.json             fold plan
//! <run>/metrics.csv            one row per fold plus a `mean` summary row
//! <run>/history.csv            per-epoch training loss and validation metrics
//! <run>/predictions/fold_<i>.csv
//! <run>/checkpoints/fold_<i>.ckpt
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentConfig, ExperimentResult, FoldSeeds, Prediction};
use super::TrainError;
use crate::checkpoint::Checkpoint;
use crate::data::FoldPlan;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{Architecture, ModelKind};

pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FORMAT_VERSION: u32 = 1;

/// One row of `metrics.csv`. Fold rows leave the `*_sd` columns empty; the
/// summary row has `fold = "mean"`, summed counts, mean metrics and sample
/// standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub model: String,
    pub fold: String,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub prec: f64,
    pub sn: f64,
    pub f1: f64,
    pub sp: f64,
    pub acc: f64,
    pub mcc: f64,
    pub prec_sd: Option<f64>,
    pub sn_sd: Option<f64>,
    pub f1_sd: Option<f64>,
    pub sp_sd: Option<f64>,
    pub acc_sd: Option<f64>,
    pub mcc_sd: Option<f64>,
    /// Pipe-separated names of metrics with a zero denominator.
    pub undefined: String,
}

impl MetricsRow {
    pub fn is_summary(&self) -> bool {
        self.fold == "mean"
    }

    pub fn fold_index(&self) -> Option<usize> {
        self.fold.parse().ok()
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp,
            tn: self.tn,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.prec, self.sn, self.f1, self.sp, self.acc, self.mcc]
    }

    fn new(dataset: &str, model: &str, fold: String, cm: ConfusionMatrix, m: &Metrics, sd: Option<&Metrics>) -> Self {
        MetricsRow {
            dataset: dataset.to_string(),
            model: model.to_string(),
            fold,
            tp: cm.tp,
            tn: cm.tn,
            fp: cm.fp,
            fn_: cm.fn_,
            prec: m.prec,
            sn: m.sn,
            f1: m.f1,
            sp: m.sp,
            acc: m.acc,
            mcc: m.mcc,
            prec_sd: sd.map(|s| s.prec),
            sn_sd: sd.map(|s| s.sn),
            f1_sd: sd.map(|s| s.f1),
            sp_sd: sd.map(|s| s.sp),
            acc_sd: sd.map(|s| s.acc),
            mcc_sd: sd.map(|s| s.mcc),
            undefined: m.undefined.describe(),
        }
    }
}

pub fn metrics_rows(result: &ExperimentResult) -> Vec<MetricsRow> {
    let (ds, model) = (result.dataset.as_str(), result.model.as_str());
    let mut rows: Vec<MetricsRow> = result
        .report
        .per_fold
        .iter()
        .map(|f| MetricsRow::new(ds, model, f.fold.to_string(), f.confusion, &f.metrics, None))
        .collect();
    rows.push(MetricsRow::new(
        ds,
        model,
        "mean".into(),
        result.report.total_confusion(),
        &result.report.mean,
        Some(&result.report.sd),
    ));
    rows
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub const METRICS_HEADER: [&str; 20] = [
    "dataset", "model", "fold", "tp", "tn", "fp", "fn", "prec", "sn", "f1", "sp", "acc", "mcc", "prec_sd", "sn_sd",
    "f1_sd", "sp_sd", "acc_sd", "mcc_sd", "undefined",
];

pub fn metrics_csv(result: &ExperimentResult) -> String {
    to_csv(metrics_rows(result), &METRICS_HEADER)
}

#[derive(Serialize)]
struct HistoryRow {
    fold: usize,
    epoch: usize,
    train_loss: f64,
    val_acc: Option<f64>,
    val_mcc: Option<f64>,
    selected: bool,
}

pub fn history_csv(result: &ExperimentResult) -> String {
    let rows = result.folds.iter().flat_map(|f| {
        f.history.iter().map(move |h| HistoryRow {
            fold: f.fold,
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_acc: h.val_metrics.map(|m| m.acc),
            val_mcc: h.val_metrics.map(|m| m.mcc),
            selected: h.epoch == f.best_epoch,
        })
    });
    to_csv(rows, &["fold", "epoch", "train_loss", "val_acc", "val_mcc", "selected"])
}

pub fn predictions_csv(predictions: &[Prediction]) -> String {
    to_csv(predictions, &["id", "prob", "predicted", "label"])
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TrainError> {
    let err = |msg: String| TrainError::Output {
        path: path.display().to_string(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| err(e.to_string()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    read_csv(path)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>, TrainError> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub seeds: FoldSeeds,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_clock_secs: f64,
}

/// Everything needed to re-run an experiment and check its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub dataset: String,
    pub model: ModelKind,
    pub k: usize,
    pub seed: u64,
    pub records: usize,
    pub records_digest: String,
    pub fold_plan_digest: String,
    pub config: ExperimentConfig,
    pub architecture: Architecture,
    pub folds: Vec<FoldManifest>,
    #[serde(default)]
    pub data_files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn from_result(result: &ExperimentResult, data_files: BTreeMap<String, String>) -> Self {
        RunManifest {
            format_version: RUN_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: result.dataset.as_str().to_string(),
            model: result.model,
            k: result.k,
            seed: result.seed,
            records: result.records,
            records_digest: result.records_digest.clone(),
            fold_plan_digest: result.fold_plan_digest.clone(),
            config: result.config.clone(),
            architecture: result.architecture.clone(),
            folds: result
                .folds
                .iter()
                .map(|f| FoldManifest {
                    fold: f.fold,
                    seeds: f.seeds,
                    train_size: f.train_size,
                    val_size: f.val_size,
                    test_size: f.test_size,
                    best_epoch: f.best_epoch,
                    epochs_run: f.history.len(),
                    wall_clock_secs: f.wall_clock_secs,
                })
                .collect(),
            data_files,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |msg: String| TrainError::Output {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), TrainError> {
    std::fs::write(path, contents).map_err(|e| TrainError::Output {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn mkdir(path: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(path).map_err(|e| TrainError::Output {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Writes every artifact of a finished experiment into `dir`.
pub fn write_run(
    result: &ExperimentResult,
    plan: &FoldPlan,
    dir: &Path,
    data_files: BTreeMap<String, String>,
) -> Result<(), TrainError> {
    mkdir(&dir.join("predictions"))?;
    mkdir(&dir.join("checkpoints"))?;
    plan.save(&dir.join("folds.json"))?;
    write(&dir.join("metrics.csv"), metrics_csv(result))?;
    write(&dir.join("history.csv"), history_csv(result))?;
    for f in &result.folds {
        write(&dir.join(format!("predictions/fold_{}.csv", f.fold)), predictions_csv(&f.predictions))?;
        if let Some(model) = &f.model {
            let mut meta = BTreeMap::new();
            meta.insert("dataset".to_string(), result.dataset.as_str().to_string());
            meta.insert("fold".to_string(), f.fold.to_string());
            meta.insert("best_epoch".to_string(), f.best_epoch.to_string());
            meta.insert("fold_plan_digest".to_string(), result.fold_plan_digest.clone());
            Checkpoint::from_model(model, f.seeds.init, meta).save(&dir.join(format!("checkpoints/fold_{}.ckpt", f.fold)))?;
        }
    }
    let manifest = RunManifest::from_result(result, data_files);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&dir.join(RUN_MANIFEST_FILE), text)
}
