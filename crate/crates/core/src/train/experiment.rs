//! Cross-validation experiments: configuration, per-fold training and
//! evaluation on a shared fold plan.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochStats, TrainConfig, TrainError};
use crate::capsnet::{predict, CapsPromConfig, MarginLossConfig};
use crate::cnn::CnnConfig;
use crate::data::{stratified_holdout, stratified_kfold, Dataset, DatasetKey, EncodedRecord, FoldPlan};
use crate::metrics::{aggregate, ConfusionMatrix, FoldMetrics, Metrics, MetricsReport};
use crate::model::{Architecture, Model, ModelError, ModelKind};
use crate::seed::{derive_seed, stream};

/// A configuration problem located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.msg)
        } else {
            write!(f, "{}: {}", self.path, self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Treat record-count mismatches as errors.
    #[serde(default)]
    pub strict_counts: bool,
    #[serde(default)]
    pub drop_invalid: bool,
    /// Use a stratified random subset of this many records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
}

/// Experiment file contents. Model sections apply only to their own model
/// kind; a section for the other kind is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKey,
    pub model: ModelKind,
    #[serde(default = "five")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capsprom: Option<CapsPromConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_loss: Option<MarginLossConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnnprom: Option<CnnConfig>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetKey, model: ModelKind) -> Self {
        ExperimentConfig {
            dataset,
            model,
            k: 5,
            seed: 0,
            train: TrainConfig::default(),
            data: DataSection::default(),
            capsprom: None,
            margin_loss: None,
            cnnprom: None,
        }
    }

    /// Parses and validates a TOML experiment file.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without semantic validation, so callers can apply overrides
    /// first.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, msg)
        })?;
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::new("", e.message()))?;
        let explicit_len = raw
            .get("capsprom")
            .and_then(|s| s.get("seq_len"))
            .is_some();
        if let Some(c) = cfg.capsprom.as_mut() {
            if !explicit_len {
                c.seq_len = cfg.dataset.info().bp;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bp = self.dataset.info().bp;
        if self.k < 2 {
            return Err(ConfigError::new("k", "must be at least 2"));
        }
        self.train.validate()?;
        let only_for = |section: &str, kind: ModelKind| {
            Err(ConfigError::new(
                section,
                format!("section only applies to model = \"{kind}\", but model = \"{}\"", self.model),
            ))
        };
        match self.model {
            ModelKind::CnnProm => {
                if self.capsprom.is_some() {
                    return only_for("capsprom", ModelKind::CapsProm);
                }
                if self.margin_loss.is_some() {
                    return only_for("margin_loss", ModelKind::CapsProm);
                }
            }
            ModelKind::CapsProm => {
                if self.cnnprom.is_some() {
                    return only_for("cnnprom", ModelKind::CnnProm);
                }
            }
        }
        if let Some(c) = &self.capsprom {
            if c.seq_len != bp {
                return Err(ConfigError::new(
                    "capsprom.seq_len",
                    format!("{} does not match the {bp} bp of dataset {}", c.seq_len, self.dataset),
                ));
            }
        }
        if let Some(c) = &self.cnnprom {
            if c.input_length != bp {
                return Err(ConfigError::new(
                    "cnnprom.input_length",
                    format!("{} does not match the {bp} bp of dataset {}", c.input_length, self.dataset),
                ));
            }
        }
        if self.data.subsample == Some(0) {
            return Err(ConfigError::new("data.subsample", "must be positive"));
        }
        let located = |prefix: &str, e: ModelError| match e {
            ModelError::Config(msg) => match msg.split_once(": ") {
                Some((p, m)) => {
                    let p = p.strip_prefix("capsprom.").or_else(|| p.strip_prefix("loss.")).or_else(|| p.strip_prefix("loss")).unwrap_or(p);
                    ConfigError::new(if p.is_empty() { prefix.to_string() } else { format!("{prefix}.{p}") }, m)
                }
                None => ConfigError::new(prefix, msg),
            },
            ModelError::InvalidLayer { layer, reason } => ConfigError::new(format!("{prefix}.layers[{layer}]"), reason),
            other => ConfigError::new(prefix, other.to_string()),
        };
        match self.architecture()? {
            Architecture::CapsProm { config, loss } => {
                config.validate().map_err(|e| located("capsprom", e))?;
                loss.validate().map_err(|e| located("margin_loss", e))
            }
            Architecture::CnnProm { config } => config.validate().map(|_| ()).map_err(|e| located("cnnprom", e)),
        }
    }

    /// Architecture for the configured model and dataset length.
    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        let bp = self.dataset.info().bp;
        Ok(match self.model {
            ModelKind::CapsProm => Architecture::CapsProm {
                config: self.capsprom.clone().unwrap_or_else(|| CapsPromConfig::for_length(bp)),
                loss: self.margin_loss.unwrap_or_default(),
            },
            ModelKind::CnnProm => Architecture::CnnProm {
                config: match &self.cnnprom {
                    Some(c) => c.clone(),
                    None => CnnConfig::shipped(self.dataset.as_str())
                        .ok_or_else(|| ConfigError::new("cnnprom", "no shipped configuration for dataset"))?,
                },
            },
        })
    }
}

/// Seeds used by one fold, all derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSeeds {
    pub init: u64,
    pub validation: u64,
    pub shuffle: u64,
}

pub fn fold_seeds(seed: u64, fold: usize) -> FoldSeeds {
    let f = fold as u64;
    FoldSeeds {
        init: derive_seed(seed, &[stream::INIT, f]),
        validation: derive_seed(seed, &[stream::VALIDATION, f]),
        shuffle: derive_seed(seed, &[stream::SHUFFLE, f]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prob: f64,
    pub predicted: u8,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seeds: FoldSeeds,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub predictions: Vec<Prediction>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub model: Option<Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: DatasetKey,
    pub model: ModelKind,
    pub k: usize,
    pub seed: u64,
    pub records: usize,
    pub records_digest: String,
    pub fold_plan_digest: String,
    pub config: ExperimentConfig,
    pub architecture: Architecture,
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Folds trained concurrently.
    pub jobs: usize,
    /// Keep the trained model of each fold in the result.
    pub keep_models: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            jobs: 1,
            keep_models: true,
        }
    }
}

fn run_fold(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    dataset: &Dataset,
    encoded: &[EncodedRecord],
    labels: &[u8],
    plan: &FoldPlan,
    fold: usize,
    keep_model: bool,
) -> Result<FoldResult, TrainError> {
    let start = Instant::now();
    let seeds = fold_seeds(cfg.seed, fold);
    let train_all = plan.train_indices(fold);
    let (train_idx, val_idx) = stratified_holdout(&train_all, labels, cfg.train.validation_fraction, seeds.validation);
    let test_idx = plan.test_indices(fold);
    let mut model = Model::build(arch, seeds.init)?;
    let outcome = train(&mut model, encoded, &train_idx, &val_idx, &cfg.train, seeds.shuffle)?;
    let (confusion, probs) = evaluate(&model, encoded, &test_idx, cfg.train.threshold)?;
    let predictions = test_idx
        .iter()
        .zip(&probs)
        .map(|(&i, &p)| Prediction {
            id: dataset.records[i].id.clone(),
            prob: p,
            predicted: predict(p, cfg.train.threshold),
            label: encoded[i].label,
        })
        .collect();
    log::info!(
        "{} {} fold {fold}: mcc {:.4} (best epoch {})",
        cfg.dataset,
        cfg.model,
        confusion.compute()?.mcc,
        outcome.best_epoch
    );
    Ok(FoldResult {
        fold,
        seeds,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        test_size: test_idx.len(),
        confusion,
        metrics: confusion.compute()?,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        predictions,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        model: keep_model.then_some(model),
    })
}

/// Runs k-fold cross-validation of the configured model on `dataset`.
///
/// With `plan` given it must match the dataset records; otherwise a
/// stratified plan is built from the experiment seed. Folds are trained
/// independently, so results do not depend on `opts.jobs`.
pub fn cross_validate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    plan: Option<&FoldPlan>,
    opts: &RunOptions,
) -> Result<(ExperimentResult, FoldPlan), TrainError> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    if arch.seq_len() != dataset.bp {
        return Err(ModelError::LengthMismatch {
            expected: arch.seq_len(),
            found: dataset.bp,
        }
        .into());
    }
    let plan = match plan {
        Some(p) => {
            p.check_records(&dataset.records)?;
            if p.k != cfg.k {
                return Err(ConfigError::new("k", format!("{} differs from the imported fold plan's k = {}", cfg.k, p.k)).into());
            }
            p.clone()
        }
        None => stratified_kfold(&dataset.records, cfg.k, cfg.seed)?,
    };
    let encoded = dataset.encode()?;
    let labels = dataset.labels();
    let run = |fold: usize| {
        run_fold(cfg, &arch, dataset, &encoded, &labels, &plan, fold, opts.keep_models).map_err(|e| TrainError::Fold {
            fold,
            source: Box::new(e),
        })
    };
    let folds: Vec<FoldResult> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| TrainError::Output {
                path: String::new(),
                msg: format!("thread pool: {e}"),
            })?;
        pool.install(|| (0..plan.k).into_par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        (0..plan.k).map(run).collect::<Result<_, _>>()?
    };
    let per_fold: Vec<FoldMetrics> = folds
        .iter()
        .map(|f| FoldMetrics {
            fold: f.fold,
            confusion: f.confusion,
            metrics: f.metrics,
        })
        .collect();
    let report = aggregate(&per_fold)?;
    let result = ExperimentResult {
        dataset: cfg.dataset,
        model: cfg.model,
        k: plan.k,
        seed: cfg.seed,
        records: dataset.len(),
        records_digest: dataset.digest(),
        fold_plan_digest: plan.digest(),
        config: cfg.clone(),
        architecture: arch,
        folds,
        report,
    };
    Ok((result, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_minimal_file() {
        let cfg = ExperimentConfig::from_toml_str("dataset = \"bacillus\"\nmodel = \"capsprom\"\n").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.train, TrainConfig::default());
        match cfg.architecture().unwrap() {
            Architecture::CapsProm { config, .. } => assert_eq!(config.num_primary_capsules(), 1056),
            _ => panic!(),
        }
    }

    #[test]
    fn capsprom_section_takes_dataset_length() {
        let text = "dataset = \"arabidopsis_tata\"\nmodel = \"capsprom\"\n[capsprom]\nrouting_iters = 2\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let c = cfg.capsprom.unwrap();
        assert_eq!((c.seq_len, c.routing_iters), (251, 2));
        let bad = "dataset = \"bacillus\"\nmodel = \"capsprom\"\n[capsprom]\nseq_len = 251\n";
        let err = ExperimentConfig::from_toml_str(bad).unwrap_err();
        assert_eq!(err.path, "capsprom.seq_len");
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = ExperimentConfig::from_toml_str("dataset = \"bacillus\"\nmodel = \"cnnprom\"\n[train]\nbatch_size = \"x\"\n")
            .unwrap_err();
        assert_eq!(err.path, "train.batch_size");
        let err = ExperimentConfig::from_toml_str("dataset = \"bacillus\"\nmodel = \"cnnprom\"\n[train]\nbogus = 1\n")
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err =
            ExperimentConfig::from_toml_str("dataset = \"bacillus\"\nmodel = \"cnnprom\"\n[train]\npatience = 40\n").unwrap_err();
        assert_eq!(err.path, "train.patience");
        let err = ExperimentConfig::from_toml_str("dataset = \"yeast\"\nmodel = \"cnnprom\"\n").unwrap_err();
        assert_eq!(err.path, "dataset");
    }

    #[test]
    fn cnnprom_rejects_capsprom_keys() {
        let text = "dataset = \"bacillus\"\nmodel = \"cnnprom\"\n[capsprom]\nrouting_iters = 2\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert_eq!(err.path, "capsprom");
        let text = "dataset = \"bacillus\"\nmodel = \"cnnprom\"\n[margin_loss]\nm_plus = 0.8\n";
        assert_eq!(ExperimentConfig::from_toml_str(text).unwrap_err().path, "margin_loss");
    }

    #[test]
    fn invalid_model_settings_are_located() {
        let text = "dataset = \"bacillus\"\nmodel = \"capsprom\"\n[capsprom]\ncapsule_dim = 7\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert_eq!(err.path, "capsprom.primary_filters");
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::new(DatasetKey::Ecoli, ModelKind::CnnProm);
        cfg.seed = 11;
        cfg.data.subsample = Some(500);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn fold_seeds_differ() {
        let a = fold_seeds(1, 0);
        let b = fold_seeds(1, 1);
        assert_ne!(a, b);
        assert_ne!(a.init, a.shuffle);
        assert_eq!(a, fold_seeds(1, 0));
    }
}
