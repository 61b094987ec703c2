//! Dataset ingestion, validation, fold planning and batching.

mod batches;
pub mod fasta;
pub mod folds;
pub mod registry;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{batch_indices, batches, Batches};
pub use fasta::{parse_fasta, read_fasta, write_fasta, FastaRecord};
pub use folds::{stratified_holdout, stratified_kfold, FoldPlan, Split};
pub use registry::{DatasetInfo, DatasetKey, DatasetManifest, ManifestEntry, Organism, SourceFile};

use crate::encode::{tokenize, InvalidSymbol};
use crate::seed::{rng_for, stream};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "CAPSPROM_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed FASTA{} at line {line}: {msg}", .path.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    Malformed {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },
    #[error("record {id:?} (header at line {line}) has an empty sequence")]
    EmptySequence { id: String, line: usize },
    #[error("unknown dataset {key:?}; valid keys: {valid}")]
    UnknownDataset { key: String, valid: String },
    #[error("record {id:?} has length {found}, expected {expected}")]
    LengthMismatch { id: String, expected: usize, found: usize },
    #[error("record {id:?}: {source}")]
    InvalidSymbol {
        id: String,
        #[source]
        source: InvalidSymbol,
    },
    #[error("{file}: found {found} records, expected {expected}")]
    CountMismatch {
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("{file}: digest mismatch (expected {expected}, found {found})")]
    DigestMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("fold plan: {0}")]
    FoldPlanMismatch(String),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn with_path(self, p: &Path) -> Self {
        match self {
            DataError::Malformed { line, msg, .. } => DataError::Malformed {
                path: Some(p.to_path_buf()),
                line,
                msg,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonPromoter,
    Promoter,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonPromoter => 0,
            Label::Promoter => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::NonPromoter),
            1 => Some(Label::Promoter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub sequence: String,
    pub label: Label,
    pub dataset: String,
}

/// A record reduced to what the models consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub tokens: Vec<u8>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub key: String,
    pub bp: usize,
    pub records: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label.as_u8()).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == Label::Promoter).count();
        (pos, self.records.len() - pos)
    }

    /// Tokenizes every record; records were validated at load time.
    pub fn encode(&self) -> Result<Vec<EncodedRecord>, DataError> {
        self.records
            .iter()
            .map(|r| {
                Ok(EncodedRecord {
                    tokens: tokenize(&r.sequence).map_err(|source| DataError::InvalidSymbol {
                        id: r.id.clone(),
                        source,
                    })?,
                    label: r.label.as_u8(),
                })
            })
            .collect()
    }

    pub fn digest(&self) -> String {
        folds::records_digest(&self.records)
    }

    /// Stratified random subset of about `n` records, original order kept.
    pub fn stratified_subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let labels = self.labels();
        let all: Vec<usize> = (0..self.len()).collect();
        let fraction = n as f64 / self.len() as f64;
        let mut rng = rng_for(seed, &[stream::SUBSAMPLE]);
        let mut keep = Vec::with_capacity(n);
        for class in [1u8, 0u8] {
            let mut idx: Vec<usize> = all.iter().copied().filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let take = ((idx.len() as f64) * fraction).round() as usize;
            keep.extend_from_slice(&idx[..take.min(idx.len())]);
        }
        keep.sort_unstable();
        Dataset {
            key: self.key.clone(),
            bp: self.bp,
            records: keep.into_iter().map(|i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    /// Treat record counts that differ from the manifest as errors.
    pub strict_counts: bool,
    /// Drop records with symbols outside ACGT instead of failing.
    pub drop_invalid: bool,
}

/// Validates raw FASTA records of one class.
pub fn build_records(
    raw: Vec<FastaRecord>,
    label: Label,
    dataset: &str,
    bp: usize,
    opts: &LoadOptions,
) -> Result<(Vec<SequenceRecord>, usize), DataError> {
    let mut out = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for r in raw {
        let sequence = r.sequence.to_ascii_uppercase();
        if let Err(source) = tokenize(&sequence) {
            if opts.drop_invalid {
                dropped += 1;
                continue;
            }
            return Err(DataError::InvalidSymbol { id: r.id, source });
        }
        if sequence.len() != bp {
            return Err(DataError::LengthMismatch {
                id: r.id,
                expected: bp,
                found: sequence.len(),
            });
        }
        out.push(SequenceRecord {
            id: r.id,
            sequence,
            label,
            dataset: dataset.to_string(),
        });
    }
    Ok((out, dropped))
}

/// Loads one dataset from `dir`, using `dir/manifest.toml` when present and
/// the reference registry otherwise. Positives come first, then negatives,
/// each in file order.
pub fn load_dataset(key: DatasetKey, dir: &Path, opts: &LoadOptions) -> Result<Dataset, DataError> {
    let manifest = DatasetManifest::load_or_default(dir)?;
    let entry = manifest.entry(key);
    let mut records = Vec::new();
    for (label, src) in [(Label::Promoter, &entry.positive), (Label::NonPromoter, &entry.negative)] {
        let path = dir.join(&src.file);
        if let Some(expected) = &src.sha256 {
            let found = registry::file_sha256(&path)?;
            if &found != expected {
                return Err(DataError::DigestMismatch {
                    file: src.file.clone(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        let raw = parse_fasta(&path)?;
        let (recs, dropped) = build_records(raw, label, key.as_str(), entry.bp, opts)?;
        if dropped > 0 {
            log::warn!("{}: dropped {dropped} records with symbols outside ACGT", src.file);
        }
        if recs.len() != src.expected {
            let err = DataError::CountMismatch {
                file: src.file.clone(),
                expected: src.expected,
                found: recs.len(),
            };
            if opts.strict_counts {
                return Err(err);
            }
            log::warn!("{err}");
        }
        records.extend(recs);
    }
    Ok(Dataset {
        key: key.as_str().to_string(),
        bp: entry.bp,
        records,
    })
}

/// Default data directory: `$CAPSPROM_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn toy_manifest(dir: &Path, pos: usize, neg: usize) {
        let mut m = DatasetManifest::default();
        m.datasets.insert(
            DatasetKey::Bacillus,
            ManifestEntry {
                bp: 8,
                positive: SourceFile {
                    file: "p.fa".into(),
                    expected: pos,
                    sha256: None,
                },
                negative: SourceFile {
                    file: "n.fa".into(),
                    expected: neg,
                    sha256: None,
                },
            },
        );
        m.save(&dir.join(registry::MANIFEST_FILE)).unwrap();
    }

    #[test]
    fn load_with_manifest() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "p.fa", ">p1\nACGTACGT\n>p2\nacgtacgt\n");
        write(d.path(), "n.fa", ">n1\nTTTTAAAA\n");
        toy_manifest(d.path(), 2, 1);
        let ds = load_dataset(DatasetKey::Bacillus, d.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_counts(), (2, 1));
        assert_eq!(ds.records[1].sequence, "ACGTACGT");
        assert_eq!(ds.records[2].label, Label::NonPromoter);
    }

    #[test]
    fn wrong_length_names_record() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "p.fa", ">p1\nACGTACGT\n>short\nACG\n");
        write(d.path(), "n.fa", ">n1\nTTTTAAAA\n");
        toy_manifest(d.path(), 2, 1);
        let err = load_dataset(DatasetKey::Bacillus, d.path(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::LengthMismatch { ref id, .. } if id == "short"), "{err}");
    }

    #[test]
    fn count_mismatch_warns_or_fails() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "p.fa", ">p1\nACGTACGT\n");
        write(d.path(), "n.fa", ">n1\nTTTTAAAA\n");
        toy_manifest(d.path(), 5, 1);
        assert!(load_dataset(DatasetKey::Bacillus, d.path(), &LoadOptions::default()).is_ok());
        let strict = LoadOptions {
            strict_counts: true,
            ..Default::default()
        };
        assert!(matches!(
            load_dataset(DatasetKey::Bacillus, d.path(), &strict),
            Err(DataError::CountMismatch { expected: 5, found: 1, .. })
        ));
    }

    #[test]
    fn invalid_symbols_rejected_or_dropped() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "p.fa", ">p1\nACGTACGT\n>bad\nACGTNCGT\n");
        write(d.path(), "n.fa", ">n1\nTTTTAAAA\n");
        toy_manifest(d.path(), 1, 1);
        assert!(matches!(
            load_dataset(DatasetKey::Bacillus, d.path(), &LoadOptions::default()),
            Err(DataError::InvalidSymbol { .. })
        ));
        let lenient = LoadOptions {
            drop_invalid: true,
            ..Default::default()
        };
        let ds = load_dataset(DatasetKey::Bacillus, d.path(), &lenient).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn digest_is_checked() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "p.fa", ">p1\nACGTACGT\n");
        write(d.path(), "n.fa", ">n1\nTTTTAAAA\n");
        toy_manifest(d.path(), 1, 1);
        let mp = d.path().join(registry::MANIFEST_FILE);
        let mut m = DatasetManifest::load(&mp).unwrap();
        m.datasets.get_mut(&DatasetKey::Bacillus).unwrap().positive.sha256 = Some("00".into());
        m.save(&mp).unwrap();
        assert!(matches!(
            load_dataset(DatasetKey::Bacillus, d.path(), &LoadOptions::default()),
            Err(DataError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn subsample_keeps_ratio() {
        let records = (0..1000)
            .map(|i| SequenceRecord {
                id: i.to_string(),
                sequence: "A".into(),
                label: if i % 4 == 0 { Label::Promoter } else { Label::NonPromoter },
                dataset: "x".into(),
            })
            .collect();
        let ds = Dataset {
            key: "x".into(),
            bp: 1,
            records,
        };
        let sub = ds.stratified_subsample(200, 1);
        assert_eq!(sub.len(), 200);
        assert_eq!(sub.class_counts(), (50, 150));
        assert_eq!(sub, ds.stratified_subsample(200, 1));
    }
}
