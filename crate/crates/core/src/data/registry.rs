//! The seven promoter datasets and the on-disk manifest that describes them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

pub const UPSTREAM_BASE_URL: &str = "https://raw.githubusercontent.com/solovictor/CNNPromoterData/master";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKey {
    ArabidopsisNonTata,
    ArabidopsisTata,
    Bacillus,
    Ecoli,
    HumanNonTata,
    MouseNonTata,
    MouseTata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organism {
    Prokaryotic,
    Eukaryotic,
}

/// Reference characteristics of one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetInfo {
    pub key: DatasetKey,
    pub name: &'static str,
    pub negatives: usize,
    pub positives: usize,
    pub bp: usize,
    pub organism: Organism,
    pub positive_file: &'static str,
    pub negative_file: &'static str,
}

impl DatasetInfo {
    pub fn total(&self) -> usize {
        self.positives + self.negatives
    }
}

const REGISTRY: [DatasetInfo; 7] = [
    DatasetInfo {
        key: DatasetKey::ArabidopsisNonTata,
        name: "Arabidopsis non-TATA",
        negatives: 11459,
        positives: 5905,
        bp: 251,
        organism: Organism::Eukaryotic,
        positive_file: "Arabidopsis_non_tata.fa",
        negative_file: "Arabidopsis_non_prom_big.fa",
    },
    DatasetInfo {
        key: DatasetKey::ArabidopsisTata,
        name: "Arabidopsis TATA",
        negatives: 2879,
        positives: 1497,
        bp: 251,
        organism: Organism::Eukaryotic,
        positive_file: "Arabidopsis_tata.fa",
        negative_file: "Arabidopsis_non_prom.fa",
    },
    DatasetInfo {
        key: DatasetKey::Bacillus,
        name: "Bacillus subtilis",
        negatives: 1000,
        positives: 373,
        bp: 81,
        organism: Organism::Prokaryotic,
        positive_file: "Bacillus_prom.fa",
        negative_file: "Bacillus_non_prom.fa",
    },
    DatasetInfo {
        key: DatasetKey::Ecoli,
        name: "Escherichia coli s70",
        negatives: 3000,
        positives: 839,
        bp: 81,
        organism: Organism::Prokaryotic,
        positive_file: "Ecoli_prom.fa",
        negative_file: "Ecoli_non_prom.fa",
    },
    DatasetInfo {
        key: DatasetKey::HumanNonTata,
        name: "Human non-TATA",
        negatives: 27731,
        positives: 19811,
        bp: 251,
        organism: Organism::Eukaryotic,
        positive_file: "human_non_tata.fa",
        negative_file: "human_nonprom_big.fa",
    },
    DatasetInfo {
        key: DatasetKey::MouseNonTata,
        name: "Mouse non-TATA",
        negatives: 24822,
        positives: 16283,
        bp: 251,
        organism: Organism::Eukaryotic,
        positive_file: "Mouse_non_tata.fa",
        negative_file: "Mouse_nonprom.fa",
    },
    DatasetInfo {
        key: DatasetKey::MouseTata,
        name: "Mouse TATA",
        negatives: 3530,
        positives: 1255,
        bp: 251,
        organism: Organism::Eukaryotic,
        positive_file: "Mouse_tata.fa",
        negative_file: "Mouse_tata_non_prom.fa",
    },
];

impl DatasetKey {
    pub const ALL: [DatasetKey; 7] = [
        DatasetKey::ArabidopsisNonTata,
        DatasetKey::ArabidopsisTata,
        DatasetKey::Bacillus,
        DatasetKey::Ecoli,
        DatasetKey::HumanNonTata,
        DatasetKey::MouseNonTata,
        DatasetKey::MouseTata,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKey::ArabidopsisNonTata => "arabidopsis_non_tata",
            DatasetKey::ArabidopsisTata => "arabidopsis_tata",
            DatasetKey::Bacillus => "bacillus",
            DatasetKey::Ecoli => "ecoli",
            DatasetKey::HumanNonTata => "human_non_tata",
            DatasetKey::MouseNonTata => "mouse_non_tata",
            DatasetKey::MouseTata => "mouse_tata",
        }
    }

    pub fn info(self) -> &'static DatasetInfo {
        REGISTRY.iter().find(|d| d.key == self).expect("every key registered")
    }

    pub fn valid_keys() -> String {
        Self::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for DatasetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKey {
    type Err = DataError;

    /// Accepts the snake_case key or the display name in any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let alias = match norm.as_str() {
            "bacillus_subtilis" => "bacillus",
            "escherichia_coli_s70" | "e_coli" | "ecoli_s70" => "ecoli",
            other => other,
        };
        DatasetKey::ALL
            .into_iter()
            .find(|k| k.as_str() == alias)
            .ok_or_else(|| DataError::UnknownDataset {
                key: s.to_string(),
                valid: DatasetKey::valid_keys(),
            })
    }
}

pub fn registry() -> &'static [DatasetInfo] {
    &REGISTRY
}

/// One FASTA source file of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceFile {
    pub file: String,
    pub expected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub bp: usize,
    pub positive: SourceFile,
    pub negative: SourceFile,
}

/// `manifest.toml` in a data directory: dataset key to files, expected
/// counts and content digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    pub datasets: BTreeMap<DatasetKey, ManifestEntry>,
}

fn default_base_url() -> String {
    UPSTREAM_BASE_URL.to_string()
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            base_url: default_base_url(),
            datasets: BTreeMap::new(),
        }
    }
}

impl DatasetManifest {
    /// Entry built from the reference registry, without digests.
    pub fn reference_entry(key: DatasetKey) -> ManifestEntry {
        let info = key.info();
        ManifestEntry {
            bp: info.bp,
            positive: SourceFile {
                file: info.positive_file.into(),
                expected: info.positives,
                sha256: None,
            },
            negative: SourceFile {
                file: info.negative_file.into(),
                expected: info.negatives,
                sha256: None,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    /// Manifest in `dir`, or an empty one when the directory has none.
    pub fn load_or_default(dir: &Path) -> Result<Self, DataError> {
        let p = dir.join(MANIFEST_FILE);
        if p.exists() {
            Self::load(&p)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = toml::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }

    pub fn entry(&self, key: DatasetKey) -> ManifestEntry {
        self.datasets
            .get(&key)
            .cloned()
            .unwrap_or_else(|| Self::reference_entry(key))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
