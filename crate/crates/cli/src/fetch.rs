//! Dataset download and offline import.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use capsprom_core::data::registry::{file_sha256, sha256_hex, MANIFEST_FILE};
use capsprom_core::data::{parse_fasta, DataError, DatasetKey, DatasetManifest, SourceFile};

use crate::error::{io_error, CliError};

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub out: PathBuf,
    pub offline: Option<PathBuf>,
    pub force: bool,
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileStatus {
    Present,
    Fetched,
}

#[derive(Debug, Clone)]
pub struct FetchedFile {
    pub dataset: DatasetKey,
    pub file: String,
    pub sha256: String,
    pub records: usize,
    pub status: FileStatus,
}

fn download(url: &str) -> Result<Vec<u8>, CliError> {
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
    let resp = agent
        .get(url)
        .call()
        .map_err(|e| CliError::data(format!("download {url}: {e}")))?;
    let mut buf = Vec::new();
    resp.into_reader()
        .read_to_end(&mut buf)
        .map_err(|e| CliError::data(format!("download {url}: {e}")))?;
    Ok(buf)
}

fn obtain(src: &str, opts: &FetchOptions, base_url: &str) -> Result<Vec<u8>, CliError> {
    match &opts.offline {
        Some(dir) => {
            let p = dir.join(src);
            std::fs::read(&p).map_err(|e| io_error(&p, e))
        }
        None => download(&format!("{}/{src}", base_url.trim_end_matches('/'))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn check_digest(src: &SourceFile, found: &str) -> Result<(), CliError> {
    match &src.sha256 {
        Some(expected) if expected != found => Err(DataError::DigestMismatch {
            file: src.file.clone(),
            expected: expected.clone(),
            found: found.to_string(),
        }
        .into()),
        _ => Ok(()),
    }
}

/// Brings the files of `keys` into `opts.out`, verifying any digest already
/// pinned in the manifest there and recording digests of new files.
///
/// Files already present with a matching digest are left alone unless
/// `force` is set.
pub fn fetch(keys: &[DatasetKey], opts: &FetchOptions) -> Result<Vec<FetchedFile>, CliError> {
    std::fs::create_dir_all(&opts.out).map_err(|e| io_error(&opts.out, e))?;
    let manifest_path = opts.out.join(MANIFEST_FILE);
    let mut manifest = DatasetManifest::load_or_default(&opts.out)?;
    let base_url = opts.base_url.clone().unwrap_or_else(|| manifest.base_url.clone());
    let before = manifest.clone();
    let mut report = Vec::new();
    for &key in keys {
        let mut entry = manifest.entry(key);
        for src in [&mut entry.positive, &mut entry.negative] {
            let path = opts.out.join(&src.file);
            let status = if path.exists() && !opts.force {
                let found = file_sha256(&path)?;
                check_digest(src, &found)?;
                src.sha256 = Some(found);
                FileStatus::Present
            } else {
                let bytes = obtain(&src.file, opts, &base_url)?;
                let found = sha256_hex(&bytes);
                check_digest(src, &found)?;
                write_atomic(&path, &bytes)?;
                src.sha256 = Some(found);
                FileStatus::Fetched
            };
            let records = parse_fasta(&path)?.len();
            if records != src.expected {
                log::warn!("{}: {records} records, expected {}", src.file, src.expected);
            }
            report.push(FetchedFile {
                dataset: key,
                file: src.file.clone(),
                sha256: src.sha256.clone().unwrap_or_default(),
                records,
                status,
            });
        }
        manifest.datasets.insert(key, entry);
    }
    if manifest != before || !manifest_path.exists() {
        manifest.save(&manifest_path)?;
    }
    Ok(report)
}
