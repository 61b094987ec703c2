//! Stratified k-fold partitions and their on-disk form.
//!
//! Records of each class are shuffled with the plan seed and dealt to folds
//! round-robin. The deal continues across classes (positives first), so fold
//! sizes differ by at most one and each fold's per-class count differs from
//! the even share by at most one.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, SequenceRecord};
use crate::seed::{rng_for, stream};

pub const FOLD_PLAN_FORMAT: &str = "capsprom-fold-plan";
pub const FOLD_PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub seed: u64,
    /// Digest of the record list the plan was made for.
    pub records_digest: String,
    /// Fold index of each record, in record order.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Order-sensitive digest of `(id, label, sequence)` for every record.
pub fn records_digest(records: &[SequenceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0, r.label.as_u8(), 0]);
        h.update(r.sequence.as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

/// Stratified plan over `records`; a pure function of record order, `k`
/// and `seed`.
pub fn stratified_kfold(records: &[SequenceRecord], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    let labels: Vec<u8> = records.iter().map(|r| r.label.as_u8()).collect();
    let assignments = stratified_assignments(&labels, k, seed)?;
    Ok(FoldPlan {
        format: FOLD_PLAN_FORMAT.into(),
        version: FOLD_PLAN_VERSION,
        k,
        seed,
        records_digest: records_digest(records),
        assignments,
    })
}

pub fn stratified_assignments(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if k < 2 {
        return Err(DataError::TooFewSamples(format!("k must be at least 2, got {k}")));
    }
    let mut rng = rng_for(seed, &[stream::FOLDS]);
    let mut assignments = vec![usize::MAX; labels.len()];
    let mut offset = 0;
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(DataError::TooFewSamples(format!(
                "class {class} has {} samples, fewer than k = {k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            assignments[i] = offset % k;
            offset += 1;
        }
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(DataError::TooFewSamples(format!("unexpected label {bad}")));
    }
    Ok(assignments)
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn indices(&self, fold: usize, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train_indices(fold),
            Split::Test => self.test_indices(fold),
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Digest over `k`, `seed`, the records digest and every assignment.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(self.records_digest.as_bytes());
        for &a in &self.assignments {
            h.update((a as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Errors unless the plan was made for exactly these records.
    pub fn check_records(&self, records: &[SequenceRecord]) -> Result<(), DataError> {
        if records.len() != self.len() || records_digest(records) != self.records_digest {
            return Err(DataError::FoldPlanMismatch(format!(
                "plan covers {} records with digest {}, dataset has {} records",
                self.len(),
                &self.records_digest[..12.min(self.records_digest.len())],
                records.len()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.format != FOLD_PLAN_FORMAT || self.version != FOLD_PLAN_VERSION {
            return Err(DataError::FoldPlanMismatch(format!(
                "unsupported fold plan format {} v{}",
                self.format, self.version
            )));
        }
        if self.k < 2 || self.assignments.iter().any(|&a| a >= self.k) {
            return Err(DataError::FoldPlanMismatch("fold index out of range".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&FoldPlanFile {
            plan: self.clone(),
            digest: self.digest(),
        })
        .expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: FoldPlanFile =
            serde_json::from_str(text).map_err(|e| DataError::FoldPlanMismatch(format!("unreadable fold plan: {e}")))?;
        file.plan.validate()?;
        if file.plan.digest() != file.digest {
            return Err(DataError::FoldPlanMismatch("fold plan digest does not match its contents".into()));
        }
        Ok(file.plan)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct FoldPlanFile {
    #[serde(flatten)]
    plan: FoldPlan,
    digest: String,
}

/// Stratified holdout of `fraction` of `indices` (per class, rounded), e.g.
/// the validation subset carved from a training partition. Returns
/// `(kept, held_out)`, both sorted.
pub fn stratified_holdout(indices: &[usize], labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, &[stream::VALIDATION]);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_held = ((idx.len() as f64) * fraction).round() as usize;
        held.extend_from_slice(&idx[..n_held.min(idx.len())]);
        kept.extend_from_slice(&idx[n_held.min(idx.len())..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn recs(pos: usize, neg: usize) -> Vec<SequenceRecord> {
        (0..pos + neg)
            .map(|i| SequenceRecord {
                id: format!("r{i}"),
                sequence: "ACGT".into(),
                label: if i < pos { Label::Promoter } else { Label::NonPromoter },
                dataset: "toy".into(),
            })
            .collect()
    }

    #[test]
    fn perfect_stratification() {
        let r = recs(5, 5);
        let plan = stratified_kfold(&r, 5, 1).unwrap();
        for f in 0..5 {
            let t = plan.test_indices(f);
            assert_eq!(t.len(), 2);
            assert_eq!(t.iter().filter(|&&i| r[i].label == Label::Promoter).count(), 1);
        }
    }

    #[test]
    fn deterministic() {
        let r = recs(30, 70);
        assert_eq!(stratified_kfold(&r, 5, 9).unwrap(), stratified_kfold(&r, 5, 9).unwrap());
        assert_ne!(
            stratified_kfold(&r, 5, 9).unwrap().assignments,
            stratified_kfold(&r, 5, 10).unwrap().assignments
        );
    }

    #[test]
    fn bacillus_sized_folds() {
        let r = recs(373, 1000);
        let plan = stratified_kfold(&r, 5, 42).unwrap();
        for f in 0..5 {
            let t = plan.test_indices(f);
            assert!(t.len() == 274 || t.len() == 275, "{}", t.len());
            let pos = t.iter().filter(|&&i| r[i].label == Label::Promoter).count();
            assert!(pos == 74 || pos == 75, "{pos}");
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(stratified_kfold(&recs(4, 10), 5, 0), Err(DataError::TooFewSamples(_))));
        assert!(stratified_kfold(&recs(4, 10), 1, 0).is_err());
    }

    #[test]
    fn json_round_trip_and_tamper() {
        let r = recs(12, 20);
        let plan = stratified_kfold(&r, 4, 3).unwrap();
        let text = plan.to_json();
        assert_eq!(FoldPlan::from_json(&text).unwrap(), plan);
        plan.check_records(&r).unwrap();
        assert!(plan.check_records(&recs(12, 21)).is_err());
        let tampered = text.replacen("\"assignments\": [\n    0", "\"assignments\": [\n    1", 1);
        if tampered != text {
            assert!(FoldPlan::from_json(&tampered).is_err());
        }
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 4 == 0)).collect();
        let idx: Vec<usize> = (0..200).collect();
        let (kept, held) = stratified_holdout(&idx, &labels, 0.1, 5);
        assert_eq!(kept.len() + held.len(), 200);
        assert_eq!(held.len(), 20);
        assert_eq!(held.iter().filter(|&&i| labels[i] == 1).count(), 5);
        assert!(kept.iter().all(|i| !held.contains(i)));
    }
}
