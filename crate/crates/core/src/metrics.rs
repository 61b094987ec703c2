//! Confusion matrices, the six evaluation metrics and per-fold aggregation.
//!
//! Ratios whose denominator is zero report `0.0` and set the matching flag in
//! [`UndefinedFlags`] so the condition is visible in CSV output.
//!
//! The Matthews coefficient uses the standard numerator `TP·TN − FP·FN`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("cannot aggregate an empty list of reports")]
    EmptyList,
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Result<Self, MetricsError> {
        let mut cm = Self::new();
        for (pred, actual) in pairs {
            cm.accumulate(pred, actual)?;
        }
        Ok(cm)
    }

    /// Counts one `(predicted, actual)` outcome.
    pub fn accumulate(&mut self, predicted: u8, actual: u8) -> Result<(), MetricsError> {
        let slot = match (predicted, actual) {
            (1, 1) => &mut self.tp,
            (0, 0) => &mut self.tn,
            (1, 0) => &mut self.fp,
            (0, 1) => &mut self.fn_,
            (p, a) => return Err(MetricsError::InvalidLabel(if p > 1 { p } else { a })),
        };
        *slot += 1;
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Same outcomes with the positive and negative classes exchanged.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }

    pub fn compute(&self) -> Result<Metrics, MetricsError> {
        compute(self)
    }
}

/// Which metrics hit a zero denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub prec: bool,
    pub sn: bool,
    pub f1: bool,
    pub sp: bool,
    pub mcc: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.prec || self.sn || self.f1 || self.sp || self.mcc
    }

    /// Pipe-separated list of undefined metric names, empty when none.
    pub fn describe(&self) -> String {
        [
            (self.prec, "prec"),
            (self.sn, "sn"),
            (self.f1, "f1"),
            (self.sp, "sp"),
            (self.mcc, "mcc"),
        ]
        .iter()
        .filter(|(set, _)| *set)
        .map(|(_, n)| *n)
        .collect::<Vec<_>>()
        .join("|")
    }

    pub fn union(&self, o: &UndefinedFlags) -> UndefinedFlags {
        UndefinedFlags {
            prec: self.prec || o.prec,
            sn: self.sn || o.sn,
            f1: self.f1 || o.f1,
            sp: self.sp || o.sp,
            mcc: self.mcc || o.mcc,
        }
    }
}

pub const METRIC_NAMES: [&str; 6] = ["prec", "sn", "f1", "sp", "acc", "mcc"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub prec: f64,
    pub sn: f64,
    pub f1: f64,
    pub sp: f64,
    pub acc: f64,
    pub mcc: f64,
    #[serde(default)]
    pub undefined: UndefinedFlags,
}

impl Metrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 6] {
        [self.prec, self.sn, self.f1, self.sp, self.acc, self.mcc]
    }

    pub fn from_values(v: [f64; 6], undefined: UndefinedFlags) -> Self {
        Metrics {
            prec: v[0],
            sn: v[1],
            f1: v[2],
            sp: v[3],
            acc: v[4],
            mcc: v[5],
            undefined,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

const LOG_SPACE_THRESHOLD: u64 = 1 << 52;

fn mcc_denominator(factors: [u64; 4]) -> f64 {
    if factors.iter().any(|&f| f > LOG_SPACE_THRESHOLD) {
        let log_sum: f64 = factors.iter().map(|&f| (f as f64).ln()).sum();
        (0.5 * log_sum).exp()
    } else {
        factors.iter().map(|&f| f as f64).product::<f64>().sqrt()
    }
}

pub fn compute(cm: &ConfusionMatrix) -> Result<Metrics, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let &ConfusionMatrix { tp, tn, fp, fn_ } = cm;
    let mut undefined = UndefinedFlags::default();
    let (prec, u) = ratio(tp, tp + fp);
    undefined.prec = u;
    let (sn, u) = ratio(tp, tp + fn_);
    undefined.sn = u;
    let (sp, u) = ratio(tn, tn + fp);
    undefined.sp = u;
    let (acc, _) = ratio(tp + tn, cm.total());
    let f1 = if prec + sn > 0.0 {
        2.0 * prec * sn / (prec + sn)
    } else {
        // harmonic mean of two zeros; defined as 0 unless nothing was positive
        undefined.f1 = 2 * tp + fp + fn_ == 0;
        0.0
    };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.contains(&0) {
        undefined.mcc = true;
        0.0
    } else {
        let num = i128::from(tp) * i128::from(tn) - i128::from(fp) * i128::from(fn_);
        (num as f64 / mcc_denominator(factors)).clamp(-1.0, 1.0)
    };
    Ok(Metrics {
        prec,
        sn,
        f1,
        sp,
        acc,
        mcc,
        undefined,
    })
}

/// Metrics of one fold together with its counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Per-fold metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub mean: Metrics,
    pub sd: Metrics,
}

impl MetricsReport {
    pub fn total_confusion(&self) -> ConfusionMatrix {
        self.per_fold
            .iter()
            .fold(ConfusionMatrix::new(), |acc, f| acc.merge(&f.confusion))
    }
}

pub fn aggregate(per_fold: &[FoldMetrics]) -> Result<MetricsReport, MetricsError> {
    if per_fold.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = per_fold.len() as f64;
    let mut mean = [0.0; 6];
    let mut undefined = UndefinedFlags::default();
    for f in per_fold {
        for (m, v) in mean.iter_mut().zip(f.metrics.values()) {
            *m += v;
        }
        undefined = undefined.union(&f.metrics.undefined);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = [0.0; 6];
    if per_fold.len() > 1 {
        for f in per_fold {
            for ((s, v), m) in sd.iter_mut().zip(f.metrics.values()).zip(mean) {
                *s += (v - m) * (v - m);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    Ok(MetricsReport {
        per_fold: per_fold.to_vec(),
        mean: Metrics::from_values(mean, undefined),
        sd: Metrics::from_values(sd, UndefinedFlags::default()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    #[test]
    fn accumulate_examples() {
        let mut m = ConfusionMatrix::new();
        m.accumulate(1, 1).unwrap();
        assert_eq!(m, cm(1, 0, 0, 0));
        m.accumulate(1, 0).unwrap();
        assert_eq!(m.fp, 1);
        m.accumulate(0, 1).unwrap();
        assert_eq!(m.fn_, 1);
        m.accumulate(0, 0).unwrap();
        assert_eq!(m.total(), 4);
        assert!(m.accumulate(2, 0).is_err());
    }

    #[test]
    fn perfect_classifier() {
        let m = cm(10, 10, 0, 0).compute().unwrap();
        assert_eq!(m.values(), [1.0; 6]);
        assert!(!m.undefined.any());
    }

    #[test]
    fn hand_evaluated_case() {
        let m = cm(50, 40, 10, 0).compute().unwrap();
        assert_eq!(m.sn, 1.0);
        assert!((m.prec - 0.8333).abs() < 5e-5);
        assert!((m.sp - 0.8).abs() < 1e-12);
        assert!((m.acc - 0.9).abs() < 1e-12);
        assert!((m.f1 - 0.9091).abs() < 5e-5);
        assert!((m.mcc - 0.8165).abs() < 5e-5);
    }

    #[test]
    fn zero_denominator_policy() {
        let m = cm(0, 5, 0, 3).compute().unwrap();
        assert_eq!(m.prec, 0.0);
        assert!(m.undefined.prec);
        assert!(m.undefined.mcc);
        assert_eq!(m.undefined.describe(), "prec|mcc");
        assert!(matches!(cm(0, 0, 0, 0).compute(), Err(MetricsError::EmptyMatrix)));
    }

    #[test]
    fn f1_algebraic_form() {
        for c in [cm(3, 4, 5, 6), cm(50, 40, 10, 0), cm(0, 4, 2, 3), cm(7, 0, 1, 0)] {
            let m = c.compute().unwrap();
            let alt = 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64;
            assert!((m.f1 - alt).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn log_space_guard_agrees() {
        let small = cm(3, 4, 5, 6).compute().unwrap().mcc;
        let s = 1u64 << 50;
        let big = cm(3 * s, 4 * s, 5 * s, 6 * s).compute().unwrap().mcc;
        assert!((small - big).abs() < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        let fold = |v: f64| FoldMetrics {
            fold: 0,
            confusion: cm(1, 1, 0, 0),
            metrics: Metrics::from_values([v; 6], UndefinedFlags::default()),
        };
        let single = aggregate(&[fold(0.7)]).unwrap();
        assert_eq!(single.mean.acc, 0.7);
        assert_eq!(single.sd.acc, 0.0);
        let two = aggregate(&[fold(0.8), fold(1.0)]).unwrap();
        assert!((two.mean.mcc - 0.9).abs() < 1e-12);
        let rev = aggregate(&[fold(1.0), fold(0.8)]).unwrap();
        assert_eq!(two.mean, rev.mean);
        assert_eq!(two.sd, rev.sd);
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyList)));
    }
}
