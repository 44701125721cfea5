//! Confusion counts, overlap metrics and the nested WT/TC/ET evaluation regions.
//!
//! Ratios with a zero denominator are reported as `None` ("undefined"), never
//! silently as 0 or 1. CSV output writes them as `NaN`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::tensor::{ShapeError, Tensor};
use crate::volume::{argmax_channels, LabelVolume, VolumeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("prediction dims {pred:?} differ from truth dims {truth:?}")]
    DimsMismatch { pred: [usize; 3], truth: [usize; 3] },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with prediction and truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Evaluation regions over internal labels (3 = enhancing tumor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumor: labels 1, 2, 3.
    WT,
    /// Tumor core: labels 1, 3.
    TC,
    /// Enhancing tumor: label 3.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn members(self) -> &'static [u8] {
        match self {
            Region::WT => &[1, 2, 3],
            Region::TC => &[1, 3],
            Region::ET => &[3],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.members().contains(&label)
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }
}

fn tally(
    pred: &LabelVolume,
    truth: &LabelVolume,
    member: impl Fn(u8) -> bool,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims() != truth.dims() {
        return Err(MetricsError::DimsMismatch {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (member(p), member(t)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(
    pred: &LabelVolume,
    truth: &LabelVolume,
    region: Region,
) -> Result<ConfusionCounts, MetricsError> {
    tally(pred, truth, |l| region.contains(l))
}

/// One-vs-rest counts for a single class id.
pub fn confusion_class(
    pred: &LabelVolume,
    truth: &LabelVolume,
    class: u8,
) -> Result<ConfusionCounts, MetricsError> {
    tally(pred, truth, |l| l == class)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// TP / (TP + FP + FN).
pub fn iou(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// TP / (TP + FN).
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

/// TN / (TN + FP).
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fp)
}

/// (TP + TN) / total.
pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

/// 2TP / (2TP + FP + FN).
pub fn dice_coefficient(c: &ConfusionCounts) -> Option<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `1 − dice_loss(p, t)` over the foreground channels of `(N, C, ...)` tensors.
pub fn soft_dice(p: &Tensor<f32>, t: &Tensor<f32>) -> Result<f64, ShapeError> {
    let mut g = Graph::<f32>::new();
    let pv = g.constant(p.clone());
    let tv = g.constant(t.clone());
    let loss = g.dice_loss(pv, tv, true)?;
    Ok(1.0 - g.value(loss).data()[0] as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub region: String,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl MetricRow {
    pub fn from_counts(region: &str, c: ConfusionCounts) -> Self {
        Self {
            region: region.to_string(),
            counts: c,
            accuracy: accuracy(&c),
            dice: dice_coefficient(&c),
            iou: iou(&c),
            sensitivity: sensitivity(&c),
            specificity: specificity(&c),
        }
    }

    fn metrics(&self) -> [Option<f64>; 5] {
        [
            self.accuracy,
            self.dice,
            self.iou,
            self.sensitivity,
            self.specificity,
        ]
    }

    /// Names of the metrics that are undefined for this row.
    pub fn undefined(&self) -> Vec<&'static str> {
        METRIC_NAMES
            .iter()
            .zip(self.metrics())
            .filter(|(_, m)| m.is_none())
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn csv_fields(&self, case: &str) -> Vec<String> {
        let fmt = |m: Option<f64>| m.map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"));
        let c = &self.counts;
        let mut out = vec![
            case.to_string(),
            self.region.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
        ];
        out.extend(self.metrics().map(fmt));
        out
    }
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "dice", "iou", "sensitivity", "specificity"];

pub const CSV_HEADER: [&str; 11] = [
    "case",
    "region",
    "tp",
    "fp",
    "fn",
    "tn",
    "accuracy",
    "dice",
    "iou",
    "sensitivity",
    "specificity",
];

pub const MEAN_ROW: &str = "MEAN";

/// Mean of the defined values of each metric; counts are summed.
pub fn mean_row(region: &str, rows: &[&MetricRow]) -> MetricRow {
    let mean = |pick: fn(&MetricRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| pick(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricRow {
        region: region.to_string(),
        counts: rows
            .iter()
            .fold(ConfusionCounts::default(), |acc, r| acc + r.counts),
        accuracy: mean(|r| r.accuracy),
        dice: mean(|r| r.dice),
        iou: mean(|r| r.iou),
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    /// WT, TC, ET, then the mean over the three regions.
    pub rows: Vec<MetricRow>,
}

pub fn evaluate_labels(
    case: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
) -> Result<CaseReport, MetricsError> {
    let mut rows = Region::ALL
        .iter()
        .map(|&r| Ok(MetricRow::from_counts(r.name(), confusion(pred, truth, r)?)))
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let refs: Vec<&MetricRow> = rows.iter().collect();
    let mean = mean_row(MEAN_ROW, &refs);
    rows.push(mean);
    Ok(CaseReport {
        case: case.to_string(),
        rows,
    })
}

/// Argmax (ties to the lowest class) of `(C, D, H, W)` or `(1, C, D, H, W)`
/// probabilities, then per-region metrics against `truth`.
pub fn evaluate_case(
    case: &str,
    pred_probs: &Tensor<f32>,
    truth: &LabelVolume,
) -> Result<CaseReport, MetricsError> {
    let pred = argmax_channels(pred_probs)?;
    evaluate_labels(case, &pred, truth)
}

/// Equal-weight mean over cases for each region row.
pub fn aggregate(cases: &[CaseReport]) -> Vec<MetricRow> {
    let regions: Vec<String> = cases
        .first()
        .map(|c| c.rows.iter().map(|r| r.region.clone()).collect())
        .unwrap_or_default();
    regions
        .iter()
        .map(|region| {
            let rows: Vec<&MetricRow> = cases
                .iter()
                .filter_map(|c| c.rows.iter().find(|r| &r.region == region))
                .collect();
            mean_row(region, &rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&counts(4, 0, 0, 9)), Some(1.0));
        assert_eq!(iou(&counts(0, 2, 1, 9)), Some(0.0));
        assert_eq!(iou(&counts(3, 1, 2, 0)), Some(0.5));
        assert_eq!(iou(&counts(0, 0, 0, 5)), None);
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity(&counts(5, 3, 0, 1)), Some(1.0));
        assert_eq!(sensitivity(&counts(0, 3, 4, 1)), Some(0.0));
        assert!((sensitivity(&counts(9, 0, 1, 0)).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(sensitivity(&counts(0, 3, 0, 1)), None);
    }

    #[test]
    fn specificity_examples() {
        assert_eq!(specificity(&counts(1, 0, 1, 6)), Some(1.0));
        assert_eq!(specificity(&counts(1, 4, 1, 0)), Some(0.0));
        assert!((specificity(&counts(0, 3, 0, 7)).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(specificity(&counts(2, 0, 1, 0)), None);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&counts(3, 0, 0, 5)), Some(1.0));
        assert_eq!(accuracy(&counts(2, 2, 2, 2)), Some(0.5));
        assert!((accuracy(&counts(2, 1, 1, 6)).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_coefficient(&counts(7, 0, 0, 1)), Some(1.0));
        let c = counts(3, 1, 2, 0);
        let d = dice_coefficient(&c).unwrap();
        assert!((d - 6.0 / 9.0).abs() < 1e-12);
        let j = iou(&c).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn all_background_case() {
        let z = LabelVolume::zeros([2, 2, 2]);
        let r = evaluate_labels("c", &z, &z).unwrap();
        let wt = &r.rows[0];
        assert_eq!(wt.sensitivity, None);
        assert_eq!(wt.specificity, Some(1.0));
        assert_eq!(wt.accuracy, Some(1.0));
        assert!(wt.undefined().contains(&"sensitivity"));
    }

    #[test]
    fn enhancing_voxel_counts_in_every_region() {
        let mut labels = vec![0u8; 8];
        labels[5] = 3;
        let l = LabelVolume::new([2, 2, 2], labels).unwrap();
        let r = evaluate_labels("c", &l, &l).unwrap();
        for row in &r.rows[..3] {
            assert_eq!(row.counts.tp, 1, "{}", row.region);
        }
    }

    #[test]
    fn dims_mismatch() {
        let a = LabelVolume::zeros([2, 2, 2]);
        let b = LabelVolume::zeros([2, 2, 3]);
        assert!(matches!(
            confusion(&a, &b, Region::WT),
            Err(MetricsError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn csv_undefined_is_nan() {
        let row = MetricRow::from_counts("ET", counts(0, 0, 0, 4));
        let f = row.csv_fields("case1");
        assert_eq!(f.len(), CSV_HEADER.len());
        assert_eq!(f[7], "NaN");
        assert_eq!(f[9], "NaN");
        assert_eq!(f[10], "1.000000");
    }
}
