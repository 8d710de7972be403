//! Segmentation scoring from confusion matrices.
//!
//! Rows are ground truth, columns predictions. A prediction equal to the
//! ignore index is an abstention: it lands in a per-class reject column and
//! counts as a false negative for the ground-truth class, never as a hit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::mask::SemanticMask;
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction is {pred_w}x{pred_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("label {id} is outside the {k}-class matrix")]
    LabelOutOfRange { id: ClassId, k: usize },
    #[error("matrices disagree on class count or ignore index")]
    MixedTaxonomies,
    #[error("no matrices or reports supplied")]
    Empty,
    #[error("confusion matrix holds no scored pixels")]
    NoPixels,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    ignore_index: ClassId,
    /// Row-major k x k.
    counts: Vec<u64>,
    /// Per ground-truth class: pixels predicted as ignore.
    rejects: Vec<u64>,
    ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize, ignore_index: ClassId) -> Self {
        ConfusionMatrix {
            k,
            ignore_index,
            counts: vec![0; k * k],
            rejects: vec![0; k],
            ignored_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn ignore_index(&self) -> ClassId {
        self.ignore_index
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn rejects(&self, gt: usize) -> u64 {
        self.rejects[gt]
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored_pixels
    }

    /// Pixels with a ground-truth label (rejects included).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.rejects.iter().sum::<u64>()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.k..(gt + 1) * self.k].iter().sum::<u64>() + self.rejects[gt]
    }

    pub fn column_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, pred)).sum()
    }

    /// Row-normalised matrix (each row sums to 1 over predictions and the
    /// reject column). Rows with no pixels are all zero.
    pub fn row_normalised(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|g| {
                let total = self.row_sum(g);
                (0..=self.k)
                    .map(|p| {
                        let v = if p == self.k { self.rejects[g] } else { self.get(g, p) };
                        if total == 0 {
                            0.0
                        } else {
                            v as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn add_pixel(&mut self, gt: ClassId, pred: ClassId) -> Result<(), EvalError> {
        if gt == self.ignore_index {
            self.ignored_pixels += 1;
            return Ok(());
        }
        let g = usize::from(gt);
        if g >= self.k {
            return Err(EvalError::LabelOutOfRange { id: gt, k: self.k });
        }
        if pred == self.ignore_index {
            self.rejects[g] += 1;
            return Ok(());
        }
        let p = usize::from(pred);
        if p >= self.k {
            return Err(EvalError::LabelOutOfRange { id: pred, k: self.k });
        }
        self.counts[g * self.k + p] += 1;
        Ok(())
    }

    /// Adds one prediction / ground-truth pair. On error the matrix is left
    /// unchanged.
    pub fn accumulate(&mut self, pred: &SemanticMask, gt: &SemanticMask) -> Result<(), EvalError> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(EvalError::DimensionMismatch {
                pred_w: pred.width(),
                pred_h: pred.height(),
                gt_w: gt.width(),
                gt_h: gt.height(),
            });
        }
        let mut scratch = self.clone();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            scratch.add_pixel(g, p)?;
        }
        *self = scratch;
        Ok(())
    }

    /// Element-wise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if self.k != other.k || self.ignore_index != other.ignore_index {
            return Err(EvalError::MixedTaxonomies);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.rejects.iter_mut().zip(&other.rejects) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }
}

/// Which classes enter the macro averages.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Classes with no ground truth and no prediction are skipped.
    #[default]
    PresentInGtOrPred,
    /// Every class is scored; absent classes score 0.
    AllClasses,
}

/// All values are percentages in [0, 100].
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// `None` for classes left out under the chosen scoring.
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub n_scored_classes: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "F1 {:.2}  mIoU {:.2}  pixel acc {:.2}  ({} classes)",
            self.macro_f1, self.miou, self.pixel_accuracy, self.n_scored_classes
        )
    }
}

pub fn metrics(cm: &ConfusionMatrix, scoring: Scoring) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::NoPixels);
    }
    let mut per_class_f1 = Vec::with_capacity(cm.k);
    let mut per_class_iou = Vec::with_capacity(cm.k);
    for c in 0..cm.k {
        let tp = cm.get(c, c);
        let fp = cm.column_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        if tp + fp + fn_ == 0 {
            match scoring {
                Scoring::PresentInGtOrPred => {
                    per_class_f1.push(None);
                    per_class_iou.push(None);
                }
                Scoring::AllClasses => {
                    per_class_f1.push(Some(0.0));
                    per_class_iou.push(Some(0.0));
                }
            }
            continue;
        }
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        per_class_f1.push(Some(100.0 * 2.0 * tp / (2.0 * tp + fp + fn_)));
        per_class_iou.push(Some(100.0 * tp / (tp + fp + fn_)));
    }
    let scored: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    let ious: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let n = scored.len();
    Ok(MetricsReport {
        macro_f1: scored.iter().sum::<f64>() / n as f64,
        miou: ious.iter().sum::<f64>() / n as f64,
        pixel_accuracy: 100.0 * cm.trace() as f64 / total as f64,
        per_class_f1,
        per_class_iou,
        n_scored_classes: n,
    })
}

/// Sums fold matrices, then scores the pooled matrix once.
pub fn pooled_eval(folds: &[ConfusionMatrix], scoring: Scoring) -> Result<MetricsReport, EvalError> {
    let pooled = pool(folds)?;
    metrics(&pooled, scoring)
}

pub fn pool(folds: &[ConfusionMatrix]) -> Result<ConfusionMatrix, EvalError> {
    let (first, rest) = folds.split_first().ok_or(EvalError::Empty)?;
    let mut pooled = first.clone();
    for cm in rest {
        pooled.merge(cm)?;
    }
    Ok(pooled)
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Per-metric mean and population standard deviation over seeded runs.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunAggregate {
    pub macro_f1: MeanStd,
    pub miou: MeanStd,
    pub pixel_accuracy: MeanStd,
    pub n_runs: usize,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate, EvalError> {
    let stat = |pick: fn(&MetricsReport) -> f64| -> Result<MeanStd, EvalError> {
        let values: Vec<f64> = reports.iter().map(pick).collect();
        let (mean, std) = crate::mean_std(&values).ok_or(EvalError::Empty)?;
        Ok(MeanStd { mean, std })
    };
    Ok(RunAggregate {
        macro_f1: stat(|r| r.macro_f1)?,
        miou: stat(|r| r.miou)?,
        pixel_accuracy: stat(|r| r.pixel_accuracy)?,
        n_runs: reports.len(),
    })
}
