//! Segmentation scoring: confusion matrices, IoU, coverage.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mask::{SegMask, IGNORE};

/// Square confusion matrix over background + C classes.
/// Rows index ground truth, columns index predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Pixel bookkeeping from a lenient accumulation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LenientStats {
    /// Pixels that entered the matrix.
    pub scored: usize,
    /// Ground-truth-labeled pixels the prediction left as IGNORE.
    pub skipped: usize,
}

impl ConfusionMatrix {
    /// `num_classes` object classes plus background.
    pub fn new(num_classes: usize) -> Self {
        let k = num_classes + 1;
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    fn check_pair(&self, gt: &SegMask, pred: &SegMask) -> Result<()> {
        if (gt.h(), gt.w()) != (pred.h(), pred.w()) {
            return Err(CoreError::Shape {
                op: "confusion_accumulate",
                detail: format!(
                    "ground truth {}x{} vs prediction {}x{}",
                    gt.h(),
                    gt.w(),
                    pred.h(),
                    pred.w()
                ),
            });
        }
        Ok(())
    }

    fn check_label(&self, l: u8, role: &'static str) -> Result<usize> {
        let l = l as usize;
        if l >= self.k {
            return Err(CoreError::Config {
                detail: format!("{role} label {l} out of range for {} bins", self.k),
            });
        }
        Ok(l)
    }

    /// Scores a prediction that must label every pixel; an IGNORE in the
    /// prediction is a usage error. Ground-truth IGNOREs are excluded.
    pub fn accumulate_strict(&mut self, gt: &SegMask, pred: &SegMask) -> Result<()> {
        self.check_pair(gt, pred)?;
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                return Err(CoreError::Usage {
                    detail: "strict scoring found an IGNORE pixel in the prediction".into(),
                });
            }
            let (g, p) = (self.check_label(g, "ground truth")?, self.check_label(p, "prediction")?);
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// Scores a partial labeling (e.g. a fused mask): prediction IGNOREs
    /// are skipped and reported instead of scored.
    pub fn accumulate_lenient(&mut self, gt: &SegMask, pred: &SegMask) -> Result<LenientStats> {
        self.check_pair(gt, pred)?;
        let mut stats = LenientStats::default();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                stats.skipped += 1;
                continue;
            }
            let (g, p) = (self.check_label(g, "ground truth")?, self.check_label(p, "prediction")?);
            self.counts[g * self.k + p] += 1;
            stats.scored += 1;
        }
        Ok(stats)
    }

    /// Merges another matrix of the same size into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(CoreError::Shape {
                op: "confusion_merge",
                detail: format!("{} vs {} bins", self.k, other.k),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Intersection-over-union per bin; `None` where the bin never
    /// appears in ground truth or prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let inter = self.count(c, c);
                let row: u64 = (0..self.k).map(|p| self.count(c, p)).sum();
                let col: u64 = (0..self.k).map(|g| self.count(g, c)).sum();
                let union = row + col - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over bins that appear at all.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    /// Fraction of scored pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        correct as f64 / total as f64
    }
}

/// Fraction of prediction pixels that carry a real label.
pub fn coverage(pred: &SegMask) -> f64 {
    pred.labeled_fraction()
}
