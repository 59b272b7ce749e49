//! Confusion-matrix accumulation and mIoU, per view, per scene, and averaged
//! across scenes.

use image::GrayImage;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scene::IGNORE_LABEL;

/// How classes absent from both ground truth and prediction enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClassPolicy {
    /// Exclude absent classes from the mean (the common convention).
    #[default]
    Exclude,
    CountAsZero,
}

/// Rows are ground truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            counts: Array2::zeros((class_count, class_count)),
            ignored: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.counts.nrows()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[[gt, pred]]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Per-pixel accumulation; ignore-labeled ground-truth pixels are counted
    /// separately and do not enter the matrix.
    pub fn accumulate(&mut self, gt: &GrayImage, pred: &GrayImage) -> Result<()> {
        if gt.dimensions() != pred.dimensions() {
            return Err(Error::ShapeMismatch(format!(
                "confusion accumulate: gt {}x{} vs pred {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            )));
        }
        let l = self.class_count();
        for (g, p) in gt.pixels().zip(pred.pixels()) {
            let g = g.0[0];
            let p = p.0[0];
            if g == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if g as usize >= l || p as usize >= l {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({g}, {p}) outside class count {l}"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; per-view matrices merge into a scene matrix.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.class_count(), other.class_count());
        self.counts += &other.counts;
        self.ignored += other.ignored;
    }

    /// IoU per class and their mean. `None` entries are classes absent from
    /// both ground truth and prediction.
    pub fn miou(&self, policy: AbsentClassPolicy) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        let l = self.class_count();
        let mut per_class = Vec::with_capacity(l);
        for c in 0..l {
            let tp = self.counts[[c, c]];
            let fp: u64 = (0..l).filter(|&g| g != c).map(|g| self.counts[[g, c]]).sum();
            let fn_: u64 = (0..l).filter(|&p| p != c).map(|p| self.counts[[c, p]]).sum();
            if tp + fp + fn_ == 0 {
                per_class.push(None);
            } else {
                per_class.push(Some(tp as f64 / (tp + fp + fn_) as f64));
            }
        }
        let values: Vec<f64> = per_class
            .iter()
            .map(|iou| match (iou, policy) {
                (Some(v), _) => Some(*v),
                (None, AbsentClassPolicy::CountAsZero) => Some(0.0),
                (None, AbsentClassPolicy::Exclude) => None,
            })
            .flatten()
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Debug, Clone)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// The cross-scene aggregate: mean of per-scene mIoU values.
pub fn average_miou(scene_mious: &[f64]) -> f64 {
    scene_mious.iter().sum::<f64>() / scene_mious.len() as f64
}
