//! Point-level confusion matrix and IoU.

use ndarray::{Array2, Array3};

use super::config::ExperimentConfig;
use super::data::Frame;
use crate::embedding::SegModel;
use crate::error::{Error, Result};
use crate::knn::knn_postprocess;
use crate::pointcloud::{ClassId, UNLABELLED};
use crate::projection::backproject;

/// Argmax over classes at valid pixels, smallest id on ties; invalid pixels
/// get [`UNLABELLED`].
pub fn pseudo_labels(logits: &Array3<f64>, valid: &Array2<bool>) -> Array2<ClassId> {
    let (k, h, w) = logits.dim();
    assert_eq!(valid.dim(), (h, w));
    Array2::from_shape_fn((h, w), |(r, c)| {
        if !valid[[r, c]] {
            return UNLABELLED;
        }
        let mut best = 0;
        for j in 1..k {
            if logits[[j, r, c]] > logits[[best, r, c]] {
                best = j;
            }
        }
        best as ClassId
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `confusion[[gt, pred]]` point counts.
    pub confusion: Array2<u64>,
    /// Points of each ground-truth class that received no prediction.
    pub missed: Vec<u64>,
    /// `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl EvalReport {
    pub fn new(n_classes: usize) -> Self {
        Self {
            confusion: Array2::zeros((n_classes, n_classes)),
            missed: vec![0; n_classes],
            iou: vec![None; n_classes],
            miou: 0.0,
        }
    }

    /// Accumulate one frame of point predictions. Unlabelled ground truth is
    /// skipped; unlabelled predictions count as false negatives.
    pub fn accumulate(&mut self, gt: &[ClassId], pred: &[ClassId]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels, {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let k = self.missed.len();
        for (&g, &p) in gt.iter().zip(pred) {
            if g == UNLABELLED {
                continue;
            }
            let g = g as usize;
            if g >= k {
                return Err(Error::InvalidClass {
                    class: g,
                    classes: k,
                });
            }
            if p == UNLABELLED {
                self.missed[g] += 1;
            } else if (p as usize) < k {
                self.confusion[[g, p as usize]] += 1;
            } else {
                return Err(Error::InvalidClass {
                    class: p as usize,
                    classes: k,
                });
            }
        }
        Ok(())
    }

    /// Fill `iou` and `miou` from the accumulated counts.
    pub fn finish(&mut self) {
        let k = self.missed.len();
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let tp = self.confusion[[c, c]];
            let gt_total: u64 = self.confusion.row(c).sum() + self.missed[c];
            let fp: u64 = self.confusion.column(c).sum() - tp;
            if gt_total == 0 {
                self.iou[c] = None;
                continue;
            }
            let fn_ = gt_total - tp;
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            self.iou[c] = Some(iou);
            sum += iou;
            present += 1;
        }
        self.miou = if present == 0 {
            0.0
        } else {
            sum / present as f64
        };
    }

    /// Tab-separated per-class table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class\tiou\ttp\tfp\tfn\n");
        for c in 0..self.missed.len() {
            let tp = self.confusion[[c, c]];
            let fp = self.confusion.column(c).sum() - tp;
            let fn_ = self.confusion.row(c).sum() + self.missed[c] - tp;
            let iou = self.iou[c].map_or("nan".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{c}\t{iou}\t{tp}\t{fp}\t{fn_}\n"));
        }
        s.push_str(&format!("miou\t{:.6}\n", self.miou));
        s
    }
}

/// Point predictions for one frame.
pub fn predict_points(
    model: &SegModel,
    frame: &Frame,
    cfg: &ExperimentConfig,
) -> Result<Vec<ClassId>> {
    let fwd = model.forward(&frame.image)?;
    let pixels = pseudo_labels(&fwd.logits.0, &frame.image.valid);
    let proj = cfg.projection();
    let points = backproject(&pixels, &proj, &frame.cloud)?;
    if cfg.knn {
        knn_postprocess(
            &points,
            &frame.cloud,
            &frame.image,
            &proj,
            cfg.knn_k,
            cfg.knn_window,
        )
    } else {
        Ok(points)
    }
}

pub fn evaluate(model: &SegModel, frames: &[Frame], cfg: &ExperimentConfig) -> Result<EvalReport> {
    let mut report = EvalReport::new(cfg.n_classes);
    for f in frames {
        report.accumulate(&f.gt, &predict_points(model, f, cfg)?)?;
    }
    report.finish();
    Ok(report)
}
