//! Lovász-softmax surrogate of the per-class Jaccard loss.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, UNLABELLED};

/// Gradient of the Jaccard loss along a ground-truth indicator sorted by
/// decreasing error.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                inter -= 1.0;
            } else {
                union += 1.0;
            }
            let jaccard = 1.0 - inter / union;
            let d = jaccard - prev;
            prev = jaccard;
            d
        })
        .collect()
}

/// Mean over classes present in `labels` of the Lovász extension applied to
/// the per-pixel errors `|[y = k] - f_k|`, computed on labelled pixels only.
/// `probs` is `(K, H, W)`. Returns the loss and its gradient w.r.t. `probs`.
pub fn lovasz_softmax(probs: &Array3<f64>, labels: &Array2<ClassId>) -> Result<(f64, Array3<f64>)> {
    let (k, h, w) = probs.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "probs {:?}, labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    let mut grad = Array3::zeros((k, h, w));
    let pixels: Vec<((usize, usize), usize)> = labels
        .indexed_iter()
        .filter(|(_, &l)| l != UNLABELLED)
        .map(|(rc, &l)| (rc, l as usize))
        .collect();
    if let Some(&(_, y)) = pixels.iter().find(|(_, y)| *y >= k) {
        return Err(Error::InvalidClass {
            class: y,
            classes: k,
        });
    }
    let mut present = vec![false; k];
    for &(_, y) in &pixels {
        present[y] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n_present as f64;
    let mut total = 0.0;
    for class in (0..k).filter(|&c| present[c]) {
        let mut errs: Vec<(f64, usize)> = pixels
            .iter()
            .enumerate()
            .map(|(i, &((r, c), y))| {
                let f = probs[[class, r, c]];
                ((if y == class { 1.0 } else { 0.0 } - f).abs(), i)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let gt: Vec<bool> = errs.iter().map(|&(_, i)| pixels[i].1 == class).collect();
        let g = lovasz_grad(&gt);
        for ((e, i), gi) in errs.into_iter().zip(g) {
            total += e * gi;
            let ((r, c), y) = pixels[i];
            // d|[y=k] - f| / df is -1 on the true class and +1 elsewhere
            let sign = if y == class { -1.0 } else { 1.0 };
            grad[[class, r, c]] += scale * gi * sign;
        }
    }
    Ok((total * scale, grad))
}
