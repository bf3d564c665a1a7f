//! Class-weighted focal loss on labelled pixels.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, UNLABELLED};

/// Mean over labelled pixels of `-w_y (1 - f_y)^gamma ln f_y`, with `f` the
/// softmax of `logits` (`(K, H, W)`). Returns the loss and its gradient
/// w.r.t. the logits. No labelled pixels gives zero.
pub fn focal_loss(
    logits: &Array3<f64>,
    labels: &Array2<ClassId>,
    weights: &[f64],
    gamma: f64,
) -> Result<(f64, Array3<f64>)> {
    let (k, h, w) = logits.dim();
    if labels.dim() != (h, w) || weights.len() != k {
        return Err(Error::Shape(format!(
            "logits {:?}, labels {:?}, {} weights",
            logits.dim(),
            labels.dim(),
            weights.len()
        )));
    }
    let mut grad = Array3::zeros((k, h, w));
    let n = labels.iter().filter(|&&l| l != UNLABELLED).count();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for ((r, c), &y) in labels.indexed_iter() {
        if y == UNLABELLED {
            continue;
        }
        let y = y as usize;
        if y >= k {
            return Err(Error::InvalidClass {
                class: y,
                classes: k,
            });
        }
        let z = logits.slice(ndarray::s![.., r, c]);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let log_f = z[y] - lse;
        let f = log_f.exp();
        let one_minus = (1.0 - f).max(0.0);
        let mod_factor = if gamma == 0.0 {
            1.0
        } else {
            one_minus.powf(gamma)
        };
        total -= weights[y] * mod_factor * log_f;

        // dL/df * f, written without dividing by f.
        let focus = if gamma == 0.0 || one_minus == 0.0 {
            0.0
        } else {
            gamma * one_minus.powf(gamma - 1.0) * f * log_f
        };
        let dl_df_f = weights[y] * (focus - mod_factor);
        let mut g = grad.slice_mut(ndarray::s![.., r, c]);
        for j in 0..k {
            let p = (z[j] - lse).exp();
            let delta = if j == y { 1.0 } else { 0.0 };
            g[j] = scale * dl_df_f * (delta - p);
        }
    }
    Ok((total * scale, grad))
}
