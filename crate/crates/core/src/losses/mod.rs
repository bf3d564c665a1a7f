//! Training objectives: weighted focal, Lovász-softmax and pixel-to-prototype
//! InfoNCE. Each returns the reduced loss together with its gradient.

pub mod focal;
pub mod infonce;
pub mod lovasz;

use ndarray::{Array3, Axis, Zip};

use crate::error::{Error, Result};

pub use focal::focal_loss;
pub use infonce::info_nce_pix2proto;
pub use lovasz::lovasz_softmax;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_foc: f64,
    pub lambda_lov: f64,
    pub lambda_nce: f64,
    pub temperature: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_foc: 1.0,
            lambda_lov: 1.0,
            lambda_nce: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_foc", self.lambda_foc),
            ("lambda_lov", self.lambda_lov),
            ("lambda_nce", self.lambda_nce),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn total_loss(foc: f64, lov: f64, nce: f64, w: &LossWeights) -> f64 {
    w.lambda_foc * foc + w.lambda_lov * lov + w.lambda_nce * nce
}

/// Softmax over the class axis of `(K, H, W)` logits.
pub fn softmax(logits: &Array3<f64>) -> Array3<f64> {
    let mut p = logits.clone();
    for mut lane in p.lanes_mut(Axis(0)) {
        let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|z| (z - m).exp());
        let s = lane.sum();
        lane /= s;
    }
    p
}

/// Chain a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Array3<f64>, dprobs: &Array3<f64>) -> Array3<f64> {
    let mut dz = Array3::zeros(probs.dim());
    Zip::from(dz.lanes_mut(Axis(0)))
        .and(probs.lanes(Axis(0)))
        .and(dprobs.lanes(Axis(0)))
        .for_each(|mut dz, p, dp| {
            let inner = p.dot(&dp);
            Zip::from(&mut dz)
                .and(&p)
                .and(&dp)
                .for_each(|z, &p, &dp| *z = p * (dp - inner));
        });
    dz
}
