//! Pixel-to-prototype InfoNCE with every prototype as a key.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::pointcloud::ClassId;
use crate::prototype::PrototypeBank;

/// Mean over anchors of `-ln(sum_pos exp(a.p/t) / sum_all exp(a.p/t))`, where
/// the positives are all prototypes of the anchor's class. Prototypes are
/// constants here; the gradient is w.r.t. the anchors only. An empty anchor
/// set gives zero.
pub fn info_nce_pix2proto(
    anchors: ArrayView2<f64>,
    classes: &[ClassId],
    bank: &PrototypeBank,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let (a, d) = anchors.dim();
    if classes.len() != a || d != bank.dim() {
        return Err(Error::Shape(format!(
            "{a} anchors of dim {d}, {} classes, bank dim {}",
            classes.len(),
            bank.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let mut grad = Array2::zeros((a, d));
    if a == 0 {
        return Ok((0.0, grad));
    }
    crate::prototype::sinkhorn::check_unit_rows(anchors)?;
    let k = bank.n_classes();
    for &c in classes {
        let c = c as usize;
        if c >= k {
            return Err(Error::InvalidClass {
                class: c,
                classes: k,
            });
        }
        if !bank.initialized[c] {
            return Err(Error::UninitializedClass(c));
        }
    }
    let n_p = bank.n_prototypes();
    let keys = bank
        .protos
        .view()
        .into_shape_with_order((k * n_p, d))
        .expect("contiguous bank");
    let logits = anchors.dot(&keys.t()) / temperature;
    let mut total = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let c = classes[i] as usize;
        let pos = c * n_p..(c + 1) * n_p;
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w_all: Vec<f64> = row.iter().map(|&s| (s - m).exp()).collect();
        let z_all: f64 = w_all.iter().sum();
        let z_pos: f64 = w_all[pos.clone()].iter().sum();
        total += z_all.ln() - z_pos.ln();
        // d/ds_j = softmax_all_j - [j in pos] softmax_pos_j
        let mut coef: Vec<f64> = w_all.iter().map(|&v| v / z_all).collect();
        for j in pos {
            coef[j] -= w_all[j] / z_pos;
        }
        let coef = ndarray::Array1::from(coef);
        grad.row_mut(i)
            .assign(&(coef.dot(&keys) / (temperature * a as f64)));
    }
    Ok((total / a as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::InitMode;
    use ndarray::{array, Array3};

    fn bank(protos: Array3<f64>) -> PrototypeBank {
        let (k, n_p, _) = protos.dim();
        PrototypeBank {
            protos,
            sigma: 0.999,
            initialized: vec![true; k],
            seeded: ndarray::Array2::from_elem((k, n_p), true),
        }
    }

    #[test]
    fn closed_form_example() {
        let b = bank(array![[[1.0, 0.0]], [[0.0, 1.0]]]);
        let (l, _) = info_nce_pix2proto(array![[1.0, 0.0]].view(), &[0], &b, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn symmetric_odds_and_temperature() {
        // anchor orthogonal to every prototype
        let b = bank(array![[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]]);
        let a = array![[0.0, 0.0, 1.0]];
        for t in [0.05, 1.0, 7.0] {
            let (l, _) = info_nce_pix2proto(a.view(), &[1], &b, t).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn approaches_zero_when_separated() {
        let b = bank(array![[[1.0, 0.0]], [[-1.0, 0.0]]]);
        let (l, _) = info_nce_pix2proto(array![[1.0, 0.0]].view(), &[0], &b, 0.01).unwrap();
        assert!((0.0..1e-80).contains(&l));
    }

    #[test]
    fn errors_and_empty() {
        let mut b = PrototypeBank::new(2, 1, 2, 0.9, InitMode::FirstBatch, 0).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(
            info_nce_pix2proto(empty.view(), &[], &b, 0.1).unwrap().0,
            0.0
        );
        let a = array![[1.0, 0.0]];
        assert!(matches!(
            info_nce_pix2proto(a.view(), &[0], &b, 0.1),
            Err(Error::UninitializedClass(0))
        ));
        b.initialized = vec![true, true];
        assert!(matches!(
            info_nce_pix2proto(a.view(), &[5], &b, 0.1),
            Err(Error::InvalidClass { .. })
        ));
    }
}
