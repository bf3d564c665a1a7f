//! Toy three-stage encoder-decoder with skip connections.

use ndarray::Array3;

use super::layers::{
    concat_channels, leaky_relu_backward, leaky_relu_inplace, split_channels, upsample2,
    upsample2_backward, Conv2d, ParamLayout,
};
use super::{Backbone, BackboneForward, FeaturePyramid, Logits};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TOY_UNET: &str = "toy_unet";
const SLOPE: f64 = 0.1;

/// `widths[s]` channels at stage `s`; stages 1 and 2 halve the resolution.
#[derive(Debug, Clone)]
pub struct ToyUNet {
    in_ch: usize,
    widths: [usize; 3],
    n_classes: usize,
    e0a: Conv2d,
    e0b: Conv2d,
    e1a: Conv2d,
    e1b: Conv2d,
    e2a: Conv2d,
    e2b: Conv2d,
    d1: Conv2d,
    d0: Conv2d,
    cls: Conv2d,
}

// Activation slots stored in `BackboneForward::activations`.
const A_IN: usize = 0;
const A_E0A: usize = 1;
const A_F0: usize = 2;
const A_E1A: usize = 3;
const A_F1: usize = 4;
const A_E2A: usize = 5;
const A_F2: usize = 6;
const A_CAT1: usize = 7;
const A_G1: usize = 8;
const A_CAT0: usize = 9;
const A_G0: usize = 10;

impl ToyUNet {
    pub fn new(
        layout: &mut ParamLayout,
        in_ch: usize,
        widths: [usize; 3],
        n_classes: usize,
    ) -> Self {
        let [c0, c1, c2] = widths;
        Self {
            in_ch,
            widths,
            n_classes,
            e0a: Conv2d::new(layout, in_ch, c0, 3, 1, true),
            e0b: Conv2d::new(layout, c0, c0, 3, 1, true),
            e1a: Conv2d::new(layout, c0, c1, 3, 2, true),
            e1b: Conv2d::new(layout, c1, c1, 3, 1, true),
            e2a: Conv2d::new(layout, c1, c2, 3, 2, true),
            e2b: Conv2d::new(layout, c2, c2, 3, 1, true),
            d1: Conv2d::new(layout, c2 + c1, c1, 3, 1, true),
            d0: Conv2d::new(layout, c1 + c0, c0, 3, 1, true),
            cls: Conv2d::new(layout, c0, n_classes, 1, 1, true),
        }
    }

    fn convs(&self) -> [&Conv2d; 8] {
        [
            &self.e0a, &self.e0b, &self.e1a, &self.e1b, &self.e2a, &self.e2b, &self.d1, &self.d0,
        ]
    }

    /// Parameter range of the final classifier.
    pub fn classifier(&self) -> &Conv2d {
        &self.cls
    }
}

impl Backbone for ToyUNet {
    fn name(&self) -> &str {
        TOY_UNET
    }

    fn in_channels(&self) -> usize {
        self.in_ch
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn pyramid_channels(&self) -> Vec<usize> {
        self.widths.to_vec()
    }

    fn spatial_multiple(&self) -> usize {
        4
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        for conv in self.convs() {
            conv.init(params, 1.0, rng);
        }
        self.cls.init(params, 0.5, rng);
    }

    fn forward(&self, params: &[f64], input: &Array3<f64>) -> Result<BackboneForward> {
        let (c, h, w) = input.dim();
        if c != self.in_ch || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "backbone expects ({}, H, W) with H, W multiples of 4, got ({c}, {h}, {w})",
                self.in_ch
            )));
        }
        let act = |conv: &Conv2d, x: &Array3<f64>| {
            let mut y = conv.forward(params, x.view());
            leaky_relu_inplace(&mut y, SLOPE);
            y
        };
        let e0a = act(&self.e0a, input);
        let f0 = act(&self.e0b, &e0a);
        let e1a = act(&self.e1a, &f0);
        let f1 = act(&self.e1b, &e1a);
        let e2a = act(&self.e2a, &f1);
        let f2 = act(&self.e2b, &e2a);
        let cat1 = concat_channels(&upsample2(&f2), &f1);
        let g1 = act(&self.d1, &cat1);
        let cat0 = concat_channels(&upsample2(&g1), &f0);
        let g0 = act(&self.d0, &cat0);
        let logits = self.cls.forward(params, g0.view());
        Ok(BackboneForward {
            logits: Logits(logits),
            pyramid: FeaturePyramid {
                levels: vec![f0.clone(), f1.clone(), f2.clone()],
            },
            activations: vec![input.clone(), e0a, f0, e1a, f1, e2a, f2, cat1, g1, cat0, g0],
        })
    }

    fn backward(
        &self,
        params: &[f64],
        fwd: &BackboneForward,
        dlogits: &Array3<f64>,
        dpyramid: &[Array3<f64>],
        grads: &mut [f64],
    ) {
        let a = &fwd.activations;
        let [_, c1, c2] = self.widths;
        let bw = |conv: &Conv2d, x: &Array3<f64>, dy: &Array3<f64>, grads: &mut [f64]| {
            conv.backward(params, x.view(), dy, grads, true).unwrap()
        };

        let mut dg0 = bw(&self.cls, &a[A_G0], dlogits, grads);
        leaky_relu_backward(&mut dg0, &a[A_G0], SLOPE);
        let dcat0 = bw(&self.d0, &a[A_CAT0], &dg0, grads);
        let (dup1, mut df0) = split_channels(&dcat0, c1);
        let mut dg1 = upsample2_backward(&dup1);
        leaky_relu_backward(&mut dg1, &a[A_G1], SLOPE);
        let dcat1 = bw(&self.d1, &a[A_CAT1], &dg1, grads);
        let (dup2, mut df1) = split_channels(&dcat1, c2);
        let mut df2 = upsample2_backward(&dup2);

        if let Some(d) = dpyramid.get(2) {
            df2 += d;
        }
        leaky_relu_backward(&mut df2, &a[A_F2], SLOPE);
        let mut de2a = bw(&self.e2b, &a[A_E2A], &df2, grads);
        leaky_relu_backward(&mut de2a, &a[A_E2A], SLOPE);
        df1 += &bw(&self.e2a, &a[A_F1], &de2a, grads);

        if let Some(d) = dpyramid.get(1) {
            df1 += d;
        }
        leaky_relu_backward(&mut df1, &a[A_F1], SLOPE);
        let mut de1a = bw(&self.e1b, &a[A_E1A], &df1, grads);
        leaky_relu_backward(&mut de1a, &a[A_E1A], SLOPE);
        df0 += &bw(&self.e1a, &a[A_F0], &de1a, grads);

        if let Some(d) = dpyramid.first() {
            df0 += d;
        }
        leaky_relu_backward(&mut df0, &a[A_F0], SLOPE);
        let mut de0a = bw(&self.e0b, &a[A_E0A], &df0, grads);
        leaky_relu_backward(&mut de0a, &a[A_E0A], SLOPE);
        self.e0a
            .backward(params, a[A_IN].view(), &de0a, grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::layers::tests::rel_err;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng as _;

    fn net() -> (ToyUNet, Vec<f64>) {
        let mut layout = ParamLayout::default();
        let net = ToyUNet::new(&mut layout, 3, [2, 3, 4], 3);
        let mut params = vec![0.0; layout.len()];
        net.init(&mut params, &mut stream_rng(5, Stream::Init, &[]));
        (net, params)
    }

    #[test]
    fn shapes() {
        let (net, params) = net();
        let x = Array3::zeros((3, 8, 12));
        let out = net.forward(&params, &x).unwrap();
        assert_eq!(out.logits.0.dim(), (3, 8, 12));
        let dims: Vec<_> = out.pyramid.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(dims, vec![(2, 8, 12), (3, 4, 6), (4, 2, 3)]);
        assert!(net.forward(&params, &Array3::zeros((3, 6, 12))).is_err());
        assert!(net.forward(&params, &Array3::zeros((2, 8, 12))).is_err());
    }

    #[test]
    fn zero_input_zero_classifier_gives_zero_logits() {
        let (net, mut params) = net();
        params[net.cls.weight.clone()].fill(0.0);
        params[net.cls.bias.clone().unwrap()].fill(0.0);
        let out = net.forward(&params, &Array3::zeros((3, 8, 8))).unwrap();
        assert!(out.logits.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, params) = net();
        let x = Array3::from_shape_fn((3, 8, 8), |(a, b, c)| {
            ((a * 7 + b * 3 + c) % 5) as f64 - 2.0
        });
        let a = net.forward(&params, &x).unwrap();
        let b = net.forward(&params, &x).unwrap();
        assert_eq!(a.logits.0, b.logits.0);
        assert_eq!(a.pyramid.levels, b.pyramid.levels);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (net, params) = net();
        let mut rng = stream_rng(9, Stream::Init, &[1]);
        let x = Array3::from_shape_fn((3, 4, 8), |_| rng.random::<f64>() - 0.5);
        let out = net.forward(&params, &x).unwrap();
        let gl = out.logits.0.mapv(|_| rng.random::<f64>() - 0.5);
        let gp: Vec<Array3<f64>> = out
            .pyramid
            .levels
            .iter()
            .map(|l| l.mapv(|_| rng.random::<f64>() - 0.5))
            .collect();
        let f = |p: &[f64]| {
            let o = net.forward(p, &x).unwrap();
            let mut v = (&o.logits.0 * &gl).sum();
            for (l, g) in o.pyramid.levels.iter().zip(&gp) {
                v += (l * g).sum();
            }
            v
        };
        let mut grads = vec![0.0; params.len()];
        net.backward(&params, &out, &gl, &gp, &mut grads);
        let h = 1e-6;
        let num: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut p = params.clone();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            })
            .collect();
        let e = rel_err(&grads, &num);
        assert!(e < 1e-5, "relative error {e}");
    }
}
