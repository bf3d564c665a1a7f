//! Minimal layer kit with hand-written backward passes. Parameters live in
//! one flat `f64` buffer; layers hold ranges into it.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::rng::Rng;

/// Hands out consecutive ranges of the flat parameter buffer.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub fn leaky_relu_inplace(x: &mut Array3<f64>, slope: f64) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
}

/// Multiply `dy` by the activation derivative, recovered from the output's sign.
pub fn leaky_relu_backward(dy: &mut Array3<f64>, y: &Array3<f64>, slope: f64) {
    Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
}

/// 2-D convolution over `(C, H, W)` maps, zero padded, lowered to GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: layout.alloc(cout * cin * kernel * kernel),
            bias: bias.then(|| layout.alloc(cout)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut Rng) {
        let std = gain * (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for w in &mut params[self.weight.clone()] {
            *w = normal.sample(rng);
        }
        if let Some(b) = &self.bias {
            params[b.clone()].fill(0.0);
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn weight_view<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.cout, self.fan_in()), &params[self.weight.clone()]).unwrap()
    }

    fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ki in 0..k {
                for kj in 0..k {
                    let mut row = cols.row_mut((ci * k + ki) * k + kj);
                    let row = row.as_slice_mut().unwrap();
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = plane.row(ih as usize);
                        let dst = &mut row[oh * wo..(oh + 1) * wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let mut x = Array3::zeros((self.cin, h, w));
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let mut plane = x.index_axis_mut(Axis(0), ci);
            for ki in 0..k {
                for kj in 0..k {
                    let row = cols.row((ci * k + ki) * k + kj);
                    let row = row.as_slice().unwrap();
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let mut dst = plane.row_mut(ih as usize);
                        for ow in 0..wo {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += row[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, params: &[f64], x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let out = if self.kernel == 1 && self.stride == 1 {
            let flat = x.to_shape((c, h * w)).unwrap();
            self.weight_view(params).dot(&flat)
        } else {
            self.weight_view(params).dot(&self.im2col(x))
        };
        let mut out = out.into_shape_with_order((self.cout, ho, wo)).unwrap();
        if let Some(b) = &self.bias {
            for (mut plane, &bv) in out.outer_iter_mut().zip(&params[b.clone()]) {
                plane += bv;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: ArrayView3<f64>,
        dy: &Array3<f64>,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let (c, h, w) = x.dim();
        let (_, ho, wo) = dy.dim();
        let dy2 = dy.to_shape((self.cout, ho * wo)).unwrap();
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.to_shape((c, h * w)).unwrap().to_owned()
        } else {
            self.im2col(x)
        };
        {
            let mut gw = ArrayViewMut2::from_shape(
                (self.cout, self.fan_in()),
                &mut grads[self.weight.clone()],
            )
            .unwrap();
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw);
        }
        if let Some(b) = &self.bias {
            for (g, row) in grads[b.clone()].iter_mut().zip(dy2.outer_iter()) {
                *g += row.sum();
            }
        }
        if !need_dx {
            return None;
        }
        let dcols = self.weight_view(params).t().dot(&dy2);
        Some(if self.kernel == 1 && self.stride == 1 {
            dcols.into_shape_with_order((c, h, w)).unwrap()
        } else {
            self.col2im(&dcols, h, w)
        })
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ((ci, r, col), v) in out.indexed_iter_mut() {
        *v = x[[ci, r / 2, col / 2]];
    }
    out
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h / 2, w / 2));
    for ((ci, r, col), &v) in dy.indexed_iter() {
        dx[[ci, r / 2, col / 2]] += v;
    }
    dx
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
}

pub fn split_channels(x: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}

/// Rows drawn uniformly on the unit sphere.
pub fn random_unit_rows(rows: usize, dim: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, dim), |_| rng.sample::<f64, _>(StandardNormal));
    for mut row in m.outer_iter_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    m
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    /// Relative error between an analytic and a numeric gradient vector.
    pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, 2, 3, 3, 2, true);
        let mut rng = stream_rng(0, Stream::Init, &[]);
        let params: Vec<f64> = (0..layout.len())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let x = Array3::from_shape_fn((2, 6, 8), |(c, i, j)| (c * 100 + i * 10 + j) as f64 * 0.01);
        let y = conv.forward(&params, x.view());
        assert_eq!(y.dim(), (3, 3, 4));
        for co in 0..3 {
            for oh in 0..3 {
                for ow in 0..4 {
                    let mut acc = params[conv.bias.clone().unwrap()][co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if (0..6).contains(&ih) && (0..8).contains(&iw) {
                                    acc += params
                                        [conv.weight.start + ((co * 2 + ci) * 3 + ki) * 3 + kj]
                                        * x[[ci, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[co, oh, ow]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, 2, 3, k, stride, true);
            let mut rng = stream_rng(1, Stream::Init, &[k as u64, stride as u64]);
            let params: Vec<f64> = (0..layout.len())
                .map(|_| rng.random::<f64>() - 0.5)
                .collect();
            let x = Array3::from_shape_fn((2, 4, 6), |_| rng.random::<f64>() - 0.5);
            let y0 = conv.forward(&params, x.view());
            let g = Array3::from_shape_fn(y0.dim(), |_| rng.random::<f64>() - 0.5);
            let f = |p: &[f64], x: &Array3<f64>| (conv.forward(p, x.view()) * &g).sum();
            let mut grads = vec![0.0; params.len()];
            let dx = conv
                .backward(&params, x.view(), &g, &mut grads, true)
                .unwrap();
            let h = 1e-6;
            let num: Vec<f64> = (0..params.len())
                .map(|i| {
                    let mut p = params.clone();
                    p[i] += h;
                    let up = f(&p, &x);
                    p[i] -= 2.0 * h;
                    (up - f(&p, &x)) / (2.0 * h)
                })
                .collect();
            assert!(rel_err(&grads, &num) < 1e-6);
            let numx: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut xp = x.clone();
                    xp.as_slice_mut().unwrap()[i] += h;
                    let up = f(&params, &xp);
                    xp.as_slice_mut().unwrap()[i] -= 2.0 * h;
                    (up - f(&params, &xp)) / (2.0 * h)
                })
                .collect();
            assert!(rel_err(dx.as_slice().unwrap(), &numx) < 1e-6);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = Array3::from_shape_fn((2, 2, 3), |(a, b, c)| (a + 2 * b + 3 * c) as f64);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (2, 4, 6));
        let dy = Array3::from_shape_fn((2, 4, 6), |(a, b, c)| (a * b + c) as f64 * 0.5);
        // <up(x), dy> == <x, up^T(dy)>
        let lhs = (&up * &dy).sum();
        let rhs = (&x * &upsample2_backward(&dy)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unit_rows() {
        let mut rng = stream_rng(3, Stream::Init, &[]);
        let m = random_unit_rows(5, 7, &mut rng);
        for row in m.outer_iter() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }
}
