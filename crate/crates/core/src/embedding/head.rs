//! Projection head: bilinear upsampling of every pyramid level to full
//! resolution, channel concatenation, two pointwise linear stages and
//! per-pixel ℓ2 normalisation.
//!
//! The head works on a set of pixels rather than the whole image, so training
//! only pays for the pixels whose embeddings are consumed (labelled pixels and
//! anchors). [`project_embeddings`] is the dense special case.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};

use super::layers::ParamLayout;
use super::{EmbeddingMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub bias: bool,
    /// Per-pixel channel normalisation between the two linear stages.
    pub layer_norm: bool,
    pub slope: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            bias: true,
            layer_norm: false,
            slope: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    din: usize,
    dout: usize,
    weight: Range<usize>,
    bias: Option<Range<usize>>,
}

impl Linear {
    fn new(layout: &mut ParamLayout, din: usize, dout: usize, bias: bool) -> Self {
        Self {
            din,
            dout,
            weight: layout.alloc(din * dout),
            bias: bias.then(|| layout.alloc(dout)),
        }
    }

    fn w<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.dout, self.din), &params[self.weight.clone()]).unwrap()
    }

    fn forward(&self, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.w(params).dot(x);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.outer_iter_mut().zip(&params[b.clone()]) {
                row += bv;
            }
        }
        y
    }

    fn backward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        {
            let mut gw =
                ArrayViewMut2::from_shape((self.dout, self.din), &mut grads[self.weight.clone()])
                    .unwrap();
            general_mat_mul(1.0, dy, &x.t(), 1.0, &mut gw);
        }
        if let Some(b) = &self.bias {
            for (g, row) in grads[b.clone()].iter_mut().zip(dy.outer_iter()) {
                *g += row.sum();
            }
        }
        self.w(params).t().dot(dy)
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    cfg: HeadConfig,
    in_ch: usize,
    l1: Linear,
    l2: Linear,
}

/// Intermediate values kept for the backward pass. Columns are pixels.
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    /// After the optional normalisation, before the activation.
    pre_act: Array2<f64>,
    /// Standard deviation per column when layer norm is on.
    ln_std: Vec<f64>,
    act: Array2<f64>,
    norms: Vec<f64>,
    pub embeddings: Array2<f64>,
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

impl ProjectionHead {
    pub fn new(layout: &mut ParamLayout, in_ch: usize, cfg: HeadConfig) -> Self {
        Self {
            cfg,
            in_ch,
            l1: Linear::new(layout, in_ch, cfg.embed_dim, cfg.bias),
            l2: Linear::new(layout, cfg.embed_dim, cfg.embed_dim, cfg.bias),
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        for l in [&self.l1, &self.l2] {
            let n = Normal::new(0.0, (2.0 / l.din as f64).sqrt()).unwrap();
            for w in &mut params[l.weight.clone()] {
                *w = n.sample(rng);
            }
            if let Some(b) = &l.bias {
                params[b.clone()].fill(0.0);
            }
        }
    }

    /// `features` is `(C_in, P)`; returns unit-norm `(D, P)` embeddings.
    pub fn forward(&self, params: &[f64], features: Array2<f64>) -> Result<HeadCache> {
        if features.nrows() != self.in_ch {
            return Err(Error::Shape(format!(
                "head expects {} input channels, got {}",
                self.in_ch,
                features.nrows()
            )));
        }
        let mut pre = self.l1.forward(params, &features);
        let mut ln_std = Vec::new();
        if self.cfg.layer_norm {
            let d = pre.nrows() as f64;
            for mut col in pre.columns_mut() {
                let mean = col.sum() / d;
                col -= mean;
                let std = (col.dot(&col) / d + LN_EPS).sqrt();
                col /= std;
                ln_std.push(std);
            }
        }
        let slope = self.cfg.slope;
        let act = pre.mapv(|v| if v > 0.0 { v } else { slope * v });
        let mut z = self.l2.forward(params, &act);
        let mut norms = Vec::with_capacity(z.ncols());
        for mut col in z.columns_mut() {
            let n = col.dot(&col).sqrt().max(NORM_FLOOR);
            col /= n;
            norms.push(n);
        }
        Ok(HeadCache {
            input: features,
            pre_act: pre,
            ln_std,
            act,
            norms,
            embeddings: z,
        })
    }

    /// Backpropagates `d_emb` (`(D, P)`), accumulating parameter gradients
    /// and returning the gradient w.r.t. the input features.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &HeadCache,
        d_emb: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        // d z = (d e - e (e · d e)) / |z|
        let mut dz = d_emb.clone();
        for (p, mut col) in dz.columns_mut().into_iter().enumerate() {
            let e = cache.embeddings.column(p);
            let proj = e.dot(&col);
            col.scaled_add(-proj, &e);
            col /= cache.norms[p];
        }
        let mut dpre = self.l2.backward(params, &cache.act, &dz, grads);
        let slope = self.cfg.slope;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_act)
            .for_each(|d, &v| {
                if v <= 0.0 {
                    *d *= slope;
                }
            });
        if self.cfg.layer_norm {
            let d = dpre.nrows() as f64;
            for (p, mut col) in dpre.columns_mut().into_iter().enumerate() {
                let y = cache.pre_act.column(p);
                let mean_g = col.sum() / d;
                let mean_gy = col.dot(&y) / d;
                let std = cache.ln_std[p];
                col.zip_mut_with(&y, |g, &yv| *g = (*g - mean_g - yv * mean_gy) / std);
            }
        }
        self.l1.backward(params, &cache.input, &dpre, grads)
    }
}

/// Bilinear sampling taps (index, weight) of full-resolution pixel `(r, c)`
/// on a level of size `h × w`, using half-pixel centres.
fn taps(
    r: usize,
    c: usize,
    full: (usize, usize),
    level: (usize, usize),
) -> [(usize, usize, f64); 4] {
    let coord = |x: usize, full: usize, n: usize| {
        let src = ((x as f64 + 0.5) * n as f64 / full as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let (r0, r1, fr) = coord(r, full.0, level.0);
    let (c0, c1, fc) = coord(c, full.1, level.1);
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c1, (1.0 - fr) * fc),
        (r1, c0, fr * (1.0 - fc)),
        (r1, c1, fr * fc),
    ]
}

/// Bilinearly sample every pyramid level at the given full-resolution pixels
/// and stack the channels: returns `(ΣC_s, P)`.
pub fn gather_features(
    pyramid: &FeaturePyramid,
    full: (usize, usize),
    pixels: &[(usize, usize)],
) -> Array2<f64> {
    let total: usize = pyramid.levels.iter().map(|l| l.dim().0).sum();
    let mut out = Array2::zeros((total, pixels.len()));
    let mut offset = 0;
    for level in &pyramid.levels {
        let (c, h, w) = level.dim();
        for (p, &(r, col)) in pixels.iter().enumerate() {
            let t = taps(r, col, full, (h, w));
            for ch in 0..c {
                let plane = level.index_axis(Axis(0), ch);
                out[[offset + ch, p]] = t.iter().map(|&(i, j, wt)| wt * plane[[i, j]]).sum();
            }
        }
        offset += c;
    }
    out
}

/// Adjoint of [`gather_features`]: scatter column gradients back onto the
/// pyramid levels.
pub fn scatter_features(
    pyramid: &FeaturePyramid,
    full: (usize, usize),
    pixels: &[(usize, usize)],
    dcols: &Array2<f64>,
) -> Vec<Array3<f64>> {
    let mut offset = 0;
    pyramid
        .levels
        .iter()
        .map(|level| {
            let (c, h, w) = level.dim();
            let mut d = Array3::zeros((c, h, w));
            for (p, &(r, col)) in pixels.iter().enumerate() {
                let t = taps(r, col, full, (h, w));
                for ch in 0..c {
                    let g = dcols[[offset + ch, p]];
                    for &(i, j, wt) in &t {
                        d[[ch, i, j]] += wt * g;
                    }
                }
            }
            offset += c;
            d
        })
        .collect()
}

/// Dense embedding map for every pixel of the full-resolution grid.
pub fn project_embeddings(
    head: &ProjectionHead,
    params: &[f64],
    pyramid: &FeaturePyramid,
) -> Result<EmbeddingMap> {
    let full = pyramid
        .levels
        .first()
        .map(|l| (l.dim().1, l.dim().2))
        .ok_or_else(|| Error::Shape("empty feature pyramid".into()))?;
    let pixels: Vec<(usize, usize)> = (0..full.0)
        .flat_map(|r| (0..full.1).map(move |c| (r, c)))
        .collect();
    let cache = head.forward(params, gather_features(pyramid, full, &pixels))?;
    let d = cache.embeddings.nrows();
    Ok(EmbeddingMap(
        cache
            .embeddings
            .into_shape_with_order((d, full.0, full.1))
            .unwrap(),
    ))
}
