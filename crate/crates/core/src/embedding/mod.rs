//! Segmentation backbone contract and the pixel embedding head.
//!
//! A backbone maps a range image to per-pixel class logits plus a feature
//! pyramid whose level `s` has resolution `H/2^s × W/2^s`. The projection head
//! turns the pyramid into unit-norm per-pixel embeddings. Parameters of both
//! live in a single flat buffer owned by [`SegModel`].

pub mod backbone;
pub mod head;
pub mod layers;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::projection::{RangeImage, CH_INTENSITY, CH_RANGE, CH_X, CH_Y, CH_Z, N_CHANNELS};
use crate::rng::{stream_rng, Rng, Stream};

pub use backbone::{ToyUNet, TOY_UNET};
pub use head::{
    gather_features, project_embeddings, scatter_features, HeadCache, HeadConfig, ProjectionHead,
};
use layers::ParamLayout;

/// `(K, H, W)` class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Array3<f64>);

/// `(D, H, W)` unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap(pub Array3<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// Level `s` is `(C_s, H/2^s, W/2^s)`.
    pub levels: Vec<Array3<f64>>,
}

/// Output of a backbone forward pass together with whatever the backbone
/// needs to run its backward pass.
#[derive(Debug, Clone)]
pub struct BackboneForward {
    pub logits: Logits,
    pub pyramid: FeaturePyramid,
    pub activations: Vec<Array3<f64>>,
}

pub trait Backbone: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn in_channels(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn pyramid_channels(&self) -> Vec<usize>;
    /// Input height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize;
    fn init(&self, params: &mut [f64], rng: &mut Rng);
    fn forward(&self, params: &[f64], input: &Array3<f64>) -> Result<BackboneForward>;
    /// Accumulate parameter gradients given gradients w.r.t. the logits and
    /// each pyramid level. Missing pyramid entries count as zero.
    fn backward(
        &self,
        params: &[f64],
        fwd: &BackboneForward,
        dlogits: &Array3<f64>,
        dpyramid: &[Array3<f64>],
        grads: &mut [f64],
    );
}

/// Network input channels: the five range-image channels plus a validity mask.
pub const INPUT_CHANNELS: usize = N_CHANNELS + 1;

/// Convert a range image to the network input, scaling each channel to
/// roughly unit magnitude. Invalid pixels are all zero.
pub fn image_to_input(img: &RangeImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    let mut x = Array3::zeros((INPUT_CHANNELS, h, w));
    const SCALE: [(usize, f64); 5] = [
        (CH_RANGE, 1.0 / 20.0),
        (CH_X, 1.0 / 20.0),
        (CH_Y, 1.0 / 20.0),
        (CH_Z, 1.0 / 2.0),
        (CH_INTENSITY, 1.0),
    ];
    for r in 0..h {
        for c in 0..w {
            if !img.valid[[r, c]] {
                continue;
            }
            for (ch, s) in SCALE {
                x[[ch, r, c]] = img.channels[[ch, r, c]] as f64 * s;
            }
            x[[N_CHANNELS, r, c]] = 1.0;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: String,
    pub widths: [usize; 3],
    pub n_classes: usize,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: TOY_UNET.into(),
            widths: [16, 32, 64],
            n_classes: 5,
            head: HeadConfig::default(),
        }
    }
}

/// Backbone plus projection head over one flat parameter vector.
#[derive(Debug)]
pub struct SegModel {
    pub backbone: Box<dyn Backbone>,
    pub head: ProjectionHead,
    pub params: Vec<f64>,
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if cfg.widths.contains(&0) || cfg.head.embed_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let backbone: Box<dyn Backbone> = match cfg.backbone.as_str() {
            TOY_UNET => Box::new(ToyUNet::new(
                &mut layout,
                INPUT_CHANNELS,
                cfg.widths,
                cfg.n_classes,
            )),
            other => {
                return Err(Error::Config(format!(
                    "unknown backbone {other:?} (available: {TOY_UNET})"
                )))
            }
        };
        let in_ch = backbone.pyramid_channels().iter().sum();
        let head = ProjectionHead::new(&mut layout, in_ch, cfg.head);
        let mut params = vec![0.0; layout.len()];
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        backbone.init(&mut params, &mut rng);
        head.init(&mut params, &mut rng);
        Ok(Self {
            backbone,
            head,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, img: &RangeImage) -> Result<BackboneForward> {
        self.backbone.forward(&self.params, &image_to_input(img))
    }

    pub fn embeddings(&self, fwd: &BackboneForward) -> Result<EmbeddingMap> {
        project_embeddings(&self.head, &self.params, &fwd.pyramid)
    }
}
