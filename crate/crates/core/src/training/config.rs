//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::anchor::Strategy;
use crate::embedding::{HeadConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::projection::ProjectionConfig;
use crate::prototype::{AssignmentMode, BankConfig, InitMode};
use crate::synthetic::SceneSpec;

fn parse_value<T>(key: &str, raw: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

macro_rules! config {
    ($($field:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl ExperimentConfig {
            /// `(key, description)` for every option, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[$((stringify!($field), $doc),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Current values rendered as config-file text.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string()),)*]
            }
        }
    };
}

config! {
    seed: u64 = 0, "training seed (initialization, label subsampling, sampling)";
    data_dir: String = String::new(), "dataset directory; empty generates synthetic scenes in memory";
    remap: String = String::new(), "label remap table for data_dir; empty keeps raw ids";
    data_seed: u64 = 0, "seed of the synthetic scenes";
    scenes: usize = 64, "number of synthetic scenes";
    val_scenes: usize = 16, "scenes held out for validation (the last ones)";
    n_classes: usize = 5, "number of semantic classes";
    scene_noise: f64 = 0.02, "synthetic point jitter, meters";
    proj_height: usize = 32, "range image rows";
    proj_width: usize = 256, "range image columns";
    fov_up: f64 = 15.0, "upper vertical field of view, degrees";
    fov_down: f64 = -25.0, "lower vertical field of view, degrees";
    sensor_height: f64 = 1.8, "sensor height above the point cloud origin, meters";
    annotation_ratio: f64 = 0.001, "fraction of labelled points kept per frame";
    propagate: bool = true, "spread labels to points sharing a voxel";
    voxel_size: f64 = 0.06, "label propagation voxel edge, meters";
    weight_eps: f64 = 1e-6, "frequency floor in the focal class weights";
    backbone: String = crate::embedding::TOY_UNET.to_string(), "segmentation backbone";
    width0: usize = 16, "backbone channels at full resolution";
    width1: usize = 32, "backbone channels at 1/2 resolution";
    width2: usize = 64, "backbone channels at 1/4 resolution";
    embed_dim: usize = 256, "embedding dimension";
    head_bias: bool = true, "bias terms in the projection head";
    head_layer_norm: bool = false, "layer normalization in the projection head";
    n_prototypes: usize = crate::prototype::DEFAULT_N_PROTOTYPES, "prototypes per class";
    sigma: f64 = crate::prototype::DEFAULT_SIGMA, "prototype momentum";
    sinkhorn_iters: usize = crate::prototype::sinkhorn::DEFAULT_ITERATIONS, "Sinkhorn rounds";
    epsilon: f64 = crate::prototype::sinkhorn::DEFAULT_EPSILON, "Sinkhorn entropic regularizer";
    gumbel_tau: f64 = crate::prototype::sinkhorn::DEFAULT_GUMBEL_TAU, "Gumbel noise scale in prototype mapping";
    bank_init: InitMode = InitMode::FirstBatch, "prototype initialization: first_batch|random";
    bank_assignment: AssignmentMode = AssignmentMode::Hard, "cluster mean weighting: hard|soft";
    anchor_strategy: Strategy = Strategy::Entropy, "anchor sampling: entropy|softmax_prob|all";
    lambda_foc: f64 = 1.0, "focal loss weight";
    lambda_lov: f64 = 1.0, "Lovasz loss weight";
    lambda_nce: f64 = 0.1, "contrastive loss weight";
    temperature: f64 = crate::losses::DEFAULT_TEMPERATURE, "contrastive temperature";
    gamma: f64 = crate::losses::DEFAULT_GAMMA, "focal focusing exponent";
    epochs: usize = 100, "training epochs";
    warmup_epochs: usize = 5, "epochs without the contrastive loss";
    learning_rate: f64 = 0.01, "AdamW learning rate";
    weight_decay: f64 = 0.01, "AdamW decoupled weight decay";
    beta1: f64 = 0.9, "AdamW first moment decay";
    beta2: f64 = 0.999, "AdamW second moment decay";
    adam_eps: f64 = 1e-8, "AdamW denominator floor";
    batch_size: usize = 4, "frames per optimizer step";
    augment: bool = true, "random horizontal flip and column rotation";
    eval_every: usize = 1, "validate every this many epochs (the last epoch is always validated)";
    knn: bool = false, "kNN post-processing at evaluation";
    knn_k: usize = crate::knn::DEFAULT_K, "kNN neighbours";
    knn_window: usize = crate::knn::DEFAULT_WINDOW, "kNN search window (odd)";
    audit_bank: bool = false, "check that bank updates only consume labelled pixels";
}

impl ExperimentConfig {
    /// Defaults overridden by the lines of a config file. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    /// Like [`Self::parse`] but starting from `base` instead of the defaults.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its default and description, for help output.
    pub fn help_text() -> String {
        let defaults = Self::default().entries();
        let mut s =
            String::from("Config keys (file lines `key = value`, or --override key=value):\n");
        for ((key, doc), (_, value)) in Self::KEYS.iter().zip(defaults) {
            let shown = if value.is_empty() {
                "\"\"".to_string()
            } else {
                value
            };
            s.push_str(&format!("  {key:<18} {doc} [default: {shown}]\n"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            height: self.proj_height,
            width: self.proj_width,
            fov_up: self.fov_up,
            fov_down: self.fov_down,
            sensor_height: self.sensor_height,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            n_classes: self.n_classes,
            noise_sigma: self.scene_noise,
            sensor: self.projection(),
            ..Default::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            widths: [self.width0, self.width1, self.width2],
            n_classes: self.n_classes,
            head: HeadConfig {
                embed_dim: self.embed_dim,
                bias: self.head_bias,
                layer_norm: self.head_layer_norm,
                ..Default::default()
            },
        }
    }

    pub fn bank(&self) -> BankConfig {
        BankConfig {
            n_prototypes: self.n_prototypes,
            sigma: self.sigma,
            sinkhorn_iters: self.sinkhorn_iters,
            epsilon: self.epsilon,
            gumbel_tau: self.gumbel_tau,
            init: self.bank_init,
            assignment: self.bank_assignment,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_foc: self.lambda_foc,
            lambda_lov: self.lambda_lov,
            lambda_nce: self.lambda_nce,
            temperature: self.temperature,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return err(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.n_classes < 2 || self.n_classes >= crate::UNLABELLED as usize {
            return err(format!(
                "n_classes must be in [2, {}), got {}",
                crate::UNLABELLED,
                self.n_classes
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return err("batch_size and eval_every must be >= 1".into());
        }
        if self.data_dir.is_empty() && self.val_scenes > self.scenes {
            return err(format!(
                "val_scenes ({}) > scenes ({})",
                self.val_scenes, self.scenes
            ));
        }
        if !(self.annotation_ratio > 0.0 && self.annotation_ratio <= 1.0) {
            return err(format!(
                "annotation_ratio must lie in (0, 1], got {}",
                self.annotation_ratio
            ));
        }
        if !(self.voxel_size > 0.0) || !(self.weight_eps > 0.0) {
            return err("voxel_size and weight_eps must be > 0".into());
        }
        if !(self.learning_rate > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return err("invalid optimizer settings".into());
        }
        if self.knn_k == 0 || self.knn_window.is_multiple_of(2) {
            return err("knn_k must be >= 1 and knn_window odd".into());
        }
        let proj = self.projection();
        proj.validate()?;
        if !proj.height.is_multiple_of(4) || !proj.width.is_multiple_of(4) {
            return err("proj_height and proj_width must be multiples of 4".into());
        }
        if self.width0 == 0 || self.width1 == 0 || self.width2 == 0 || self.embed_dim == 0 {
            return err("layer widths must be positive".into());
        }
        self.bank().validate()?;
        self.loss_weights().validate()
    }
}
