//! Frames prepared for training and evaluation.

use std::path::Path;

use ndarray::Array2;

use super::config::ExperimentConfig;
use crate::dataset::{load_dataset, synthetic_scenes, Scene};
use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, PointCloud, RemapTable};
use crate::projection::{spherical_project, RangeImage};
use crate::rng::{derive_seed, Stream};
use crate::weak::{
    class_frequencies, focal_weights, propagate_voxel_labels, subsample_labels, LabelMask,
};

#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: PointCloud,
    /// Dense ground truth, used for evaluation only.
    pub gt: Vec<ClassId>,
    /// Weak labels after propagation; all unlabelled for validation frames.
    pub mask: LabelMask,
    pub image: RangeImage,
    /// Label of the retained point of each pixel, from `mask`.
    pub pixel_labels: Array2<ClassId>,
}

impl Frame {
    pub fn labelled_pixels(&self) -> usize {
        self.pixel_labels
            .iter()
            .filter(|&&l| l != crate::UNLABELLED)
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub focal_weights: Vec<f64>,
}

fn load_scenes(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    if cfg.data_dir.is_empty() {
        return synthetic_scenes(&cfg.scene_spec(), cfg.data_seed, cfg.scenes);
    }
    let remap = if cfg.remap.is_empty() {
        RemapTable::Identity
    } else {
        RemapTable::load(&cfg.remap)?
    };
    load_dataset(Path::new(&cfg.data_dir), &remap)
}

fn make_frame(
    cfg: &ExperimentConfig,
    cloud: PointCloud,
    gt: Vec<ClassId>,
    mask: LabelMask,
) -> Result<Frame> {
    let image = spherical_project(&cloud, &cfg.projection())?;
    let pixel_labels = image.pixel_labels(&mask.labels);
    Ok(Frame {
        cloud,
        gt,
        mask,
        image,
        pixel_labels,
    })
}

impl Dataset {
    /// Load or generate the scenes, hold out the last `val_scenes` and
    /// build the weak labels of the training frames.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let scenes = load_scenes(cfg)?;
        if cfg.val_scenes > scenes.len() {
            return Err(Error::Config(format!(
                "val_scenes ({}) exceeds the {} available scenes",
                cfg.val_scenes,
                scenes.len()
            )));
        }
        let n_train = scenes.len() - cfg.val_scenes;
        let mut train = Vec::with_capacity(n_train);
        let mut val = Vec::with_capacity(cfg.val_scenes);
        for (i, (cloud, gt)) in scenes.into_iter().enumerate() {
            if let Some(&bad) = gt
                .iter()
                .find(|&&l| l != crate::UNLABELLED && l as usize >= cfg.n_classes)
            {
                return Err(Error::InvalidClass {
                    class: bad as usize,
                    classes: cfg.n_classes,
                });
            }
            if i < n_train {
                let sub = derive_seed(cfg.seed, Stream::Subsample, &[i as u64]);
                let mut mask = subsample_labels(&gt, cfg.annotation_ratio, sub)?;
                if cfg.propagate {
                    let vox = derive_seed(cfg.seed, Stream::Voxel, &[i as u64]);
                    mask = propagate_voxel_labels(&cloud, &mask, cfg.voxel_size, vox)?;
                }
                train.push(make_frame(cfg, cloud, gt, mask)?);
            } else {
                let n = cloud.len();
                val.push(make_frame(cfg, cloud, gt, LabelMask::unlabelled(n))?);
            }
        }
        let focal_weights = if train.is_empty() {
            vec![1.0; cfg.n_classes]
        } else {
            let stats = class_frequencies(train.iter().map(|f| &f.mask), cfg.n_classes)?;
            focal_weights(&stats, cfg.weight_eps)
        };
        Ok(Self {
            train,
            val,
            focal_weights,
        })
    }
}
