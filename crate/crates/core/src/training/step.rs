//! One optimizer step of the full method and the epoch loop around it.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::ExperimentConfig;
use super::data::Frame;
use super::eval::pseudo_labels;
use super::optimizer::AdamW;
use crate::anchor::{
    all_anchors, anchor_budget, sample_anchors, strategy_tables, AnchorSet, Strategy,
};
use crate::embedding::{gather_features, scatter_features, BackboneForward, HeadCache, SegModel};
use crate::error::{Error, Result};
use crate::losses::{
    focal_loss, info_nce_pix2proto, lovasz_softmax, softmax, softmax_backward, total_loss,
    LossWeights,
};
use crate::pointcloud::{ClassId, UNLABELLED};
use crate::projection::RangeImage;
use crate::prototype::{BankConfig, PrototypeBank};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Network input for one step: a (possibly augmented) range image and its
/// pixel labels.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: RangeImage,
    pub labels: Array2<ClassId>,
}

impl BatchItem {
    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            image: frame.image.clone(),
            labels: frame.pixel_labels.clone(),
        }
    }

    /// Output column `c` takes input column `perm[c]`, for image and labels alike.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let labels = Array2::from_shape_fn(self.labels.dim(), |(r, c)| self.labels[[r, perm[c]]]);
        Self {
            image: self.image.permute_columns(perm),
            labels,
        }
    }
}

/// Random horizontal flip followed by a circular column shift.
pub fn augmentation_perm(width: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let flip = rng.random_bool(0.5);
    let shift = rng.random_range(0..width);
    (0..width)
        .map(|c| {
            let src = (c + shift) % width;
            if flip {
                width - 1 - src
            } else {
                src
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub focal: f64,
    pub lovasz: f64,
    pub nce: f64,
    pub total: f64,
    pub labelled_pixels: usize,
    pub valid_pixels: usize,
    pub anchors: usize,
}

/// Record of what the bank consumed, kept when `audit_bank` is on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankAudit {
    pub updates: usize,
    pub pixels: usize,
    /// Consumed pixels that carry no weak label.
    pub violations: usize,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: SegModel,
    pub bank: PrototypeBank,
    pub opt: AdamW,
    pub focal_weights: Vec<f64>,
    pub audit: Option<BankAudit>,
    weights: LossWeights,
    bank_cfg: BankConfig,
    step: usize,
}

struct FrameState {
    fwd: BackboneForward,
    probs: Array3<f64>,
    anchors: AnchorSet,
    anchor_cache: Option<HeadCache>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, focal_weights: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if focal_weights.len() != cfg.n_classes {
            return Err(Error::Shape(format!(
                "{} focal weights for {} classes",
                focal_weights.len(),
                cfg.n_classes
            )));
        }
        let model = SegModel::new(&cfg.model(), cfg.seed)?;
        let bank_cfg = cfg.bank();
        let bank = PrototypeBank::new(
            cfg.n_classes,
            bank_cfg.n_prototypes,
            cfg.embed_dim,
            bank_cfg.sigma,
            bank_cfg.init,
            cfg.seed,
        )?;
        let opt = AdamW::new(
            model.n_params(),
            cfg.learning_rate,
            cfg.weight_decay,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        Ok(Self {
            cfg: cfg.clone(),
            model,
            bank,
            opt,
            focal_weights,
            audit: cfg.audit_bank.then(BankAudit::default),
            weights: cfg.loss_weights(),
            bank_cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn embed(
        &self,
        fwd: &BackboneForward,
        full: (usize, usize),
        pixels: &[(usize, usize)],
    ) -> Result<HeadCache> {
        self.model.head.forward(
            &self.model.params,
            gather_features(&fwd.pyramid, full, pixels),
        )
    }

    /// Cluster labelled-pixel embeddings of every class into the bank.
    fn update_bank(&mut self, batch: &[BatchItem], states: &[FrameState]) -> Result<()> {
        let k = self.cfg.n_classes;
        let d = self.cfg.embed_dim;
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (item, st) in batch.iter().zip(states) {
            let pixels: Vec<(usize, usize)> = item
                .labels
                .indexed_iter()
                .filter(|(_, &l)| l != UNLABELLED)
                .map(|(rc, _)| rc)
                .collect();
            if pixels.is_empty() {
                continue;
            }
            let cache = self.embed(&st.fwd, item.labels.dim(), &pixels)?;
            for (p, &(r, c)) in pixels.iter().enumerate() {
                let class = item.labels[[r, c]] as usize;
                if class >= k {
                    return Err(Error::InvalidClass { class, classes: k });
                }
                per_class[class].extend(cache.embeddings.column(p).iter());
            }
            if let Some(audit) = &mut self.audit {
                audit.pixels += pixels.len();
                // Every consumed pixel must carry a weak label.
                audit.violations += pixels
                    .iter()
                    .filter(|&&(r, c)| item.labels[[r, c]] == UNLABELLED)
                    .count();
            }
        }
        for (class, flat) in per_class.into_iter().enumerate() {
            if flat.is_empty() {
                continue;
            }
            let emb = Array2::from_shape_vec((flat.len() / d, d), flat).expect("rows of length d");
            let seed = derive_seed(
                self.cfg.seed,
                Stream::Gumbel,
                &[self.step as u64, class as u64],
            );
            self.bank
                .cluster_and_update(class, emb.view(), &self.bank_cfg, seed)?;
            if let Some(audit) = &mut self.audit {
                audit.updates += 1;
            }
        }
        Ok(())
    }

    fn select_anchors(
        &self,
        item: &BatchItem,
        st: &FrameState,
        epoch: usize,
        frame: usize,
    ) -> Result<AnchorSet> {
        let pred = pseudo_labels(&st.fwd.logits.0, &item.image.valid);
        let tables = strategy_tables(
            self.cfg.anchor_strategy,
            &st.probs,
            &pred,
            &item.image.valid,
        )?;
        let set = if self.cfg.anchor_strategy == Strategy::All {
            all_anchors(&tables)
        } else {
            let pseudo_count = tables.iter().map(|t| t.len()).sum();
            let budget =
                anchor_budget(epoch, self.cfg.warmup_epochs, self.cfg.epochs, pseudo_count);
            let seed = derive_seed(
                self.cfg.seed,
                Stream::Anchors,
                &[self.step as u64, frame as u64],
            );
            sample_anchors(&tables, budget, seed)
        };
        // Classes the bank has never seen have no keys yet.
        let mut kept = AnchorSet::default();
        for (&px, &c) in set.pixels.iter().zip(&set.classes) {
            if self.bank.initialized[c as usize] {
                kept.pixels.push(px);
                kept.classes.push(c);
            }
        }
        Ok(kept)
    }

    /// Forward, bank update, anchor sampling, losses and one AdamW update.
    pub fn train_step(&mut self, batch: &[BatchItem], epoch: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut states = Vec::with_capacity(batch.len());
        for item in batch {
            let fwd = self.model.forward(&item.image)?;
            let probs = softmax(&fwd.logits.0);
            states.push(FrameState {
                fwd,
                probs,
                anchors: AnchorSet::default(),
                anchor_cache: None,
            });
        }

        self.update_bank(batch, &states)?;

        let contrastive = epoch >= self.cfg.warmup_epochs && self.weights.lambda_nce > 0.0;
        if contrastive {
            for (i, item) in batch.iter().enumerate() {
                let anchors = self.select_anchors(item, &states[i], epoch, i)?;
                if !anchors.is_empty() {
                    states[i].anchor_cache =
                        Some(self.embed(&states[i].fwd, item.labels.dim(), &anchors.pixels)?);
                }
                states[i].anchors = anchors;
            }
        }

        let b = batch.len() as f64;
        let mut m = StepMetrics::default();
        let mut dlogits = Vec::with_capacity(batch.len());
        for (item, st) in batch.iter().zip(&states) {
            let (lf, dfoc) = focal_loss(
                &st.fwd.logits.0,
                &item.labels,
                &self.focal_weights,
                self.weights.gamma,
            )?;
            let (ll, dlov) = lovasz_softmax(&st.probs, &item.labels)?;
            m.focal += lf / b;
            m.lovasz += ll / b;
            m.labelled_pixels += item.labels.iter().filter(|&&l| l != UNLABELLED).count();
            m.valid_pixels += item.image.n_valid();
            let dz = dfoc * self.weights.lambda_foc
                + softmax_backward(&st.probs, &dlov) * self.weights.lambda_lov;
            dlogits.push(dz / b);
        }

        // Contrastive term pooled over all anchors of the batch.
        let d = self.cfg.embed_dim;
        let n_anchors: usize = states.iter().map(|s| s.anchors.len()).sum();
        let mut d_anchor = Array2::zeros((n_anchors, d));
        if n_anchors > 0 {
            let mut emb = Array2::zeros((n_anchors, d));
            let mut classes = Vec::with_capacity(n_anchors);
            let mut row = 0;
            for st in &states {
                if let Some(cache) = &st.anchor_cache {
                    let n = st.anchors.len();
                    emb.slice_mut(ndarray::s![row..row + n, ..])
                        .assign(&cache.embeddings.t());
                    classes.extend_from_slice(&st.anchors.classes);
                    row += n;
                }
            }
            let (nce, g) =
                info_nce_pix2proto(emb.view(), &classes, &self.bank, self.weights.temperature)?;
            m.nce = nce;
            d_anchor = g * self.weights.lambda_nce;
        }
        m.anchors = n_anchors;
        m.total = total_loss(m.focal, m.lovasz, m.nce, &self.weights);
        if !(m.focal.is_finite() && m.lovasz.is_finite() && m.nce.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.step,
                focal: m.focal,
                lovasz: m.lovasz,
                nce: m.nce,
            });
        }

        let params = &self.model.params;
        let mut grads = vec![0.0; params.len()];
        let mut row = 0;
        for ((item, st), dz) in batch.iter().zip(&states).zip(&dlogits) {
            let mut dpyramid = Vec::new();
            if let Some(cache) = &st.anchor_cache {
                let n = st.anchors.len();
                let d_emb = d_anchor.slice(ndarray::s![row..row + n, ..]).t().to_owned();
                row += n;
                let dfeat = self.model.head.backward(params, cache, &d_emb, &mut grads);
                dpyramid = scatter_features(
                    &st.fwd.pyramid,
                    item.labels.dim(),
                    &st.anchors.pixels,
                    &dfeat,
                );
            }
            self.model
                .backbone
                .backward(params, &st.fwd, dz, &dpyramid, &mut grads);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.step,
                focal: m.focal,
                lovasz: m.lovasz,
                nce: m.nce,
            });
        }
        self.opt.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(m)
    }

    /// One pass over `frames` in a seeded order. Returns the step-averaged
    /// losses and the summed pixel counts.
    pub fn train_epoch(&mut self, frames: &[Frame], epoch: usize) -> Result<StepMetrics> {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut stream_rng(
            self.cfg.seed,
            Stream::Shuffle,
            &[epoch as u64],
        ));
        let mut sum = StepMetrics::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let item = BatchItem::from_frame(&frames[i]);
                    if self.cfg.augment {
                        let mut rng =
                            stream_rng(self.cfg.seed, Stream::Augment, &[epoch as u64, i as u64]);
                        item.permute_columns(&augmentation_perm(item.labels.ncols(), &mut rng))
                    } else {
                        item
                    }
                })
                .collect();
            let m = self.train_step(&batch, epoch)?;
            sum.focal += m.focal;
            sum.lovasz += m.lovasz;
            sum.nce += m.nce;
            sum.total += m.total;
            sum.labelled_pixels += m.labelled_pixels;
            sum.valid_pixels += m.valid_pixels;
            sum.anchors += m.anchors;
            steps += 1;
        }
        if steps > 0 {
            let s = steps as f64;
            sum.focal /= s;
            sum.lovasz /= s;
            sum.nce /= s;
            sum.total /= s;
        }
        Ok(sum)
    }
}

/// Embeddings as `(P, D)` rows, for callers that want to inspect them.
pub fn embeddings_at(
    model: &SegModel,
    fwd: &BackboneForward,
    full: (usize, usize),
    pixels: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let cache = model
        .head
        .forward(&model.params, gather_features(&fwd.pyramid, full, pixels))?;
    Ok(cache.embeddings.t().to_owned())
}
