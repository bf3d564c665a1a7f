//! Sparse annotations: random subsampling of dense labels, voxel label
//! propagation and the class statistics behind the focal-loss weights.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, PointCloud, UNLABELLED};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.06;
pub const DEFAULT_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Propagated,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Vec<ClassId>,
    pub provenance: Vec<Provenance>,
}

impl LabelMask {
    pub fn unlabelled(n: usize) -> Self {
        Self {
            labels: vec![UNLABELLED; n],
            provenance: vec![Provenance::None; n],
        }
    }

    /// Every labelled entry of `dense` becomes ORIGINAL.
    pub fn from_dense(dense: &[ClassId]) -> Self {
        Self {
            labels: dense.to_vec(),
            provenance: dense
                .iter()
                .map(|&l| {
                    if l == UNLABELLED {
                        Provenance::None
                    } else {
                        Provenance::Original
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_labelled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELLED).count()
    }

    pub fn n_original(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == Provenance::Original)
            .count()
    }

    /// Checks `provenance == None ⇔ label == UNLABELLED` and `label < n_classes`.
    pub fn check(&self, n_classes: usize) -> Result<()> {
        if self.labels.len() != self.provenance.len() {
            return Err(Error::Shape("label and provenance lengths differ".into()));
        }
        for (&l, &p) in self.labels.iter().zip(&self.provenance) {
            if (p == Provenance::None) != (l == UNLABELLED) {
                return Err(Error::Shape("provenance disagrees with label".into()));
            }
            if l != UNLABELLED && l as usize >= n_classes {
                return Err(Error::InvalidClass {
                    class: l as usize,
                    classes: n_classes,
                });
            }
        }
        Ok(())
    }
}

/// Number of points kept when subsampling `n` labelled points at `ratio`.
pub fn subsample_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((ratio * n as f64).round() as usize).clamp(1, n)
    }
}

/// Keep exactly `max(1, round(ratio · N))` labels, drawn uniformly without
/// replacement, where `N` counts the labelled entries of `dense`.
pub fn subsample_labels(dense: &[ClassId], ratio: f64, seed: u64) -> Result<LabelMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "annotation ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let candidates: Vec<usize> = (0..dense.len())
        .filter(|&i| dense[i] != UNLABELLED)
        .collect();
    let keep = subsample_count(candidates.len(), ratio);
    let mut rng = stream_rng(seed, Stream::Subsample, &[]);
    let mut mask = LabelMask::unlabelled(dense.len());
    for j in index::sample(&mut rng, candidates.len(), keep) {
        let i = candidates[j];
        mask.labels[i] = dense[i];
        mask.provenance[i] = Provenance::Original;
    }
    Ok(mask)
}

type VoxelKey = (i64, i64, i64);

fn voxel_key(p: [f32; 3], size: f64) -> VoxelKey {
    let f = |v: f32| (v as f64 / size).floor() as i64;
    (f(p[0]), f(p[1]), f(p[2]))
}

/// Spread ORIGINAL labels to every point sharing their voxel. Voxels with
/// several distinct ORIGINAL classes pick one uniformly at random; the draw
/// is keyed by the voxel coordinate, so it does not depend on point order.
pub fn propagate_voxel_labels(
    cloud: &PointCloud,
    mask: &LabelMask,
    voxel_size: f64,
    seed: u64,
) -> Result<LabelMask> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if cloud.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            cloud.len(),
            mask.len()
        )));
    }
    let mut voxels: BTreeMap<VoxelKey, (Vec<usize>, Vec<ClassId>)> = BTreeMap::new();
    for (i, &p) in cloud.coords.iter().enumerate() {
        let entry = voxels.entry(voxel_key(p, voxel_size)).or_default();
        entry.0.push(i);
        if mask.provenance[i] == Provenance::Original {
            entry.1.push(mask.labels[i]);
        }
    }
    let mut out = mask.clone();
    for (key, (points, mut classes)) in voxels {
        if classes.is_empty() {
            continue;
        }
        classes.sort_unstable();
        classes.dedup();
        let label = if classes.len() == 1 {
            classes[0]
        } else {
            let mut rng = stream_rng(
                seed,
                Stream::Voxel,
                &[key.0 as u64, key.1 as u64, key.2 as u64],
            );
            classes[rng.random_range(0..classes.len())]
        };
        for i in points {
            if out.provenance[i] != Provenance::Original {
                out.labels[i] = label;
                out.provenance[i] = Provenance::Propagated;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub freq: Vec<f64>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoLabels);
        }
        let freq = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { counts, freq })
    }
}

/// Class frequencies over ORIGINAL labels of one or more masks.
pub fn class_frequencies<'a>(
    masks: impl IntoIterator<Item = &'a LabelMask>,
    n_classes: usize,
) -> Result<ClassStats> {
    let mut counts = vec![0u64; n_classes];
    for mask in masks {
        for (&l, &p) in mask.labels.iter().zip(&mask.provenance) {
            if p != Provenance::Original {
                continue;
            }
            let slot = counts.get_mut(l as usize).ok_or(Error::InvalidClass {
                class: l as usize,
                classes: n_classes,
            })?;
            *slot += 1;
        }
    }
    ClassStats::from_counts(counts)
}

/// `w_k = ln(1 + 1 / max(freq_k, eps))`.
pub fn focal_weights(stats: &ClassStats, eps: f64) -> Vec<f64> {
    stats
        .freq
        .iter()
        .map(|&f| (1.0 + 1.0 / f.max(eps)).ln())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_one_keeps_everything() {
        let dense = vec![0, 1, 2, 1];
        let m = subsample_labels(&dense, 1.0, 3).unwrap();
        assert_eq!(m.labels, dense);
        assert!(m.provenance.iter().all(|&p| p == Provenance::Original));
    }

    #[test]
    fn subsample_counts() {
        let dense = vec![1; 10_000];
        assert_eq!(subsample_labels(&dense, 0.001, 1).unwrap().n_labelled(), 10);
        let dense = vec![1; 50];
        assert_eq!(subsample_labels(&dense, 0.001, 1).unwrap().n_labelled(), 1);
        assert_eq!(subsample_labels(&[], 0.5, 1).unwrap().n_labelled(), 0);
        assert!(subsample_labels(&dense, 0.0, 1).is_err());
        assert!(subsample_labels(&dense, 1.5, 1).is_err());
    }

    #[test]
    fn subsample_is_seeded() {
        let dense: Vec<ClassId> = (0..1000).map(|i| (i % 3) as ClassId).collect();
        let a = subsample_labels(&dense, 0.05, 9).unwrap();
        assert_eq!(a, subsample_labels(&dense, 0.05, 9).unwrap());
        assert_ne!(a, subsample_labels(&dense, 0.05, 10).unwrap());
        a.check(3).unwrap();
    }

    fn cloud(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec(), vec![0.0; points.len()]).unwrap()
    }

    #[test]
    fn voxel_spreads_single_label() {
        let c = cloud(&[
            [0.01, 0.01, 0.01],
            [0.02, 0.03, 0.04],
            [0.05, 0.0, 0.0],
            [0.5, 0.5, 0.5],
        ]);
        let mut m = LabelMask::unlabelled(4);
        m.labels[1] = 3;
        m.provenance[1] = Provenance::Original;
        let out = propagate_voxel_labels(&c, &m, 0.06, 0).unwrap();
        assert_eq!(out.labels, vec![3, 3, 3, UNLABELLED]);
        assert_eq!(
            out.provenance,
            vec![
                Provenance::Propagated,
                Provenance::Original,
                Provenance::Propagated,
                Provenance::None
            ]
        );
    }

    #[test]
    fn voxel_floor_binning_at_origin() {
        // -0.01 and 0.01 fall in different voxels
        let c = cloud(&[[-0.01, 0.0, 0.0], [0.01, 0.0, 0.0]]);
        let mut m = LabelMask::unlabelled(2);
        m.labels[1] = 1;
        m.provenance[1] = Provenance::Original;
        let out = propagate_voxel_labels(&c, &m, 0.06, 0).unwrap();
        assert_eq!(out.labels[0], UNLABELLED);
    }

    #[test]
    fn voxel_conflict_is_random_but_seeded() {
        let c = cloud(&[
            [0.01, 0.0, 0.0],
            [0.02, 0.0, 0.0],
            [0.03, 0.0, 0.0],
            [0.04, 0.0, 0.0],
        ]);
        let mut m = LabelMask::unlabelled(4);
        m.labels[0] = 1;
        m.labels[1] = 2;
        m.provenance[0] = Provenance::Original;
        m.provenance[1] = Provenance::Original;
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let out = propagate_voxel_labels(&c, &m, 0.06, seed).unwrap();
            assert_eq!(out, propagate_voxel_labels(&c, &m, 0.06, seed).unwrap());
            // originals untouched, the rest share one choice
            assert_eq!(&out.labels[..2], &[1, 2]);
            assert_eq!(out.labels[2], out.labels[3]);
            assert!(out.labels[2] == 1 || out.labels[2] == 2);
            seen.insert(out.labels[2]);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn voxel_without_labels_is_identity() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let m = LabelMask::unlabelled(2);
        assert_eq!(propagate_voxel_labels(&c, &m, 0.06, 0).unwrap(), m);
        assert!(propagate_voxel_labels(&c, &m, 0.0, 0).is_err());
    }

    #[test]
    fn frequencies_use_originals_only() {
        let c = cloud(&[
            [0.0, 0.0, 0.0],
            [0.01, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        let m = LabelMask {
            labels: vec![0, UNLABELLED, 0, 0, 1],
            provenance: vec![
                Provenance::Original,
                Provenance::None,
                Provenance::Original,
                Provenance::Original,
                Provenance::Original,
            ],
        };
        let s = class_frequencies([&m], 2).unwrap();
        assert_eq!(s.counts, vec![3, 1]);
        assert_eq!(s.freq, vec![0.75, 0.25]);
        let p = propagate_voxel_labels(&c, &m, 0.06, 0).unwrap();
        assert_eq!(p.n_labelled(), 5);
        assert_eq!(class_frequencies([&p], 2).unwrap(), s);

        let one = LabelMask::from_dense(&[2, 2]);
        assert_eq!(
            class_frequencies([&one], 3).unwrap().freq,
            vec![0.0, 0.0, 1.0]
        );
        assert!(matches!(
            class_frequencies([&LabelMask::unlabelled(3)], 2),
            Err(Error::NoLabels)
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn focal_weight_values() {
        let s = ClassStats::from_counts(vec![1, 0]).unwrap();
        let w = focal_weights(&s, 1e-6);
        assert!((w[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((w[0] - 0.6931).abs() < 1e-4);
        assert!((w[1] - (1.0f64 + 1e6).ln()).abs() < 1e-12);
        assert!((w[1] - 13.8155).abs() < 1e-4);
        let eq = focal_weights(&ClassStats::from_counts(vec![5, 5]).unwrap(), 1e-6);
        assert_eq!(eq[0], eq[1]);
    }

    proptest! {
        #[test]
        fn propagation_invariants(
            pts in prop::collection::vec((0.0f32..0.5, 0.0f32..0.5, 0.0f32..0.2, 0u16..4, any::<bool>()), 1..150),
            seed in any::<u64>(),
        ) {
            let c = cloud(&pts.iter().map(|p| [p.0, p.1, p.2]).collect::<Vec<_>>());
            let mut m = LabelMask::unlabelled(pts.len());
            for (i, p) in pts.iter().enumerate() {
                if p.4 && i % 5 == 0 {
                    m.labels[i] = p.3;
                    m.provenance[i] = Provenance::Original;
                }
            }
            let out = propagate_voxel_labels(&c, &m, 0.06, seed).unwrap();
            out.check(4).unwrap();
            prop_assert!(out.n_labelled() >= m.n_labelled());
            for i in 0..pts.len() {
                if m.provenance[i] == Provenance::Original {
                    prop_assert_eq!(out.labels[i], m.labels[i]);
                    prop_assert_eq!(out.provenance[i], Provenance::Original);
                }
            }
            let mut state: BTreeMap<VoxelKey, (bool, bool)> = BTreeMap::new();
            for (i, &p) in c.coords.iter().enumerate() {
                let e = state.entry(voxel_key(p, 0.06)).or_default();
                if out.labels[i] == UNLABELLED { e.0 = true } else { e.1 = true }
            }
            prop_assert!(state.values().all(|&(u, l)| !(u && l)));
        }
    }
}
