//! Per-class prototype memory bank.
//!
//! Each class owns `N_p` unit-norm prototypes. Labelled-pixel embeddings of a
//! class are balanced across its prototypes by [`sinkhorn_assign`], mapped to
//! a single prototype each by [`map_pixels`], and the prototypes then move a
//! small step towards the mean of their cluster.

pub mod sinkhorn;

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::embedding::layers::random_unit_rows;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use sinkhorn::{cost_matrix, map_pixels, sinkhorn_assign, TransportPlan};

pub const DEFAULT_N_PROTOTYPES: usize = 20;
pub const DEFAULT_SIGMA: f64 = 0.999;

const BANK_MAGIC: &[u8; 4] = b"BANK";

/// How a class is seeded before its first update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Prototypes start random and the first update sets them to cluster means.
    FirstBatch,
    /// Random unit prototypes that are updated by momentum from the start.
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_batch" => Ok(Self::FirstBatch),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!(
                "unknown init mode {s:?} (first_batch|random)"
            ))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FirstBatch => "first_batch",
            Self::Random => "random",
        })
    }
}

/// Whether the cluster mean uses hard indices or the transport plan weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMode {
    Hard,
    Soft,
}

impl std::str::FromStr for AssignmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => Err(Error::Config(format!(
                "unknown assignment mode {s:?} (hard|soft)"
            ))),
        }
    }
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub n_prototypes: usize,
    pub sigma: f64,
    pub sinkhorn_iters: usize,
    pub epsilon: f64,
    pub gumbel_tau: f64,
    pub init: InitMode,
    pub assignment: AssignmentMode,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            n_prototypes: DEFAULT_N_PROTOTYPES,
            sigma: DEFAULT_SIGMA,
            sinkhorn_iters: sinkhorn::DEFAULT_ITERATIONS,
            epsilon: sinkhorn::DEFAULT_EPSILON,
            gumbel_tau: sinkhorn::DEFAULT_GUMBEL_TAU,
            init: InitMode::FirstBatch,
            assignment: AssignmentMode::Hard,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prototypes == 0 {
            return Err(Error::Config("n_prototypes must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!(
                "sigma must be in (0, 1), got {}",
                self.sigma
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn_iters must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.gumbel_tau >= 0.0) {
            return Err(Error::Config(format!(
                "gumbel_tau must be >= 0, got {}",
                self.gumbel_tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `(K, N_p, D)`.
    pub protos: Array3<f64>,
    pub sigma: f64,
    /// Per class: at least one prototype holds a cluster mean.
    pub initialized: Vec<bool>,
    /// `(K, N_p)`: the prototype holds a cluster mean. An unseeded prototype
    /// is replaced by its first cluster mean instead of moving towards it.
    pub seeded: Array2<bool>,
}

impl PrototypeBank {
    /// Random unit prototypes. With [`InitMode::Random`] every prototype
    /// starts out seeded and every class initialized.
    pub fn new(
        n_classes: usize,
        n_p: usize,
        dim: usize,
        sigma: f64,
        init: InitMode,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 || n_p == 0 || dim == 0 {
            return Err(Error::Config(format!("empty bank {n_classes}x{n_p}x{dim}")));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Config(format!(
                "sigma must be in (0, 1), got {sigma}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Prototype, &[]);
        let rows = random_unit_rows(n_classes * n_p, dim, &mut rng);
        let protos = rows
            .into_shape_with_order((n_classes, n_p, dim))
            .expect("sized above");
        Ok(Self {
            protos,
            sigma,
            initialized: vec![init == InitMode::Random; n_classes],
            seeded: Array2::from_elem((n_classes, n_p), init == InitMode::Random),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.protos.dim().0
    }

    pub fn n_prototypes(&self) -> usize {
        self.protos.dim().1
    }

    pub fn dim(&self) -> usize {
        self.protos.dim().2
    }

    pub fn class(&self, k: usize) -> ArrayView2<'_, f64> {
        self.protos.index_axis(Axis(0), k)
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.n_classes() {
            return Err(Error::InvalidClass {
                class: k,
                classes: self.n_classes(),
            });
        }
        Ok(())
    }

    /// Move each prototype of `class` with at least one assigned embedding
    /// towards its cluster mean (or onto it, if unseeded) and renormalize. When `weights` is given the
    /// mean is weighted by the transport plan column instead of `assignment`.
    pub fn update(
        &mut self,
        class: usize,
        embeddings: ArrayView2<f64>,
        assignment: &[usize],
        weights: Option<&TransportPlan>,
    ) -> Result<()> {
        self.check_class(class)?;
        let (n, d) = embeddings.dim();
        let n_p = self.n_prototypes();
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "embedding dim {d}, bank dim {}",
                self.dim()
            )));
        }
        if assignment.len() != n {
            return Err(Error::Shape(format!(
                "{} assignments for {n} embeddings",
                assignment.len()
            )));
        }
        if let Some(&j) = assignment.iter().find(|&&j| j >= n_p) {
            return Err(Error::Shape(format!("prototype index {j} >= {n_p}")));
        }
        if n == 0 {
            return Ok(());
        }
        sinkhorn::check_unit_rows(embeddings)?;

        let mut sums = Array2::<f64>::zeros((n_p, d));
        let mut mass = vec![0.0; n_p];
        match weights {
            Some(plan) => {
                if plan.0.dim() != (n, n_p) {
                    return Err(Error::Shape(format!(
                        "plan {:?} for {n}x{n_p}",
                        plan.0.dim()
                    )));
                }
                sums = plan.0.t().dot(&embeddings);
                mass = plan.col_sums();
            }
            None => {
                for (e, &j) in embeddings.outer_iter().zip(assignment) {
                    let mut row = sums.row_mut(j);
                    row += &e;
                    mass[j] += 1.0;
                }
            }
        }

        let sigma = self.sigma;
        let mut seeded = self.seeded.row_mut(class);
        let mut protos = self.protos.index_axis_mut(Axis(0), class);
        for j in 0..n_p {
            if mass[j] <= 0.0 {
                continue;
            }
            let mean = sums.row(j).mapv(|v| v / mass[j]);
            let new = if !seeded[j] {
                mean
            } else {
                &protos.row(j) * sigma + &(mean * (1.0 - sigma))
            };
            let norm = new.dot(&new).sqrt();
            // A zero-length mean cannot define a direction; keep the prototype.
            if norm > 0.0 && norm.is_finite() {
                protos.row_mut(j).assign(&(new / norm));
                seeded[j] = true;
            }
        }
        self.initialized[class] = true;
        Ok(())
    }

    /// Full clustering step for one class: cost, transport, mapping, update.
    /// Returns the prototype index of each embedding.
    pub fn cluster_and_update(
        &mut self,
        class: usize,
        embeddings: ArrayView2<f64>,
        cfg: &BankConfig,
        seed: u64,
    ) -> Result<Vec<usize>> {
        self.check_class(class)?;
        if embeddings.nrows() == 0 {
            return Ok(Vec::new());
        }
        let cost = cost_matrix(embeddings, self.class(class))?;
        let plan = sinkhorn_assign(&cost, cfg.sinkhorn_iters, cfg.epsilon)?;
        let assignment = map_pixels(&plan, cfg.gumbel_tau, seed)?;
        let weights = (cfg.assignment == AssignmentMode::Soft).then_some(&plan);
        self.update(class, embeddings, &assignment, weights)?;
        Ok(assignment)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let (k, n_p, d) = self.protos.dim();
        w.write_all(BANK_MAGIC)?;
        for v in [k, n_p, d] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.sigma as f32).to_le_bytes())?;
        w.write_all(
            &self
                .initialized
                .iter()
                .map(|&b| b as u8)
                .collect::<Vec<_>>(),
        )?;
        w.write_all(&self.seeded.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        for v in self.protos.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| format!("bank payload: {e}");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != BANK_MAGIC {
            return Err("bank magic mismatch".into());
        }
        let mut u = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut u).map_err(io)?;
            *d = u32::from_le_bytes(u) as usize;
        }
        r.read_exact(&mut u).map_err(io)?;
        let sigma = f32::from_le_bytes(u) as f64;
        let [k, n_p, d] = dims;
        let n = k
            .checked_mul(n_p)
            .and_then(|v| v.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| format!("implausible bank shape {k}x{n_p}x{d}"))?;
        let mut flags = vec![0u8; k];
        r.read_exact(&mut flags).map_err(io)?;
        let mut seeded = vec![0u8; k * n_p];
        r.read_exact(&mut seeded).map_err(io)?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            protos: Array3::from_shape_vec((k, n_p, d), values).expect("sized above"),
            sigma,
            initialized: flags.into_iter().map(|b| b != 0).collect(),
            seeded: Array2::from_shape_vec((k, n_p), seeded.into_iter().map(|b| b != 0).collect())
                .expect("sized above"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank2d() -> PrototypeBank {
        PrototypeBank {
            protos: array![[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, -1.0]]],
            sigma: 0.999,
            initialized: vec![true, true],
            seeded: Array2::from_elem((2, 2), true),
        }
    }

    #[test]
    fn fixed_point() {
        let mut b = bank2d();
        let e = array![[1.0, 0.0], [1.0, 0.0]];
        b.update(0, e.view(), &[0, 0], None).unwrap();
        assert_eq!(b, bank2d());
    }

    #[test]
    fn empty_cluster_untouched() {
        let mut b = bank2d();
        let e = array![[0.6, 0.8]];
        b.update(0, e.view(), &[0], None).unwrap();
        assert_eq!(
            b.protos.slice(ndarray::s![0, 1, ..]),
            bank2d().protos.slice(ndarray::s![0, 1, ..])
        );
        assert_eq!(
            b.protos.index_axis(Axis(0), 1),
            bank2d().protos.index_axis(Axis(0), 1)
        );
    }

    #[test]
    fn orthogonal_momentum_step() {
        let mut b = bank2d();
        let e = array![[0.0, 1.0]];
        b.update(0, e.view(), &[0], None).unwrap();
        let len = (0.999f64 * 0.999 + 0.001 * 0.001).sqrt();
        let p = b.protos.slice(ndarray::s![0, 0, ..]).to_vec();
        assert!((p[0] - 0.999 / len).abs() < 1e-15);
        assert!((p[1] - 0.001 / len).abs() < 1e-15);
    }

    #[test]
    fn first_touch_takes_cluster_mean() {
        let mut b = PrototypeBank::new(3, 2, 2, 0.9, InitMode::FirstBatch, 4).unwrap();
        assert!(!b.initialized[1]);
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        b.update(1, e.view(), &[1, 1], None).unwrap();
        assert!(b.initialized[1] && !b.initialized[0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = b.protos.slice(ndarray::s![1, 1, ..]).to_vec();
        assert!((p[0] - h).abs() < 1e-12 && (p[1] - h).abs() < 1e-12);
        assert_eq!(b.seeded.row(1).to_vec(), vec![false, true]);
    }

    #[test]
    fn unseeded_prototype_takes_its_first_mean_later() {
        let mut b = PrototypeBank::new(1, 2, 2, 0.9, InitMode::FirstBatch, 4).unwrap();
        b.update(0, array![[1.0, 0.0]].view(), &[1], None).unwrap();
        b.update(0, array![[0.0, 1.0], [0.0, 1.0]].view(), &[0, 1], None)
            .unwrap();
        assert_eq!(
            b.protos.slice(ndarray::s![0, 0, ..]).to_vec(),
            vec![0.0, 1.0]
        );
        let p = b.protos.slice(ndarray::s![0, 1, ..]).to_vec();
        assert!(p[0] > 0.9 && p[1] > 0.0);
        assert!(b.seeded.iter().all(|&s| s));
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = bank2d();
        let e = array![[1.0, 0.0]];
        assert!(matches!(
            b.update(2, e.view(), &[0], None),
            Err(Error::InvalidClass {
                class: 2,
                classes: 2
            })
        ));
        assert!(b.update(0, e.view(), &[2], None).is_err());
        let bad = array![[3.0, 0.0]];
        assert!(matches!(
            b.update(0, bad.view(), &[0], None),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn soft_update_uses_plan_weights() {
        let mut b = bank2d();
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let plan = TransportPlan(array![[0.5, 0.0], [0.0, 0.5]]);
        let mut hard = b.clone();
        b.update(0, e.view(), &[0, 1], Some(&plan)).unwrap();
        hard.update(0, e.view(), &[0, 1], None).unwrap();
        assert_eq!(b, hard);
    }

    #[test]
    fn transport_rebalances_crowded_prototype() {
        // Every pixel prefers prototype 0, but group B loses less by moving.
        let c = 4;
        let cost = Array2::from_shape_fn((2 * c, 2), |(i, j)| match (i < c, j) {
            (true, 0) => 0.0,
            (true, _) => 0.5,
            (false, 0) => 0.1,
            (false, _) => 0.2,
        });
        let plan = sinkhorn_assign(&cost, 50, 0.01).unwrap();
        let idx = map_pixels(&plan, 0.0, 0).unwrap();
        assert_eq!(idx, [vec![0; c], vec![1; c]].concat());
    }

    #[test]
    fn cluster_and_update_touches_only_its_class() {
        let mut b = PrototypeBank::new(2, 3, 4, 0.9, InitMode::Random, 0).unwrap();
        let before = b.clone();
        let e = random_unit_rows(7, 4, &mut stream_rng(1, Stream::Init, &[]));
        let idx = b
            .cluster_and_update(1, e.view(), &BankConfig::default(), 3)
            .unwrap();
        assert_eq!(idx.len(), 7);
        assert_eq!(b.class(0), before.class(0));
        assert_ne!(b.class(1), before.class(1));
    }

    #[test]
    fn serialization_round_trip() {
        let b = PrototypeBank::new(3, 4, 5, 0.999, InitMode::FirstBatch, 9).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let r = PrototypeBank::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(r.initialized, b.initialized);
        assert_eq!(r.seeded, b.seeded);
        assert!((r.sigma - 0.999).abs() < 1e-7);
        assert!(r
            .protos
            .iter()
            .zip(b.protos.iter())
            .all(|(a, b)| (a - b).abs() < 1e-6));
        buf[0] = b'X';
        assert!(PrototypeBank::read_from(&mut buf.as_slice()).is_err());
    }
}
