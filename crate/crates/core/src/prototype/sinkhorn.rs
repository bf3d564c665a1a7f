//! Entropic optimal transport between labelled-pixel embeddings and the
//! prototypes of one class, solved by a fixed number of Sinkhorn rounds.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_GUMBEL_TAU: f64 = 0.5;

const NORM_TOLERANCE: f64 = 1e-3;

/// `N_k × N_p` transport plan with total mass one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan(pub Array2<f64>);

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.0.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.0.sum_axis(Axis(0)).to_vec()
    }
}

pub(crate) fn check_unit_rows(m: ArrayView2<f64>) -> Result<()> {
    for (row, v) in m.outer_iter().enumerate() {
        let norm = v.dot(&v).sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Cosine distance `1 - e_i · p_j`, clamped to `[0, 2]`.
pub fn cost_matrix(embeddings: ArrayView2<f64>, protos: ArrayView2<f64>) -> Result<Array2<f64>> {
    if embeddings.ncols() != protos.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs prototype dim {}",
            embeddings.ncols(),
            protos.ncols()
        )));
    }
    check_unit_rows(embeddings)?;
    check_unit_rows(protos)?;
    Ok(embeddings
        .dot(&protos.t())
        .mapv(|s| (1.0 - s).clamp(0.0, 2.0)))
}

/// Unrolled Sinkhorn towards uniform marginals `(1/N_k, 1/N_p)`.
///
/// Each round scales columns then rows, so the returned plan has exact row
/// sums and approximate column sums.
pub fn sinkhorn_assign(
    cost: &Array2<f64>,
    iterations: usize,
    epsilon: f64,
) -> Result<TransportPlan> {
    if iterations == 0 {
        return Err(Error::Config(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "sinkhorn epsilon must be > 0, got {epsilon}"
        )));
    }
    let (nk, np) = cost.dim();
    if nk == 0 || np == 0 {
        return Err(Error::Shape(format!("empty cost matrix {nk}x{np}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::KernelUnderflow(
            "cost matrix has non-finite entries".into(),
        ));
    }
    // A global shift rescales the kernel uniformly and leaves the plan unchanged.
    let cmin = cost.iter().copied().fold(f64::INFINITY, f64::min);
    let mut plan = cost.mapv(|c| (-(c - cmin) / epsilon).exp());
    if let Some(i) = plan.outer_iter().position(|r| r.sum() == 0.0) {
        return Err(Error::KernelUnderflow(format!("row {i} is all zeros")));
    }
    if let Some(j) = plan.axis_iter(Axis(1)).position(|c| c.sum() == 0.0) {
        return Err(Error::KernelUnderflow(format!("column {j} is all zeros")));
    }
    let total = plan.sum();
    plan /= total;
    let (row_mass, col_mass) = (1.0 / nk as f64, 1.0 / np as f64);
    for _ in 0..iterations {
        for mut col in plan.axis_iter_mut(Axis(1)) {
            let s = col.sum();
            col *= col_mass / s;
        }
        for mut row in plan.outer_iter_mut() {
            let s = row.sum();
            row *= row_mass / s;
        }
    }
    Ok(TransportPlan(plan))
}

/// Prototype index per pixel: `argmax_j (ln T_ij + tau · g_ij)` with `g_ij`
/// standard Gumbel noise. `tau = 0` is the plain argmax; `tau = 1` samples
/// each row in proportion to the plan; values in between sharpen the row
/// distribution to `T^(1/tau)`. Ties resolve to the smaller index.
pub fn map_pixels(plan: &TransportPlan, gumbel_tau: f64, seed: u64) -> Result<Vec<usize>> {
    if !(gumbel_tau >= 0.0) {
        return Err(Error::Config(format!(
            "gumbel tau must be >= 0, got {gumbel_tau}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Gumbel, &[]);
    plan.0
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().all(|&v| v <= 0.0) {
                return Err(Error::DegeneratePlan(i));
            }
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (j, &t) in row.iter().enumerate() {
                let mut score = t.ln();
                if gumbel_tau > 0.0 {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    score += gumbel_tau * -(-u.ln()).ln();
                }
                if score > best.0 {
                    best = (score, j);
                }
            }
            Ok(best.1)
        })
        .collect()
}
