//! Confidence-weighted anchor selection among pseudo-labelled pixels.

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, UNLABELLED};
use crate::rng::{stream_rng, Stream};

const SUM_TOLERANCE: f64 = 1e-5;

/// Pixel weighting used to draw anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// `exp(-H^2)` with `H` the prediction entropy.
    Entropy,
    /// Softmax probability of the predicted class.
    SoftmaxProb,
    /// Every pseudo-labelled pixel is an anchor; the budget is ignored.
    All,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "softmax_prob" => Ok(Self::SoftmaxProb),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown anchor strategy {s:?} (entropy|softmax_prob|all)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Entropy => "entropy",
            Self::SoftmaxProb => "softmax_prob",
            Self::All => "all",
        })
    }
}

fn check_probs(probs: &Array3<f64>) -> Result<()> {
    let (_, h, w) = probs.dim();
    for r in 0..h {
        for c in 0..w {
            let col = probs.slice(ndarray::s![.., r, c]);
            let mut sum = 0.0;
            for &v in col {
                if v < 0.0 || v.is_nan() {
                    return Err(Error::NegativeProbability {
                        pixel: (r, c),
                        value: v,
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Shape(format!(
                    "probabilities at pixel ({r}, {c}) sum to {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Natural-log entropy per pixel of a `(K, H, W)` softmax map, with
/// `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &Array3<f64>) -> Result<Array2<f64>> {
    check_probs(probs)?;
    Ok(probs.map_axis(Axis(0), |f| {
        -f.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }))
}

/// Sampling distribution over the valid pixels predicted as one class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassTable {
    pub pixels: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn tables_from_scores(
    scores: &Array2<f64>,
    pred: &Array2<ClassId>,
    valid: &Array2<bool>,
    n_classes: usize,
) -> Result<Vec<ClassTable>> {
    if scores.dim() != pred.dim() || pred.dim() != valid.dim() {
        return Err(Error::Shape(format!(
            "scores {:?}, labels {:?}, valid {:?}",
            scores.dim(),
            pred.dim(),
            valid.dim()
        )));
    }
    let mut tables = vec![ClassTable::default(); n_classes];
    for ((rc, &k), (&ok, &s)) in pred.indexed_iter().zip(valid.iter().zip(scores.iter())) {
        if !ok || k == UNLABELLED {
            continue;
        }
        let t = tables.get_mut(k as usize).ok_or(Error::InvalidClass {
            class: k as usize,
            classes: n_classes,
        })?;
        t.pixels.push(rc);
        t.probs.push(s);
    }
    for t in &mut tables {
        let total: f64 = t.probs.iter().sum();
        t.probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(tables)
}

/// Per predicted class, `rho_i = exp(-H_i^2) / sum_j exp(-H_j^2)` over the
/// valid pixels of that class. Absent classes get an empty table.
pub fn sampling_probabilities(
    entropy: &Array2<f64>,
    pred: &Array2<ClassId>,
    valid: &Array2<bool>,
    n_classes: usize,
) -> Result<Vec<ClassTable>> {
    tables_from_scores(&entropy.mapv(|h| (-h * h).exp()), pred, valid, n_classes)
}

/// Tables for any strategy given the softmax map and its argmax.
pub fn strategy_tables(
    strategy: Strategy,
    probs: &Array3<f64>,
    pred: &Array2<ClassId>,
    valid: &Array2<bool>,
) -> Result<Vec<ClassTable>> {
    let k = probs.dim().0;
    match strategy {
        Strategy::Entropy => sampling_probabilities(&shannon_entropy(probs)?, pred, valid, k),
        Strategy::SoftmaxProb => {
            check_probs(probs)?;
            let conf = probs.map_axis(Axis(0), |f| f.iter().copied().fold(0.0, f64::max));
            tables_from_scores(&conf, pred, valid, k)
        }
        Strategy::All => tables_from_scores(&Array2::ones(pred.dim()), pred, valid, k),
    }
}

/// Anchor count for `epoch`: zero during warm-up, one at the first
/// contrastive epoch, then linear up to half of `pseudo_count` at the last
/// epoch. Never exceeds `pseudo_count`.
pub fn anchor_budget(
    epoch: usize,
    warmup: usize,
    total_epochs: usize,
    pseudo_count: usize,
) -> usize {
    if epoch < warmup || pseudo_count == 0 {
        return 0;
    }
    let target = (pseudo_count / 2).max(1);
    let last = total_epochs.saturating_sub(1);
    if last <= warmup {
        return target.min(pseudo_count);
    }
    let progress = (epoch.min(last) - warmup) as u128;
    let step = (target as u128 - 1) * progress / (last - warmup) as u128;
    (1 + step as usize).min(pseudo_count)
}

/// Split `budget` across classes in proportion to `counts`. Every non-empty
/// class gets at least one anchor when the budget allows it, no class gets
/// more than its pixel count, and leftovers go by largest remainder with
/// ties to the smaller class id.
pub fn class_quotas(counts: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let budget = budget.min(total);
    let mut q = vec![0usize; counts.len()];
    if budget == 0 {
        return q;
    }
    let ideal: Vec<f64> = counts
        .iter()
        .map(|&n| budget as f64 * n as f64 / total as f64)
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count();
    let floor_one = budget >= present;
    for (i, &n) in counts.iter().enumerate() {
        if n > 0 {
            let base = ideal[i].floor() as usize;
            q[i] = if floor_one { base.max(1) } else { base }.min(n);
        }
    }
    let mut assigned: usize = q.iter().sum();
    while assigned > budget {
        // The one-per-class floor overshot; take back from the class that is
        // furthest above its ideal share.
        let i = (0..q.len())
            .filter(|&i| q[i] > 1)
            .max_by(|&a, &b| {
                (q[a] as f64 - ideal[a])
                    .total_cmp(&(q[b] as f64 - ideal[b]))
                    .then(b.cmp(&a))
            })
            .expect("budget >= number of present classes");
        q[i] -= 1;
        assigned -= 1;
    }
    while assigned < budget {
        let i = (0..q.len())
            .filter(|&i| q[i] < counts[i])
            .max_by(|&a, &b| {
                (ideal[a] - q[a] as f64)
                    .total_cmp(&(ideal[b] - q[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("budget <= total pixels");
        q[i] += 1;
        assigned += 1;
    }
    q
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub pixels: Vec<(usize, usize)>,
    pub classes: Vec<ClassId>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Weighted sampling without replacement (exponential keys `ln(u) / w`,
/// keep the largest).
fn weighted_sample(probs: &[f64], m: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let key = if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            };
            (key, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keys.into_iter().take(m).map(|(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Draw `budget` anchors split across classes by [`class_quotas`].
pub fn sample_anchors(tables: &[ClassTable], budget: usize, seed: u64) -> AnchorSet {
    let counts: Vec<usize> = tables.iter().map(ClassTable::len).collect();
    let quotas = class_quotas(&counts, budget);
    let mut set = AnchorSet::default();
    for (k, (t, &m)) in tables.iter().zip(&quotas).enumerate() {
        if m == 0 {
            continue;
        }
        let mut rng = stream_rng(seed, Stream::Anchors, &[k as u64]);
        for i in weighted_sample(&t.probs, m, &mut rng) {
            set.pixels.push(t.pixels[i]);
            set.classes.push(k as ClassId);
        }
    }
    set
}

/// Every pixel of every table.
pub fn all_anchors(tables: &[ClassTable]) -> AnchorSet {
    let mut set = AnchorSet::default();
    for (k, t) in tables.iter().enumerate() {
        set.pixels.extend_from_slice(&t.pixels);
        set.classes
            .extend(std::iter::repeat_n(k as ClassId, t.len()));
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn probs(rows: &[&[f64]]) -> Array3<f64> {
        let k = rows[0].len();
        Array3::from_shape_fn((k, 1, rows.len()), |(c, _, i)| rows[i][c])
    }

    #[test]
    fn entropy_values() {
        let h = shannon_entropy(&probs(&[&[1.0, 0.0, 0.0], &[1.0 / 3.0; 3]])).unwrap();
        assert_eq!(h[[0, 0]], 0.0);
        assert!((h[[0, 1]] - 3f64.ln()).abs() < 1e-15);
        let h = shannon_entropy(&probs(&[&[0.9, 0.1]])).unwrap();
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h[[0, 0]] - oracle).abs() < 1e-12);
        assert!((h[[0, 0]] - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        assert!(matches!(
            shannon_entropy(&probs(&[&[1.1, -0.1]])),
            Err(Error::NegativeProbability { pixel: (0, 0), .. })
        ));
        assert!(shannon_entropy(&probs(&[&[0.5, 0.6]])).is_err());
    }

    #[test]
    fn rho_from_entropy() {
        let valid = Array2::from_elem((1, 3), true);
        let pred = array![[1u16, 1, 0]];
        let t = sampling_probabilities(&array![[0.0, 1.0, 0.4]], &pred, &valid, 3).unwrap();
        let e = (-1f64).exp();
        assert!((t[1].probs[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((t[1].probs[0] - 0.7311).abs() < 1e-4 && (t[1].probs[1] - 0.2689).abs() < 1e-4);
        assert_eq!(t[0].probs, vec![1.0]);
        assert!(t[2].is_empty());
        let t = sampling_probabilities(&array![[0.3, 0.3, 0.0]], &pred, &valid, 2).unwrap();
        assert_eq!(t[1].probs, vec![0.5, 0.5]);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let valid = array![[true, false]];
        let t = sampling_probabilities(&array![[0.0, 0.0]], &array![[0u16, 0]], &valid, 1).unwrap();
        assert_eq!(t[0].pixels, vec![(0, 0)]);
    }

    #[test]
    fn budget_schedule() {
        assert_eq!(anchor_budget(2, 5, 100, 1000), 0);
        assert_eq!(anchor_budget(5, 5, 100, 1000), 1);
        assert_eq!(anchor_budget(99, 5, 100, 1000), 500);
        assert_eq!(anchor_budget(99, 5, 100, 1), 1);
        assert_eq!(anchor_budget(5, 5, 6, 10), 5);
        assert_eq!(anchor_budget(50, 5, 100, 0), 0);
        let series: Vec<_> = (0..100).map(|e| anchor_budget(e, 5, 100, 777)).collect();
        assert!(series.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quotas() {
        assert_eq!(class_quotas(&[900, 100], 10), vec![9, 1]);
        assert_eq!(class_quotas(&[990, 5, 5], 3), vec![1, 1, 1]);
        assert_eq!(class_quotas(&[990, 5, 5], 2), vec![2, 0, 0]);
        assert_eq!(class_quotas(&[3, 0, 1], 100), vec![3, 0, 1]);
        assert_eq!(class_quotas(&[2, 10], 6), vec![1, 5]);
        assert_eq!(class_quotas(&[2, 4], 5), vec![2, 3]);
        assert_eq!(class_quotas(&[5, 5], 0), vec![0, 0]);
    }

    #[test]
    fn exhaustive_budget_selects_everything_once() {
        let t = vec![
            ClassTable {
                pixels: vec![(0, 0), (0, 2)],
                probs: vec![0.9, 0.1],
            },
            ClassTable {
                pixels: vec![(0, 1)],
                probs: vec![1.0],
            },
        ];
        let a = sample_anchors(&t, 3, 4);
        let mut px = a.pixels.clone();
        px.sort();
        assert_eq!(px, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(a, sample_anchors(&t, 3, 4));
        assert!(sample_anchors(&t, 0, 4).is_empty());
        assert_eq!(all_anchors(&t).len(), 3);
    }

    #[test]
    fn lower_entropy_is_preferred() {
        let t = vec![ClassTable {
            pixels: vec![(0, 0), (0, 1)],
            probs: vec![0.9, 0.1],
        }];
        let first = (0..2000)
            .filter(|&s| sample_anchors(&t, 1, s).pixels[0] == (0, 0))
            .count();
        assert!((1700..1900).contains(&first), "{first}");
    }

    #[test]
    fn softmax_strategy_uses_confidence() {
        let p = probs(&[&[0.8, 0.2], &[0.6, 0.4]]);
        let pred = array![[0u16, 0]];
        let valid = Array2::from_elem((1, 2), true);
        let t = strategy_tables(Strategy::SoftmaxProb, &p, &pred, &valid).unwrap();
        assert!((t[0].probs[0] - 0.8 / 1.4).abs() < 1e-12);
        let t = strategy_tables(Strategy::All, &p, &pred, &valid).unwrap();
        assert_eq!(t[0].probs, vec![0.5, 0.5]);
    }
}
