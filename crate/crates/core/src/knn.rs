//! Range-image kNN label smoothing for back-projected predictions.

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, PointCloud, UNLABELLED};
use crate::projection::{ProjectionConfig, RangeImage, CH_RANGE};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_WINDOW: usize = 5;

/// Replace each point's label by the majority vote of the `k` range-closest
/// valid pixels in the `window × window` neighbourhood of its pixel.
///
/// Neighbour labels are the current predictions of the points retained at
/// those pixels. Ties go to the class whose closest voter is nearest in
/// range, then to the smaller class id. Columns wrap around in azimuth.
/// Points outside the field of view keep their input label.
pub fn knn_postprocess(
    point_preds: &[ClassId],
    cloud: &PointCloud,
    image: &RangeImage,
    cfg: &ProjectionConfig,
    k: usize,
    window: usize,
) -> Result<Vec<ClassId>> {
    if k == 0 {
        return Err(Error::Config("knn k must be >= 1".into()));
    }
    if window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "knn window must be odd, got {window}"
        )));
    }
    if point_preds.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} points",
            point_preds.len(),
            cloud.len()
        )));
    }
    let (h, w) = (image.height(), image.width());
    if (h, w) != (cfg.height, cfg.width) {
        return Err(Error::Shape("range image does not match projection".into()));
    }
    let half = (window / 2) as isize;
    let mut cands: Vec<(f32, ClassId)> = Vec::with_capacity(window * window);
    let mut out = Vec::with_capacity(cloud.len());
    for (i, &p) in cloud.coords.iter().enumerate() {
        let Some((r0, c0)) = cfg.pixel_of(p) else {
            out.push(point_preds[i]);
            continue;
        };
        let range = cfg.sensor_range(p);
        cands.clear();
        for dr in -half..=half {
            let r = r0 as isize + dr;
            if r < 0 || r >= h as isize {
                continue;
            }
            for dc in -half..=half {
                let c = (c0 as isize + dc).rem_euclid(w as isize) as usize;
                let idx = image.point_index[[r as usize, c]];
                if idx < 0 {
                    continue;
                }
                let label = point_preds[idx as usize];
                if label == UNLABELLED {
                    continue;
                }
                let d = (image.channels[[CH_RANGE, r as usize, c]] - range).abs();
                cands.push((d, label));
            }
        }
        if cands.is_empty() {
            out.push(point_preds[i]);
            continue;
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.truncate(k);
        out.push(vote(&cands));
    }
    Ok(out)
}

/// `cands` sorted by ascending distance.
fn vote(cands: &[(f32, ClassId)]) -> ClassId {
    // (class, votes, closest distance)
    let mut tally: Vec<(ClassId, usize, f32)> = Vec::new();
    for &(d, c) in cands {
        match tally.iter_mut().find(|t| t.0 == c) {
            Some(t) => t.1 += 1,
            None => tally.push((c, 1, d)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|t| t.0)
        .unwrap()
}
