//! Spherical projection of point clouds onto range images.
//!
//! Row 0 is the top of the image (elevation `fov_up`); column 0 is azimuth
//! `-π` with azimuth measured as `atan2(y, x)`. When several points fall on
//! one pixel the nearest one is kept.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, PointCloud, UNLABELLED};

/// Channel order of [`RangeImage::channels`].
pub const CH_RANGE: usize = 0;
pub const CH_X: usize = 1;
pub const CH_Y: usize = 2;
pub const CH_Z: usize = 3;
pub const CH_INTENSITY: usize = 4;
pub const N_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Degrees.
    pub fov_up: f64,
    /// Degrees.
    pub fov_down: f64,
    /// Height of the sensor above the cloud's `z = 0` plane. Zero for scans
    /// that are already sensor-centred.
    pub sensor_height: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: -25.0,
            sensor_height: 0.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "projection height and width must be >= 1".into(),
            ));
        }
        if !(self.fov_up > self.fov_down) {
            return Err(Error::Config(format!(
                "fov_up ({}) must exceed fov_down ({})",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    /// Pixel a point projects to, or `None` when it lies outside the vertical
    /// field of view (or coincides with the sensor origin).
    pub fn pixel_of(&self, p: [f32; 3]) -> Option<(usize, usize)> {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64 - self.sensor_height);
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 {
            return None;
        }
        let pitch = (z / r).asin();
        let up = self.fov_up.to_radians();
        let down = self.fov_down.to_radians();
        if pitch > up || pitch < down {
            return None;
        }
        let v = (1.0 - (pitch - down) / (up - down)) * self.height as f64;
        let yaw = y.atan2(x);
        let u = (yaw + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * self.width as f64;
        let row = (v.floor().max(0.0) as usize).min(self.height - 1);
        let col = (u.floor().max(0.0) as usize).min(self.width - 1);
        Some((row, col))
    }

    pub fn sensor_range(&self, p: [f32; 3]) -> f32 {
        let z = p[2] as f64 - self.sensor_height;
        ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + z * z).sqrt() as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    /// `(5, H, W)`: range, x, y, z, intensity.
    pub channels: Array3<f32>,
    pub valid: Array2<bool>,
    /// Index of the retained point per pixel, `-1` where invalid.
    pub point_index: Array2<i64>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            channels: Array3::zeros((N_CHANNELS, height, width)),
            valid: Array2::from_elem((height, width), false),
            point_index: Array2::from_elem((height, width), -1),
        }
    }

    pub fn height(&self) -> usize {
        self.valid.nrows()
    }

    pub fn width(&self) -> usize {
        self.valid.ncols()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Pixel labels taken from the retained point of each valid pixel.
    pub fn pixel_labels(&self, point_labels: &[ClassId]) -> Array2<ClassId> {
        self.point_index.mapv(|i| {
            if i < 0 {
                UNLABELLED
            } else {
                point_labels[i as usize]
            }
        })
    }

    /// Reorder columns: output column `c` takes input column `perm[c]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let (h, w) = (self.height(), self.width());
        assert_eq!(perm.len(), w);
        let mut out = Self::empty(h, w);
        for r in 0..h {
            for (c, &src) in perm.iter().enumerate() {
                out.valid[[r, c]] = self.valid[[r, src]];
                out.point_index[[r, c]] = self.point_index[[r, src]];
                for ch in 0..N_CHANNELS {
                    out.channels[[ch, r, c]] = self.channels[[ch, r, src]];
                }
            }
        }
        out
    }
}

/// Project a cloud onto a range image, keeping the nearest point per pixel.
pub fn spherical_project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let mut img = RangeImage::empty(cfg.height, cfg.width);
    let mut best = Array2::from_elem((cfg.height, cfg.width), f32::INFINITY);
    for (i, &p) in cloud.coords.iter().enumerate() {
        let Some((r, c)) = cfg.pixel_of(p) else {
            continue;
        };
        let range = cfg.sensor_range(p);
        // Strict comparison keeps the lowest index on exact ties.
        if range < best[[r, c]] {
            best[[r, c]] = range;
            img.valid[[r, c]] = true;
            img.point_index[[r, c]] = i as i64;
            img.channels[[CH_RANGE, r, c]] = range;
            img.channels[[CH_X, r, c]] = p[0];
            img.channels[[CH_Y, r, c]] = p[1];
            img.channels[[CH_Z, r, c]] = p[2];
            img.channels[[CH_INTENSITY, r, c]] = cloud.intensity[i];
        }
    }
    Ok(img)
}

/// Give every point the class of the pixel it projects to, occluded points
/// included. Points outside the field of view get [`UNLABELLED`].
pub fn backproject(
    range_pred: &Array2<ClassId>,
    cfg: &ProjectionConfig,
    cloud: &PointCloud,
) -> Result<Vec<ClassId>> {
    if range_pred.dim() != (cfg.height, cfg.width) {
        return Err(Error::Shape(format!(
            "prediction image {:?} does not match projection {}x{}",
            range_pred.dim(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(cloud
        .coords
        .iter()
        .map(|&p| match cfg.pixel_of(p) {
            Some((r, c)) => range_pred[[r, c]],
            None => UNLABELLED,
        })
        .collect())
}
