//! Deterministic synthetic LiDAR scenes: a ground annulus (class 0) plus
//! boxes and cylinders, one class per object, all placed inside the vertical
//! field of view of a sensor mounted above the ground plane.
//!
//! Object shape is a function of the class id so that classes are
//! geometrically separable: odd classes are boxes, even classes cylinders,
//! and footprint grows with the class id across `object_size`.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, PointCloud};
use crate::projection::ProjectionConfig;
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_classes: usize,
    /// Inclusive range of points emitted per class.
    pub points_per_class: (usize, usize),
    /// Inner and outer radius of the ground annulus, meters.
    pub ground_radius: (f64, f64),
    /// Inclusive range of object count.
    pub object_count: (usize, usize),
    /// Characteristic object size range, meters.
    pub object_size: (f64, f64),
    pub noise_sigma: f64,
    /// Sensor whose field of view bounds the geometry.
    pub sensor: ProjectionConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 5,
            points_per_class: (1500, 2500),
            ground_radius: (4.0, 40.0),
            object_count: (6, 10),
            object_size: (1.0, 4.0),
            noise_sigma: 0.02,
            sensor: default_sensor(),
        }
    }
}

/// Projection used for synthetic scenes: a 32-beam sensor 1.8 m above ground.
pub fn default_sensor() -> ProjectionConfig {
    ProjectionConfig {
        height: 32,
        width: 256,
        fov_up: 15.0,
        fov_down: -25.0,
        sensor_height: 1.8,
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Half extents along the box's local x and y, full height.
    Box {
        hx: f64,
        hy: f64,
        height: f64,
        yaw: f64,
    },
    Cylinder {
        radius: f64,
        height: f64,
    },
}

impl Shape {
    fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { hx, hy, .. } => hx.hypot(hy),
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    fn height(&self) -> f64 {
        match *self {
            Shape::Box { height, .. } | Shape::Cylinder { height, .. } => height,
        }
    }

    fn sample_surface(&self, rng: &mut Rng) -> [f64; 3] {
        match *self {
            Shape::Box {
                hx,
                hy,
                height,
                yaw,
            } => {
                let side_x = 2.0 * hy * height; // faces at ±hx
                let side_y = 2.0 * hx * height; // faces at ±hy
                let top = 4.0 * hx * hy;
                let total = 2.0 * side_x + 2.0 * side_y + top;
                let pick = rng.random::<f64>() * total;
                let (lx, ly, z) = if pick < 2.0 * side_x {
                    let sign = if pick < side_x { 1.0 } else { -1.0 };
                    (
                        sign * hx,
                        rng.random_range(-hy..hy),
                        rng.random_range(0.0..height),
                    )
                } else if pick < 2.0 * side_x + 2.0 * side_y {
                    let sign = if pick < 2.0 * side_x + side_y {
                        1.0
                    } else {
                        -1.0
                    };
                    (
                        rng.random_range(-hx..hx),
                        sign * hy,
                        rng.random_range(0.0..height),
                    )
                } else {
                    (rng.random_range(-hx..hx), rng.random_range(-hy..hy), height)
                };
                let (s, c) = yaw.sin_cos();
                [c * lx - s * ly, s * lx + c * ly, z]
            }
            Shape::Cylinder { radius, height } => {
                let side = TAU * radius * height;
                let top = PI * radius * radius;
                if rng.random::<f64>() * (side + top) < side {
                    let a = rng.random_range(-PI..PI);
                    [
                        radius * a.cos(),
                        radius * a.sin(),
                        rng.random_range(0.0..height),
                    ]
                } else {
                    let a = rng.random_range(-PI..PI);
                    let r = radius * rng.random::<f64>().sqrt();
                    [r * a.cos(), r * a.sin(), height]
                }
            }
        }
    }
}

fn lerp(range: (f64, f64), t: f64) -> f64 {
    range.0 + (range.1 - range.0) * t
}

fn class_shape(spec: &SceneSpec, class: usize, rng: &mut Rng) -> Shape {
    let t = (class - 1) as f64 / (spec.n_classes.saturating_sub(2).max(1)) as f64;
    let s = lerp(spec.object_size, t) * rng.random_range(0.85..1.15);
    if class % 2 == 1 {
        Shape::Box {
            hx: 0.5 * s,
            hy: 0.3 * s,
            height: 0.5 * s + 0.5,
            yaw: rng.random_range(-PI..PI),
        }
    } else {
        Shape::Cylinder {
            radius: 0.2 * s + 0.15,
            height: s + 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        self.sensor.validate()?;
        if self.n_classes < 2 || self.n_classes > ClassId::MAX as usize {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        let (pmin, pmax) = self.points_per_class;
        if pmin == 0 || pmin > pmax {
            return bad(format!("points_per_class range ({pmin}, {pmax}) is empty"));
        }
        let (omin, omax) = self.object_count;
        if omin > omax {
            return bad(format!("object_count range ({omin}, {omax}) is empty"));
        }
        if omin < self.n_classes - 1 {
            return bad(format!(
                "object_count minimum {omin} cannot cover {} object classes",
                self.n_classes - 1
            ));
        }
        let (smin, smax) = self.object_size;
        if !(smin > 0.0 && smin <= smax) {
            return bad(format!("object_size range ({smin}, {smax}) is empty"));
        }
        let (rmin, rmax) = self.ground_radius;
        if !(rmin >= 0.0 && rmin < rmax) {
            return bad(format!("ground annulus ({rmin}, {rmax}) has zero area"));
        }
        if self.sensor.sensor_height > 0.0 && self.sensor.fov_down >= 0.0 {
            return bad("a raised sensor needs fov_down < 0 to see the ground".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if rmax <= self.min_visible_ground() {
            return bad(format!(
                "ground annulus ends at {rmax} m, before the sensor sees the ground"
            ));
        }
        Ok(())
    }

    fn min_visible_ground(&self) -> f64 {
        let h = self.sensor.sensor_height;
        if h <= 0.0 {
            0.0
        } else {
            h / (-self.sensor.fov_down).to_radians().tan()
        }
    }

    /// Smallest horizontal distance at which an object of `height` is fully
    /// inside the vertical field of view.
    fn min_object_distance(&self, height: f64) -> Option<f64> {
        let h = self.sensor.sensor_height;
        let mut d = self.min_visible_ground();
        if height > h {
            let up = self.sensor.fov_up.to_radians();
            if up <= 0.0 {
                return None;
            }
            d = d.max((height - h) / up.tan());
        }
        Some(d * 1.02 + 0.1)
    }
}

/// Generate one scene and its dense per-point labels.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, Vec<ClassId>)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Scene, &[]);
    let n_cls = spec.n_classes;

    let n_objects = rng.random_range(spec.object_count.0..=spec.object_count.1);
    let mut objects: Vec<(usize, Shape, [f64; 2])> = Vec::with_capacity(n_objects);
    for o in 0..n_objects {
        let class = if o < n_cls - 1 {
            o + 1
        } else {
            rng.random_range(1..n_cls)
        };
        let shape = class_shape(spec, class, &mut rng);
        let fr = shape.footprint_radius();
        let near = spec.min_object_distance(shape.height()).ok_or_else(|| {
            Error::Config("scene spec: objects taller than the sensor need fov_up > 0".into())
        })?;
        let dmin = near + fr;
        let dmax = (0.8 * spec.ground_radius.1).max(dmin);
        if dmin > spec.ground_radius.1 {
            return Err(Error::Config(format!(
                "scene spec: class {class} objects must stand beyond {dmin:.1} m, outside the ground annulus"
            )));
        }
        let mut centre = [0.0; 2];
        for attempt in 0..64 {
            let d = rng.random_range(dmin..=dmax);
            let a = rng.random_range(-PI..PI);
            centre = [d * a.cos(), d * a.sin()];
            let clear = objects.iter().all(|(_, s, c)| {
                (c[0] - centre[0]).hypot(c[1] - centre[1]) > s.footprint_radius() + fr + 0.5
            });
            if clear || attempt == 63 {
                break;
            }
        }
        objects.push((class, shape, centre));
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut coords = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    let mut emit = |p: [f64; 3], class: usize, rng: &mut Rng| {
        let p = if spec.noise_sigma > 0.0 {
            [
                p[0] + noise.sample(rng),
                p[1] + noise.sample(rng),
                p[2] + noise.sample(rng),
            ]
        } else {
            p
        };
        let prior = class as f64 / (n_cls - 1) as f64;
        let i = 0.25 * prior + 0.75 * rng.random::<f64>();
        coords.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        intensity.push(i.clamp(0.0, 1.0) as f32);
        labels.push(class as ClassId);
    };

    let (rmin, rmax) = spec.ground_radius;
    let rmin = rmin.max(spec.min_visible_ground() * 1.02);
    let n_ground = rng.random_range(spec.points_per_class.0..=spec.points_per_class.1);
    for _ in 0..n_ground {
        let r = rng.random_range(rmin..rmax);
        let a = rng.random_range(-PI..PI);
        emit([r * a.cos(), r * a.sin(), 0.0], 0, &mut rng);
    }

    for class in 1..n_cls {
        let members: Vec<_> = objects.iter().filter(|o| o.0 == class).collect();
        let total = rng.random_range(spec.points_per_class.0..=spec.points_per_class.1);
        for (k, (_, shape, centre)) in members.iter().enumerate() {
            let share = total / members.len() + usize::from(k < total % members.len());
            for _ in 0..share {
                let p = shape.sample_surface(&mut rng);
                emit([p[0] + centre[0], p[1] + centre[1], p[2]], class, &mut rng);
            }
        }
    }

    Ok((PointCloud::new(coords, intensity)?, labels))
}

/// Scene spec for scene `index` of a dataset generated from `seed`.
pub fn scene_spec_for(base: &SceneSpec, seed: u64, index: usize) -> SceneSpec {
    SceneSpec {
        seed: crate::rng::derive_seed(seed, Stream::Scene, &[index as u64]),
        ..base.clone()
    }
}
