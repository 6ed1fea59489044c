//! Synthetic 2D-in-BEV world: scene sampling, sensor rendering, BEV
//! projection and dataset persistence.

mod bev;
mod dataset;
pub mod geometry;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bev::{camera_to_bev, lidar_to_bev, BevProjector};
pub use dataset::{
    dataset_read, dataset_write, generate_dataset, generate_sample, sample_seed, Dataset,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use render::{render_camera, render_lidar, BACKGROUND_INTENSITY};

/// Oriented box on the ground plane, ego frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub center_xy: [f32; 2],
    /// Length along the heading, then width.
    pub size_lw: [f32; 2],
    /// Heading in (−π, π].
    pub yaw: f32,
    pub class_id: u32,
    pub velocity_xy: [f32; 2],
}

impl ObjectBox {
    pub fn area(&self) -> f64 {
        self.size_lw[0] as f64 * self.size_lw[1] as f64
    }

    /// Box moved by `velocity · dt`.
    pub fn advanced(&self, dt: f32) -> ObjectBox {
        ObjectBox {
            center_xy: [
                self.center_xy[0] + self.velocity_xy[0] * dt,
                self.center_xy[1] + self.velocity_xy[1] * dt,
            ],
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boxes: Vec<ObjectBox>,
    pub seed: u64,
    /// Half-width of the square BEV region.
    pub extent_m: f32,
}

impl Scene {
    pub fn advanced(&self, dt: f32) -> Scene {
        Scene {
            boxes: self.boxes.iter().map(|b| b.advanced(dt)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub intensity: f32,
    pub beam: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSweep {
    pub points: Vec<LidarPoint>,
    pub num_beams: u32,
}

/// One camera: `rows × cols` intensities (row-major) and one estimated
/// depth per column, 0 where nothing was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub yaw: f32,
    pub fov: f32,
    pub rows: usize,
    pub cols: usize,
    pub intensity: Vec<f32>,
    pub depth: Vec<f32>,
}

impl CameraView {
    pub fn column_azimuth(&self, col: usize) -> f64 {
        self.yaw as f64 - self.fov as f64 / 2.0
            + (col as f64 + 0.5) * self.fov as f64 / self.cols as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraStream {
    pub views: Vec<CameraView>,
}

impl CameraStream {
    pub fn k(&self) -> usize {
        self.views.len()
    }
}

/// Ground truth plus both raw sensor streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub sweep: LidarSweep,
    pub stream: CameraStream,
}

/// Per-class shape and appearance.
#[derive(Debug, Clone, Copy)]
pub struct ClassProfile {
    pub name: &'static str,
    pub length_m: (f32, f32),
    pub width_m: (f32, f32),
    pub reflectivity: f32,
}

pub const CLASS_PROFILES: [ClassProfile; 3] = [
    ClassProfile {
        name: "car",
        length_m: (3.0, 4.2),
        width_m: (1.6, 2.0),
        reflectivity: 0.9,
    },
    ClassProfile {
        name: "cyclist",
        length_m: (1.6, 2.0),
        width_m: (0.6, 0.9),
        reflectivity: 0.6,
    },
    ClassProfile {
        name: "pedestrian",
        length_m: (0.7, 1.0),
        width_m: (0.7, 1.0),
        reflectivity: 0.35,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub iou_cap: f32,
    /// Clear radius around the ego origin.
    pub min_range_m: f32,
    /// Box centers stay this far inside the BEV border.
    pub margin_m: f32,
    pub max_speed_mps: f32,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            min_boxes: 1,
            max_boxes: 8,
            iou_cap: 0.0,
            min_range_m: 2.5,
            margin_m: 1.5,
            max_speed_mps: 3.0,
            max_retries: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub num_beams: u32,
    pub azimuth_steps: u32,
    pub clutter: bool,
    pub clutter_prob: f32,
    pub num_views: usize,
    pub view_cols: usize,
    pub view_rows: usize,
    pub sigma_depth_m: f32,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            num_beams: 32,
            azimuth_steps: 360,
            clutter: true,
            clutter_prob: 0.1,
            num_views: 6,
            view_cols: 96,
            view_rows: 8,
            sigma_depth_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f32,
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            cell_size_m: 0.5,
            channels: 32,
        }
    }
}

impl GridConfig {
    pub fn extent_m(&self) -> f32 {
        self.width as f32 * self.cell_size_m / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width || self.height == 0 {
            return Err(Error::Config(format!(
                "BEV grid must be square and non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if self.cell_size_m.is_nan() || self.cell_size_m <= 0.0 {
            return Err(Error::Config("cell size must be positive".into()));
        }
        if self.channels < 8 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channel width must be a multiple of 4 and at least 8, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(row, col)` of the cell holding `(x, y)`, rows along +y and
    /// columns along +x from the `(−extent, −extent)` corner.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let e = self.extent_m() as f64;
        let cs = self.cell_size_m as f64;
        let col = ((x + e) / cs).floor();
        let row = ((y + e) / cs).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height)
            .then_some((row as usize, col as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let e = self.extent_m() as f64;
        let cs = self.cell_size_m as f64;
        ((col as f64 + 0.5) * cs - e, (row as f64 + 0.5) * cs - e)
    }
}

fn wrap_yaw(yaw: f32) -> f32 {
    if yaw <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        yaw
    }
}

/// Draws a scene; identical `(seed, config, extent)` give identical scenes.
pub fn sample_scene(seed: u64, gen: &GenConfig, extent_m: f32) -> Result<Scene> {
    if gen.num_classes == 0 || gen.num_classes > CLASS_PROFILES.len() {
        return Err(Error::Config(format!(
            "num_classes must be in 1..={}, got {}",
            CLASS_PROFILES.len(),
            gen.num_classes
        )));
    }
    if gen.min_boxes > gen.max_boxes {
        return Err(Error::Config("min_boxes exceeds max_boxes".into()));
    }
    let half = extent_m - gen.margin_m;
    if half <= gen.min_range_m {
        return Err(Error::Config(
            "margin and ego clearance leave no room for boxes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(gen.min_boxes..=gen.max_boxes);
    let mut boxes: Vec<ObjectBox> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..gen.max_retries {
            let class_id = rng.random_range(0..gen.num_classes);
            let p = CLASS_PROFILES[class_id];
            let l = rng.random_range(p.length_m.0..=p.length_m.1);
            let w = rng.random_range(p.width_m.0..=p.width_m.1);
            let yaw = wrap_yaw(rng.random_range(-std::f32::consts::PI..std::f32::consts::PI));
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let v = [
                rng.random_range(-gen.max_speed_mps..=gen.max_speed_mps),
                rng.random_range(-gen.max_speed_mps..=gen.max_speed_mps),
            ];
            let candidate = ObjectBox {
                center_xy: [x, y],
                size_lw: [l, w],
                yaw,
                class_id: class_id as u32,
                velocity_xy: v,
            };
            if x.hypot(y) < gen.min_range_m + l.max(w) / 2.0 {
                continue;
            }
            let overlaps = boxes.iter().any(|b| {
                let ov = geometry::iou(b, &candidate);
                if gen.iou_cap <= 0.0 {
                    ov > 0.0
                } else {
                    ov > gen.iou_cap as f64
                }
            });
            if !overlaps {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place box {} of {count} within {} attempts (seed {seed})",
                i + 1,
                gen.max_retries
            )));
        }
    }
    Ok(Scene {
        boxes,
        seed,
        extent_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_box_range_gives_empty_scene() {
        let gen = GenConfig {
            min_boxes: 0,
            max_boxes: 0,
            ..Default::default()
        };
        assert!(sample_scene(1, &gen, 16.0).unwrap().boxes.is_empty());
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let gen = GenConfig::default();
        let a = sample_scene(42, &gen, 16.0).unwrap();
        assert_eq!(a, sample_scene(42, &gen, 16.0).unwrap());
        assert_ne!(a, sample_scene(43, &gen, 16.0).unwrap());
    }

    #[test]
    fn boxes_respect_invariants() {
        let gen = GenConfig::default();
        for seed in 0..50 {
            let s = sample_scene(seed, &gen, 16.0).unwrap();
            assert!((1..=8).contains(&s.boxes.len()));
            for (i, b) in s.boxes.iter().enumerate() {
                assert!(b.size_lw[0] > 0.0 && b.size_lw[1] > 0.0);
                assert!(b.yaw > -std::f32::consts::PI && b.yaw <= std::f32::consts::PI);
                assert!((b.class_id as usize) < gen.num_classes);
                assert!(b.center_xy[0].abs() < 16.0 && b.center_xy[1].abs() < 16.0);
                for other in &s.boxes[i + 1..] {
                    assert_eq!(geometry::iou(b, other), 0.0);
                }
            }
        }
    }

    #[test]
    fn impossible_placement_is_a_generation_error() {
        let gen = GenConfig {
            min_boxes: 400,
            max_boxes: 400,
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(
            sample_scene(3, &gen, 16.0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn cell_convention() {
        let g = GridConfig::default();
        assert_eq!(g.cell_of(0.0, 0.0), Some((32, 32)));
        assert_eq!(g.cell_of(-16.0, -16.0), Some((0, 0)));
        assert_eq!(g.cell_of(16.0, 0.0), None);
        assert_eq!(g.cell_center(32, 32), (0.25, 0.25));
    }
}
