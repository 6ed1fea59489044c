//! Ray-cast sensor models.
//!
//! Both sensors cast rays from the ego origin and stop at the nearest box.
//! LiDAR places one return per beam along the chord the ray cuts through
//! the box, so returns cover the visible footprint. The camera sees the same
//! rays but estimates depth with a per-box bias plus per-column noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::geometry::ray_box;
use super::{
    CameraStream, CameraView, LidarPoint, LidarSweep, ObjectBox, Scene, SensorConfig,
    CLASS_PROFILES,
};

const LIDAR_SALT: u64 = 0x6c69_6461_725f_7331;
const CAMERA_SALT: u64 = 0x6361_6d65_7261_5f31;

pub const BACKGROUND_INTENSITY: f32 = 0.05;
const CLUTTER_INTENSITY: f32 = 0.08;
const CLUTTER_MIN_RANGE_M: f64 = 1.0;

/// Nearest box crossed by the ray, as `(box index, t_enter, t_exit)`.
fn first_hit(boxes: &[ObjectBox], azimuth: f64) -> Option<(usize, f64, f64)> {
    boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| ray_box(b, azimuth).map(|(t0, t1)| (i, t0, t1)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn inside(extent: f32, x: f64, y: f64) -> bool {
    let e = extent as f64;
    x > -e && x < e && y > -e && y < e
}

pub fn render_lidar(scene: &Scene, sensor: &SensorConfig) -> LidarSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ LIDAR_SALT);
    let nb = sensor.num_beams;
    let max_r = scene.extent_m as f64 * 0.999;
    let mut points = Vec::new();
    for step in 0..sensor.azimuth_steps {
        let az = std::f64::consts::TAU * step as f64 / sensor.azimuth_steps as f64;
        let (dx, dy) = (az.cos(), az.sin());
        let hit = first_hit(&scene.boxes, az);
        for beam in 0..nb {
            // fixed draw count keeps the stream aligned across scenes
            let (u1, u2, u3): (f32, f64, f32) = (rng.random(), rng.random(), rng.random());
            let frac = (beam as f64 + 0.5) / nb as f64;
            let (t, intensity) = match hit {
                Some((i, t0, t1)) => {
                    let refl = CLASS_PROFILES[scene.boxes[i].class_id as usize].reflectivity;
                    (t0 + frac * (t1 - t0), refl + 0.05 * (u3 - 0.5))
                }
                None if sensor.clutter && u1 < sensor.clutter_prob => {
                    let r = CLUTTER_MIN_RANGE_M
                        + (beam as f64 + u2) / nb as f64 * (max_r - CLUTTER_MIN_RANGE_M);
                    (r, CLUTTER_INTENSITY * (0.5 + u3))
                }
                None => continue,
            };
            let (x, y) = (t * dx, t * dy);
            if inside(scene.extent_m, x, y) {
                points.push(LidarPoint {
                    x: x as f32,
                    y: y as f32,
                    intensity,
                    beam,
                });
            }
        }
    }
    LidarSweep {
        points,
        num_beams: nb,
    }
}

/// Row profile of a class seen at full contrast.
fn texture(class_id: u32, row: usize, rows: usize) -> f32 {
    let refl = CLASS_PROFILES[class_id as usize].reflectivity;
    let v = row as f32 / (rows.max(2) - 1) as f32;
    match class_id {
        0 => 0.85,
        1 => {
            if row.is_multiple_of(2) {
                0.8
            } else {
                0.3
            }
        }
        _ => 0.2 + 0.7 * v,
    }
    .min(1.0)
        * (0.5 + 0.5 * refl)
}

pub fn render_camera(scene: &Scene, sensor: &SensorConfig) -> CameraStream {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ CAMERA_SALT);
    let sigma = sensor.sigma_depth_m as f64;
    let box_bias: Vec<f64> = scene
        .boxes
        .iter()
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let k = sensor.num_views.max(1);
    let fov = std::f32::consts::TAU / k as f32;
    let (rows, cols) = (sensor.view_rows, sensor.view_cols);
    let views = (0..k)
        .map(|v| {
            let mut view = CameraView {
                yaw: fov * v as f32,
                fov,
                rows,
                cols,
                intensity: vec![BACKGROUND_INTENSITY; rows * cols],
                depth: vec![0.0; cols],
            };
            for col in 0..cols {
                let col_noise = 0.1 * sigma * rng.sample::<f64, _>(StandardNormal);
                let pixel_noise: Vec<f32> = (0..rows)
                    .map(|_| 0.02 * (rng.random::<f32>() - 0.5))
                    .collect();
                let Some((i, t0, t1)) = first_hit(&scene.boxes, view.column_azimuth(col)) else {
                    continue;
                };
                let depth = (0.5 * (t0 + t1) + box_bias[i] + col_noise).max(0.1);
                view.depth[col] = depth as f32;
                for (row, noise) in pixel_noise.into_iter().enumerate() {
                    view.intensity[row * cols + col] =
                        (texture(scene.boxes[i].class_id, row, rows) + noise).clamp(0.0, 1.0);
                }
            }
            view
        })
        .collect();
    CameraStream { views }
}
