//! `BFD1` dataset container.
//!
//! Layout, little-endian: `"BFD1"`, version `u32`, config hash `u64`,
//! sample count `u32`, then per sample:
//! - scene: seed `u64`, extent `f32`, box count `u32`, per box
//!   `cx cy l w yaw vx vy` as `f32` and class `u32`;
//! - sweep: beam count `u32`, point count `u32`, per point `x y intensity`
//!   as `f32` and beam `u32`;
//! - stream: view count `u32`, per view `yaw fov` as `f32`, `rows cols` as
//!   `u32`, `rows·cols` intensities then `cols` depths as `f32`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{put_f32, put_u32, put_u64, write_atomic, ByteReader};

use super::{
    render_camera, render_lidar, sample_scene, CameraStream, CameraView, GenConfig, LidarPoint,
    LidarSweep, ObjectBox, Sample, Scene, SensorConfig,
};

pub const DATASET_MAGIC: &[u8; 4] = b"BFD1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Hash of the world, sensor and grid configuration that produced it.
    pub config_hash: u64,
    pub samples: Vec<Sample>,
}

/// Scene seed of sample `index` under dataset seed `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_sample(
    seed: u64,
    gen: &GenConfig,
    sensor: &SensorConfig,
    extent_m: f32,
) -> Result<Sample> {
    let scene = sample_scene(seed, gen, extent_m)?;
    let sweep = render_lidar(&scene, sensor);
    let stream = render_camera(&scene, sensor);
    Ok(Sample {
        scene,
        sweep,
        stream,
    })
}

/// `count` samples; sample `i` depends only on `(seed, i)` and the configs.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    gen: &GenConfig,
    sensor: &SensorConfig,
    extent_m: f32,
) -> Result<Vec<Sample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(sample_seed(seed, i), gen, sensor, extent_m))
        .collect()
}

fn put_sample(out: &mut Vec<u8>, s: &Sample) {
    put_u64(out, s.scene.seed);
    put_f32(out, s.scene.extent_m);
    put_u32(out, s.scene.boxes.len() as u32);
    for b in &s.scene.boxes {
        for v in [
            b.center_xy[0],
            b.center_xy[1],
            b.size_lw[0],
            b.size_lw[1],
            b.yaw,
            b.velocity_xy[0],
            b.velocity_xy[1],
        ] {
            put_f32(out, v);
        }
        put_u32(out, b.class_id);
    }
    put_u32(out, s.sweep.num_beams);
    put_u32(out, s.sweep.points.len() as u32);
    for p in &s.sweep.points {
        put_f32(out, p.x);
        put_f32(out, p.y);
        put_f32(out, p.intensity);
        put_u32(out, p.beam);
    }
    put_u32(out, s.stream.views.len() as u32);
    for v in &s.stream.views {
        put_f32(out, v.yaw);
        put_f32(out, v.fov);
        put_u32(out, v.rows as u32);
        put_u32(out, v.cols as u32);
        v.intensity.iter().for_each(|&x| put_f32(out, x));
        v.depth.iter().for_each(|&x| put_f32(out, x));
    }
}

fn read_sample(r: &mut ByteReader) -> Result<Sample> {
    let seed = r.u64()?;
    let extent_m = r.f32()?;
    let n = r.u32()?;
    let mut boxes = Vec::new();
    for _ in 0..n {
        let f = r.f32_vec(7)?;
        boxes.push(ObjectBox {
            center_xy: [f[0], f[1]],
            size_lw: [f[2], f[3]],
            yaw: f[4],
            velocity_xy: [f[5], f[6]],
            class_id: r.u32()?,
        });
    }
    let num_beams = r.u32()?;
    let n = r.u32()?;
    let mut points = Vec::new();
    for _ in 0..n {
        let f = r.f32_vec(3)?;
        let at = r.offset();
        let beam = r.u32()?;
        if beam >= num_beams {
            return Err(r.error_at(
                at,
                format!("beam {beam} out of range for {num_beams} beams"),
            ));
        }
        points.push(LidarPoint {
            x: f[0],
            y: f[1],
            intensity: f[2],
            beam,
        });
    }
    let k = r.u32()?;
    let mut views = Vec::new();
    for _ in 0..k {
        let yaw = r.f32()?;
        let fov = r.f32()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let at = r.offset();
        let pixels = rows
            .checked_mul(cols)
            .ok_or_else(|| r.error_at(at, "view size overflow"))?;
        let intensity = r.f32_vec(pixels)?;
        let depth = r.f32_vec(cols)?;
        views.push(CameraView {
            yaw,
            fov,
            rows,
            cols,
            intensity,
            depth,
        });
    }
    Ok(Sample {
        scene: Scene {
            boxes,
            seed,
            extent_m,
        },
        sweep: LidarSweep { points, num_beams },
        stream: CameraStream { views },
    })
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u64(&mut out, self.config_hash);
        put_u32(&mut out, self.samples.len() as u32);
        for s in &self.samples {
            put_sample(&mut out, s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let config_hash = r.u64()?;
        let count = r.u32()?;
        let samples = (0..count)
            .map(|_| read_sample(&mut r))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(Self {
            config_hash,
            samples,
        })
    }

    pub fn total_boxes(&self) -> usize {
        self.samples.iter().map(|s| s.scene.boxes.len()).sum()
    }
}

pub fn dataset_write(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = dataset.to_bytes();
    write_atomic(path, |f| f.write_all(&bytes))
}

pub fn dataset_read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}
