//! Projection of raw sensor streams into `[C, H, W]` BEV grids.
//!
//! Each occupied cell gets four scalar statistics in `[0, 1]`. Each
//! statistic is spread over `C / 4` channels with triangular (hat) bins, so
//! both sensors produce grids of the same width. Empty cells are exactly
//! zero.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::fusion::{BevGrid, Modality};
use crate::tensor::Tensor;

use super::{CameraStream, GridConfig, LidarSweep};

const LIDAR_COUNT_SCALE: f32 = 64.0;
const CAMERA_COUNT_SCALE: f32 = 16.0;

/// Writes `v` into `bins` consecutive channels starting at `first`.
fn hat(data: &mut [f32], plane: usize, cell: usize, first: usize, bins: usize, v: f32) {
    let v = v.clamp(0.0, 1.0);
    let pos = v * (bins - 1) as f32;
    let lo = (pos.floor() as usize).min(bins - 1);
    let frac = pos - lo as f32;
    data[(first + lo) * plane + cell] += 1.0 - frac;
    if lo + 1 < bins {
        data[(first + lo + 1) * plane + cell] += frac;
    }
}

fn log_count(n: u32, scale: f32) -> f32 {
    ((1.0 + n as f32).ln() / (1.0 + scale).ln()).min(1.0)
}

/// Lifts per-cell statistics (`stats[cell] = Some([f0..f3])`) to a grid.
fn lift(grid: &GridConfig, stats: &[Option<[f32; 4]>]) -> Tensor<f32> {
    let plane = grid.height * grid.width;
    let bins = grid.channels / 4;
    let mut data = vec![0.0f32; grid.channels * plane];
    for (cell, s) in stats.iter().enumerate() {
        if let Some(f) = s {
            for (k, &v) in f.iter().enumerate() {
                hat(&mut data, plane, cell, k * bins, bins, v);
            }
        }
    }
    Tensor::new(vec![grid.channels, grid.height, grid.width], data)
        .expect("sized from the grid config")
}

/// Per-cell max intensity, mean intensity, log point count and range.
pub fn lidar_to_bev(sweep: &LidarSweep, grid: &GridConfig, frame_id: u64) -> Result<BevGrid> {
    grid.validate()?;
    let plane = grid.height * grid.width;
    let mut count = vec![0u32; plane];
    let mut sum = vec![0.0f32; plane];
    let mut max = vec![0.0f32; plane];
    for p in &sweep.points {
        if let Some((r, c)) = grid.cell_of(p.x as f64, p.y as f64) {
            let i = r * grid.width + c;
            count[i] += 1;
            sum[i] += p.intensity;
            max[i] = max[i].max(p.intensity);
        }
    }
    let reach = grid.extent_m() * std::f32::consts::SQRT_2;
    let stats: Vec<Option<[f32; 4]>> = (0..plane)
        .map(|i| {
            (count[i] > 0).then(|| {
                let (x, y) = grid.cell_center(i / grid.width, i % grid.width);
                [
                    max[i],
                    sum[i] / count[i] as f32,
                    log_count(count[i], LIDAR_COUNT_SCALE),
                    (x.hypot(y) as f32 / reach).min(1.0),
                ]
            })
        })
        .collect();
    BevGrid::new(
        lift(grid, &stats),
        Modality::Lidar,
        grid.cell_size_m,
        frame_id,
    )
}

/// Splats every column with a depth estimate at that depth along its ray;
/// per cell: mean brightness, row contrast, vertical gradient, log count.
pub fn camera_to_bev(stream: &CameraStream, grid: &GridConfig, frame_id: u64) -> Result<BevGrid> {
    grid.validate()?;
    let plane = grid.height * grid.width;
    let mut count = vec![0u32; plane];
    let mut acc = vec![[0.0f32; 3]; plane];
    for view in &stream.views {
        for col in 0..view.cols {
            let d = view.depth[col];
            if d.is_nan() || d <= 0.0 {
                continue;
            }
            let az = view.column_azimuth(col);
            let Some((r, c)) = grid.cell_of(d as f64 * az.cos(), d as f64 * az.sin()) else {
                continue;
            };
            let column: Vec<f32> = (0..view.rows)
                .map(|row| view.intensity[row * view.cols + col])
                .collect();
            let n = column.len().max(1) as f32;
            let mean = column.iter().sum::<f32>() / n;
            let std = (column.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt();
            let half = column.len() / 2;
            let top = column[..half].iter().sum::<f32>() / half.max(1) as f32;
            let bottom = column[half..].iter().sum::<f32>() / (column.len() - half).max(1) as f32;
            let i = r * grid.width + c;
            count[i] += 1;
            acc[i][0] += mean;
            acc[i][1] += (2.0 * std).min(1.0);
            acc[i][2] += 0.5 + 0.5 * (bottom - top);
        }
    }
    let stats: Vec<Option<[f32; 4]>> = (0..plane)
        .map(|i| {
            (count[i] > 0).then(|| {
                let n = count[i] as f32;
                [
                    acc[i][0] / n,
                    acc[i][1] / n,
                    acc[i][2] / n,
                    log_count(count[i], CAMERA_COUNT_SCALE),
                ]
            })
        })
        .collect();
    BevGrid::new(
        lift(grid, &stats),
        Modality::Camera,
        grid.cell_size_m,
        frame_id,
    )
}

/// BEV projection with call counters, so callers can observe which sensor
/// streams a forward pass actually touched.
#[derive(Debug, Default)]
pub struct BevProjector {
    pub grid: GridConfig,
    lidar_calls: AtomicU64,
    camera_calls: AtomicU64,
}

impl BevProjector {
    pub fn new(grid: GridConfig) -> Self {
        Self {
            grid,
            ..Default::default()
        }
    }

    pub fn lidar(&self, sweep: &LidarSweep, frame_id: u64) -> Result<BevGrid> {
        self.lidar_calls.fetch_add(1, Ordering::Relaxed);
        lidar_to_bev(sweep, &self.grid, frame_id)
    }

    pub fn camera(&self, stream: &CameraStream, frame_id: u64) -> Result<BevGrid> {
        self.camera_calls.fetch_add(1, Ordering::Relaxed);
        camera_to_bev(stream, &self.grid, frame_id)
    }

    pub fn lidar_calls(&self) -> u64 {
        self.lidar_calls.load(Ordering::Relaxed)
    }

    pub fn camera_calls(&self) -> u64 {
        self.camera_calls.load(Ordering::Relaxed)
    }
}
