//! Shared fixtures for the criterion benches.

use sbfuse_core::trainer::init_params;
use sbfuse_core::world::{camera_to_bev, generate_sample, lidar_to_bev, GridConfig};
use sbfuse_core::{BevGrid, ExperimentConfig, FusionConfig, ParamStore, Sample};

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub sample: Sample,
    pub lidar: BevGrid,
    pub camera: BevGrid,
    pub params: ParamStore,
}

/// One generated sample on a `size`×`size` grid, projected, with fresh
/// parameters for `fusion`.
pub fn fixture(size: usize, fusion: FusionConfig) -> Fixture {
    let cfg = ExperimentConfig {
        grid: GridConfig {
            height: size,
            width: size,
            ..GridConfig::default()
        },
        fusion,
        ..ExperimentConfig::default()
    };
    let sample = generate_sample(11, &cfg.world, &cfg.sensor, cfg.extent_m()).expect("sample");
    let lidar = lidar_to_bev(&sample.sweep, &cfg.grid, 0).expect("lidar grid");
    let camera = camera_to_bev(&sample.stream, &cfg.grid, 0).expect("camera grid");
    let params = init_params(&cfg).expect("params");
    Fixture {
        cfg,
        sample,
        lidar,
        camera,
        params,
    }
}
