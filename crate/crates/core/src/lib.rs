//! Single-branch camera/LiDAR bird's-eye-view fusion testbed.
//!
//! One shared BEV encoder and detection head consume whichever BEV grid
//! arrives: a fused grid when both sensors are available, otherwise the
//! single available grid unchanged. The crate bundles everything needed to
//! train and stress that design at desk scale: a small reverse-mode
//! autodiff engine, the fusion operators, a synthetic 2D world with
//! LiDAR-like and camera-like sensors, sensor corruptions, a center-based
//! detector, the regime-mixing trainer and the robustness evaluation.

pub mod config;
pub mod corrupt;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub(crate) mod io;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use fusion::{Availability, BevGrid, FusionConfig, Modality};
pub use tensor::{ParamStore, Tape, Tensor, Var};
pub use world::{CameraStream, LidarSweep, ObjectBox, Sample, Scene};
