//! Sensor corruptions applied to raw streams before BEV projection.
//!
//! Each family touches exactly one modality. The `*_with` functions take
//! the raw perturbation parameters (including the zero-strength probes used
//! by tests); the `apply_*` functions look them up by severity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::world::{render_lidar, CameraStream, LidarSweep, Sample, Scene, SensorConfig};

/// Kept beam stride per severity.
pub const BEAM_STRIDE: [u32; 3] = [2, 4, 8];
/// Fog contrast factor `t` per severity.
pub const FOG_CONTRAST: [f32; 3] = [0.7, 0.45, 0.2];
pub const FOG_NOISE_SIGMA: [f32; 3] = [0.02, 0.05, 0.1];
pub const BLUR_KERNEL: [usize; 3] = [3, 7, 13];
pub const SPATIAL_ROTATION_DEG: [f32; 3] = [1.0, 3.0, 6.0];
pub const SPATIAL_SHIFT_M: [f32; 3] = [0.25, 0.5, 1.0];
pub const TEMPORAL_DT_S: [f32; 3] = [0.1, 0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Clean,
    #[serde(rename = "beams")]
    BeamReduce,
    Fog,
    #[serde(rename = "motionblur")]
    MotionBlur,
    #[serde(rename = "spatial")]
    SpatialMisalign,
    #[serde(rename = "temporal")]
    TemporalMisalign,
}

impl Family {
    /// Every family except `Clean`.
    pub const CORRUPTIONS: [Family; 5] = [
        Family::BeamReduce,
        Family::SpatialMisalign,
        Family::TemporalMisalign,
        Family::Fog,
        Family::MotionBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Clean => "clean",
            Family::BeamReduce => "beams",
            Family::Fog => "fog",
            Family::MotionBlur => "motionblur",
            Family::SpatialMisalign => "spatial",
            Family::TemporalMisalign => "temporal",
        }
    }

    /// Modality the family perturbs; `None` for `Clean`.
    pub fn target(self) -> Option<Modality> {
        match self {
            Family::Clean => None,
            Family::Fog | Family::MotionBlur => Some(Modality::Camera),
            _ => Some(Modality::Lidar),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Family::Clean]
            .into_iter()
            .chain(Family::CORRUPTIONS)
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown corruption family {s:?} (expected clean, beams, fog, motionblur, spatial or temporal)"
                ))
            })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub family: Family,
    /// 1..=3; ignored for `Clean`.
    pub severity: u8,
    pub rng_seed: u64,
}

impl CorruptionSpec {
    pub fn new(family: Family, severity: u8, rng_seed: u64) -> Result<Self> {
        if family != Family::Clean && !(1..=3).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} outside 1..=3")));
        }
        Ok(Self {
            family,
            severity,
            rng_seed,
        })
    }

    pub fn clean() -> Self {
        Self {
            family: Family::Clean,
            severity: 0,
            rng_seed: 0,
        }
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

/// Parses `"<family>:<severity>"`; `"clean"` alone is accepted.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (fam, sev) = s.split_once(':').unwrap_or((s, "1"));
        let family: Family = fam.trim().parse()?;
        let severity: u8 = sev
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad severity in corruption spec {s:?}")))?;
        CorruptionSpec::new(family, severity, 0)
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, self.severity)
    }
}

pub fn beam_reduce_with(sweep: &LidarSweep, stride: u32) -> LidarSweep {
    LidarSweep {
        points: sweep
            .points
            .iter()
            .filter(|p| p.beam % stride == 0)
            .copied()
            .collect(),
        num_beams: sweep.num_beams,
    }
}

pub fn apply_beam_reduce(sweep: &LidarSweep, severity: u8, _seed: u64) -> Result<LidarSweep> {
    let spec = CorruptionSpec::new(Family::BeamReduce, severity, 0)?;
    Ok(beam_reduce_with(sweep, BEAM_STRIDE[spec.level()]))
}

/// `t · in + (1 − t) · haze + N(0, sigma)` per pixel, haze = mean over the
/// whole stream.
pub fn fog_with(stream: &CameraStream, t: f32, sigma: f32, seed: u64) -> CameraStream {
    let (sum, n) = stream
        .views
        .iter()
        .flat_map(|v| &v.intensity)
        .fold((0.0f64, 0usize), |(s, n), &x| (s + x as f64, n + 1));
    let haze = if n == 0 { 0.0 } else { (sum / n as f64) as f32 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = stream.clone();
    for v in &mut out.views {
        for px in &mut v.intensity {
            let noise = if sigma > 0.0 {
                sigma * rng.sample::<f32, _>(StandardNormal)
            } else {
                0.0
            };
            *px = t * *px + (1.0 - t) * haze + noise;
        }
    }
    out
}

pub fn apply_fog(stream: &CameraStream, severity: u8, seed: u64) -> Result<CameraStream> {
    let spec = CorruptionSpec::new(Family::Fog, severity, seed)?;
    Ok(fog_with(
        stream,
        FOG_CONTRAST[spec.level()],
        FOG_NOISE_SIGMA[spec.level()],
        seed,
    ))
}

/// Horizontal box filter of odd length `len` with edge-inclusive mirroring
/// (`x[-1] = x[0]`), which keeps every row's sum unchanged.
pub fn motion_blur_with(stream: &CameraStream, len: usize) -> CameraStream {
    assert!(len % 2 == 1, "blur kernel length must be odd");
    let h = (len / 2) as isize;
    let mut out = stream.clone();
    for (src, dst) in stream.views.iter().zip(&mut out.views) {
        let cols = src.cols as isize;
        let reflect = |mut j: isize| -> usize {
            loop {
                if j < 0 {
                    j = -j - 1;
                } else if j >= cols {
                    j = 2 * cols - j - 1;
                } else {
                    return j as usize;
                }
            }
        };
        for r in 0..src.rows {
            let row = &src.intensity[r * src.cols..(r + 1) * src.cols];
            for c in 0..cols {
                let s: f32 = (c - h..=c + h).map(|j| row[reflect(j)]).sum();
                dst.intensity[r * src.cols + c as usize] = s / len as f32;
            }
        }
    }
    out
}

pub fn apply_motion_blur(stream: &CameraStream, severity: u8, _seed: u64) -> Result<CameraStream> {
    let spec = CorruptionSpec::new(Family::MotionBlur, severity, 0)?;
    Ok(motion_blur_with(stream, BLUR_KERNEL[spec.level()]))
}

/// Rotates every point by `psi_rad` about the ego origin, shifts it by
/// `shift_m` along `direction_rad` and drops points that leave the extent.
pub fn spatial_misalign_with(
    sweep: &LidarSweep,
    psi_rad: f64,
    shift_m: f64,
    direction_rad: f64,
    extent_m: f32,
) -> LidarSweep {
    let (c, s) = (psi_rad.cos(), psi_rad.sin());
    let (tx, ty) = (shift_m * direction_rad.cos(), shift_m * direction_rad.sin());
    let e = extent_m as f64;
    let points = sweep
        .points
        .iter()
        .filter_map(|p| {
            let (x, y) = (p.x as f64, p.y as f64);
            let (nx, ny) = (c * x - s * y + tx, s * x + c * y + ty);
            (nx.abs() < e && ny.abs() < e).then_some(crate::world::LidarPoint {
                x: nx as f32,
                y: ny as f32,
                ..*p
            })
        })
        .collect();
    LidarSweep {
        points,
        num_beams: sweep.num_beams,
    }
}

pub fn apply_spatial_misalign(
    sweep: &LidarSweep,
    severity: u8,
    seed: u64,
    extent_m: f32,
) -> Result<LidarSweep> {
    let spec = CorruptionSpec::new(Family::SpatialMisalign, severity, seed)?;
    let direction = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..std::f64::consts::TAU);
    Ok(spatial_misalign_with(
        sweep,
        (SPATIAL_ROTATION_DEG[spec.level()] as f64).to_radians(),
        SPATIAL_SHIFT_M[spec.level()] as f64,
        direction,
        extent_m,
    ))
}

/// LiDAR re-rendered from the scene advanced by `dt_s`.
pub fn temporal_misalign_with(scene: &Scene, dt_s: f32, sensor: &SensorConfig) -> LidarSweep {
    render_lidar(&scene.advanced(dt_s), sensor)
}

pub fn apply_temporal_misalign(
    scene: &Scene,
    severity: u8,
    sensor: &SensorConfig,
) -> Result<LidarSweep> {
    let spec = CorruptionSpec::new(Family::TemporalMisalign, severity, 0)?;
    Ok(temporal_misalign_with(
        scene,
        TEMPORAL_DT_S[spec.level()],
        sensor,
    ))
}

/// Seed used for one sample: the spec seed mixed with the scene seed.
fn sample_seed(spec: &CorruptionSpec, scene: &Scene) -> u64 {
    spec.rng_seed ^ scene.seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Routes `spec` to the affected modality; the other stream is cloned
/// untouched.
pub fn corrupt_sample(
    sample: &Sample,
    spec: &CorruptionSpec,
    sensor: &SensorConfig,
) -> Result<Sample> {
    let seed = sample_seed(spec, &sample.scene);
    let mut out = sample.clone();
    match spec.family {
        Family::Clean => {}
        Family::BeamReduce => out.sweep = apply_beam_reduce(&sample.sweep, spec.severity, seed)?,
        Family::SpatialMisalign => {
            out.sweep =
                apply_spatial_misalign(&sample.sweep, spec.severity, seed, sample.scene.extent_m)?
        }
        Family::TemporalMisalign => {
            out.sweep = apply_temporal_misalign(&sample.scene, spec.severity, sensor)?
        }
        Family::Fog => out.stream = apply_fog(&sample.stream, spec.severity, seed)?,
        Family::MotionBlur => out.stream = apply_motion_blur(&sample.stream, spec.severity, seed)?,
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{CameraView, LidarPoint};

    fn sweep() -> LidarSweep {
        LidarSweep {
            points: (0..64)
                .map(|i| LidarPoint {
                    x: (i % 8) as f32 - 4.0,
                    y: (i / 8) as f32 * 0.5,
                    intensity: 0.5,
                    beam: (i % 32) as u32,
                })
                .collect(),
            num_beams: 32,
        }
    }

    fn stream(values: Vec<f32>, rows: usize, cols: usize) -> CameraStream {
        CameraStream {
            views: vec![CameraView {
                yaw: 0.0,
                fov: 1.0,
                rows,
                cols,
                intensity: values,
                depth: vec![0.0; cols],
            }],
        }
    }

    #[test]
    fn spec_parsing() {
        let s: CorruptionSpec = "fog:2".parse().unwrap();
        assert_eq!((s.family, s.severity), (Family::Fog, 2));
        assert_eq!(s.to_string(), "fog:2");
        assert!("snow:1".parse::<CorruptionSpec>().is_err());
        assert!("beams:4".parse::<CorruptionSpec>().is_err());
        assert_eq!(
            "clean".parse::<CorruptionSpec>().unwrap().family,
            Family::Clean
        );
    }

    #[test]
    fn beam_reduction_keeps_strided_beams() {
        let s = sweep();
        let one = apply_beam_reduce(&s, 1, 0).unwrap();
        let beams: std::collections::BTreeSet<u32> = one.points.iter().map(|p| p.beam).collect();
        assert_eq!(beams.len(), 16);
        let counts: Vec<usize> = (1..=3)
            .map(|k| apply_beam_reduce(&s, k, 0).unwrap().points.len())
            .collect();
        assert!(counts[0] >= counts[1] && counts[1] >= counts[2]);
        let empty = LidarSweep {
            points: vec![],
            num_beams: 32,
        };
        assert!(apply_beam_reduce(&empty, 3, 0).unwrap().points.is_empty());
    }

    #[test]
    fn fog_probe_and_fixed_point() {
        let img = stream((0..24).map(|i| i as f32 / 24.0).collect(), 4, 6);
        assert_eq!(fog_with(&img, 1.0, 0.0, 3), img);
        let flat = stream(vec![0.4; 24], 4, 6);
        let fogged = fog_with(&flat, 0.45, 0.0, 3);
        assert!(fogged.views[0]
            .intensity
            .iter()
            .all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn blur_impulse_and_mean() {
        let mut px = vec![0.0; 9];
        px[4] = 1.0;
        let out = motion_blur_with(&stream(px, 1, 9), 3);
        let row = &out.views[0].intensity;
        assert_eq!(&row[3..6], &[1.0 / 3.0; 3]);
        assert!(row[..3].iter().chain(&row[6..]).all(|&v| v == 0.0));
        let img = stream(
            (0..40).map(|i| ((i * 7) % 11) as f32 / 11.0).collect(),
            2,
            20,
        );
        for len in BLUR_KERNEL {
            let b = motion_blur_with(&img, len);
            let m0: f32 = img.views[0].intensity.iter().sum::<f32>() / 40.0;
            let m1: f32 = b.views[0].intensity.iter().sum::<f32>() / 40.0;
            assert!((m0 - m1).abs() < 1e-5, "{len}: {m0} vs {m1}");
        }
    }

    #[test]
    fn spatial_probe_is_identity() {
        let s = sweep();
        assert_eq!(spatial_misalign_with(&s, 0.0, 0.0, 1.3, 16.0), s);
    }

    #[test]
    fn parameter_tables_are_strictly_increasing() {
        assert!(BEAM_STRIDE.windows(2).all(|w| w[0] < w[1]));
        assert!(FOG_CONTRAST.windows(2).all(|w| w[0] > w[1]));
        assert!(FOG_NOISE_SIGMA.windows(2).all(|w| w[0] < w[1]));
        assert!(BLUR_KERNEL.windows(2).all(|w| w[0] < w[1]));
        assert!(SPATIAL_ROTATION_DEG.windows(2).all(|w| w[0] < w[1]));
        assert!(SPATIAL_SHIFT_M.windows(2).all(|w| w[0] < w[1]));
        assert!(TEMPORAL_DT_S.windows(2).all(|w| w[0] < w[1]));
    }
}
