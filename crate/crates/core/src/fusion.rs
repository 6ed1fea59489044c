//! Fusion operators over equal-width BEV grids and the availability
//! dispatch that bypasses them when only one sensor delivered data.
//!
//! Every operator exists twice: a graph form that records onto a [`Tape`]
//! (used by training and gradient checks) and a value form over
//! [`BevGrid`]s that runs the graph form on a throwaway tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Camera,
    Lidar,
    Fused,
}

/// A `[C, H, W]` feature grid in the shared BEV frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub tensor: Tensor<f32>,
    pub modality: Modality,
    pub cell_size_m: f32,
    pub frame_id: u64,
}

impl BevGrid {
    pub fn new(
        tensor: Tensor<f32>,
        modality: Modality,
        cell_size_m: f32,
        frame_id: u64,
    ) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::Fusion(format!(
                "BEV grid must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        if cell_size_m.is_nan() || cell_size_m <= 0.0 {
            return Err(Error::Fusion(format!(
                "cell size must be positive, got {cell_size_m}"
            )));
        }
        Ok(Self {
            tensor,
            modality,
            cell_size_m,
            frame_id,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn bit_eq(&self, other: &BevGrid) -> bool {
        self.modality == other.modality
            && self.cell_size_m.to_bits() == other.cell_size_m.to_bits()
            && self.frame_id == other.frame_id
            && self.tensor.bit_eq(&other.tensor)
    }
}

fn check_pair(f_lid: &BevGrid, f_cam: &BevGrid) -> Result<()> {
    if f_lid.tensor.shape() != f_cam.tensor.shape() {
        return Err(Error::Fusion(format!(
            "grid shapes differ: {:?} vs {:?}",
            f_lid.tensor.shape(),
            f_cam.tensor.shape()
        )));
    }
    if f_lid.cell_size_m != f_cam.cell_size_m {
        return Err(Error::Fusion(format!(
            "cell sizes differ: {} vs {}",
            f_lid.cell_size_m, f_cam.cell_size_m
        )));
    }
    Ok(())
}

/// Which sensor streams exist for a sample. At least one always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Availability {
    a_lid: bool,
    a_cam: bool,
}

impl Availability {
    pub fn new(a_lid: bool, a_cam: bool) -> Result<Self> {
        if !a_lid && !a_cam {
            return Err(Error::Fusion(
                "at least one modality must be available".into(),
            ));
        }
        Ok(Self { a_lid, a_cam })
    }

    pub const BOTH: Availability = Availability {
        a_lid: true,
        a_cam: true,
    };
    pub const LIDAR_ONLY: Availability = Availability {
        a_lid: true,
        a_cam: false,
    };
    pub const CAMERA_ONLY: Availability = Availability {
        a_lid: false,
        a_cam: true,
    };

    pub fn lidar(self) -> bool {
        self.a_lid
    }

    pub fn camera(self) -> bool {
        self.a_cam
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaShape {
    #[default]
    Linear,
}

fn default_w() -> f32 {
    0.5
}

fn default_heads() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FusionConfig {
    #[serde(rename = "avg")]
    Average {
        #[serde(default = "default_w")]
        w: f32,
    },
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "xattn")]
    CrossAttention {
        #[serde(default = "default_heads")]
        heads: usize,
        /// Initial gate logit; the gate is `sigmoid(theta)`.
        #[serde(default)]
        theta: f32,
    },
    #[serde(rename = "pmd")]
    Pmd {
        #[serde(default)]
        schedule: AlphaShape,
    },
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::Average { w: 0.5 }
    }
}

impl FusionConfig {
    pub fn name(&self) -> &'static str {
        match self {
            FusionConfig::Average { .. } => "avg",
            FusionConfig::MaxPool => "maxpool",
            FusionConfig::CrossAttention { .. } => "xattn",
            FusionConfig::Pmd { .. } => "pmd",
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            FusionConfig::Average { w } if !(0.0..=1.0).contains(&w) => {
                Err(Error::Fusion(format!("averaging weight {w} outside [0,1]")))
            }
            FusionConfig::CrossAttention { heads, .. }
                if heads == 0 || !channels.is_multiple_of(heads) =>
            {
                Err(Error::Fusion(format!(
                    "{channels} channels not divisible into {heads} heads"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Where in its life the model is when fusing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionPhase {
    /// `anchor` is only consulted by progressive modality decay.
    Train {
        step: u64,
        total_steps: u64,
        anchor: Modality,
    },
    Inference,
}

/// Linear decay from 1 at step 0 to 0 at `total_steps`.
pub fn alpha_schedule(step: u64, total_steps: u64) -> Result<f32> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Fusion(format!(
            "alpha schedule step {step} outside 0..={total_steps}"
        )));
    }
    Ok((1.0 - step as f64 / total_steps as f64) as f32)
}

pub const XATTN_PREFIX: &str = "fusion.xattn";
pub const CONCAT_PREFIX: &str = "fusion.concat";

fn xattn_name(part: &str) -> String {
    format!("{XATTN_PREFIX}.{part}")
}

/// Adds the operator's trainable parameters (cross-attention only) to `store`.
pub fn init_fusion_params(
    store: &mut ParamStore,
    config: &FusionConfig,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate(channels)?;
    if let FusionConfig::CrossAttention { theta, .. } = *config {
        let bound = (6.0 / (2 * channels) as f64).sqrt() as f32;
        for p in ["q", "k", "v", "o"] {
            let w = Tensor::from_fn(&[channels, channels], |_| rng.random_range(-bound..bound));
            store.insert(&xattn_name(&format!("w{p}")), w)?;
            store.insert(&xattn_name(&format!("b{p}")), Tensor::zeros(&[channels]))?;
        }
        store.insert(&xattn_name("theta"), Tensor::scalar(theta))?;
    }
    Ok(())
}

/// Parameters of the concatenate-then-1×1-conv baseline fusion.
pub fn init_concat_params(
    store: &mut ParamStore,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = (6.0 / (3 * channels) as f64).sqrt() as f32;
    let w = Tensor::from_fn(&[channels, 2 * channels, 1, 1], |_| {
        rng.random_range(-bound..bound)
    });
    store.insert(&format!("{CONCAT_PREFIX}.w"), w)?;
    store.insert(&format!("{CONCAT_PREFIX}.b"), Tensor::zeros(&[channels]))?;
    Ok(())
}

pub fn average_graph<T: Element>(tape: &mut Tape<T>, lid: Var, cam: Var, w: f32) -> Result<Var> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Fusion(format!("averaging weight {w} outside [0,1]")));
    }
    let wc = tape.scale(cam, T::from_f32(w));
    let wl = tape.scale(lid, T::from_f32(1.0 - w));
    Ok(tape.add(wc, wl)?)
}

pub fn maxpool_graph<T: Element>(tape: &mut Tape<T>, lid: Var, cam: Var) -> Result<Var> {
    Ok(tape.max_pair(lid, cam)?)
}

/// Residual cross-attention with LiDAR queries and camera keys/values over
/// the `H·W` token axis.
pub fn cross_attention_graph<T: Element>(
    tape: &mut Tape<T>,
    lid: Var,
    cam: Var,
    params: &ParamStore,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(lid).to_vec();
    if tape.shape(cam) != &shape[..] {
        return Err(Error::Fusion(format!(
            "grid shapes differ: {:?} vs {:?}",
            shape,
            tape.shape(cam)
        )));
    }
    let (c, h, w) = match shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Fusion(format!("expected [C,H,W], got {shape:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Fusion(format!(
            "{c} channels not divisible into {heads} heads"
        )));
    }
    let d = c / heads;
    let tokens = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let flat = tape.reshape(x, &[c, h * w])?;
        Ok(tape.transpose(flat)?)
    };
    let lid_tok = tokens(tape, lid)?;
    let cam_tok = tokens(tape, cam)?;
    let proj = |tape: &mut Tape<T>, x: Var, p: &str| -> Result<Var> {
        let wn = xattn_name(&format!("w{p}"));
        let bn = xattn_name(&format!("b{p}"));
        let wv = tape.param(&wn, params.get(&wn)?);
        let bv = tape.param(&bn, params.get(&bn)?);
        Ok(tape.linear_tokens(x, wv, bv)?)
    };
    let q = proj(tape, lid_tok, "q")?;
    let k = proj(tape, cam_tok, "k")?;
    let v = proj(tape, cam_tok, "v")?;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * d, d)?;
        let kh = tape.slice_cols(k, head * d, d)?;
        let vh = tape.slice_cols(v, head * d, d)?;
        let scores = tape.matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh, false)?);
    }
    let merged = tape.concat_cols(&outs)?;
    let attended = proj(tape, merged, "o")?;
    let theta_name = xattn_name("theta");
    let theta = tape.param(&theta_name, params.get(&theta_name)?);
    let gamma = tape.sigmoid(theta);
    let gated = tape.scale_by(attended, gamma)?;
    let back = tape.transpose(gated)?;
    let back = tape.reshape(back, &[c, h, w])?;
    Ok(tape.add(lid, back)?)
}

/// `anchor + alpha · other`; at `alpha == 0` the anchor is returned as is.
pub fn pmd_graph<T: Element>(
    tape: &mut Tape<T>,
    anchor: Var,
    other: Var,
    alpha: f32,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Fusion(format!("decay factor {alpha} outside [0,1]")));
    }
    if tape.shape(anchor) != tape.shape(other) {
        return Err(Error::Fusion(format!(
            "grid shapes differ: {:?} vs {:?}",
            tape.shape(anchor),
            tape.shape(other)
        )));
    }
    if alpha == 0.0 {
        return Ok(anchor);
    }
    let scaled = tape.scale(other, T::from_f32(alpha));
    Ok(tape.add(anchor, scaled)?)
}

/// Concatenate along channels, then a 1×1 convolution back to `C`.
pub fn concat_baseline_graph<T: Element>(
    tape: &mut Tape<T>,
    lid: Var,
    cam: Var,
    params: &ParamStore,
) -> Result<Var> {
    let cat = tape.concat_lead(&[lid, cam])?;
    let wn = format!("{CONCAT_PREFIX}.w");
    let bn = format!("{CONCAT_PREFIX}.b");
    let w = tape.param(&wn, params.get(&wn)?);
    let b = tape.param(&bn, params.get(&bn)?);
    Ok(tape.conv2d(cat, w, b, 0)?)
}

/// The selected operator applied to two present grids.
pub fn fuse_graph<T: Element>(
    tape: &mut Tape<T>,
    config: &FusionConfig,
    lid: Var,
    cam: Var,
    phase: FusionPhase,
    params: &ParamStore,
) -> Result<Var> {
    match *config {
        FusionConfig::Average { w } => average_graph(tape, lid, cam, w),
        FusionConfig::MaxPool => maxpool_graph(tape, lid, cam),
        FusionConfig::CrossAttention { heads, .. } => {
            cross_attention_graph(tape, lid, cam, params, heads)
        }
        FusionConfig::Pmd {
            schedule: AlphaShape::Linear,
        } => match phase {
            FusionPhase::Train {
                step,
                total_steps,
                anchor,
            } => {
                let alpha = alpha_schedule(step, total_steps)?;
                match anchor {
                    Modality::Lidar => pmd_graph(tape, lid, cam, alpha),
                    Modality::Camera => pmd_graph(tape, cam, lid, alpha),
                    Modality::Fused => {
                        Err(Error::Fusion("PMD anchor must be a sensor modality".into()))
                    }
                }
            }
            // the schedule has reached zero by the end of training
            FusionPhase::Inference => pmd_graph(tape, lid, cam, 0.0),
        },
    }
}

fn check_availability<G>(avail: Availability, lid: &Option<G>, cam: &Option<G>) -> Result<()> {
    if avail.lidar() != lid.is_some() || avail.camera() != cam.is_some() {
        return Err(Error::Fusion(format!(
            "availability (lidar={}, camera={}) inconsistent with supplied grids (lidar={}, camera={})",
            avail.lidar(),
            avail.camera(),
            lid.is_some(),
            cam.is_some()
        )));
    }
    Ok(())
}

/// Graph form of [`dispatch`]: a single available grid passes through as
/// the very same tape variable.
pub fn dispatch_graph<T: Element>(
    tape: &mut Tape<T>,
    avail: Availability,
    config: &FusionConfig,
    lid: Option<Var>,
    cam: Option<Var>,
    phase: FusionPhase,
    params: &ParamStore,
) -> Result<Var> {
    check_availability(avail, &lid, &cam)?;
    match (lid, cam) {
        (Some(l), Some(c)) => fuse_graph(tape, config, l, c, phase, params),
        (Some(l), None) => Ok(l),
        (None, Some(c)) => Ok(c),
        (None, None) => unreachable!("availability requires a modality"),
    }
}

fn run_value(
    f_lid: &BevGrid,
    f_cam: &BevGrid,
    op: impl FnOnce(&mut Tape<f32>, Var, Var) -> Result<Var>,
) -> Result<BevGrid> {
    check_pair(f_lid, f_cam)?;
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(f_lid.tensor.clone());
    let c = tape.constant(f_cam.tensor.clone());
    let out = op(&mut tape, l, c)?;
    BevGrid::new(
        tape.value(out).clone(),
        Modality::Fused,
        f_lid.cell_size_m,
        f_lid.frame_id,
    )
}

pub fn fuse_average(f_lid: &BevGrid, f_cam: &BevGrid, w: f32) -> Result<BevGrid> {
    run_value(f_lid, f_cam, |t, l, c| average_graph(t, l, c, w))
}

pub fn fuse_maxpool(f_lid: &BevGrid, f_cam: &BevGrid) -> Result<BevGrid> {
    run_value(f_lid, f_cam, maxpool_graph)
}

pub fn fuse_cross_attention(
    f_lid: &BevGrid,
    f_cam: &BevGrid,
    params: &ParamStore,
    heads: usize,
) -> Result<BevGrid> {
    run_value(f_lid, f_cam, |t, l, c| {
        cross_attention_graph(t, l, c, params, heads)
    })
}

pub fn fuse_pmd(anchor: &BevGrid, other: &BevGrid, alpha: f32) -> Result<BevGrid> {
    check_pair(anchor, other)?;
    if alpha == 0.0 {
        let mut out = anchor.clone();
        out.modality = Modality::Fused;
        return Ok(out);
    }
    run_value(anchor, other, |t, a, o| pmd_graph(t, a, o, alpha))
}

/// Applies the fusion operator when both grids are available and is the
/// identity otherwise.
pub fn dispatch(
    avail: Availability,
    config: &FusionConfig,
    f_lid: Option<&BevGrid>,
    f_cam: Option<&BevGrid>,
    phase: FusionPhase,
    params: &ParamStore,
) -> Result<BevGrid> {
    check_availability(avail, &f_lid, &f_cam)?;
    if let Some(l) = f_lid {
        if l.modality != Modality::Lidar {
            return Err(Error::Fusion(format!(
                "LiDAR slot holds a {:?} grid",
                l.modality
            )));
        }
    }
    if let Some(c) = f_cam {
        if c.modality != Modality::Camera {
            return Err(Error::Fusion(format!(
                "camera slot holds a {:?} grid",
                c.modality
            )));
        }
    }
    match (f_lid, f_cam) {
        (Some(l), Some(c)) => {
            config.validate(l.channels())?;
            run_value(l, c, |t, lv, cv| {
                fuse_graph(t, config, lv, cv, phase, params)
            })
        }
        (Some(l), None) => Ok(l.clone()),
        (None, Some(c)) => Ok(c.clone()),
        (None, None) => unreachable!("availability requires a modality"),
    }
}
