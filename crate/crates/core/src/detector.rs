//! Shared BEV encoder, center-based detection head, training targets,
//! loss and box decoding.
//!
//! One positive cell per ground-truth box: the cell holding its center.
//! Offsets are in cells from the cell's lower corner, sizes are
//! log-meters, yaw is `(sin, cos)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::BevGrid;
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};
use crate::world::{GridConfig, ObjectBox, Scene};

pub const ENCODER_WIDTH: usize = 64;
pub const ENCODER_DEPTH: usize = 3;
/// Weights of the objectness, regression and classification terms.
pub const LOSS_WEIGHTS: (f64, f64, f64) = (1.0, 2.0, 1.0);
/// Objectness bias at initialization, a prior of about 1.8% per cell.
pub const OBJECTNESS_PRIOR_LOGIT: f32 = -4.0;

const HEADS: [(&str, usize); 4] = [("obj", 1), ("off", 2), ("size", 2), ("yaw", 2)];

fn he_conv(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Tensor<f32> {
    let bound = (6.0 / (c_in * k * k) as f64).sqrt() as f32;
    Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound))
}

pub fn init_detector_params(
    store: &mut ParamStore,
    channels: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Config("detector needs at least one class".into()));
    }
    let mut c_in = channels;
    for layer in 0..ENCODER_DEPTH {
        store.insert(
            &format!("enc.conv{layer}.w"),
            he_conv(rng, ENCODER_WIDTH, c_in, 3),
        )?;
        store.insert(
            &format!("enc.conv{layer}.b"),
            Tensor::zeros(&[ENCODER_WIDTH]),
        )?;
        c_in = ENCODER_WIDTH;
    }
    let heads = HEADS.iter().copied().chain([("cls", num_classes)]);
    for (name, out) in heads {
        // small output weights keep early logits near their biases
        let w = Tensor::from_fn(&[out, ENCODER_WIDTH, 1, 1], |_| {
            0.1 * rng.random_range(-1.0f32..1.0) / 8.0
        });
        let b = match name {
            "obj" => Tensor::full(&[1], OBJECTNESS_PRIOR_LOGIT),
            "size" => Tensor::new(vec![2], vec![0.7, 0.1])?,
            _ => Tensor::zeros(&[out]),
        };
        store.insert(&format!("head.{name}.w"), w)?;
        store.insert(&format!("head.{name}.b"), b)?;
    }
    Ok(())
}

fn bind<T: Element>(tape: &mut Tape<T>, params: &ParamStore, name: &str) -> Result<Var> {
    Ok(tape.param(name, params.get(name)?))
}

/// Three same-size 3×3 conv + ReLU blocks.
pub fn encode_graph<T: Element>(
    tape: &mut Tape<T>,
    input: Var,
    params: &ParamStore,
) -> Result<Var> {
    let expected = params.get("enc.conv0.w")?.shape()[1];
    let got = tape.shape(input).first().copied().unwrap_or(0);
    if got != expected {
        return Err(Error::Config(format!(
            "encoder expects {expected} input channels, grid has {got}"
        )));
    }
    let mut x = input;
    for layer in 0..ENCODER_DEPTH {
        let w = bind(tape, params, &format!("enc.conv{layer}.w"))?;
        let b = bind(tape, params, &format!("enc.conv{layer}.b"))?;
        let y = tape.conv2d(x, w, b, 1)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Head outputs as tape variables, `[K, H, W]` each.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub objectness: Var,
    pub offsets: Var,
    pub sizes: Var,
    pub yaw: Var,
    pub class_logits: Var,
}

pub fn head_graph<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    params: &ParamStore,
) -> Result<HeadVars> {
    let mut out = Vec::with_capacity(5);
    for name in ["obj", "off", "size", "yaw", "cls"] {
        let w = bind(tape, params, &format!("head.{name}.w"))?;
        let b = bind(tape, params, &format!("head.{name}.b"))?;
        out.push(tape.conv2d(features, w, b, 0)?);
    }
    Ok(HeadVars {
        objectness: out[0],
        offsets: out[1],
        sizes: out[2],
        yaw: out[3],
        class_logits: out[4],
    })
}

/// Ground truth laid out like the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f32,
    pub positive: Vec<bool>,
    /// `[2, H, W]` channel-major, like the head tensors.
    pub offsets: Vec<f32>,
    pub sizes: Vec<f32>,
    pub yaw: Vec<f32>,
    pub class_id: Vec<usize>,
}

impl TargetMap {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

pub fn build_targets(scene: &Scene, grid: &GridConfig) -> TargetMap {
    let plane = grid.height * grid.width;
    let mut t = TargetMap {
        height: grid.height,
        width: grid.width,
        cell_size_m: grid.cell_size_m,
        positive: vec![false; plane],
        offsets: vec![0.0; 2 * plane],
        sizes: vec![0.0; 2 * plane],
        yaw: vec![0.0; 2 * plane],
        class_id: vec![0; plane],
    };
    let mut owner_area = vec![0.0f64; plane];
    let e = grid.extent_m() as f64;
    let cs = grid.cell_size_m as f64;
    for b in &scene.boxes {
        let (x, y) = (b.center_xy[0] as f64, b.center_xy[1] as f64);
        let Some((row, col)) = grid.cell_of(x, y) else {
            continue;
        };
        let i = row * grid.width + col;
        if t.positive[i] && owner_area[i] >= b.area() {
            continue;
        }
        t.positive[i] = true;
        owner_area[i] = b.area();
        t.offsets[i] = ((x + e) / cs - col as f64) as f32;
        t.offsets[plane + i] = ((y + e) / cs - row as f64) as f32;
        t.sizes[i] = b.size_lw[0].ln();
        t.sizes[plane + i] = b.size_lw[1].ln();
        t.yaw[i] = b.yaw.sin();
        t.yaw[plane + i] = b.yaw.cos();
        t.class_id[i] = b.class_id as usize;
    }
    t
}

/// `(w_obj·BCE + w_reg·L1 + w_cls·CE) / max(#positives, 1)`; BCE covers every
/// cell, the other terms positives only.
pub fn loss_graph<T: Element>(
    tape: &mut Tape<T>,
    head: &HeadVars,
    target: &TargetMap,
) -> Result<Var> {
    let plane = target.height * target.width;
    if tape.shape(head.objectness) != [1, target.height, target.width] {
        return Err(Error::Config(format!(
            "prediction grid {:?} does not match targets {}x{}",
            tape.shape(head.objectness),
            target.height,
            target.width
        )));
    }
    let pos: Vec<T> = target
        .positive
        .iter()
        .map(|&p| if p { T::one() } else { T::zero() })
        .collect();
    let mask2: Vec<T> = pos.iter().chain(pos.iter()).copied().collect();
    let cast = |v: &[f32]| v.iter().map(|&x| T::from_f32(x)).collect::<Vec<T>>();
    debug_assert_eq!(mask2.len(), 2 * plane);

    let bce = tape.bce_with_logits(head.objectness, pos.clone())?;
    let l_off = tape.l1_masked(head.offsets, cast(&target.offsets), mask2.clone())?;
    let l_size = tape.l1_masked(head.sizes, cast(&target.sizes), mask2.clone())?;
    let l_yaw = tape.l1_masked(head.yaw, cast(&target.yaw), mask2)?;
    let ce = tape.softmax_ce(head.class_logits, target.class_id.clone(), pos)?;

    let reg = tape.add(l_off, l_size)?;
    let reg = tape.add(reg, l_yaw)?;
    let (w_obj, w_reg, w_cls) = LOSS_WEIGHTS;
    let a = tape.scale(bce, T::from_f64(w_obj));
    let b = tape.scale(reg, T::from_f64(w_reg));
    let c = tape.scale(ce, T::from_f64(w_cls));
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    let norm = 1.0 / target.num_positive().max(1) as f64;
    Ok(tape.scale(total, T::from_f64(norm)))
}

/// Head outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub objectness: Tensor<f32>,
    pub offsets: Tensor<f32>,
    pub sizes: Tensor<f32>,
    pub yaw: Tensor<f32>,
    pub class_logits: Tensor<f32>,
    pub cell_size_m: f32,
}

impl PredictionMap {
    pub fn height(&self) -> usize {
        self.objectness.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.objectness.shape()[2]
    }

    /// Prediction that reproduces `target` exactly, with objectness logits
    /// of `±logit`.
    pub fn from_targets(target: &TargetMap, num_classes: usize, logit: f32) -> Self {
        let (h, w) = (target.height, target.width);
        let plane = h * w;
        let obj = target
            .positive
            .iter()
            .map(|&p| if p { logit } else { -logit })
            .collect();
        let mut cls = vec![0.0f32; num_classes * plane];
        for (i, &c) in target.class_id.iter().enumerate() {
            if target.positive[i] {
                cls[c * plane + i] = logit;
            }
        }
        let t = |c: usize, d: Vec<f32>| Tensor::new(vec![c, h, w], d).expect("target layout");
        Self {
            objectness: t(1, obj),
            offsets: t(2, target.offsets.clone()),
            sizes: t(2, target.sizes.clone()),
            yaw: t(2, target.yaw.clone()),
            class_logits: t(num_classes, cls),
            cell_size_m: target.cell_size_m,
        }
    }
}

pub fn encode(f_in: &BevGrid, params: &ParamStore) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(f_in.tensor.clone());
    let y = encode_graph(&mut tape, x, params)?;
    Ok(tape.value(y).clone())
}

pub fn head(
    features: &Tensor<f32>,
    params: &ParamStore,
    cell_size_m: f32,
) -> Result<PredictionMap> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(features.clone());
    let h = head_graph(&mut tape, x, params)?;
    Ok(PredictionMap {
        objectness: tape.value(h.objectness).clone(),
        offsets: tape.value(h.offsets).clone(),
        sizes: tape.value(h.sizes).clone(),
        yaw: tape.value(h.yaw).clone(),
        class_logits: tape.value(h.class_logits).clone(),
        cell_size_m,
    })
}

/// Encoder and head in one pass over a single graph.
pub fn predict(f_in: &BevGrid, params: &ParamStore) -> Result<PredictionMap> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(f_in.tensor.clone());
    let feats = encode_graph(&mut tape, x, params)?;
    let h = head_graph(&mut tape, feats, params)?;
    Ok(PredictionMap {
        objectness: tape.value(h.objectness).clone(),
        offsets: tape.value(h.offsets).clone(),
        sizes: tape.value(h.sizes).clone(),
        yaw: tape.value(h.yaw).clone(),
        class_logits: tape.value(h.class_logits).clone(),
        cell_size_m: f_in.cell_size_m,
    })
}

pub fn loss(pred: &PredictionMap, target: &TargetMap) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let head = HeadVars {
        objectness: tape.constant(pred.objectness.clone()),
        offsets: tape.constant(pred.offsets.clone()),
        sizes: tape.constant(pred.sizes.clone()),
        yaw: tape.constant(pred.yaw.clone()),
        class_logits: tape.constant(pred.class_logits.clone()),
    };
    let l = loss_graph(&mut tape, &head, target)?;
    let v = tape.scalar(l);
    if !v.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            msg: format!("non-finite detection loss {v}"),
        });
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: ObjectBox,
    pub score: f32,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Thresholded cells, inverted target encoding, then greedy center-distance
/// suppression in `(score desc, row, col)` order.
pub fn decode(pred: &PredictionMap, score_threshold: f32, nms_radius_m: f32) -> Vec<Detection> {
    let (h, w) = (pred.height(), pred.width());
    let plane = h * w;
    let cs = pred.cell_size_m;
    let e = w as f32 * cs / 2.0;
    let nc = pred.class_logits.shape()[0];
    let mut cand: Vec<(f32, usize)> = pred
        .objectness
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| (sigmoid(l), i))
        .filter(|&(s, _)| s >= score_threshold)
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (off, size, yaw, cls) = (
        pred.offsets.data(),
        pred.sizes.data(),
        pred.yaw.data(),
        pred.class_logits.data(),
    );
    let mut kept: Vec<Detection> = Vec::new();
    for (score, i) in cand {
        let (row, col) = (i / w, i % w);
        let cx = (col as f32 + off[i]) * cs - e;
        let cy = (row as f32 + off[plane + i]) * cs - e;
        let r2 = nms_radius_m * nms_radius_m;
        if kept.iter().any(|d| {
            let (dx, dy) = (d.bbox.center_xy[0] - cx, d.bbox.center_xy[1] - cy);
            dx * dx + dy * dy <= r2
        }) {
            continue;
        }
        let class_id = (0..nc)
            .max_by(|&a, &b| {
                cls[a * plane + i]
                    .total_cmp(&cls[b * plane + i])
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        kept.push(Detection {
            bbox: ObjectBox {
                center_xy: [cx, cy],
                size_lw: [size[i].exp(), size[plane + i].exp()],
                yaw: yaw[i].atan2(yaw[plane + i]),
                class_id: class_id as u32,
                velocity_xy: [0.0, 0.0],
            },
            score,
        });
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Modality;
    use crate::tensor::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridConfig {
        GridConfig {
            height: 8,
            width: 8,
            cell_size_m: 0.5,
            channels: 8,
        }
    }

    fn params(channels: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_detector_params(&mut s, channels, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn zero_params(channels: usize) -> ParamStore {
        let mut s = params(channels, 0);
        let names: Vec<String> = s.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let len = s.get(&n).unwrap().numel();
            s.set_data(&n, &vec![0.0; len]).unwrap();
        }
        s
    }

    fn one_box_scene(x: f32, y: f32) -> Scene {
        Scene {
            boxes: vec![ObjectBox {
                center_xy: [x, y],
                size_lw: [1.8, 0.7],
                yaw: 0.4,
                class_id: 1,
                velocity_xy: [0.0; 2],
            }],
            seed: 0,
            extent_m: 2.0,
        }
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let mut p = params(8, 1);
        for l in 0..ENCODER_DEPTH {
            p.set_data(&format!("enc.conv{l}.b"), &[0.0; ENCODER_WIDTH])
                .unwrap();
        }
        let grid = BevGrid::new(Tensor::zeros(&[8, 8, 8]), Modality::Lidar, 0.5, 0).unwrap();
        let y = encode(&grid, &p).unwrap();
        assert_eq!(y.shape(), &[ENCODER_WIDTH, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let grid = BevGrid::new(Tensor::zeros(&[12, 8, 8]), Modality::Lidar, 0.5, 0).unwrap();
        assert!(encode(&grid, &params(8, 1)).is_err());
    }

    #[test]
    fn zero_weights_give_half_scores() {
        let p = zero_params(8);
        let pred = head(&Tensor::zeros(&[ENCODER_WIDTH, 8, 8]), &p, 0.5).unwrap();
        assert_eq!(pred.class_logits.shape(), &[3, 8, 8]);
        assert_eq!(pred.offsets.shape(), &[2, 8, 8]);
        assert!(pred.objectness.data().iter().all(|&l| sigmoid(l) == 0.5));
    }

    #[test]
    fn center_of_cell_gives_half_offsets() {
        let g = small_grid();
        // cell (row 5, col 2) has its center at (-0.75, 0.75)
        let t = build_targets(&one_box_scene(-0.75, 0.75), &g);
        let i = 5 * 8 + 2;
        assert_eq!(t.num_positive(), 1);
        assert!(t.positive[i]);
        assert_eq!((t.offsets[i], t.offsets[64 + i]), (0.5, 0.5));
        let norm = t.yaw[i].powi(2) + t.yaw[64 + i].powi(2);
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(
            build_targets(
                &Scene {
                    boxes: vec![],
                    seed: 0,
                    extent_m: 2.0
                },
                &g
            )
            .num_positive(),
            0
        );
    }

    #[test]
    fn collision_keeps_larger_box() {
        let mut s = one_box_scene(0.1, 0.1);
        let mut big = s.boxes[0];
        big.size_lw = [4.0, 1.8];
        big.class_id = 0;
        big.center_xy = [0.2, 0.2];
        s.boxes.push(big);
        let t = build_targets(&s, &small_grid());
        assert_eq!(t.num_positive(), 1);
        let i = t.positive.iter().position(|&p| p).unwrap();
        assert_eq!(t.class_id[i], 0);
    }

    #[test]
    fn perfect_prediction_has_floor_loss_and_decodes_back() {
        let g = small_grid();
        let scene = one_box_scene(0.6, -1.1);
        let t = build_targets(&scene, &g);
        let pred = PredictionMap::from_targets(&t, 3, 20.0);
        let l = loss(&pred, &t).unwrap();
        assert!(l < 1e-6 + 2.1e-9 * 64.0, "{l}");
        let dets = decode(&pred, 0.5, 1.0);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert_eq!(b.class_id, 1);
        assert!((b.center_xy[0] - 0.6).abs() < 1e-5 && (b.center_xy[1] + 1.1).abs() < 1e-5);
        assert!((b.yaw - 0.4).abs() < 1e-5 && (b.size_lw[0] - 1.8).abs() < 1e-5);
    }

    #[test]
    fn empty_scene_regression_terms_vanish() {
        let g = small_grid();
        let t = build_targets(
            &Scene {
                boxes: vec![],
                seed: 0,
                extent_m: 2.0,
            },
            &g,
        );
        let mut pred = PredictionMap::from_targets(&t, 3, 20.0);
        // arbitrary regression outputs must not matter without positives
        pred.offsets.data_mut().iter_mut().for_each(|v| *v = 7.0);
        pred.class_logits
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -3.0);
        let l = loss(&pred, &t).unwrap() as f64;
        let bce_floor = 64.0 * (1.0 + (-20.0f64).exp()).ln();
        assert!((l - bce_floor).abs() < 1e-9, "{l} vs {bce_floor}");
    }

    #[test]
    fn decode_threshold_and_suppression() {
        let g = small_grid();
        let t = build_targets(&one_box_scene(0.25, 0.25), &g);
        let mut pred = PredictionMap::from_targets(&t, 3, 20.0);
        assert!(!decode(&pred, 0.99, 0.5).is_empty());
        pred.objectness
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -5.0);
        assert!(decode(&pred, 0.5, 0.5).is_empty());
        // two neighbours 0.1 m apart
        let i = 4 * 8 + 4;
        pred.objectness.data_mut()[i] = 3.0;
        pred.objectness.data_mut()[i + 1] = 2.0;
        pred.offsets.data_mut()[i] = 0.9;
        pred.offsets.data_mut()[i + 1] = 0.1;
        pred.offsets.data_mut()[64 + i] = 0.5;
        pred.offsets.data_mut()[64 + i + 1] = 0.5;
        let dets = decode(&pred, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - sigmoid(3.0)).abs() < 1e-7);
    }

    #[test]
    fn head_and_loss_pass_gradient_check() {
        let g = small_grid();
        let t = build_targets(&one_box_scene(0.3, -0.6), &g);
        let p = params(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Tensor::<f64>::from_fn(&[ENCODER_WIDTH, 8, 8], |_| rng.random_range(0.0..1.0))
            .with_requires_grad(true);
        let names: Vec<String> = ["head.obj.w", "head.off.b", "head.cls.w"]
            .map(String::from)
            .to_vec();
        let mut inputs = vec![feats];
        inputs.extend(crate::tensor::gradcheck::param_inputs(&p, &names).unwrap());
        let r = grad_check(&inputs, 1e-3, |tape, v| {
            for (n, &var) in names.iter().zip(&v[1..]) {
                tape.bind_param(n, var);
            }
            let h = head_graph(tape, v[0], &p)?;
            loss_graph(tape, &h, &t)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        assert!(r.checked > 4000);
    }
}
