//! The named finite-difference checks run by `sbfuse grad-check`: every
//! differentiable tape op, then fusion → encoder → head → loss for each
//! fusion operator on 8×8 grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{
    build_targets, encode_graph, head_graph, init_detector_params, loss_graph, TargetMap,
};
use crate::error::Result;
use crate::fusion::{
    concat_baseline_graph, dispatch_graph, init_concat_params, init_fusion_params, AlphaShape,
    Availability, FusionConfig, FusionPhase, Modality,
};
use crate::tensor::gradcheck::{grad_check_with, param_inputs, GradCheckOptions, GradCheckReport};
use crate::tensor::{GradFault, ParamStore, Tape, Tensor, TensorError, Var};
use crate::world::{GridConfig, ObjectBox, Scene};

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const GRAD_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE && self.report.checked > 0
    }
}

/// 8×8 cells of 0.5 m with 8 channels.
pub fn suite_grid() -> GridConfig {
    GridConfig {
        height: 8,
        width: 8,
        cell_size_m: 0.5,
        channels: 8,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).with_requires_grad(true)
}

type OpCheck = fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, TensorError>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpCheck)> {
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    vec![
        ("op.add_sub_mul", vec![r(&[4, 5]), r(&[4, 5])], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(a, s)?;
            Ok(t.sum(m))
        }),
        ("op.max_pair", vec![r(&[4, 5]), r(&[4, 5])], |t, v| {
            let m = t.max_pair(v[0], v[1])?;
            let q = t.mul(m, m)?;
            Ok(t.sum(q))
        }),
        ("op.scale_scale_by", vec![r(&[3, 4]), r(&[1])], |t, v| {
            let a = t.scale(v[0], 1.7);
            let b = t.scale_by(a, v[1])?;
            let q = t.mul(b, b)?;
            Ok(t.mean(q))
        }),
        ("op.relu_sigmoid", vec![r(&[20])], |t, v| {
            let a = t.relu(v[0]);
            let s = t.sigmoid(v[0]);
            let m = t.mul(a, s)?;
            Ok(t.sum(m))
        }),
        (
            "op.conv2d",
            vec![r(&[3, 8, 8]), r(&[4, 3, 3, 3]), r(&[4])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                let q = t.mul(y, y)?;
                Ok(t.mean(q))
            },
        ),
        (
            "op.linear_tokens",
            vec![r(&[6, 4]), r(&[4, 3]), r(&[3])],
            |t, v| {
                let y = t.linear_tokens(v[0], v[1], v[2])?;
                let q = t.mul(y, y)?;
                Ok(t.sum(q))
            },
        ),
        (
            "op.matmul",
            vec![r(&[5, 4]), r(&[4, 3]), r(&[6, 3])],
            |t, v| {
                let ab = t.matmul(v[0], v[1], false)?;
                let abc = t.matmul(ab, v[2], true)?;
                let q = t.mul(abc, abc)?;
                Ok(t.sum(q))
            },
        ),
        ("op.softmax_rows", vec![r(&[4, 6]), r(&[4, 6])], |t, v| {
            let s = t.softmax_rows(v[0])?;
            let m = t.mul(s, v[1])?;
            Ok(t.sum(m))
        }),
        (
            "op.reshape_transpose",
            vec![r(&[2, 3, 4]), r(&[4, 6])],
            |t, v| {
                let a = t.reshape(v[0], &[6, 4])?;
                let a = t.transpose(a)?;
                let m = t.mul(a, v[1])?;
                let m = t.mul(m, m)?;
                Ok(t.sum(m))
            },
        ),
        (
            "op.slice_concat",
            vec![r(&[4, 6]), r(&[2, 3, 3])],
            |t, v| {
                let a = t.slice_cols(v[0], 1, 3)?;
                let b = t.slice_cols(v[0], 4, 2)?;
                let c = t.concat_cols(&[b, a])?;
                let d = t.slice_lead(v[1], 1, 1)?;
                let e = t.concat_lead(&[d, v[1]])?;
                let c2 = t.mul(c, c)?;
                let e2 = t.mul(e, e)?;
                let s1 = t.sum(c2);
                let s2 = t.mean(e2);
                t.add(s1, s2)
            },
        ),
        ("op.bce_with_logits", vec![r(&[12])], |t, v| {
            let y: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
            t.bce_with_logits(v[0], y)
        }),
        ("op.l1_masked", vec![r(&[2, 3, 3])], |t, v| {
            let tgt: Vec<f64> = (0..18).map(|i| 2.0 - 0.1 * i as f64).collect();
            let mask: Vec<f64> = (0..18).map(|i| (i % 3 != 0) as u8 as f64).collect();
            t.l1_masked(v[0], tgt, mask)
        }),
        ("op.softmax_ce", vec![r(&[3, 2, 3])], |t, v| {
            t.softmax_ce(
                v[0],
                vec![0, 1, 2, 2, 1, 0],
                vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
            )
        }),
    ]
}

fn suite_scene(grid: &GridConfig) -> Scene {
    let b = |x: f32, y: f32, class_id: u32, yaw: f32| ObjectBox {
        center_xy: [x, y],
        size_lw: [1.2, 0.6],
        yaw,
        class_id,
        velocity_xy: [0.0; 2],
    };
    Scene {
        boxes: vec![b(-1.1, 0.8, 0, 0.3), b(1.3, -0.9, 2, -1.0)],
        seed: 0,
        extent_m: grid.extent_m(),
    }
}

/// Fusion variants checked end to end, with the availability and phase
/// each one is exercised under.
fn pipeline_cases() -> Vec<(
    &'static str,
    Option<FusionConfig>,
    Availability,
    FusionPhase,
)> {
    let both = Availability::new(true, true).expect("valid");
    let lidar = Availability::new(true, false).expect("valid");
    let camera = Availability::new(false, true).expect("valid");
    let train_mid = |anchor| FusionPhase::Train {
        step: 3,
        total_steps: 10,
        anchor,
    };
    vec![
        (
            "e2e.avg",
            Some(FusionConfig::Average { w: 0.5 }),
            both,
            FusionPhase::Inference,
        ),
        (
            "e2e.maxpool",
            Some(FusionConfig::MaxPool),
            both,
            FusionPhase::Inference,
        ),
        (
            "e2e.xattn",
            Some(FusionConfig::CrossAttention {
                heads: 2,
                theta: 0.3,
            }),
            both,
            FusionPhase::Inference,
        ),
        (
            "e2e.pmd_lidar_anchor",
            Some(FusionConfig::Pmd {
                schedule: AlphaShape::Linear,
            }),
            both,
            train_mid(Modality::Lidar),
        ),
        (
            "e2e.pmd_camera_anchor",
            Some(FusionConfig::Pmd {
                schedule: AlphaShape::Linear,
            }),
            both,
            train_mid(Modality::Camera),
        ),
        (
            "e2e.lidar_only",
            Some(FusionConfig::Average { w: 0.5 }),
            lidar,
            FusionPhase::Inference,
        ),
        (
            "e2e.camera_only",
            Some(FusionConfig::MaxPool),
            camera,
            FusionPhase::Inference,
        ),
        ("e2e.concat_baseline", None, both, FusionPhase::Inference),
    ]
}

fn pipeline_check(
    opts: GradCheckOptions,
    grid: &GridConfig,
    target: &TargetMap,
    fusion: Option<&FusionConfig>,
    avail: Availability,
    phase: FusionPhase,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    init_detector_params(&mut params, grid.channels, 3, &mut rng)?;
    match fusion {
        Some(f) => init_fusion_params(&mut params, f, grid.channels, &mut rng)?,
        None => init_concat_params(&mut params, grid.channels, &mut rng)?,
    }
    // biases away from zero so the check also sees their gradients
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        if n.ends_with(".b")
            || n.ends_with(".bq")
            || n.ends_with(".bv")
            || n.ends_with(".bk")
            || n.ends_with(".bo")
        {
            let len = params.get(n)?.numel();
            let data: Vec<f32> = (0..len).map(|_| rng.random_range(-0.1..0.1)).collect();
            params.set_data(n, &data)?;
        }
    }
    let shape = [grid.channels, grid.height, grid.width];
    let mut inputs = vec![
        random(&mut rng, &shape, 0.0, 1.0),
        random(&mut rng, &shape, 0.0, 1.0),
    ];
    inputs.extend(param_inputs(&params, &names)?);
    grad_check_with(opts, &inputs, |tape, v| {
        for (n, &var) in names.iter().zip(&v[2..]) {
            tape.bind_param(n, var);
        }
        let fused = match fusion {
            Some(f) => dispatch_graph(
                tape,
                avail,
                f,
                avail.lidar().then_some(v[0]),
                avail.camera().then_some(v[1]),
                phase,
                &params,
            )?,
            None => concat_baseline_graph(tape, v[0], v[1], &params)?,
        };
        let feats = encode_graph(tape, fused, &params)?;
        let head = head_graph(tape, feats, &params)?;
        loss_graph(tape, &head, target)
    })
}

/// Runs every check; `fault` corrupts the analytic backward pass.
pub fn run_grad_suite(
    seed: u64,
    fault: Option<GradFault>,
    mut on_entry: impl FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let opts = GradCheckOptions {
        epsilon: GRAD_EPSILON,
        seed,
        fault,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        let e = SuiteEntry {
            name: name.to_string(),
            report,
        };
        on_entry(&e);
        out.push(e);
    };
    for (name, inputs, f) in op_cases(&mut rng) {
        let report = grad_check_with::<_, TensorError>(opts, &inputs, f)?;
        push(name, report);
    }
    let grid = suite_grid();
    let target = build_targets(&suite_scene(&grid), &grid);
    for (i, (name, fusion, avail, phase)) in pipeline_cases().into_iter().enumerate() {
        let report = pipeline_check(
            opts,
            &grid,
            &target,
            fusion.as_ref(),
            avail,
            phase,
            seed.wrapping_add(i as u64),
        )?;
        push(name, report);
    }
    Ok(out)
}

/// The entry with the largest error, if any failed.
pub fn worst_failure(entries: &[SuiteEntry]) -> Option<&SuiteEntry> {
    entries
        .iter()
        .filter(|e| !e.passed())
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_ops_and_every_operator() {
        let entries = run_grad_suite(1, None, |_| {}).unwrap();
        for e in &entries {
            assert!(e.passed(), "{} {:?}", e.name, e.report);
        }
        for op in [
            "avg",
            "maxpool",
            "xattn",
            "pmd_lidar_anchor",
            "concat_baseline",
        ] {
            assert!(entries.iter().any(|e| e.name == format!("e2e.{op}")));
        }
        assert!(worst_failure(&entries).is_none());
    }

    #[test]
    fn corrupted_relu_backward_fails_the_suite() {
        let entries = run_grad_suite(1, Some(GradFault::ScaleReluGrad(1.5)), |_| {}).unwrap();
        let worst = worst_failure(&entries).expect("fault must be detected");
        assert!(worst.report.max_rel_error > 0.1);
        assert!(entries
            .iter()
            .find(|e| e.name == "op.add_sub_mul")
            .unwrap()
            .passed());
    }
}
