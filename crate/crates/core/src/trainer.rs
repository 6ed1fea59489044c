//! Regime-mixing training: epoch expansion, the per-batch step, optimizers
//! and the checkpointed training run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{format_hash, ExperimentConfig};
use crate::corrupt::{corrupt_sample, CorruptionSpec, Family};
use crate::detector::{
    build_targets, encode_graph, head_graph, init_detector_params, loss_graph, HeadVars,
};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_baseline_graph, dispatch_graph, init_concat_params, init_fusion_params, Availability,
    FusionConfig, FusionPhase, Modality,
};
use crate::io::write_atomic;
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};
use crate::world::{dataset_read, sample_seed, BevProjector, Sample};

/// What the model sees for one training or evaluation item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "lc")]
    LC,
    #[serde(rename = "l")]
    L,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "anchor_lidar")]
    AnchorLidar,
    #[serde(rename = "anchor_camera")]
    AnchorCamera,
}

impl Regime {
    pub fn availability(self) -> Availability {
        match self {
            Regime::L => Availability::LIDAR_ONLY,
            Regime::C => Availability::CAMERA_ONLY,
            Regime::LC | Regime::AnchorLidar | Regime::AnchorCamera => Availability::BOTH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::LC => "lc",
            Regime::L => "l",
            Regime::C => "c",
            Regime::AnchorLidar => "anchor_lidar",
            Regime::AnchorCamera => "anchor_camera",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lc" => Ok(Regime::LC),
            "l" => Ok(Regime::L),
            "c" => Ok(Regime::C),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (expected lc, l or c)"
            ))),
        }
    }

    fn anchor(self) -> Modality {
        match self {
            Regime::AnchorCamera => Modality::Camera,
            _ => Modality::Lidar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    ThreeRegime,
    Pmd,
    /// Both modalities only; the concatenation baseline.
    LcOnly,
}

impl ScheduleMode {
    pub fn regimes(self) -> &'static [Regime] {
        match self {
            ScheduleMode::ThreeRegime => &[Regime::LC, Regime::L, Regime::C],
            ScheduleMode::Pmd => &[Regime::AnchorLidar, Regime::AnchorCamera],
            ScheduleMode::LcOnly => &[Regime::LC],
        }
    }
}

/// Every sample once per regime of `mode`, globally shuffled.
pub fn expand_epoch(
    dataset_size: usize,
    mode: ScheduleMode,
    shuffle_seed: u64,
) -> Vec<(usize, Regime)> {
    let mut entries: Vec<(usize, Regime)> = (0..dataset_size)
        .flat_map(|i| mode.regimes().iter().map(move |&r| (i, r)))
        .collect();
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    entries
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One shared encoder and head behind availability dispatch.
    #[default]
    SingleBranch,
    /// Concatenation + 1×1 conv fusion trained on both modalities only.
    Baseline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Defaults to 3, or 4 for progressive modality decay.
    pub epochs: Option<u32>,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// Train on randomly corrupted copies of the samples.
    pub corruption_augment: bool,
    pub mode: RunMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            shuffle_seed: 0,
            init_seed: 0,
            corruption_augment: false,
            mode: RunMode::SingleBranch,
        }
    }
}

pub const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
pub const ADAM_EPS: f32 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} invalid",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn effective_epochs(&self, fusion: &FusionConfig) -> u32 {
        self.epochs.unwrap_or(match (self.mode, fusion) {
            (RunMode::SingleBranch, FusionConfig::Pmd { .. }) => 4,
            _ => 3,
        })
    }

    pub fn schedule(&self, fusion: &FusionConfig) -> ScheduleMode {
        match (self.mode, fusion) {
            (RunMode::Baseline, _) => ScheduleMode::LcOnly,
            (RunMode::SingleBranch, FusionConfig::Pmd { .. }) => ScheduleMode::Pmd,
            _ => ScheduleMode::ThreeRegime,
        }
    }

    /// The upstream sensor models carry no parameters, so they are frozen
    /// by construction.
    pub fn freeze_renderers(&self) -> bool {
        true
    }
}

/// Fresh parameters for a run.
pub fn init_params(cfg: &ExperimentConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.init_seed);
    let mut store = ParamStore::new();
    init_detector_params(
        &mut store,
        cfg.grid.channels,
        cfg.world.num_classes,
        &mut rng,
    )?;
    match cfg.train.mode {
        RunMode::SingleBranch => {
            init_fusion_params(&mut store, &cfg.fusion, cfg.grid.channels, &mut rng)?
        }
        RunMode::Baseline => init_concat_params(&mut store, cfg.grid.channels, &mut rng)?,
    }
    Ok(store)
}

/// Projects the streams a regime makes available and runs fusion, encoder
/// and head. Unavailable streams are never projected.
#[allow(clippy::too_many_arguments)]
pub fn forward_item<T: Element>(
    tape: &mut Tape<T>,
    sample: &Sample,
    regime: Regime,
    projector: &BevProjector,
    fusion: &FusionConfig,
    mode: RunMode,
    phase: FusionPhase,
    params: &ParamStore,
    frame_id: u64,
) -> Result<HeadVars> {
    let avail = regime.availability();
    let lid = avail
        .lidar()
        .then(|| projector.lidar(&sample.sweep, frame_id))
        .transpose()?;
    let cam = avail
        .camera()
        .then(|| projector.camera(&sample.stream, frame_id))
        .transpose()?;
    let mut leaf =
        |g: Option<crate::fusion::BevGrid>| g.map(|g| tape.constant(g.tensor.cast::<T>()));
    let (lv, cv) = (leaf(lid), leaf(cam));
    let fused: Var = match mode {
        RunMode::SingleBranch => {
            let phase = match (regime, phase) {
                (
                    Regime::AnchorLidar | Regime::AnchorCamera,
                    FusionPhase::Train {
                        step, total_steps, ..
                    },
                ) => FusionPhase::Train {
                    step,
                    total_steps,
                    anchor: regime.anchor(),
                },
                (_, p) => p,
            };
            dispatch_graph(tape, avail, fusion, lv, cv, phase, params)?
        }
        RunMode::Baseline => {
            let shape = [
                projector.grid.channels,
                projector.grid.height,
                projector.grid.width,
            ];
            let mut fill =
                |v: Option<Var>| v.unwrap_or_else(|| tape.constant(Tensor::zeros(&shape)));
            let (l, c) = (fill(lv), fill(cv));
            concat_baseline_graph(tape, l, c, params)?
        }
    };
    let feats = encode_graph(tape, fused, params)?;
    head_graph(tape, feats, params)
}

/// Optimizer moments, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

/// One update from the gradient buffers held in `params`.
pub fn optimizer_update(
    params: &mut ParamStore,
    state: &mut OptState,
    kind: OptimizerKind,
    lr: f32,
) {
    state.t += 1;
    let (b1, b2) = ADAM_BETAS;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad().map(<[f32]>::to_vec) else {
            continue;
        };
        match kind {
            OptimizerKind::Sgd => {
                for (x, gi) in p.data_mut().iter_mut().zip(&g) {
                    *x -= lr * gi;
                }
            }
            OptimizerKind::Adam => {
                let m = state
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let v = state
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (((x, gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Fixed state shared by every step of a run.
pub struct StepContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub projector: &'a BevProjector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub item_losses: Vec<(Regime, f32)>,
    pub alpha: Option<f32>,
}

/// α for update `step` of `total_updates`: 1 on the first update, 0 on the
/// last.
pub fn pmd_alpha_horizon(total_updates: u64) -> u64 {
    total_updates.saturating_sub(1).max(1)
}

fn augment(sample: &Sample, index: usize, step: u64, ctx: &StepContext) -> Result<Sample> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(sample_seed(ctx.cfg.train.shuffle_seed ^ step, index as u64));
    let family = Family::CORRUPTIONS[rng.random_range(0..Family::CORRUPTIONS.len())];
    let spec = CorruptionSpec::new(family, rng.random_range(1..=3), rng.random())?;
    corrupt_sample(sample, &spec, &ctx.cfg.sensor)
}

/// Batch-mean loss over `batch`, backward, one optimizer update.
pub fn train_step(
    batch: &[(usize, &Sample, Regime)],
    params: &mut ParamStore,
    opt: &mut OptState,
    step: u64,
    total_updates: u64,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let cfg = ctx.cfg;
    let horizon = pmd_alpha_horizon(total_updates);
    let phase = FusionPhase::Train {
        step: step.min(horizon),
        total_steps: horizon,
        anchor: Modality::Lidar,
    };
    params.zero_grads();
    let scale = 1.0 / batch.len() as f32;
    let mut item_losses = Vec::with_capacity(batch.len());
    for &(index, sample, regime) in batch {
        let owned;
        let sample = if cfg.train.corruption_augment {
            owned = augment(sample, index, step, ctx)?;
            &owned
        } else {
            sample
        };
        let mut tape = Tape::<f32>::new();
        let head = forward_item(
            &mut tape,
            sample,
            regime,
            ctx.projector,
            &cfg.fusion,
            cfg.train.mode,
            phase,
            params,
            index as u64,
        )?;
        let target = build_targets(&sample.scene, &cfg.grid);
        let l = loss_graph(&mut tape, &head, &target)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {value} on sample {index} in regime {}", regime.name()),
            });
        }
        tape.backward(l)?;
        params.accumulate_from(&tape, scale)?;
        item_losses.push((regime, value));
    }
    optimizer_update(params, opt, cfg.train.optimizer, cfg.train.learning_rate);
    params.step_count += 1;
    let alpha = matches!(cfg.fusion, FusionConfig::Pmd { .. })
        .then(|| crate::fusion::alpha_schedule(step.min(horizon), horizon))
        .transpose()?
        .filter(|_| cfg.train.mode == RunMode::SingleBranch);
    Ok(StepOutcome {
        loss: item_losses.iter().map(|&(_, l)| l).sum::<f32>() * scale,
        item_losses,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub loss: f32,
    pub alpha: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub run_id: String,
    pub mode: RunMode,
    pub fusion: FusionConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub num_samples: usize,
    pub total_steps: u64,
    pub steps: Vec<StepRecord>,
    /// Sum and count of item losses per regime.
    pub regime_losses: BTreeMap<Regime, (f64, u64)>,
    /// Left out of [`TrainingReport::to_text`] so report files are
    /// reproducible byte for byte.
    pub wall_time_s: f64,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fusion = match self.fusion {
            FusionConfig::Average { w } => format!("avg w={w}"),
            FusionConfig::MaxPool => "maxpool".into(),
            FusionConfig::CrossAttention { heads, theta } => {
                format!("xattn heads={heads} theta={theta}")
            }
            FusionConfig::Pmd { .. } => "pmd schedule=linear".into(),
        };
        let mode = match self.mode {
            RunMode::SingleBranch => "single_branch",
            RunMode::Baseline => "baseline",
        };
        let _ = writeln!(s, "# training report run_id={}", self.run_id);
        let _ = writeln!(s, "mode={mode}");
        let _ = writeln!(s, "fusion={fusion}");
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "optimizer={:?}", self.optimizer);
        let _ = writeln!(s, "samples={}", self.num_samples);
        let _ = writeln!(s, "total_steps={}", self.total_steps);
        let _ = writeln!(s, "# regime mean_loss items");
        for (r, (sum, n)) in &self.regime_losses {
            let _ = writeln!(s, "regime {} {:.6} {n}", r.name(), sum / (*n).max(1) as f64);
        }
        let _ = writeln!(s, "# step epoch loss alpha");
        for rec in &self.steps {
            let alpha = rec.alpha.map_or("-".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "step {} {} {:.6} {alpha}", rec.step, rec.epoch, rec.loss);
        }
        s
    }
}

fn epoch_seed(shuffle_seed: u64, epoch: u32) -> u64 {
    sample_seed(shuffle_seed, 0x5eed_0000 + epoch as u64)
}

/// Trains from fresh parameters on in-memory samples.
pub fn train_on(
    samples: &[Sample],
    cfg: &ExperimentConfig,
) -> Result<(ParamStore, TrainingReport)> {
    train_on_with(samples, cfg, &BevProjector::new(cfg.grid.clone()), |_| {})
}

/// [`train_on`] with an explicit projector and a per-step callback.
pub fn train_on_with(
    samples: &[Sample],
    cfg: &ExperimentConfig,
    projector: &BevProjector,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ParamStore, TrainingReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let start = Instant::now();
    let epochs = cfg.train.effective_epochs(&cfg.fusion);
    let mode = cfg.train.schedule(&cfg.fusion);
    let per_epoch = samples.len() * mode.regimes().len();
    let batches_per_epoch = per_epoch.div_ceil(cfg.train.batch_size) as u64;
    let total_steps = batches_per_epoch * epochs as u64;
    let mut params = init_params(cfg)?;
    let mut opt = OptState::default();
    let ctx = StepContext { cfg, projector };
    let mut report = TrainingReport {
        run_id: cfg.run_id.clone(),
        mode: cfg.train.mode,
        fusion: cfg.fusion.clone(),
        epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        optimizer: cfg.train.optimizer,
        num_samples: samples.len(),
        total_steps,
        steps: Vec::with_capacity(total_steps as usize),
        regime_losses: BTreeMap::new(),
        wall_time_s: 0.0,
    };
    let mut step = 0u64;
    for epoch in 0..epochs {
        let order = expand_epoch(
            samples.len(),
            mode,
            epoch_seed(cfg.train.shuffle_seed, epoch),
        );
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<(usize, &Sample, Regime)> =
                chunk.iter().map(|&(i, r)| (i, &samples[i], r)).collect();
            let out = train_step(&batch, &mut params, &mut opt, step, total_steps, &ctx)?;
            for (r, l) in &out.item_losses {
                let e = report.regime_losses.entry(*r).or_insert((0.0, 0));
                e.0 += *l as f64;
                e.1 += 1;
            }
            let rec = StepRecord {
                step,
                epoch,
                loss: out.loss,
                alpha: out.alpha,
            };
            on_step(&rec);
            report.steps.push(rec);
            step += 1;
        }
    }
    params.zero_grads();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub run_id: String,
    pub model_hash: String,
    pub data_hash: String,
    pub config_hash: String,
    pub step_count: u64,
    pub mode: RunMode,
    pub fusion: FusionConfig,
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

pub fn report_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".train.txt");
    PathBuf::from(p)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, cfg: &ExperimentConfig) -> Result<()> {
    params.save(path)?;
    let manifest = CheckpointManifest {
        run_id: cfg.run_id.clone(),
        model_hash: format_hash(cfg.model_hash()),
        data_hash: format_hash(cfg.data_hash()),
        config_hash: format_hash(cfg.full_hash()),
        step_count: params.step_count,
        mode: cfg.train.mode,
        fusion: cfg.fusion.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), |f| {
        use std::io::Write;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")
    })
}

/// Loads a checkpoint and refuses it unless it was trained under the same
/// grid, class count, fusion and run mode as `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<ParamStore> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "checkpoint manifest",
        offset: 0,
        msg: e.to_string(),
    })?;
    let expected = format_hash(cfg.model_hash());
    if manifest.model_hash != expected {
        return Err(Error::HashMismatch {
            what: "checkpoint model",
            expected,
            found: manifest.model_hash,
        });
    }
    let mut params = ParamStore::load(path)?;
    params.step_count = manifest.step_count;
    Ok(params)
}

/// Reads the dataset, checks its hash against `cfg`, trains, and writes the
/// checkpoint, its manifest and the text report.
pub fn run_training(
    dataset_path: &Path,
    cfg: &ExperimentConfig,
    out_checkpoint: &Path,
) -> Result<TrainingReport> {
    run_training_with(dataset_path, cfg, out_checkpoint, |_| {})
}

/// [`run_training`] with a per-step callback.
pub fn run_training_with(
    dataset_path: &Path,
    cfg: &ExperimentConfig,
    out_checkpoint: &Path,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainingReport> {
    cfg.validate()?;
    let dataset = dataset_read(dataset_path)?;
    let expected = cfg.data_hash();
    if dataset.config_hash != expected {
        return Err(Error::HashMismatch {
            what: "dataset",
            expected: format_hash(expected),
            found: format_hash(dataset.config_hash),
        });
    }
    let projector = BevProjector::new(cfg.grid.clone());
    let (params, report) = train_on_with(&dataset.samples, cfg, &projector, on_step)?;
    save_checkpoint(out_checkpoint, &params, cfg)?;
    let text = report.to_text();
    write_atomic(&report_path(out_checkpoint), |f| {
        use std::io::Write;
        f.write_all(text.as_bytes())
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn expansion_cardinality() {
        let e = expand_epoch(1, ScheduleMode::ThreeRegime, 3);
        let set: BTreeSet<Regime> = e.iter().map(|&(_, r)| r).collect();
        assert_eq!(set, [Regime::LC, Regime::L, Regime::C].into());
        let p = expand_epoch(1, ScheduleMode::Pmd, 3);
        assert_eq!(p.len(), 2);
        assert_ne!(p[0].1, p[1].1);
        for n in [1, 7, 30] {
            let mut a = expand_epoch(n, ScheduleMode::ThreeRegime, 1);
            let mut b = expand_epoch(n, ScheduleMode::ThreeRegime, 99);
            assert_eq!(a.len(), 3 * n);
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sgd_unit_step() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros(&[1])).unwrap();
        p.iter_mut()
            .for_each(|(_, t)| t.accumulate_grad(&[1.0], 1.0).unwrap());
        optimizer_update(&mut p, &mut OptState::default(), OptimizerKind::Sgd, 1.0);
        assert_eq!(p.get("x").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for c in [1e-4f32, 0.3, 250.0, -7.0] {
            let mut p = ParamStore::new();
            p.insert("x", Tensor::zeros(&[1])).unwrap();
            p.iter_mut()
                .for_each(|(_, t)| t.accumulate_grad(&[c], 1.0).unwrap());
            optimizer_update(&mut p, &mut OptState::default(), OptimizerKind::Adam, 0.01);
            let x = p.get("x").unwrap().data()[0];
            assert!(
                (x.abs() - 0.01).abs() < 1e-5 && x.signum() == -c.signum(),
                "{c}: {x}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = ParamStore::new();
            p.insert("x", Tensor::full(&[3], 0.5)).unwrap();
            p.iter_mut()
                .for_each(|(_, t)| t.accumulate_grad(&[0.0; 3], 1.0).unwrap());
            optimizer_update(&mut p, &mut OptState::default(), kind, 0.1);
            assert_eq!(p.get("x").unwrap().data(), &[0.5; 3]);
        }
    }

    #[test]
    fn default_epochs_follow_operator() {
        let t = TrainConfig::default();
        assert_eq!(t.effective_epochs(&FusionConfig::default()), 3);
        assert_eq!(
            t.effective_epochs(&FusionConfig::Pmd {
                schedule: Default::default()
            }),
            4
        );
        let bad = TrainConfig {
            epochs: Some(0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn alpha_horizon_reaches_zero_on_last_update() {
        let total = 10;
        let h = pmd_alpha_horizon(total);
        assert_eq!(crate::fusion::alpha_schedule(0, h).unwrap(), 1.0);
        assert_eq!(crate::fusion::alpha_schedule(total - 1, h).unwrap(), 0.0);
    }
}
