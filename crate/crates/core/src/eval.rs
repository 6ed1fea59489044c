//! Center-distance AP, the corruption × severity sweep, mean resistance
//! ability and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{format_hash, ExperimentConfig};
use crate::corrupt::{corrupt_sample, CorruptionSpec, Family};
use crate::detector::{decode, Detection, PredictionMap};
use crate::error::{Error, Result};
use crate::fusion::FusionPhase;
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Tape};
use crate::trainer::{forward_item, load_checkpoint, Regime};
use crate::world::{dataset_read, BevProjector, ObjectBox, Sample};

pub const METRIC_NAME: &str = "mAP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub distance_thresholds_m: Vec<f32>,
    pub score_threshold: f32,
    pub nms_radius_m: f32,
    pub families: Vec<Family>,
    pub severities: Vec<u8>,
    pub regimes: Vec<Regime>,
    pub corruption_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            distance_thresholds_m: vec![0.5, 1.0, 2.0, 4.0],
            score_threshold: 0.05,
            nms_radius_m: 1.0,
            families: Family::CORRUPTIONS.to_vec(),
            severities: vec![1, 2, 3],
            regimes: vec![Regime::LC, Regime::L, Regime::C],
            corruption_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.distance_thresholds_m;
        if t.is_empty() || t[0] <= 0.0 || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "distance thresholds {t:?} must be positive and strictly increasing"
            )));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score threshold {} outside (0,1)",
                self.score_threshold
            )));
        }
        if self.severities.iter().any(|s| !(1..=3).contains(s)) {
            return Err(Error::Config(format!(
                "severities {:?} outside 1..=3",
                self.severities
            )));
        }
        if self.families.contains(&Family::Clean) {
            return Err(Error::Config(
                "the clean reference is always evaluated; do not list it".into(),
            ));
        }
        if self
            .regimes
            .iter()
            .any(|r| !matches!(r, Regime::LC | Regime::L | Regime::C))
        {
            return Err(Error::Config("evaluation regimes are lc, l and c".into()));
        }
        Ok(())
    }
}

fn dist(a: &ObjectBox, b: &ObjectBox) -> f32 {
    (a.center_xy[0] - b.center_xy[0]).hypot(a.center_xy[1] - b.center_xy[1])
}

/// Greedy one-to-one matching in score order (stable for ties): each
/// prediction takes the nearest unmatched same-class ground truth within
/// `threshold_m`. Returned in that processing order.
pub fn match_detections(
    preds: &[Detection],
    gts: &[ObjectBox],
    threshold_m: f32,
) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|pi| {
            let p = &preds[pi].bbox;
            let best = gts
                .iter()
                .enumerate()
                .filter(|(gi, g)| !taken[*gi] && g.class_id == p.class_id)
                .map(|(gi, g)| (gi, dist(p, g)))
                .filter(|&(_, d)| d <= threshold_m)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            (pi, best.is_some())
        })
        .collect()
}

/// Area under the monotone-interpolated precision/recall curve of
/// `(score, is_true_positive)` pairs pooled over a dataset. Equal scores
/// enter the curve as one block, so their order does not matter.
pub fn average_precision(scored: &[(f32, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        n += 1;
        let block_end = sorted.get(i + 1).is_none_or(|next| next.0 != score);
        if block_end {
            points.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
        }
    }
    // precision envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Mean over classes, then over thresholds; `cells[threshold][class]`.
pub fn map_score(cells: &[Vec<f64>]) -> Result<f64> {
    if cells.is_empty() || cells.iter().any(Vec::is_empty) {
        return Err(Error::Eval(
            "mAP needs at least one (class, threshold) cell".into(),
        ));
    }
    let per_threshold: Vec<f64> = cells
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(per_threshold.iter().sum::<f64>() / per_threshold.len() as f64)
}

/// `(1 / 3N) Σ_c Σ_s cells[c, s] / clean` over `N` families with all three
/// severities each.
pub fn compute_mra(clean_value: f64, cells: &BTreeMap<(Family, u8), f64>) -> Result<f64> {
    if clean_value.is_nan() || clean_value <= 0.0 {
        return Err(Error::Eval(format!(
            "clean reference {clean_value} must be positive"
        )));
    }
    let families: std::collections::BTreeSet<Family> = cells.keys().map(|k| k.0).collect();
    if families.is_empty() {
        return Err(Error::Eval("no corruption cells".into()));
    }
    for &f in &families {
        for s in 1..=3u8 {
            if !cells.contains_key(&(f, s)) {
                return Err(Error::Eval(format!("missing cell {}:{s}", f.name())));
            }
        }
    }
    if cells.len() != 3 * families.len() {
        return Err(Error::Eval("cells outside severities 1..=3".into()));
    }
    let sum: f64 = cells.values().map(|v| v / clean_value).sum();
    Ok(sum / (3 * families.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub regime: Regime,
    pub metric_name: String,
    pub clean_value: f64,
    pub cells: BTreeMap<(Family, u8), f64>,
    /// Absent when no family was evaluated at all three severities.
    pub mra: Option<f64>,
}

impl MetricReport {
    pub fn new(regime: Regime, clean_value: f64, cells: BTreeMap<(Family, u8), f64>) -> Self {
        let mra = if cells.is_empty() {
            None
        } else {
            compute_mra(clean_value, &cells).ok()
        };
        Self {
            regime,
            metric_name: METRIC_NAME.into(),
            clean_value,
            cells,
            mra,
        }
    }

    /// Mean over families of the value at `severity`.
    pub fn severity_mean(&self, severity: u8) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|(k, _)| k.1 == severity)
            .map(|(_, v)| *v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// mAP of per-sample detections against the scenes' boxes.
pub fn score_detections(
    dets: &[Vec<Detection>],
    gts: &[&[ObjectBox]],
    num_classes: usize,
    eval: &EvalConfig,
) -> Result<f64> {
    let mut cells = Vec::with_capacity(eval.distance_thresholds_m.len());
    for &thr in &eval.distance_thresholds_m {
        let mut scored: Vec<Vec<(f32, bool)>> = vec![Vec::new(); num_classes];
        let mut num_gt = vec![0usize; num_classes];
        for (d, g) in dets.iter().zip(gts) {
            for b in g.iter() {
                num_gt[b.class_id as usize] += 1;
            }
            for (pi, hit) in match_detections(d, g, thr) {
                let c = d[pi].bbox.class_id as usize;
                scored[c].push((d[pi].score, hit));
            }
        }
        cells.push(
            (0..num_classes)
                .map(|c| average_precision(&scored[c], num_gt[c]))
                .collect(),
        );
    }
    map_score(&cells)
}

/// Detections for every sample under one corruption and regime.
pub fn detect_all(
    samples: &[Sample],
    spec: &CorruptionSpec,
    regime: Regime,
    params: &ParamStore,
    cfg: &ExperimentConfig,
    projector: &BevProjector,
) -> Result<Vec<Vec<Detection>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let s = corrupt_sample(s, spec, &cfg.sensor)?;
            let mut tape = Tape::<f32>::new();
            let h = forward_item(
                &mut tape,
                &s,
                regime,
                projector,
                &cfg.fusion,
                cfg.train.mode,
                FusionPhase::Inference,
                params,
                i as u64,
            )?;
            let pred = PredictionMap {
                objectness: tape.value(h.objectness).clone(),
                offsets: tape.value(h.offsets).clone(),
                sizes: tape.value(h.sizes).clone(),
                yaw: tape.value(h.yaw).clone(),
                class_logits: tape.value(h.class_logits).clone(),
                cell_size_m: cfg.grid.cell_size_m,
            };
            Ok(decode(
                &pred,
                cfg.eval.score_threshold,
                cfg.eval.nms_radius_m,
            ))
        })
        .collect()
}

/// One report per configured regime. Corruptions of a modality the regime
/// does not use leave its inputs untouched, so their cells reuse the clean
/// value.
pub fn evaluate(
    params: &ParamStore,
    samples: &[Sample],
    cfg: &ExperimentConfig,
    projector: &BevProjector,
) -> Result<Vec<MetricReport>> {
    cfg.eval.validate()?;
    let gts: Vec<&[ObjectBox]> = samples.iter().map(|s| &s.scene.boxes[..]).collect();
    let nc = cfg.world.num_classes;
    let mut reports = Vec::with_capacity(cfg.eval.regimes.len());
    for &regime in &cfg.eval.regimes {
        let score = |spec: &CorruptionSpec| -> Result<f64> {
            let dets = detect_all(samples, spec, regime, params, cfg, projector)?;
            score_detections(&dets, &gts, nc, &cfg.eval)
        };
        let clean = score(&CorruptionSpec::clean())?;
        let avail = regime.availability();
        let mut cells = BTreeMap::new();
        for &family in &cfg.eval.families {
            let used = match family.target() {
                Some(crate::fusion::Modality::Lidar) => avail.lidar(),
                Some(crate::fusion::Modality::Camera) => avail.camera(),
                _ => true,
            };
            for &sev in &cfg.eval.severities {
                let value = if used {
                    score(&CorruptionSpec::new(family, sev, cfg.eval.corruption_seed)?)?
                } else {
                    clean
                };
                cells.insert((family, sev), value);
            }
        }
        reports.push(MetricReport::new(regime, clean, cells));
    }
    Ok(reports)
}

/// Loads checkpoint and dataset, checks both hashes against `cfg`, and
/// runs [`evaluate`].
pub fn evaluate_paths(
    checkpoint: &Path,
    dataset_path: &Path,
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricReport>> {
    let params = load_checkpoint(checkpoint, cfg)?;
    let ds = dataset_read(dataset_path)?;
    if ds.config_hash != cfg.data_hash() {
        return Err(Error::HashMismatch {
            what: "dataset",
            expected: format_hash(cfg.data_hash()),
            found: format_hash(ds.config_hash),
        });
    }
    evaluate(
        &params,
        &ds.samples,
        cfg,
        &BevProjector::new(cfg.grid.clone()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonCell {
    family: Family,
    severity: u8,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    regime: Regime,
    metric: String,
    clean: f64,
    cells: Vec<JsonCell>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mra: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    reports: Vec<JsonReport>,
}

pub fn reports_to_json(reports: &[MetricReport]) -> String {
    let doc = JsonDoc {
        reports: reports
            .iter()
            .map(|r| JsonReport {
                regime: r.regime,
                metric: r.metric_name.clone(),
                clean: r.clean_value,
                cells: r
                    .cells
                    .iter()
                    .map(|(&(family, severity), &value)| JsonCell {
                        family,
                        severity,
                        value,
                    })
                    .collect(),
                mra: r.mra,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("reports serialize");
    s.push('\n');
    s
}

pub fn reports_from_json(text: &str) -> Result<Vec<MetricReport>> {
    let doc: JsonDoc = serde_json::from_str(text).map_err(|e| Error::Format {
        what: "report",
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok(doc
        .reports
        .into_iter()
        .map(|r| MetricReport {
            regime: r.regime,
            metric_name: r.metric,
            clean_value: r.clean,
            cells: r
                .cells
                .into_iter()
                .map(|c| ((c.family, c.severity), c.value))
                .collect(),
            mra: r.mra,
        })
        .collect())
}

/// Rows `family,severity` (clean first, then the cells, then `mRA`), one
/// metric column per report.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("family,severity");
    for r in reports {
        let _ = write!(s, ",{}_{}", r.metric_name, r.regime.name());
    }
    s.push('\n');
    if reports.is_empty() {
        return s;
    }
    let mut keys: Vec<(Family, u8)> = reports
        .iter()
        .flat_map(|r| r.cells.keys().copied())
        .collect();
    keys.sort();
    keys.dedup();
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let _ = write!(s, "clean,0");
    for r in reports {
        let _ = write!(s, ",{}", fmt(Some(r.clean_value)));
    }
    s.push('\n');
    for k in keys {
        let _ = write!(s, "{},{}", k.0.name(), k.1);
        for r in reports {
            let _ = write!(s, ",{}", fmt(r.cells.get(&k).copied()));
        }
        s.push('\n');
    }
    let _ = write!(s, "mRA,");
    for r in reports {
        let _ = write!(s, ",{}", fmt(r.mra));
    }
    s.push('\n');
    s
}

/// Inverse of [`reports_to_csv`] up to the six printed decimals.
pub fn reports_from_csv(text: &str) -> Result<Vec<MetricReport>> {
    let bad = |line: usize, msg: String| Error::Format {
        what: "csv report",
        offset: line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "family" || cols[1] != "severity" {
        return Err(bad(0, format!("unexpected header {header:?}")));
    }
    let mut reports = Vec::new();
    for c in &cols[2..] {
        let (metric, regime) = c
            .rsplit_once('_')
            .ok_or_else(|| bad(0, format!("column {c:?} is not <metric>_<regime>")))?;
        reports.push(MetricReport {
            regime: Regime::parse(regime)?,
            metric_name: metric.to_string(),
            clean_value: f64::NAN,
            cells: BTreeMap::new(),
            mra: None,
        });
    }
    for (ln, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(
                ln,
                format!("{} fields, expected {}", f.len(), cols.len()),
            ));
        }
        for (r, v) in reports.iter_mut().zip(&f[2..]) {
            let value = if v.is_empty() {
                None
            } else {
                Some(
                    v.parse::<f64>()
                        .map_err(|e| bad(ln, format!("{v:?}: {e}")))?,
                )
            };
            match (f[0], value) {
                ("clean", Some(v)) => r.clean_value = v,
                ("mRA", v) => r.mra = v,
                (_, None) => {}
                (fam, Some(v)) => {
                    let sev: u8 = f[1]
                        .parse()
                        .map_err(|_| bad(ln, format!("severity {:?}", f[1])))?;
                    r.cells.insert((fam.parse()?, sev), v);
                }
            }
        }
    }
    Ok(reports)
}

pub fn emit_report(reports: &[MetricReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => reports_to_csv(reports),
        ReportFormat::Json => reports_to_json(reports),
    };
    write_atomic(path, |f| {
        use std::io::Write;
        f.write_all(text.as_bytes())
    })
}

/// `<run_id>.<regime>.report.<ext>`
pub fn report_file_name(run_id: &str, regime: Regime, format: ReportFormat) -> String {
    format!("{run_id}.{}.report.{}", regime.name(), format.extension())
}

/// Corruption × severity table with one column block per report.
pub fn render_markdown(reports: &[MetricReport]) -> String {
    let mut s = String::from("| corruption | sev. |");
    for r in reports {
        let _ = write!(s, " {} ({}) |", r.metric_name, r.regime.name());
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---:|".repeat(reports.len()));
    s.push('\n');
    let _ = write!(s, "| clean | - |");
    for r in reports {
        let _ = write!(s, " {:.4} |", r.clean_value);
    }
    s.push('\n');
    let mut keys: Vec<(Family, u8)> = reports
        .iter()
        .flat_map(|r| r.cells.keys().copied())
        .collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        let _ = write!(s, "| {} | s{} |", k.0.name(), k.1);
        for r in reports {
            match r.cells.get(&k) {
                Some(v) => {
                    let _ = write!(s, " {v:.4} |");
                }
                None => s.push_str(" |"),
            }
        }
        s.push('\n');
    }
    let _ = write!(s, "| **mRA** | |");
    for r in reports {
        match r.mra {
            Some(v) => {
                let _ = write!(s, " {v:.4} |");
            }
            None => s.push_str(" - |"),
        }
    }
    s.push('\n');
    s
}
