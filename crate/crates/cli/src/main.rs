//! `sbfuse`: generate data, train, evaluate and inspect single-branch
//! fusion models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use sbfuse_core::config::format_hash;
use sbfuse_core::corrupt::{corrupt_sample, CorruptionSpec};
use sbfuse_core::eval::{
    emit_report, evaluate_paths, render_markdown, report_file_name, reports_from_csv,
    reports_from_json, MetricReport, ReportFormat,
};
use sbfuse_core::gradsuite::{run_grad_suite, worst_failure, GRAD_TOLERANCE};
use sbfuse_core::tensor::GradFault;
use sbfuse_core::trainer::{report_path, run_training_with, Regime};
use sbfuse_core::world::{dataset_read, dataset_write, generate_dataset, Dataset, LidarSweep};
use sbfuse_core::{CameraStream, Error, ExperimentConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISMATCH: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_GRAD_CHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "sbfuse",
    version,
    about = "Single-branch camera/LiDAR BEV fusion testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed_override {
            cfg.seed = s;
            cfg.train.shuffle_seed = s;
            cfg.train.init_seed = s;
            cfg.eval.corruption_seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).map_err(|e| e.to_string())
}

fn parse_spec(s: &str) -> Result<CorruptionSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `num_samples` from the configuration.
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// Train from fresh parameters and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint across regimes and corruptions.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the per-regime reports.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_regime)]
        regimes: Vec<Regime>,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
    /// Finite-difference check of every op and of each fusion pipeline.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scales the ReLU backward pass; a negative control for the checker.
        #[arg(long, hide = true)]
        inject_relu_fault: Option<f64>,
    },
    /// Write corrupted copies of the first samples and summarize the change.
    CorruptPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// `<family>:<severity>`, e.g. `fog:2`.
        #[arg(long, value_parser = parse_spec)]
        spec: CorruptionSpec,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Print report files as one table.
    Report {
        #[arg(long)]
        markdown: bool,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<MissingDataset>().is_some() {
        return EXIT_MISMATCH;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::HashMismatch { .. }) => EXIT_MISMATCH,
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
struct MissingDataset(PathBuf);

impl std::fmt::Display for MissingDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "dataset not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingDataset {}

fn require_dataset(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(MissingDataset(path.to_path_buf()).into());
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::GenData {
            cfg,
            out,
            num_samples,
        } => gen_data(&cfg.load()?, &out, num_samples),
        Command::Train { cfg, dataset, out } => train(&cfg.load()?, &dataset, &out),
        Command::Eval {
            cfg,
            checkpoint,
            dataset,
            out,
            regimes,
            format,
        } => eval(
            &cfg.load()?,
            &checkpoint,
            &dataset,
            &out,
            regimes,
            format.into(),
        ),
        Command::GradCheck {
            cfg,
            inject_relu_fault,
        } => grad_check(&cfg.load()?, inject_relu_fault),
        Command::CorruptPreview {
            cfg,
            dataset,
            spec,
            out,
            count,
        } => corrupt_preview(&cfg.load()?, &dataset, spec, &out, count),
        Command::Report { markdown, files } => report(&files, markdown),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, num_samples: Option<usize>) -> anyhow::Result<u8> {
    let n = num_samples.unwrap_or(cfg.num_samples);
    if n == 0 {
        return Err(UsageError("--num-samples must be at least 1".into()).into());
    }
    let samples = generate_dataset(n, cfg.seed, &cfg.world, &cfg.sensor, cfg.extent_m())?;
    let ds = Dataset {
        config_hash: cfg.data_hash(),
        samples,
    };
    dataset_write(out, &ds)?;
    println!(
        "samples={} boxes={} seed={} data_hash={} out={}",
        ds.samples.len(),
        ds.total_boxes(),
        cfg.seed,
        format_hash(ds.config_hash),
        out.display()
    );
    Ok(0)
}

fn train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> anyhow::Result<u8> {
    require_dataset(dataset)?;
    let start = Instant::now();
    let report = run_training_with(dataset, cfg, out, |rec| {
        if rec.step % 25 == 0 {
            eprintln!(
                "step {:>5} epoch {} loss {:.4} ({:.0}s)",
                rec.step,
                rec.epoch,
                rec.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let text = report.to_text();
    for line in text.lines().skip(1).take(3) {
        println!("{line}");
    }
    for (r, (sum, n)) in &report.regime_losses {
        println!(
            "regime {} mean_loss {:.6}",
            r.name(),
            sum / (*n).max(1) as f64
        );
    }
    println!(
        "steps={} final_loss={:.6} wall_time_s={:.1}",
        report.total_steps,
        report.final_loss().unwrap_or(f32::NAN),
        report.wall_time_s
    );
    println!(
        "checkpoint={} report={}",
        out.display(),
        report_path(out).display()
    );
    Ok(0)
}

fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    regimes: Vec<Regime>,
    format: ReportFormat,
) -> anyhow::Result<u8> {
    require_dataset(dataset)?;
    let mut cfg = cfg.clone();
    if !regimes.is_empty() {
        cfg.eval.regimes = regimes;
    }
    let reports = evaluate_paths(checkpoint, dataset, &cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for r in &reports {
        let path = out.join(report_file_name(&cfg.run_id, r.regime, format));
        emit_report(std::slice::from_ref(r), &path, format)?;
        println!(
            "regime={} clean_{}={:.6} mra={:.6} report={}",
            r.regime.name(),
            r.metric_name,
            r.clean_value,
            r.mra.unwrap_or(f64::NAN),
            path.display()
        );
    }
    // summary line: the first evaluated regime
    let mra = reports.first().and_then(|r| r.mra).unwrap_or(f64::NAN);
    println!("mRA={mra:.6}");
    Ok(0)
}

fn grad_check(cfg: &ExperimentConfig, fault: Option<f64>) -> anyhow::Result<u8> {
    let start = Instant::now();
    let entries = run_grad_suite(cfg.seed, fault.map(GradFault::ScaleReluGrad), |e| {
        println!(
            "{:<24} max_rel_err={:.3e} checked={} skipped_kinks={} {}",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.skipped_kinks,
            if e.passed() { "ok" } else { "FAIL" }
        );
    })?;
    println!("elapsed_s={:.1}", start.elapsed().as_secs_f64());
    if let Some(worst) = worst_failure(&entries) {
        eprintln!(
            "gradient check failed: worst offender {} (max relative error {:.3e} ≥ {GRAD_TOLERANCE:e})",
            worst.name, worst.report.max_rel_error
        );
        return Ok(EXIT_GRAD_CHECK);
    }
    println!("all {} checks below {GRAD_TOLERANCE:e}", entries.len());
    Ok(0)
}

fn centroid(sweep: &LidarSweep) -> Option<(f64, f64)> {
    let n = sweep.points.len();
    (n > 0).then(|| {
        let (sx, sy) = sweep
            .points
            .iter()
            .fold((0.0, 0.0), |(x, y), p| (x + p.x as f64, y + p.y as f64));
        (sx / n as f64, sy / n as f64)
    })
}

fn intensity_variance(stream: &CameraStream) -> f64 {
    let v: Vec<f64> = stream
        .views
        .iter()
        .flat_map(|v| v.intensity.iter().map(|&x| x as f64))
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

fn corrupt_preview(
    cfg: &ExperimentConfig,
    dataset: &Path,
    spec: CorruptionSpec,
    out: &Path,
    count: usize,
) -> anyhow::Result<u8> {
    require_dataset(dataset)?;
    let ds = dataset_read(dataset)?;
    if ds.config_hash != cfg.data_hash() {
        return Err(Error::HashMismatch {
            what: "dataset",
            expected: format_hash(cfg.data_hash()),
            found: format_hash(ds.config_hash),
        }
        .into());
    }
    if count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let spec = CorruptionSpec {
        rng_seed: cfg.eval.corruption_seed,
        ..spec
    };
    let mut corrupted = Vec::new();
    println!("spec={spec}");
    for (i, s) in ds.samples.iter().take(count).enumerate() {
        let c = corrupt_sample(s, &spec, &cfg.sensor)?;
        let before = s.sweep.points.len();
        let dropped = before as i64 - c.sweep.points.len() as i64;
        let frac = if before == 0 {
            0.0
        } else {
            dropped as f64 / before as f64
        };
        let shift = match (centroid(&s.sweep), centroid(&c.sweep)) {
            (Some(a), Some(b)) => (b.0 - a.0).hypot(b.1 - a.1),
            (None, None) => 0.0,
            _ => f64::NAN,
        };
        let var_delta = intensity_variance(&c.stream) - intensity_variance(&s.stream);
        println!(
            "sample={i} points_dropped={dropped} dropped_fraction={frac:.6} intensity_var_delta={var_delta:.6e} centroid_shift_m={shift:.6}"
        );
        corrupted.push(c);
    }
    dataset_write(
        out,
        &Dataset {
            config_hash: ds.config_hash,
            samples: corrupted,
        },
    )?;
    println!("out={}", out.display());
    Ok(0)
}

fn report(files: &[PathBuf], markdown: bool) -> anyhow::Result<u8> {
    let mut all: Vec<MetricReport> = Vec::new();
    for f in files {
        let text =
            std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let parsed = match f.extension().and_then(|e| e.to_str()) {
            Some("json") => reports_from_json(&text)?,
            Some("csv") => reports_from_csv(&text)?,
            _ => {
                return Err(
                    UsageError(format!("{}: expected a .csv or .json report", f.display())).into(),
                )
            }
        };
        all.extend(parsed);
    }
    if markdown {
        print!("{}", render_markdown(&all));
    } else {
        print!("{}", sbfuse_core::eval::reports_to_csv(&all));
    }
    Ok(0)
}
