//! Subcommand implementations and the error-to-exit-code mapping.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cylpose::backbone::{init_params, randomized_params, BackboneConfig, BackboneError};
use cylpose::diffcore::{operator_suite, DiffError, OperatorCheck, PadMode, ParamSet};
use cylpose::evalkit::{
    comparison_csv, equivariance_check, evaluate_views, run_protocol, EquivarianceReport, EvalError, ProtocolKind,
    ProtocolSpec,
};
use cylpose::geom::{Frame, Point, PointCloud};
use cylpose::synthgait::{build_dataset_in_memory, Dataset, Split, SynthError};
use cylpose::semitrain::{TrainData, TrainError, TrainMode, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{parse_shifts, parse_views, ConfigError, RunConfig};
use crate::plot::{self, PlotError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_TOLERANCE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Geom(#[from] cylpose::geom::GeomError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Eval(EvalError::InvalidShift { .. } | EvalError::Threshold(_)) => EXIT_USAGE,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "cylpose", version, about = "Rotation-equivariant lower-limb keypoints from depth point clouds")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Grid resolution C.
    #[arg(long, global = true)]
    pub cube: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train a model; writes a log, per-epoch and final checkpoints.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in total.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate a checkpoint, or run a full protocol with `--protocol`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated views, e.g. `X1,X2`.
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        protocol: Option<ProtocolKind>,
    },
    /// Check θ-shift equivariance; exits 2 on failure.
    Equiv {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated bin shifts; defaults to every stride multiple in [-C, C].
        #[arg(long, allow_hyphen_values = true)]
        shifts: Option<String>,
        /// Replace periodic θ padding with zeros (expected to fail).
        #[arg(long)]
        zero_padding: bool,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        /// Run in double precision with the tight tolerance.
        #[arg(long = "f64")]
        f64: bool,
        #[arg(long, default_value_t = 10)]
        cases: usize,
    },
    /// Dump heatmaps, the decoded skeleton and an overlay for one cloud.
    Plot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sample id within `--dataset`.
        #[arg(long)]
        sample: Option<usize>,
        /// A raw `.xyz.bin` cloud instead of a dataset sample.
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Rotate the normalized input by this many θ bins.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        shift: i64,
    },
}

/// Config file, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(c) = common.cube {
        cfg.backbone.grid.cube_len = c;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.common)?;
    let explicit_backbone = cli.common.config.is_some() || cli.common.cube.is_some();
    match cli.command {
        Command::Gen => {
            cfg.validate()?;
            cmd_gen(&cfg)
        }
        Command::Train { dataset, mode, resume, until } => {
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if dataset.is_some() {
                cfg.dataset_dir = dataset;
            }
            cfg.validate()?;
            cmd_train(&cfg, resume.as_deref(), until)
        }
        Command::Eval { checkpoint, dataset, views, threshold, protocol } => {
            if let Some(v) = views {
                cfg.eval.views = parse_views(&v)?;
            }
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            if protocol.is_some() {
                cfg.eval.protocol = protocol;
            }
            if dataset.is_some() {
                cfg.dataset_dir = dataset;
            }
            cfg.validate()?;
            cmd_eval(&cfg, checkpoint.as_deref(), explicit_backbone)
        }
        Command::Equiv { checkpoint, shifts, zero_padding } => {
            if let Some(s) = shifts {
                cfg.equiv.shifts = parse_shifts(&s)?;
            }
            cfg.validate()?;
            let report_dir = cli.common.out.as_deref();
            cmd_equiv(&cfg, checkpoint.as_deref(), zero_padding, explicit_backbone, report_dir)
        }
        Command::Gradcheck { f64, cases } => cmd_gradcheck(cfg.seed, f64, cases, cli.common.out.as_deref()),
        Command::Plot { checkpoint, dataset, sample, cloud, shift } => {
            if dataset.is_some() {
                cfg.dataset_dir = dataset;
            }
            cfg.validate()?;
            cmd_plot(&cfg, checkpoint.as_deref(), sample, cloud.as_deref(), shift, explicit_backbone)
        }
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(io(format!("cannot create {}", cfg.out.display())))?;
    let p = cfg.out.join("run_config.json");
    fs::write(&p, cfg.to_json()).map_err(io(format!("cannot write {}", p.display())))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.dataset_dir.as_ref().ok_or_else(|| CliError::Usage("no dataset given (--dataset DIR)".into()))?;
    Dataset::load(dir).map_err(|e| match e {
        SynthError::Io(source) => CliError::Io { context: format!("cannot load dataset {}", dir.display()), source },
        e => e.into(),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(source) => CliError::Io { context: format!("cannot read checkpoint {}", path.display()), source },
        e => e.into(),
    })
}

/// Checkpoint parameters, refusing a grid or architecture that disagrees
/// with an explicitly configured one.
fn load_model(cfg: &RunConfig, path: &Path, explicit: bool) -> Result<(BackboneConfig, ParamSet<f32>), CliError> {
    let ck = load_checkpoint(path)?;
    let b = ck.manifest.backbone.clone();
    if explicit && b != cfg.backbone {
        return Err(CliError::Usage(format!(
            "checkpoint {} was built for C={} but the run is configured for C={} (or another architecture)",
            path.display(),
            b.grid.cube_len,
            cfg.backbone.grid.cube_len
        )));
    }
    Ok((b, ck.params()?))
}

fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let t = Instant::now();
    let ds = build_dataset_in_memory(&cfg.dataset, cfg.seed)?;
    let manifest = ds.save(&cfg.out)?;
    prepare_out(cfg)?;
    println!(
        "generated {} samples ({} identities) in {:.1}s -> {}",
        manifest.samples.len(),
        ds.identities.len(),
        t.elapsed().as_secs_f64(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, until: Option<usize>) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = load_checkpoint(p)?.trainer()?;
            if t.backbone != cfg.backbone || t.cfg != cfg.train {
                log::warn!("resuming with the configuration stored in {}, not the current one", p.display());
            }
            t
        }
        None => Trainer::new(cfg.backbone.clone(), cfg.train.clone())?,
    };
    prepare_out(cfg)?;
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io(format!("cannot open {}", log_path.display())))?;

    let data = TrainData::from_dataset(&ds, &trainer.backbone.grid);
    log::info!("{} labeled samples, {} groups", data.labeled.len(), data.groups.len());
    let end = until.unwrap_or(trainer.cfg.epochs).min(trainer.cfg.epochs);
    let save = |t: &Trainer, name: &str| -> Result<(), CliError> {
        let p = cfg.out.join(name);
        Checkpoint::from_trainer(t).save(&p)?;
        Ok(())
    };
    while trainer.epoch < end {
        let entry = trainer.run_epoch(&data)?;
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(log_file, "{line}").map_err(io(format!("cannot write {}", log_path.display())))?;
        log::info!(
            "epoch {} [{}] lr {:.2e} total {:.5} ({:.1}s)",
            entry.epoch,
            entry.phase,
            entry.lr,
            entry.total,
            entry.wall_time_s
        );
        save(&trainer, "last.cylp")?;
        if trainer.epoch == trainer.cfg.effective_epoch_s() {
            save(&trainer, "epoch_s.cylp")?;
        }
    }
    if trainer.is_done() {
        save(&trainer, "final.cylp")?;
        println!("training finished after {} epochs -> {}", trainer.epoch, cfg.out.join("final.cylp").display());
    } else {
        println!("stopped at epoch {} of {} -> {}", trainer.epoch, trainer.cfg.epochs, cfg.out.join("last.cylp").display());
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, explicit: bool) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let threshold = cfg.eval.threshold;
    if let (Some(kind), None) = (cfg.eval.protocol, checkpoint) {
        let spec = ProtocolSpec::new(kind, cfg.eval.folds, cfg.seed);
        let folds = run_protocol(&spec, &ds, &cfg.backbone, threshold, |fold, data| {
            log::info!("fold {fold}: training on {} labeled samples", data.labeled.len());
            let mut t = Trainer::new(cfg.backbone.clone(), cfg.train.clone())?;
            t.run_until(data, cfg.train.epochs, |_, e| log::info!("fold {fold} epoch {} total {:.5}", e.epoch, e.total))?;
            Ok(t.params)
        })?;
        let mut rows = Vec::new();
        for f in &folds {
            rows.extend(f.reports.per_view.iter().map(|(v, r)| (format!("fold{}_{v}", f.fold), r.clone())));
            rows.push((format!("fold{}_pooled", f.fold), f.reports.pooled.clone()));
        }
        let csv = comparison_csv(&rows);
        prepare_out(cfg)?;
        let doc = json!({ "protocol": spec, "folds": folds });
        write_text(&cfg.out.join("protocol.json"), &serde_json::to_string_pretty(&doc).expect("serializes"))?;
        write_text(&cfg.out.join("protocol.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }
    let path = checkpoint.ok_or_else(|| CliError::Usage("eval needs --checkpoint or --protocol".into()))?;
    let (backbone, params) = load_model(cfg, path, explicit)?;
    let test: Vec<_> = ds.samples.iter().filter(|s| s.split == Split::Test && s.pose.is_some()).collect();
    let reports = evaluate_views(&backbone, &params, &test, &cfg.eval.views, threshold)?;
    let mut rows: Vec<_> = reports.per_view.iter().map(|(v, r)| (v.to_string(), r.clone())).collect();
    rows.push(("pooled".into(), reports.pooled.clone()));
    let csv = comparison_csv(&rows);
    prepare_out(cfg)?;
    let doc = json!({ "checkpoint": path, "views": cfg.eval.views, "reports": reports });
    write_text(&cfg.out.join("eval.json"), &serde_json::to_string_pretty(&doc).expect("serializes"))?;
    write_text(&cfg.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    fs::write(path, s).map_err(io(format!("cannot write {}", path.display())))
}

/// Uniform points in a cube around the origin.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| Point::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
        .collect();
    PointCloud::new(pts, Frame::Canonical)
}

fn cmd_equiv(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    zero_padding: bool,
    explicit: bool,
    report_dir: Option<&Path>,
) -> Result<(), CliError> {
    let (mut backbone, params) = match checkpoint {
        Some(p) => load_model(cfg, p, explicit)?,
        None => (cfg.backbone.clone(), randomized_params(&cfg.backbone, cfg.seed)?),
    };
    if zero_padding {
        backbone.theta_padding = PadMode::Zero;
    }
    let shifts = {
        let mut c = cfg.clone();
        c.backbone = backbone.clone();
        c.shifts()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe9u64);
    let mut reports: Vec<EquivarianceReport> = Vec::new();
    for _ in 0..cfg.equiv.clouds.max(1) {
        let cloud = random_cloud(&mut rng, cfg.equiv.points);
        reports.push(equivariance_check(&backbone, &params, &cloud, &shifts)?);
    }
    let worst_hm = reports.iter().map(|r| r.max_heatmap_deviation).fold(0.0, f64::max);
    let worst_theta = reports.iter().map(|r| r.max_theta_error).fold(0.0, f64::max);
    let pass = worst_hm <= cfg.equiv.heatmap_tol && worst_theta <= cfg.equiv.theta_tol;
    println!(
        "equivariance over {} clouds x {} shifts: max heatmap deviation {:.3e} (tol {:.1e}), max theta error {:.3e} rad (tol {:.1e}) -> {}",
        reports.len(),
        shifts.len(),
        worst_hm,
        cfg.equiv.heatmap_tol,
        worst_theta,
        cfg.equiv.theta_tol,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))?;
        let doc = json!({
            "shifts": shifts,
            "zero_padding": zero_padding,
            "max_heatmap_deviation": worst_hm,
            "max_theta_error": worst_theta,
            "pass": pass,
            "clouds": reports,
        });
        write_text(&dir.join("equiv.json"), &serde_json::to_string_pretty(&doc).expect("serializes"))?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("heatmap deviation {worst_hm:.3e}, theta error {worst_theta:.3e}")))
    }
}

fn cmd_gradcheck(seed: u64, double: bool, cases: usize, report_dir: Option<&Path>) -> Result<(), CliError> {
    let (checks, tol, precision): (Vec<OperatorCheck>, f64, &str) = if double {
        (operator_suite::<f64>(cases, seed, 1e-5)?, 1e-4, "f64")
    } else {
        (operator_suite::<f32>(cases, seed, 1e-2)?, 5e-2, "f32")
    };
    for c in &checks {
        println!("{:<18} cases {:>3}  worst rel err {:.3e}", c.op, c.cases, c.worst_rel_err);
    }
    let worst = checks.iter().max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err)).expect("non-empty suite");
    let pass = worst.worst_rel_err <= tol;
    println!(
        "{precision} gradcheck: worst {} at {:.3e} (tol {:.0e}) -> {}",
        worst.op,
        worst.worst_rel_err,
        tol,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))?;
        let rows: Vec<_> = checks.iter().map(|c| json!({ "op": c.op, "cases": c.cases, "worst_rel_err": c.worst_rel_err })).collect();
        let doc = json!({ "precision": precision, "tolerance": tol, "pass": pass, "operators": rows });
        write_text(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&doc).expect("serializes"))?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("{} relative error {:.3e} > {tol:.0e}", worst.op, worst.worst_rel_err)))
    }
}

fn cmd_plot(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    sample: Option<usize>,
    cloud_path: Option<&Path>,
    shift: i64,
    explicit: bool,
) -> Result<(), CliError> {
    let (backbone, params) = match checkpoint {
        Some(p) => load_model(cfg, p, explicit)?,
        None => {
            log::warn!("no checkpoint given; plotting an untrained network");
            (cfg.backbone.clone(), init_params::<f32>(&cfg.backbone, cfg.seed)?)
        }
    };
    let stride = backbone.theta_stride() as i64;
    if shift.rem_euclid(stride) != 0 {
        return Err(CliError::Usage(format!("shift {shift} is not a multiple of the θ stride {stride}")));
    }
    let cloud = match (cloud_path, sample) {
        (Some(p), None) => PointCloud::load_xyz(p, Frame::Canonical)?,
        (None, Some(id)) => {
            let ds = load_dataset(cfg)?;
            ds.samples
                .into_iter()
                .find(|s| s.id == id)
                .ok_or_else(|| CliError::Usage(format!("no sample with id {id}")))?
                .cloud
        }
        _ => return Err(CliError::Usage("plot needs exactly one of --cloud FILE or --dataset DIR --sample ID".into())),
    };
    let set = plot::render(&backbone, &params, &cloud, shift)?;
    let files = plot::write_all(&set, &backbone, &cfg.out)?;
    println!("wrote {} files to {}", files.len(), cfg.out.display());
    Ok(())
}
