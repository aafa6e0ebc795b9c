//! Command-line interface: training subcommands per experiment kind,
//! representation metrics over saved checkpoints, reconstruction and
//! sampling grids, and the shortcut-schedule table.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{accuracy, knn_classify, linear_probe, ProbeConfig};
use crate::diffusion::{ddpm_sample, kernel_mmd};
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::config::{ExperimentKind, RunConfig};
use crate::harness::data::load_dataset;
use crate::harness::train::{
    build_model, feature_rank, rank_dynamics, split_features, train, worker_count, Model,
};
use crate::models::{image_rgb, masked_fill, patchify, random_mask, tile_grid, write_ppm};
use crate::schedules::{schedule_table, AlphaSchedule, ScheduleKind};
use crate::tensor::{Binding, ParamArena, Rng, Tape, Tensor};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "deepshort",
    version,
    about = "Decayed identity shortcuts: training, feature analysis, and sampling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a masked autoencoder from a config file.
    TrainMae(TrainArgs),
    /// Train a supervised classifier from a config file.
    TrainCls(TrainArgs),
    /// Train a denoising diffusion model from a config file.
    TrainDdpm(TrainArgs),
    /// Linear-probe accuracy of a checkpoint's features.
    Probe(ProbeArgs),
    /// K-nearest-neighbour accuracy of a checkpoint's features.
    Knn(KnnArgs),
    /// Effective-rank report over one or many checkpoints.
    Rank(RankArgs),
    /// Reconstruction grid (truth / masked / prediction) from an MAE checkpoint.
    Recon(ReconArgs),
    /// Ancestral samples from a diffusion checkpoint.
    Sample(SampleArgs),
    /// Per-layer shortcut gains and the advisor verdict.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (line-based `key = value` with [section] headers).
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its embedded config drives the run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, conflicts_with = "resume")]
    out: Option<PathBuf>,
}

/// Optional schedule audit: refuse checkpoints whose embedded config
/// disagrees with what the caller says they are analyzing.
#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    alpha_min: Option<f64>,
    #[arg(long, value_parser = ScheduleKind::parse)]
    schedule: Option<ScheduleKind>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Summary CSV destination.
    #[arg(long, default_value = "probe.csv")]
    out: PathBuf,
    #[command(flatten)]
    audit: AuditArgs,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "knn.csv")]
    out: PathBuf,
    /// Neighbour count (clamped to the feature-bank size).
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[command(flatten)]
    audit: AuditArgs,
}

#[derive(Args)]
struct RankArgs {
    /// Glob over checkpoint files, e.g. "runs/*/ckpt_*.dsck".
    #[arg(
        long,
        value_name = "GLOB",
        required_unless_present = "run_dir",
        conflicts_with = "run_dir"
    )]
    checkpoint_glob: Option<String>,
    /// Walk one run directory in epoch order, flagging missing checkpoints.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value = "rank.csv")]
    out: PathBuf,
    #[command(flatten)]
    audit: AuditArgs,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Eval images to reconstruct (columns of the grid).
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value = "recon.ppm")]
    out: PathBuf,
    /// Seed for the display masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value = "samples.ppm")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also print the kernel MMD between the samples and the eval split.
    #[arg(long)]
    mmd: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    alpha_min: f64,
    #[arg(long, default_value = "linear", value_parser = ScheduleKind::parse)]
    kind: ScheduleKind,
    /// Advisor target interval for the total gain product.
    #[arg(long, default_value_t = 1e-3)]
    target_low: f64,
    #[arg(long, default_value_t = 1e-2)]
    target_high: f64,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves 2 for usage errors; this interface promises 1,
            // with --help/--version staying success.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::TrainMae(a) => cmd_train(ExperimentKind::Mae, a),
        Cmd::TrainCls(a) => cmd_train(ExperimentKind::Cls, a),
        Cmd::TrainDdpm(a) => cmd_train(ExperimentKind::Ddpm, a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Knn(a) => cmd_knn(a),
        Cmd::Rank(a) => cmd_rank(a),
        Cmd::Recon(a) => cmd_recon(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Schedule(a) => cmd_schedule(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn cmd_train(kind: ExperimentKind, args: &TrainArgs) -> Result<()> {
    let (cfg, resume) = match (&args.config, &args.resume) {
        (_, Some(ckpt)) => {
            let cfg = load_checkpoint::<f32>(ckpt)?.config.without_state();
            if cfg.kind != kind {
                return Err(Error::invalid(format!(
                    "{} holds a {} run; resume it with train-{}",
                    ckpt.display(),
                    cfg.kind.name(),
                    cfg.kind.name()
                )));
            }
            (cfg, Some(ckpt.as_path()))
        }
        (Some(path), None) => {
            let mut cfg = RunConfig::from_file(path)?;
            // The subcommand is the experiment selector; the config file's
            // [run] kind only matters inside checkpoints.
            cfg.kind = kind;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            (cfg, None)
        }
        (None, None) => unreachable!("clap enforces --config or --resume"),
    };
    let outcome = train(&cfg, resume)?;
    match outcome.epoch_losses.last() {
        Some(loss) => println!(
            "trained {} epoch(s), final loss {loss:.6}",
            outcome.epoch_losses.len()
        ),
        None => println!("nothing left to train"),
    }
    if let Some(ev) = &outcome.final_eval {
        println!(
            "eval: eff_rank {:.4} probe_acc {:.4} knn_acc {:.4}",
            ev.eff_rank, ev.probe_acc, ev.knn_acc
        );
    }
    println!("metrics -> {}", outcome.metrics.display());
    println!("checkpoint -> {}", outcome.final_checkpoint.display());
    Ok(())
}

fn audit_config(cfg: &RunConfig, audit: &AuditArgs, path: &Path) -> Result<()> {
    if let Some(a) = audit.alpha_min {
        if cfg.alpha_min != a {
            return Err(Error::Checkpoint(format!(
                "{}: schedule audit failed: checkpoint trained with alpha_min {}, not {a}",
                path.display(),
                cfg.alpha_min
            )));
        }
    }
    if let Some(kind) = audit.schedule {
        if cfg.schedule_kind != kind {
            return Err(Error::Checkpoint(format!(
                "{}: schedule audit failed: checkpoint trained with {} schedule, not {}",
                path.display(),
                cfg.schedule_kind.name(),
                kind.name()
            )));
        }
    }
    Ok(())
}

struct FeatureSet {
    cfg: RunConfig,
    ftrain: Tensor<f64>,
    feval: Tensor<f64>,
    train_labels: Vec<usize>,
    eval_labels: Vec<usize>,
}

/// Rebuild the model from a checkpoint and extract pooled features for both
/// splits (capped at the config's eval_samples per split).
fn checkpoint_features(path: &Path, audit: &AuditArgs) -> Result<FeatureSet> {
    let data = load_checkpoint::<f32>(path)?;
    let cfg = data.config.clone();
    audit_config(&cfg, audit, path)?;
    let dataset = load_dataset(&cfg)?;
    let mut arena: ParamArena<f32> = ParamArena::new();
    let model = build_model(&cfg, dataset.classes, &mut arena)?;
    data.apply_params(&mut arena)?;
    let threads = worker_count();
    let ftrain = split_features(
        &model,
        &arena,
        &dataset.train,
        cfg.eval_samples,
        cfg.patch,
        threads,
    )?;
    let feval = split_features(
        &model,
        &arena,
        &dataset.eval,
        cfg.eval_samples,
        cfg.patch,
        threads,
    )?;
    let (tn, _) = ftrain.dims2();
    let (en, _) = feval.dims2();
    let train_labels = dataset.train[..tn].iter().map(|s| s.label).collect();
    let eval_labels = dataset.eval[..en].iter().map(|s| s.label).collect();
    Ok(FeatureSet {
        cfg,
        ftrain,
        feval,
        train_labels,
        eval_labels,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let fs = checkpoint_features(&args.checkpoint, &args.audit)?;
    let acc = linear_probe(
        &fs.ftrain,
        &fs.train_labels,
        &fs.feval,
        &fs.eval_labels,
        &ProbeConfig::default(),
    )?;
    let csv = format!(
        "checkpoint,alpha_min,train_n,eval_n,probe_acc\n{},{},{},{},{acc:.6}\n",
        args.checkpoint.display(),
        fs.cfg.alpha_min,
        fs.train_labels.len(),
        fs.eval_labels.len()
    );
    write_text(&args.out, &csv)?;
    println!(
        "probe acc {acc:.4} ({} train / {} eval features) -> {}",
        fs.train_labels.len(),
        fs.eval_labels.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_knn(args: &KnnArgs) -> Result<()> {
    if args.k == 0 {
        return Err(Error::invalid("--k must be at least 1"));
    }
    let fs = checkpoint_features(&args.checkpoint, &args.audit)?;
    let k = args.k.min(fs.train_labels.len());
    let preds = knn_classify(&fs.ftrain, &fs.train_labels, &fs.feval, k)?;
    let acc = accuracy(&preds, &fs.eval_labels);
    let csv = format!(
        "checkpoint,alpha_min,k,eval_n,knn_acc\n{},{},{k},{},{acc:.6}\n",
        args.checkpoint.display(),
        fs.cfg.alpha_min,
        fs.eval_labels.len()
    );
    write_text(&args.out, &csv)?;
    println!(
        "knn acc {acc:.4} (k={k}, {} eval features) -> {}",
        fs.eval_labels.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_rank(args: &RankArgs) -> Result<()> {
    if let Some(dir) = &args.run_dir {
        if args.audit.alpha_min.is_some() || args.audit.schedule.is_some() {
            // The walker itself enforces config coherence across the run, so
            // auditing any one checkpoint covers all of them.
            let newest = newest_checkpoint(dir)?;
            let cfg = load_checkpoint::<f32>(&newest)?.config;
            audit_config(&cfg, &args.audit, &newest)?;
        }
        let csv = rank_dynamics(dir)?;
        write_text(&args.out, &csv)?;
        println!("rank dynamics for {} -> {}", dir.display(), args.out.display());
        return Ok(());
    }
    let pattern = args.checkpoint_glob.as_ref().expect("clap enforces the pair");
    let mut paths = Vec::new();
    for entry in
        glob::glob(pattern).map_err(|e| Error::invalid(format!("bad glob {pattern}: {e}")))?
    {
        paths.push(entry.map_err(|e| Error::invalid(format!("glob: {e}")))?);
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no checkpoints match {pattern}")));
    }
    let mut csv = String::from("checkpoint,alpha_min,eff_rank\n");
    let mut last = 0.0;
    for path in &paths {
        let data = load_checkpoint::<f32>(path)?;
        let cfg = data.config.clone();
        audit_config(&cfg, &args.audit, path)?;
        let dataset = load_dataset(&cfg)?;
        let mut arena: ParamArena<f32> = ParamArena::new();
        let model = build_model(&cfg, dataset.classes, &mut arena)?;
        data.apply_params(&mut arena)?;
        let feval = split_features(
            &model,
            &arena,
            &dataset.eval,
            cfg.eval_samples,
            cfg.patch,
            worker_count(),
        )?;
        last = feature_rank(&feval)?;
        writeln!(csv, "{},{},{last:.6}", path.display(), cfg.alpha_min).unwrap();
    }
    write_text(&args.out, &csv)?;
    println!(
        "effective rank for {} checkpoint(s), last {last:.4} -> {}",
        paths.len(),
        args.out.display()
    );
    Ok(())
}

fn newest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|ent| {
            let path = ent.ok()?.path();
            let name = path.file_name()?.to_str()?;
            (name.starts_with("ckpt_") && name.ends_with(".dsck")).then_some(path)
        })
        .collect();
    files.sort();
    files.pop().ok_or_else(|| {
        Error::Checkpoint(format!("no ckpt_*.dsck files under {}", dir.display()))
    })
}

fn cmd_recon(args: &ReconArgs) -> Result<()> {
    let data = load_checkpoint::<f32>(&args.checkpoint)?;
    let cfg = data.config.clone();
    let dataset = load_dataset(&cfg)?;
    let mut arena: ParamArena<f32> = ParamArena::new();
    let model = build_model(&cfg, dataset.classes, &mut arena)?;
    data.apply_params(&mut arena)?;
    let Model::Mae(mae) = &model else {
        return Err(Error::invalid(format!(
            "recon needs an mae checkpoint, {} holds a {} run",
            args.checkpoint.display(),
            cfg.kind.name()
        )));
    };
    let count = args.count.min(dataset.eval.len());
    if count == 0 {
        return Err(Error::invalid("nothing to reconstruct (count 0)"));
    }
    // Mid-gray in raw pixel space marks dropped patches in the middle row.
    let fill: Vec<f64> = dataset
        .mean
        .iter()
        .zip(&dataset.std)
        .map(|(&m, &s)| (0.5 - m) / s)
        .collect();
    let root = Rng::new(args.seed).derive("recon");
    let (mut truth, mut masked, mut recon) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..count {
        let img = &dataset.eval[i].image;
        let grid = patchify(img, cfg.patch)?;
        let mask = random_mask(
            grid.count(),
            cfg.mask_ratio,
            root.derive_u64(i as u64).key(),
        )?;
        let mut tape: Tape<f32> = Tape::new();
        let binding = Binding::bind(&mut tape, &arena)?;
        let pred = mae.reconstruction(&mut tape, &binding, &grid, &mask)?;
        truth.push(image_rgb(img, &dataset.mean, &dataset.std)?);
        masked.push(image_rgb(
            &masked_fill(&grid, &mask, &fill)?,
            &dataset.mean,
            &dataset.std,
        )?);
        recon.push(image_rgb(&pred, &dataset.mean, &dataset.std)?);
    }
    let (w, h, rgb) = tile_grid(&[truth, masked, recon], cfg.size, cfg.size)?;
    write_ppm(&args.out, w, h, &rgb)?;
    println!(
        "wrote {count} reconstruction(s) as a {w}x{h} grid -> {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let data = load_checkpoint::<f32>(&args.checkpoint)?;
    let cfg = data.config.clone();
    let dataset = load_dataset(&cfg)?;
    let mut arena: ParamArena<f32> = ParamArena::new();
    let model = build_model(&cfg, dataset.classes, &mut arena)?;
    data.apply_params(&mut arena)?;
    let Model::Ddpm { backbone, schedule } = &model else {
        return Err(Error::invalid(format!(
            "sample needs a ddpm checkpoint, {} holds a {} run",
            args.checkpoint.display(),
            cfg.kind.name()
        )));
    };
    let labels: Vec<Option<usize>> = (0..args.count)
        .map(|i| cfg.conditional.then(|| i % dataset.classes))
        .collect();
    let samples = ddpm_sample(backbone, &arena, schedule, &labels, args.seed)?;
    let cells: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| image_rgb(s, &dataset.mean, &dataset.std))
        .collect::<Result<_>>()?;
    let cols = args.count.min(8);
    let blank = vec![0u8; cfg.size * cfg.size * 3];
    let rows: Vec<Vec<Vec<u8>>> = cells
        .chunks(cols)
        .map(|chunk| {
            let mut row = chunk.to_vec();
            row.resize(cols, blank.clone());
            row
        })
        .collect();
    let (w, h, rgb) = tile_grid(&rows, cfg.size, cfg.size)?;
    write_ppm(&args.out, w, h, &rgb)?;
    println!(
        "wrote {} sample(s) as a {w}x{h} grid -> {}",
        args.count,
        args.out.display()
    );
    if args.mmd {
        let held: Vec<Tensor<f32>> = dataset.eval.iter().map(|s| s.image.clone()).collect();
        let d = kernel_mmd(&samples, &held)?;
        println!("kernel mmd vs {} held-out image(s): {d:.6}", held.len());
    }
    Ok(())
}

fn cmd_schedule(args: &ScheduleArgs) -> Result<()> {
    let schedule = AlphaSchedule::new(args.kind, args.depth, args.alpha_min)?;
    let table = schedule_table(&schedule, (args.target_low, args.target_high))?;
    print!("{table}");
    Ok(())
}
