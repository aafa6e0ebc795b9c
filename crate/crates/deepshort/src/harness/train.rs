//! Training loops for the three experiment kinds, plus the shared machinery
//! they sit on: threaded per-sample gradient accumulation, feature
//! extraction, representation metrics, and rank-dynamics walks over a run
//! directory's checkpoints.
//!
//! Everything that draws randomness derives its stream from
//! (seed, purpose, epoch, sample index), never from loop state, so a resumed
//! run continues the exact trajectory of an uninterrupted one.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{
    accuracy, dynamics_csv, knn_classify, linear_probe, rank_report, DynamicsRow, ProbeConfig,
};
use crate::diffusion::{eps_loss_sample, q_sample, Backbone, NoiseSchedule};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{ExperimentKind, RunConfig};
use crate::harness::data::{load_dataset, Dataset};
use crate::harness::optim::{lr_at, warmup_steps, AdamW};
use crate::models::{patchify, random_mask, Classifier, Mae, PatchGrid};
use crate::tensor::{Binding, ParamArena, Rng, Tape, Tensor, Var};

/// Worker cap: `DEEPSHORT_THREADS` if set, otherwise the machine's
/// parallelism. Results are deterministic for a fixed worker count.
pub fn worker_count() -> usize {
    std::env::var("DEEPSHORT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn merge_grads(acc: &mut [Option<Tensor<f32>>], part: Vec<Option<Tensor<f32>>>) {
    for (a, p) in acc.iter_mut().zip(part) {
        match (a.as_mut(), p) {
            (_, None) => {}
            (None, Some(t)) => *a = Some(t),
            (Some(at), Some(t)) => {
                for (x, &y) in at.as_mut_slice().iter_mut().zip(t.as_slice()) {
                    *x += y;
                }
            }
        }
    }
}

fn grad_worker<S>(
    arena: &ParamArena<f32>,
    items: &[S],
    f: &(dyn Fn(&mut Tape<f32>, &Binding, &S) -> Result<Var> + Sync),
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape: Tape<f32> = Tape::new();
    let binding = Binding::bind(&mut tape, arena)?;
    let base = tape.mark();
    let mut loss_sum = 0.0;
    for item in items {
        let loss = f(&mut tape, &binding, item)?;
        loss_sum += tape.value(loss).as_slice()[0] as f64;
        tape.backward(loss)?;
        tape.reset_to(base);
    }
    Ok((loss_sum, binding.take_grads(&mut tape)))
}

/// Run `f` once per item, backpropagate each returned loss, and sum both the
/// loss values and the parameter gradients. Items are split into contiguous
/// chunks across workers and partials are folded in chunk order, so the
/// result depends only on (items, worker count).
pub fn accumulate_grads<S: Sync>(
    arena: &ParamArena<f32>,
    items: &[S],
    threads: usize,
    f: &(dyn Fn(&mut Tape<f32>, &Binding, &S) -> Result<Var> + Sync),
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return grad_worker(arena, items, f);
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<(f64, Vec<Option<Tensor<f32>>>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|slice| scope.spawn(move || grad_worker(arena, slice, f)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut loss_sum = 0.0;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; arena.len()];
    for part in parts {
        let (l, g) = part?;
        loss_sum += l;
        merge_grads(&mut grads, g);
    }
    Ok((loss_sum, grads))
}

fn feature_worker<S>(
    arena: &ParamArena<f32>,
    items: &[S],
    f: &(dyn Fn(&mut Tape<f32>, &Binding, &S) -> Result<Var> + Sync),
) -> Result<(usize, Vec<f64>)> {
    let mut tape: Tape<f32> = Tape::new();
    let binding = Binding::bind(&mut tape, arena)?;
    let base = tape.mark();
    let mut dim = 0;
    let mut rows = Vec::new();
    for item in items {
        let var = f(&mut tape, &binding, item)?;
        let value = tape.value(var);
        let (r, d) = value.dims2();
        if r != 1 {
            return Err(Error::invalid(format!("feature must be one row, got {r}")));
        }
        if dim == 0 {
            dim = d;
        } else if dim != d {
            return Err(Error::invalid("feature width changed between samples"));
        }
        rows.extend(value.as_slice().iter().map(|&v| v as f64));
        tape.reset_to(base);
    }
    Ok((dim, rows))
}

/// Run `f` once per item (no backward) and stack the returned row vectors
/// into an f64 feature matrix, preserving item order.
pub fn batch_features<S: Sync>(
    arena: &ParamArena<f32>,
    items: &[S],
    threads: usize,
    f: &(dyn Fn(&mut Tape<f32>, &Binding, &S) -> Result<Var> + Sync),
) -> Result<Tensor<f64>> {
    if items.is_empty() {
        return Err(Error::invalid("no items to extract features from"));
    }
    let threads = threads.max(1).min(items.len());
    let parts: Vec<Result<(usize, Vec<f64>)>> = if threads == 1 {
        vec![feature_worker(arena, items, f)]
    } else {
        let chunk = items.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|slice| scope.spawn(move || feature_worker(arena, slice, f)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("feature worker panicked"))
                .collect()
        })
    };
    let mut dim = 0;
    let mut flat = Vec::new();
    for part in parts {
        let (d, rows) = part?;
        if dim == 0 {
            dim = d;
        } else if d != dim {
            return Err(Error::invalid("feature width changed between workers"));
        }
        flat.extend(rows);
    }
    Tensor::matrix(items.len(), dim, flat)
}

/// The trained object behind a run, dispatched by experiment kind.
pub enum Model {
    Mae(Mae<f32>),
    Cls(Classifier<f32>),
    Ddpm {
        backbone: Backbone<f32>,
        schedule: NoiseSchedule,
    },
}

/// Build the configured model into `arena`, seeded by the run seed.
pub fn build_model(cfg: &RunConfig, classes: usize, arena: &mut ParamArena<f32>) -> Result<Model> {
    Ok(match cfg.kind {
        ExperimentKind::Mae => Model::Mae(Mae::new(cfg.model_config()?, cfg.seed, arena)?),
        ExperimentKind::Cls => Model::Cls(Classifier::new(
            cfg.model_config()?,
            classes,
            cfg.seed,
            arena,
        )?),
        ExperimentKind::Ddpm => {
            let dc = cfg.diffusion_config()?;
            let schedule = dc.noise_schedule();
            let backbone = Backbone::new(dc.backbone.clone(), dc.classes, cfg.seed, arena)?;
            Model::Ddpm { backbone, schedule }
        }
    })
}

impl Model {
    /// Image-level feature row for representation metrics. Diffusion
    /// backbones predict noise, not features, so they refuse.
    pub fn feature(
        &self,
        tape: &mut Tape<f32>,
        binding: &Binding,
        grid: &PatchGrid<f32>,
    ) -> Result<Var> {
        match self {
            Model::Mae(m) => m.feature(tape, binding, grid),
            Model::Cls(m) => m.feature(tape, binding, grid),
            Model::Ddpm { .. } => Err(Error::invalid(
                "features are defined for mae and cls checkpoints only",
            )),
        }
    }
}

/// Everything a worker needs to compute one sample's scaled loss.
struct StepCtx<'a> {
    cfg: &'a RunConfig,
    epoch: usize,
    inv_batch: f64,
    grids: &'a [PatchGrid<f32>],
    images: &'a [Tensor<f32>],
    labels: &'a [usize],
}

impl Model {
    fn sample_loss(
        &self,
        tape: &mut Tape<f32>,
        binding: &Binding,
        ctx: &StepCtx,
        idx: usize,
    ) -> Result<Var> {
        let cfg = ctx.cfg;
        let loss = match self {
            Model::Mae(m) => {
                let mask_seed = Rng::new(cfg.seed)
                    .derive("mask")
                    .derive_u64(ctx.epoch as u64)
                    .derive_u64(idx as u64)
                    .key();
                let grid = &ctx.grids[idx];
                let mask = random_mask(grid.count(), cfg.mask_ratio, mask_seed)?;
                m.forward_loss(tape, binding, grid, &mask)?.0
            }
            Model::Cls(m) => m.loss(tape, binding, &ctx.grids[idx], ctx.labels[idx])?,
            Model::Ddpm { backbone, schedule } => {
                let mut stream = Rng::new(cfg.seed)
                    .derive("noise")
                    .derive_u64(ctx.epoch as u64)
                    .derive_u64(idx as u64)
                    .stream();
                let t = 1 + stream.below(schedule.len());
                let pair = q_sample(&ctx.images[idx], t, schedule, &mut stream)?;
                let label = cfg.conditional.then(|| ctx.labels[idx]);
                eps_loss_sample(backbone, tape, binding, &pair, label)?
            }
        };
        tape.scale(loss, ctx.inv_batch as f32)
    }
}

/// Representation metrics over a trained model: effective rank of eval
/// features, linear-probe accuracy, and KNN accuracy (train features as
/// references, eval features as queries).
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub eff_rank: f64,
    pub probe_acc: f64,
    pub knn_acc: f64,
}

/// Extract pooled features for the first `limit` samples of a split.
pub fn split_features(
    model: &Model,
    arena: &ParamArena<f32>,
    samples: &[crate::harness::data::Sample],
    limit: usize,
    patch: usize,
    threads: usize,
) -> Result<Tensor<f64>> {
    let take = limit.min(samples.len());
    let grids: Vec<PatchGrid<f32>> = samples[..take]
        .iter()
        .map(|s| patchify(&s.image, patch))
        .collect::<Result<_>>()?;
    batch_features(arena, &grids, threads, &|tape, binding, grid| {
        model.feature(tape, binding, grid)
    })
}

fn constant_rows(f: &Tensor<f64>) -> bool {
    let (n, d) = f.dims2();
    if n <= 1 {
        return true;
    }
    let data = f.as_slice();
    let first = &data[..d];
    data.chunks_exact(d).all(|row| row == first)
}

/// Effective rank of a feature matrix. Identity-at-init models emit the
/// same feature row for every input, which makes the covariance spectrum
/// all zeros; such a constant matrix reports rank 0 instead of erroring so
/// untrained checkpoints stay analyzable.
pub fn feature_rank(features: &Tensor<f64>) -> Result<f64> {
    if constant_rows(features) {
        return Ok(0.0);
    }
    Ok(rank_report(features)?.effective_rank)
}

pub fn eval_metrics(
    model: &Model,
    arena: &ParamArena<f32>,
    dataset: &Dataset,
    limit: usize,
    patch: usize,
    threads: usize,
) -> Result<EvalMetrics> {
    let ftrain = split_features(model, arena, &dataset.train, limit, patch, threads)?;
    let feval = split_features(model, arena, &dataset.eval, limit, patch, threads)?;
    let (tn, _) = ftrain.dims2();
    let (en, _) = feval.dims2();
    let train_labels: Vec<usize> = dataset.train[..tn].iter().map(|s| s.label).collect();
    let eval_labels: Vec<usize> = dataset.eval[..en].iter().map(|s| s.label).collect();
    let eff_rank = feature_rank(&feval)?;
    let probe = ProbeConfig::default();
    let preds = knn_classify(&ftrain, &train_labels, &feval, probe.k.min(tn))?;
    let knn_acc = accuracy(&preds, &eval_labels);
    let probe_acc = linear_probe(&ftrain, &train_labels, &feval, &eval_labels, &probe)?;
    Ok(EvalMetrics {
        eff_rank,
        probe_acc,
        knn_acc,
    })
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt_{epoch:05}.dsck"))
}

pub const METRICS_HEADER: &str = "epoch,step,loss,eff_rank,probe_acc,knn_acc,alpha_min,seconds";

fn explosion_context(e: Error, alpha_min: f64) -> Error {
    match e {
        Error::NormExplosion { layer, rms, limit } => Error::invalid(format!(
            "norm explosion at layer {layer} with alpha_min {alpha_min}: \
             rms {rms:.3e} exceeds {limit:.1e}; aborting the run"
        )),
        other => other,
    }
}

/// What `train` leaves behind, with in-memory copies of the headline
/// numbers so callers don't have to re-parse the CSV.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub final_eval: Option<EvalMetrics>,
}

/// Run (or resume) a training job. With `resume`, the checkpoint must come
/// from a run with the same config apart from `[state]`; training continues
/// from the stored epoch to `cfg.epochs` and appends to the metrics file.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let threads = worker_count();
    let dataset = load_dataset(cfg)?;
    let mut arena: ParamArena<f32> = ParamArena::new();
    let model = build_model(cfg, dataset.classes, &mut arena)?;

    let mut start_epoch = 0usize;
    let mut step: u64 = 0;
    let mut opt = AdamW::new(&arena, cfg.weight_decay);
    let mut checkpoints = Vec::new();
    let mut last_ckpt;

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let metrics = metrics_path(&cfg.out);

    let mut metrics_file = if let Some(ckpt_path) = resume {
        let data = load_checkpoint::<f32>(ckpt_path)?;
        if data.config.without_state() != cfg.without_state() {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint config differs from the requested run",
                ckpt_path.display()
            )));
        }
        data.apply_params(&mut arena)?;
        if let Some(restored) = data.optimizer(&arena, cfg.weight_decay)? {
            opt = restored;
        }
        start_epoch = data.config.state_epoch;
        step = data.config.state_step;
        last_ckpt = ckpt_path.to_path_buf();
        if start_epoch > cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at epoch {start_epoch}, past the configured {}",
                cfg.epochs
            )));
        }
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics)
            .map_err(|e| Error::io(&metrics, e))?
    } else {
        let mut f = std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics, e))?;
        let initial = checkpoint_path(&cfg.out, 0);
        save_checkpoint(&initial, &cfg.with_state(0, 0), &arena, Some(&opt))?;
        checkpoints.push(initial.clone());
        last_ckpt = initial;
        f
    };

    // training caches: patch grids for token models, raw images for ddpm
    let needs_grids = !matches!(cfg.kind, ExperimentKind::Ddpm);
    let grids: Vec<PatchGrid<f32>> = if needs_grids {
        dataset
            .train
            .iter()
            .map(|s| patchify(&s.image, cfg.patch))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let images: Vec<Tensor<f32>> = if needs_grids {
        Vec::new()
    } else {
        dataset.train.iter().map(|s| s.image.clone()).collect()
    };
    let labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();

    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup = warmup_steps(total_steps, cfg.warmup_frac);
    let peak = cfg.peak_lr();

    let mut epoch_losses = Vec::new();
    let mut final_eval = None;

    for epoch in start_epoch + 1..=cfg.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        Rng::new(cfg.seed)
            .derive("order")
            .derive_u64(epoch as u64)
            .stream()
            .shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let ctx = StepCtx {
                cfg,
                epoch,
                inv_batch: 1.0 / batch.len() as f64,
                grids: &grids,
                images: &images,
                labels: &labels,
            };
            let (batch_loss, grads) =
                accumulate_grads(&arena, batch, threads, &|tape, binding, &idx| {
                    model.sample_loss(tape, binding, &ctx, idx)
                })
                .map_err(|e| explosion_context(e, cfg.alpha_min))?;
            let lr = lr_at(step, total_steps, warmup, peak);
            opt.apply(&mut arena, &grads, lr)?;
            step += 1;
            // batch_loss sums per-sample losses already scaled by 1/batch
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= dataset.train.len() as f64;
        epoch_losses.push(epoch_loss);

        let is_final = epoch == cfg.epochs;
        let eval_now = !matches!(cfg.kind, ExperimentKind::Ddpm)
            && (is_final || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0));
        let eval = if eval_now {
            let m = eval_metrics(
                &model,
                &arena,
                &dataset,
                cfg.eval_samples,
                cfg.patch,
                threads,
            )?;
            if is_final {
                final_eval = Some(m);
            }
            Some(m)
        } else {
            None
        };

        if is_final || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            let path = checkpoint_path(&cfg.out, epoch);
            save_checkpoint(&path, &cfg.with_state(epoch, step), &arena, Some(&opt))?;
            checkpoints.push(path.clone());
            last_ckpt = path;
        }

        let seconds = if cfg.deterministic_timing {
            "0.000".to_string()
        } else {
            format!("{:.3}", clock.elapsed().as_secs_f64())
        };
        let (rank_s, probe_s, knn_s) = match eval {
            Some(m) => (
                format!("{:.6}", m.eff_rank),
                format!("{:.6}", m.probe_acc),
                format!("{:.6}", m.knn_acc),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            metrics_file,
            "{epoch},{step},{epoch_loss:.6},{rank_s},{probe_s},{knn_s},{},{seconds}",
            cfg.alpha_min
        )
        .map_err(|e| Error::io(&metrics, e))?;
        metrics_file.flush().map_err(|e| Error::io(&metrics, e))?;
    }

    Ok(TrainOutcome {
        out_dir: cfg.out.clone(),
        metrics,
        checkpoints,
        final_checkpoint: last_ckpt,
        epoch_losses,
        final_eval,
    })
}

/// Rebuild a model and dataset from a checkpoint and compute representation
/// metrics on it. Shared by the probe/knn/rank commands.
pub fn checkpoint_metrics(path: &Path) -> Result<(RunConfig, EvalMetrics)> {
    let data = load_checkpoint::<f32>(path)?;
    let cfg = data.config.clone();
    let dataset = load_dataset(&cfg)?;
    let mut arena: ParamArena<f32> = ParamArena::new();
    let model = build_model(&cfg, dataset.classes, &mut arena)?;
    data.apply_params(&mut arena)?;
    let metrics = eval_metrics(
        &model,
        &arena,
        &dataset,
        cfg.eval_samples,
        cfg.patch,
        worker_count(),
    )?;
    Ok((cfg, metrics))
}

/// Walk a run directory's checkpoints in epoch order and compute metrics at
/// each one. Expected epochs with no file on disk produce a warning row
/// instead of failing the whole walk.
pub fn rank_dynamics(run_dir: &Path) -> Result<String> {
    let mut present: Vec<(usize, PathBuf)> = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|ent| {
            let path = ent.ok()?.path();
            let name = path.file_name()?.to_str()?;
            let epoch: usize = name.strip_prefix("ckpt_")?.strip_suffix(".dsck")?.parse().ok()?;
            Some((epoch, path))
        })
        .collect();
    present.sort();
    let Some((_, last_path)) = present.last() else {
        return Err(Error::Checkpoint(format!(
            "no ckpt_*.dsck files under {}",
            run_dir.display()
        )));
    };
    let head = load_checkpoint::<f32>(last_path)?;
    let cfg = head.config.without_state();
    if matches!(cfg.kind, ExperimentKind::Ddpm) {
        return Err(Error::invalid(
            "features are defined for mae and cls checkpoints only",
        ));
    }
    let dataset = load_dataset(&cfg)?;

    let mut expected: Vec<usize> = vec![0];
    if cfg.checkpoint_every > 0 {
        expected.extend((1..=cfg.epochs).filter(|e| e % cfg.checkpoint_every == 0));
    }
    if cfg.epochs > 0 && *expected.last().unwrap() != cfg.epochs {
        expected.push(cfg.epochs);
    }

    let threads = worker_count();
    let mut rows = Vec::new();
    for epoch in expected {
        let found = present.iter().find(|(e, _)| *e == epoch);
        let Some((_, path)) = found else {
            rows.push(DynamicsRow {
                epoch: epoch as u64,
                alpha_min: cfg.alpha_min,
                eff_rank: f64::NAN,
                probe_acc: f64::NAN,
                knn_acc: f64::NAN,
                status: "missing checkpoint".to_string(),
            });
            continue;
        };
        let data = load_checkpoint::<f32>(path)?;
        if data.config.without_state() != cfg {
            return Err(Error::Checkpoint(format!(
                "{}: config differs from the rest of the run",
                path.display()
            )));
        }
        let mut arena: ParamArena<f32> = ParamArena::new();
        let model = build_model(&cfg, dataset.classes, &mut arena)?;
        data.apply_params(&mut arena)?;
        let m = eval_metrics(
            &model,
            &arena,
            &dataset,
            cfg.eval_samples,
            cfg.patch,
            threads,
        )?;
        rows.push(DynamicsRow {
            epoch: epoch as u64,
            alpha_min: cfg.alpha_min,
            eff_rank: m.eff_rank,
            probe_acc: m.probe_acc,
            knn_acc: m.knn_acc,
            status: "ok".to_string(),
        });
    }
    Ok(dynamics_csv(&rows))
}
