//! Datasets: procedural shape images, a 2x2 two-mode toy, and the standard
//! CIFAR-10 binary batches, all normalized to per-channel mean 0 / std 1
//! using train-split statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{DataSource, RunConfig};
use crate::tensor::{Rng, Tensor};

/// One labeled image, stored channel-major `[channels, size, size]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Train/eval splits plus the normalization that was applied to them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Per-channel mean of the raw train split.
    pub mean: Vec<f64>,
    /// Per-channel std of the raw train split (floored at 1e-6).
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    pub fn eval_labels(&self) -> Vec<usize> {
        self.eval.iter().map(|s| s.label).collect()
    }
}

// ---- synthetic shapes ----

/// (shape, color) pairs, shape-major; the first `classes` are used.
const SHAPES: usize = 4; // square, disc, triangle, bar
const COLORS: [[f64; 3]; 3] = [
    [1.00, 0.25, 0.20],
    [0.20, 0.90, 0.30],
    [0.25, 0.40, 1.00],
];
pub const MAX_SHAPE_CLASSES: usize = 10;

fn inside_shape(shape: usize, x: f64, y: f64, cx: f64, cy: f64, h: f64) -> bool {
    match shape {
        0 => (x - cx).abs() <= h && (y - cy).abs() <= h,
        1 => (x - cx).powi(2) + (y - cy).powi(2) <= h * h,
        // upward triangle: width grows linearly from apex at cy - h
        2 => {
            let dy = y - (cy - h);
            dy >= 0.0 && dy <= 2.0 * h && (x - cx).abs() <= dy / 2.0
        }
        3 => (x - cx).abs() <= h && (y - cy).abs() <= (h * 0.35).max(1.0),
        _ => unreachable!(),
    }
}

/// One procedural image: a colored shape at a random position and scale on
/// black, with brightness jitter and pixel noise. Deterministic per stream.
pub fn synth_shape_image(size: usize, class: usize, rng: &Rng) -> Result<Tensor<f32>> {
    if class >= MAX_SHAPE_CLASSES {
        return Err(Error::Dataset(format!(
            "shape class {class} outside 0..{MAX_SHAPE_CLASSES}"
        )));
    }
    if size < 8 {
        return Err(Error::Dataset(format!("shape images need size >= 8, got {size}")));
    }
    let shape = class % SHAPES;
    let color = COLORS[class / SHAPES];
    let s = size as f64;
    let mut stream = rng.stream();
    // Shapes fill a large fraction of the frame so that most patches carry
    // edge structure rather than flat background; the clamp keeps the
    // placement interval nonempty at the smallest sizes.
    let h = (s * (0.2 + 0.25 * stream.uniform_f64())).min((s - 2.0) / 2.0);
    let lo = h + 1.0;
    let hi = s - h - 1.0;
    let cx = lo + (hi - lo) * stream.uniform_f64();
    let cy = lo + (hi - lo) * stream.uniform_f64();
    let bright = 0.5 + 0.5 * stream.uniform_f64();
    let mut img: Tensor<f32> = Tensor::zeros(vec![3, size, size]);
    {
        let data = img.as_mut_slice();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    if inside_shape(shape, x as f64, y as f64, cx, cy, h) {
                        data[(c * size + y) * size + x] = (bright * color[c]) as f32;
                    }
                }
            }
        }
        for v in data.iter_mut() {
            let noisy = *v as f64 + 0.1 * stream.normal_f64();
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(img)
}

/// `n` shape images with round-robin labels `i % classes`. Each image is a
/// pure function of (seed, i), independent of n.
pub fn synth_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if classes < 2 || classes > MAX_SHAPE_CLASSES {
        return Err(Error::Dataset(format!(
            "shape class count {classes} outside 2..={MAX_SHAPE_CLASSES}"
        )));
    }
    let root = Rng::new(seed).derive("shapes");
    (0..n)
        .map(|i| {
            let label = i % classes;
            let image = synth_shape_image(size, label, &root.derive_u64(i as u64))?;
            Ok(Sample { image, label })
        })
        .collect()
}

// ---- two-mode toy ----

pub const TWO_MODE_LOW: f64 = 0.25;
pub const TWO_MODE_HIGH: f64 = 0.75;

/// 2x2 single-channel images around two intensity modes, alternating labels.
pub fn toy_two_mode(n: usize, seed: u64) -> Vec<Sample> {
    let root = Rng::new(seed).derive("two-mode");
    (0..n)
        .map(|i| {
            let label = i % 2;
            let level = if label == 0 { TWO_MODE_LOW } else { TWO_MODE_HIGH };
            let mut stream = root.derive_u64(i as u64).stream();
            let mut image: Tensor<f32> = Tensor::zeros(vec![1, 2, 2]);
            for v in image.as_mut_slice() {
                *v = (level + 0.05 * stream.normal_f64()).clamp(0.0, 1.0) as f32;
            }
            Sample { image, label }
        })
        .collect()
}

/// Which mode a raw-scale two-mode image is closest to (0 = low, 1 = high).
pub fn two_mode_label(image: &Tensor<f32>) -> usize {
    let mean = image.as_slice().iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
    usize::from(mean > 0.5 * (TWO_MODE_LOW + TWO_MODE_HIGH))
}

// ---- CIFAR-10 binary batches ----

const CIFAR_RECORD: usize = 3073; // label byte + 3 * 1024 pixel planes
const CIFAR_SIDE: usize = 32;

/// Decode every record from the `.bin` batch files under `root`, in
/// lexicographic file order. Pixels land in [0, 1] channel-major.
pub fn load_cifar10_binary(root: &Path) -> Result<Vec<Sample>> {
    let mut files: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(root, e))?
        .into_iter()
        .map(|ent| ent.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no .bin batch files under {}",
            root.display()
        )));
    }
    let mut out = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(|e| Error::io(file, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: {} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Dataset(format!(
                    "{}: label byte {label} outside 0..10",
                    file.display()
                )));
            }
            let image = Tensor::from_vec(
                vec![3, CIFAR_SIDE, CIFAR_SIDE],
                rec[1..].iter().map(|&b| b as f32 / 255.0).collect(),
            )?;
            out.push(Sample { image, label });
        }
    }
    Ok(out)
}

// ---- assembly ----

fn channel_stats(samples: &[Sample], channels: usize, size: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = size * size;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let count = (samples.len() * plane) as f64;
    for s in samples {
        let data = s.image.as_slice();
        for c in 0..channels {
            for &v in &data[c * plane..(c + 1) * plane] {
                mean[c] += v as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for s in samples {
        let data = s.image.as_slice();
        for c in 0..channels {
            for &v in &data[c * plane..(c + 1) * plane] {
                var[c] += (v as f64 - mean[c]).powi(2);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

fn normalize(samples: &mut [Sample], mean: &[f64], std: &[f64], size: usize) {
    let plane = size * size;
    for s in samples {
        let data = s.image.as_mut_slice();
        for (c, (m, sd)) in mean.iter().zip(std).enumerate() {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = ((*v as f64 - m) / sd) as f32;
            }
        }
    }
}

/// Build the dataset a run asks for, check it against the configured
/// geometry, and normalize both splits with train statistics.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (mut train, mut eval, classes) = match cfg.source {
        DataSource::SyntheticShapes => {
            if cfg.channels != 3 {
                return Err(Error::Dataset(format!(
                    "synthetic shapes are 3-channel, config says {}",
                    cfg.channels
                )));
            }
            let train = synth_shapes(cfg.train_n, cfg.classes, cfg.size, cfg.split_seed)?;
            let eval_seed = Rng::new(cfg.split_seed).derive("eval").key();
            let eval = synth_shapes(cfg.eval_n, cfg.classes, cfg.size, eval_seed)?;
            (train, eval, cfg.classes)
        }
        DataSource::ToyTwoMode => {
            if cfg.channels != 1 || cfg.size != 2 {
                return Err(Error::Dataset(format!(
                    "two-mode toy images are 1x2x2, config says {}x{}x{}",
                    cfg.channels, cfg.size, cfg.size
                )));
            }
            if cfg.classes != 2 {
                return Err(Error::Dataset("two-mode toy has exactly 2 classes".into()));
            }
            let train = toy_two_mode(cfg.train_n, cfg.split_seed);
            let eval_seed = Rng::new(cfg.split_seed).derive("eval").key();
            let eval = toy_two_mode(cfg.eval_n, eval_seed);
            (train, eval, 2)
        }
        DataSource::Cifar10Binary => {
            if cfg.channels != 3 || cfg.size != 32 {
                return Err(Error::Dataset(format!(
                    "CIFAR-10 images are 3x32x32, config says {}x{}x{}",
                    cfg.channels, cfg.size, cfg.size
                )));
            }
            if cfg.classes != 10 {
                return Err(Error::Dataset("CIFAR-10 has exactly 10 classes".into()));
            }
            let all = load_cifar10_binary(&cfg.root)?;
            let need = cfg.train_n + cfg.eval_n;
            if all.len() < need {
                return Err(Error::Dataset(format!(
                    "{} records on disk, config wants {need}",
                    all.len()
                )));
            }
            // Deterministic stride subset so small runs see varied batches.
            let stride = all.len() / need;
            let subset: Vec<Sample> = (0..need).map(|i| all[i * stride].clone()).collect();
            let eval = subset[cfg.train_n..].to_vec();
            let mut train = subset;
            train.truncate(cfg.train_n);
            (train, eval, 10)
        }
    };
    let (mean, std) = channel_stats(&train, cfg.channels, cfg.size);
    normalize(&mut train, &mean, &std, cfg.size);
    normalize(&mut eval, &mean, &std, cfg.size);
    Ok(Dataset {
        train,
        eval,
        classes,
        channels: cfg.channels,
        size: cfg.size,
        mean,
        std,
    })
}

/// Undo split normalization on one image (e.g. generated samples) back to
/// raw pixel scale. Leaves values unclamped.
pub fn denormalize(image: &Tensor<f32>, mean: &[f64], std: &[f64]) -> Tensor<f32> {
    let shape = image.shape().to_vec();
    let plane: usize = shape[1..].iter().product();
    let mut out = image.clone();
    let data = out.as_mut_slice();
    for (c, (m, sd)) in mean.iter().zip(std).enumerate() {
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = (*v as f64 * sd + m) as f32;
        }
    }
    out
}
