//! Denoising diffusion in pixel space with a token backbone whose shortcut
//! decay runs through the end of the decoder half.
//!
//! The backbone is U-ViT-flavored: patch tokens, a projected sinusoidal
//! timestep embedding added to every token, an optional class-embedding
//! token, and long skips that concatenate the output of encoder-half layer
//! j into decoder-half layer D+1-j through a learned 2d->d projection. One
//! decay schedule spans all D layers, unlike the masked autoencoder whose
//! decoder is undecayed.

use crate::blocks::{init_matrix, DecayTarget, LayerStack, ShortcutVariant, LN_EPS};
use crate::error::{Error, Result};
use crate::models::{patchify, sincos_pos_table, PatchGrid};
use crate::schedules::AlphaSchedule;
use crate::tensor::{Binding, ParamArena, ParamId, Rng, Scalar, Stream, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spans the full depth D: encoder half 1..D/2, decoder half D/2+1..D.
    pub schedule: AlphaSchedule,
    pub variant: ShortcutVariant,
    pub decay_target: DecayTarget,
    pub long_skips: bool,
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        self.schedule.depth
    }

    pub fn side(&self) -> usize {
        self.size / self.patch
    }

    pub fn patch_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.size % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.size, self.patch
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::invalid(
                "width must be a multiple of 4 for the 2-D position table",
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp ratio must be positive"));
        }
        if self.long_skips && self.depth() % 2 != 0 {
            return Err(Error::invalid(format!(
                "long skips need an even depth, got {}",
                self.depth()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub backbone: BackboneConfig,
    /// None for unconditional generation.
    pub classes: Option<usize>,
}

impl DiffusionConfig {
    pub const DEFAULT_TIMESTEPS: usize = 200;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 2e-2;

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::invalid("need at least one timestep"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta ramp [{}, {}] must stay inside (0, 1) and ascend",
                self.beta_start, self.beta_end
            )));
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return Err(Error::invalid("class conditioning needs >= 2 classes"));
            }
        }
        self.backbone.validate()
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Forward-process constants: betas, alphas = 1 - beta, and their running
/// products alpha_bar.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> NoiseSchedule {
        let mut betas = Vec::with_capacity(timesteps);
        for t in 0..timesteps {
            let frac = if timesteps == 1 {
                0.0
            } else {
                t as f64 / (timesteps - 1) as f64
            };
            betas.push(beta_start + frac * (beta_end - beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// One forward-process draw: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
#[derive(Debug, Clone)]
pub struct NoisePair<F> {
    pub x0: Tensor<F>,
    pub eps: Tensor<F>,
    pub t: usize,
    pub xt: Tensor<F>,
}

pub fn q_sample<F: Scalar>(
    x0: &Tensor<F>,
    t: usize,
    ns: &NoiseSchedule,
    stream: &mut Stream,
) -> Result<NoisePair<F>> {
    if t == 0 || t > ns.len() {
        return Err(Error::invalid(format!(
            "timestep {t} outside 1..={}",
            ns.len()
        )));
    }
    let ab = ns.alpha_bars[t - 1];
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let mut eps: Tensor<F> = Tensor::zeros(x0.shape().to_vec());
    stream.fill_normal(eps.as_mut_slice(), 1.0);
    let xt_data: Vec<F> = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&x, &e)| F::from_f64(signal * x.as_f64() + noise * e.as_f64()))
        .collect();
    let xt = Tensor::from_vec(x0.shape().to_vec(), xt_data)?;
    Ok(NoisePair {
        x0: x0.clone(),
        eps,
        t,
        xt,
    })
}

/// Sinusoidal embedding of a scalar timestep: dim/2 log-spaced frequencies,
/// sines then cosines.
pub fn time_embedding<F: Scalar>(dim: usize, t: usize) -> Result<Tensor<F>> {
    if dim % 2 != 0 {
        return Err(Error::invalid("time embedding width must be even"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        data.push(F::from_f64((t as f64 * omega).sin()));
    }
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        data.push(F::from_f64((t as f64 * omega).cos()));
    }
    Tensor::from_vec(vec![1, dim], data)
}

/// Pre-norm token features and the epsilon prediction, per patch.
pub struct EpsOut {
    pub pre: Var,
    pub eps: Var,
}

pub struct Backbone<F: Scalar> {
    pub cfg: BackboneConfig,
    pub classes: Option<usize>,
    pub stack: LayerStack,
    pos: Tensor<F>,
    embed_w: ParamId,
    embed_b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    class_emb: Option<ParamId>,
    pub fuse: Vec<(ParamId, ParamId)>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(
        cfg: BackboneConfig,
        classes: Option<usize>,
        seed: u64,
        arena: &mut ParamArena<F>,
    ) -> Result<Backbone<F>> {
        cfg.validate()?;
        let rng = Rng::new(seed).derive("init");
        let d = cfg.dim;
        let plen = cfg.patch_len();
        let embed_w = arena.register(
            "ddpm.embed.w",
            init_matrix(&rng, "ddpm.embed.w", plen, d),
            true,
        );
        let embed_b = arena.register("ddpm.embed.b", Tensor::zeros(vec![1, d]), false);
        let time_w = arena.register("ddpm.time.w", init_matrix(&rng, "ddpm.time.w", d, d), true);
        let time_b = arena.register("ddpm.time.b", Tensor::zeros(vec![1, d]), false);
        let class_emb = match classes {
            Some(c) => {
                let mut emb = Tensor::zeros(vec![c, d]);
                rng.derive("ddpm.class.emb")
                    .stream()
                    .fill_normal(emb.as_mut_slice(), 0.02);
                Some(arena.register("ddpm.class.emb", emb, false))
            }
            None => None,
        };
        let stack = LayerStack::new(
            arena,
            &rng,
            "ddpm",
            d,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.schedule.clone(),
            cfg.variant,
            cfg.decay_target,
            true,
        )?;
        let mut fuse = Vec::new();
        if cfg.long_skips {
            for j in 0..cfg.depth() / 2 {
                let wname = format!("ddpm.{j}.fuse.w");
                let w = arena.register(&wname, init_matrix(&rng, &wname, 2 * d, d), true);
                let b = arena.register(&format!("ddpm.{j}.fuse.b"), Tensor::zeros(vec![1, d]), false);
                fuse.push((w, b));
            }
        }
        let norm_g = arena.register("ddpm.norm.g", Tensor::filled(vec![1, d], F::one()), false);
        let norm_b = arena.register("ddpm.norm.b", Tensor::zeros(vec![1, d]), false);
        // Zero-init head: the untrained model predicts zero noise.
        let head_w = arena.register("ddpm.head.w", Tensor::zeros(vec![d, plen]), true);
        let head_b = arena.register("ddpm.head.b", Tensor::zeros(vec![1, plen]), false);
        let pos = sincos_pos_table(d, cfg.side())?;
        Ok(Backbone {
            cfg,
            classes,
            stack,
            pos,
            embed_w,
            embed_b,
            time_w,
            time_b,
            class_emb,
            fuse,
            norm_g,
            norm_b,
            head_w,
            head_b,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        t: usize,
        label: Option<usize>,
    ) -> Result<EpsOut> {
        let n = self.cfg.patch_count();
        let (gn, plen) = grid.patches.dims2();
        if gn != n || plen != self.cfg.patch_len() {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: vec![n, self.cfg.patch_len()],
                rhs: vec![gn, plen],
            });
        }
        let patches = tape.constant(grid.patches.clone())?;
        let pos = tape.constant(self.pos.clone())?;
        let e = tape.matmul(patches, binding.var(self.embed_w))?;
        let e = tape.add_row(e, binding.var(self.embed_b))?;
        let mut x = tape.add(e, pos)?;

        // timestep conditioning on every patch token
        let temb = tape.constant(time_embedding(self.cfg.dim, t)?)?;
        let tproj = tape.matmul(temb, binding.var(self.time_w))?;
        let tproj = tape.add_row(tproj, binding.var(self.time_b))?;
        x = tape.add_row(x, tproj)?;

        // class token appended after the patch tokens
        let rows = match (label, self.class_emb) {
            (Some(l), Some(emb)) => {
                let c = self.classes.unwrap();
                if l >= c {
                    return Err(Error::invalid(format!("label {l} outside {c} classes")));
                }
                let row = tape.gather_rows(binding.var(emb), &[l])?;
                let patch_rows: Vec<usize> = (0..n).collect();
                let p = tape.scatter_rows(x, &patch_rows, n + 1)?;
                let cl = tape.scatter_rows(row, &[n], n + 1)?;
                x = tape.add(p, cl)?;
                n + 1
            }
            (Some(_), None) => {
                return Err(Error::invalid(
                    "label given to an unconditional diffusion model",
                ));
            }
            _ => n,
        };
        let _ = rows;

        let depth = self.stack.depth();
        let half = depth / 2;
        let mut taps: Vec<Var> = Vec::with_capacity(half);
        for l in 1..=depth {
            if self.cfg.long_skips && l > half {
                // decoder-half layer l consumes encoder-half tap D+1-l
                let tap = taps[depth - l];
                let cat = tape.concat_cols(x, tap)?;
                let (fw, fb) = self.fuse[l - half - 1];
                let fused = tape.matmul(cat, binding.var(fw))?;
                x = tape.add_row(fused, binding.var(fb))?;
            }
            x = self.stack.forward_layer(tape, binding, x, l)?;
            if self.cfg.long_skips && l <= half {
                taps.push(x);
            }
        }
        let normed = tape.layer_norm(
            x,
            binding.var(self.norm_g),
            binding.var(self.norm_b),
            F::from_f64(LN_EPS),
        )?;
        let patch_rows: Vec<usize> = (0..n).collect();
        let feats = tape.gather_rows(normed, &patch_rows)?;
        let out = tape.matmul(feats, binding.var(self.head_w))?;
        let eps = tape.add_row(out, binding.var(self.head_b))?;
        Ok(EpsOut { pre: x, eps })
    }
}

/// Squared error of the noise prediction against `target` patches, summed
/// over all entries (one sample's contribution; batch averaging is the
/// caller's).
pub fn eps_loss_from_pred<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    target: &Tensor<F>,
) -> Result<Var> {
    let tgt = tape.constant(target.clone())?;
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_all(sq)
}

/// Single-sample epsilon loss: forward the noised image at its timestep and
/// compare against the true noise.
pub fn eps_loss_sample<F: Scalar>(
    model: &Backbone<F>,
    tape: &mut Tape<F>,
    binding: &Binding,
    pair: &NoisePair<F>,
    label: Option<usize>,
) -> Result<Var> {
    let grid = patchify(&pair.xt, model.cfg.patch)?;
    let out = model.forward(tape, binding, &grid, pair.t, label)?;
    let eps_grid = patchify(&pair.eps, model.cfg.patch)?;
    eps_loss_from_pred(tape, out.eps, &eps_grid.patches)
}

/// Mean epsilon loss over a small batch, timesteps drawn uniformly from
/// 1..=T off `stream`. Builds the whole batch on one tape; training loops
/// stream samples instead.
pub fn eps_loss<F: Scalar>(
    model: &Backbone<F>,
    tape: &mut Tape<F>,
    binding: &Binding,
    ns: &NoiseSchedule,
    batch: &[(Tensor<F>, Option<usize>)],
    stream: &mut Stream,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty diffusion batch"));
    }
    let mut total: Option<Var> = None;
    for (x0, label) in batch {
        let t = 1 + stream.below(ns.len());
        let pair = q_sample(x0, t, ns, stream)?;
        let loss = eps_loss_sample(model, tape, binding, &pair, *label)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    tape.scale(total.unwrap(), F::from_f64(1.0 / batch.len() as f64))
}

/// Ancestral DDPM sampling: x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) epshat)
/// / sqrt(alpha_t) + sigma_t z with sigma_t^2 = beta_t and z = 0 at t = 1.
/// Each sample runs its own stream derived from `seed`, so results do not
/// depend on batching.
pub fn ddpm_sample<F: Scalar>(
    model: &Backbone<F>,
    arena: &ParamArena<F>,
    ns: &NoiseSchedule,
    labels: &[Option<usize>],
    seed: u64,
) -> Result<Vec<Tensor<F>>> {
    let cfg = &model.cfg;
    let shape = vec![cfg.channels, cfg.size, cfg.size];
    let root = Rng::new(seed).derive("sample");
    let mut out = Vec::with_capacity(labels.len());
    let mut tape: Tape<F> = Tape::new();
    for (i, &label) in labels.iter().enumerate() {
        let mut stream = root.derive_u64(i as u64).stream();
        let mut x = Tensor::zeros(shape.clone());
        stream.fill_normal(x.as_mut_slice(), 1.0);
        for t in (1..=ns.len()).rev() {
            tape.clear();
            let binding = Binding::bind(&mut tape, arena)?;
            let grid = patchify(&x, cfg.patch)?;
            let pred = model.forward(&mut tape, &binding, &grid, t, label)?;
            let eps_img = grid.image_from(tape.value(pred.eps))?;
            let beta = ns.betas[t - 1];
            let alpha = ns.alphas[t - 1];
            let ab = ns.alpha_bars[t - 1];
            let coeff = beta / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            let sigma = beta.sqrt();
            for (xv, &ev) in x.as_mut_slice().iter_mut().zip(eps_img.as_slice()) {
                let mean = (xv.as_f64() - coeff * ev.as_f64()) * inv_sqrt_alpha;
                let z = if t > 1 { stream.normal_f64() } else { 0.0 };
                *xv = F::from_f64(mean + sigma * z);
            }
            if !x.all_finite() {
                return Err(Error::invalid(format!(
                    "sampling diverged at timestep {t} for sample {i}"
                )));
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// Biased RBF-kernel maximum mean discrepancy between two sample sets, with
/// the bandwidth set to the median pairwise distance over the pooled set.
/// Zero exactly when the sets coincide; larger means more distributional
/// separation.
pub fn kernel_mmd<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("kernel MMD needs >= 2 samples per side"));
    }
    let flat = |xs: &[Tensor<F>]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|t| t.as_slice().iter().map(|v| v.as_f64()).collect())
            .collect()
    };
    let fa = flat(a);
    let fb = flat(b);
    let dim = fa[0].len();
    if fa.iter().chain(&fb).any(|v| v.len() != dim) {
        return Err(Error::invalid("MMD samples differ in element count"));
    }
    let dist2 = |x: &[f64], y: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (u, v) in x.iter().zip(y) {
            let d = u - v;
            acc += d * d;
        }
        acc
    };
    let pooled: Vec<&Vec<f64>> = fa.iter().chain(fb.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(dist2(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|x, y| x.total_cmp(y));
    let median = dists[dists.len() / 2];
    let bandwidth = if median > 0.0 { median } else { 1.0 };
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel_mean = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for x in xs {
            for y in ys {
                acc += (-gamma * dist2(x, y)).exp();
            }
        }
        acc / (xs.len() * ys.len()) as f64
    };
    Ok(kernel_mean(&fa, &fa) + kernel_mean(&fb, &fb) - 2.0 * kernel_mean(&fa, &fb))
}
