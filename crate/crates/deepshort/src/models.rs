//! Masked autoencoder with a decay-scheduled encoder, plus the supervised
//! token classifier used for rank-dynamics runs.
//!
//! The MAE encoder applies the shortcut decay schedule; the decoder always
//! runs standard residual connections (gain 1). Encoder activations tapped
//! every `skip_period` layers are re-injected into the matching decoder
//! layer by channel concatenation and a learned 2d->d projection. The CLS
//! token bypasses masking, carries no position embedding, is excluded from
//! skip taps, and its post-norm embedding is the feature used by all probes.

use std::io::Write as _;
use std::path::Path;

use crate::blocks::{init_matrix, DecayTarget, LayerStack, ShortcutVariant, LN_EPS};
use crate::error::{Error, Result};
use crate::schedules::{AlphaSchedule, ScheduleKind};
use crate::tensor::{Binding, ParamArena, ParamId, Rng, Scalar, Tape, Tensor, Var};

/// Variance floor in the per-patch target normalization; keeps constant
/// patches from dividing by zero.
pub const PIXEL_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub schedule: AlphaSchedule,
    pub variant: ShortcutVariant,
    pub decay_target: DecayTarget,
    pub skip_period: usize,
    pub use_skips: bool,
    pub cls_token: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32x3 images, 4x4 patches, width 128, encoder
    /// depth 6 (decoder 3), 75% masking, linear decay to 0.6.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            size: 32,
            channels: 3,
            patch: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            schedule: AlphaSchedule::new(ScheduleKind::Linear, 6, 0.6).unwrap(),
            variant: ShortcutVariant::Decayed,
            decay_target: DecayTarget::Both,
            skip_period: 2,
            use_skips: true,
            cls_token: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.schedule.depth
    }

    pub fn decoder_depth(&self) -> usize {
        self.depth() / self.skip_period
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
        if self.skip_period == 0 || self.depth() % self.skip_period != 0 {
            return Err(Error::invalid(format!(
                "encoder depth {} not divisible by skip period {}",
                self.depth(),
                self.skip_period
            )));
        }
        if self.decoder_depth() == 0 {
            return Err(Error::invalid("decoder depth is zero"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Patch decomposition of one [channels, size, size] image, with per-patch
/// moments cached for the normalized pixel loss. Patch vectors are
/// channel-major, patches ordered row-major over the grid.
#[derive(Debug, Clone)]
pub struct PatchGrid<F> {
    pub patches: Tensor<F>,
    pub means: Vec<f64>,
    /// Biased (1/n) per-patch variances of the raw pixel values.
    pub vars: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
}

pub fn patchify<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<PatchGrid<F>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "expected [channels, size, size] image, got shape {shape:?}"
        )));
    }
    let (channels, size) = (shape[0], shape[1]);
    if shape[2] != size {
        return Err(Error::invalid("image must be square"));
    }
    if patch == 0 || size % patch != 0 {
        return Err(Error::invalid(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    let side = size / patch;
    let n = side * side;
    let plen = patch * patch * channels;
    let src = image.as_slice();
    let mut data = Vec::with_capacity(n * plen);
    for py in 0..side {
        for px in 0..side {
            for c in 0..channels {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let base = c * size * size + y * size + px * patch;
                    data.extend_from_slice(&src[base..base + patch]);
                }
            }
        }
    }
    let patches = Tensor::matrix(n, plen, data)?;
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    for i in 0..n {
        let row = patches.row_slice(i);
        let mut mean = 0.0f64;
        for &v in row {
            mean += v.as_f64();
        }
        mean /= plen as f64;
        let mut var = 0.0f64;
        for &v in row {
            let d = v.as_f64() - mean;
            var += d * d;
        }
        var /= plen as f64;
        means.push(mean);
        vars.push(var);
    }
    Ok(PatchGrid {
        patches,
        means,
        vars,
        size,
        channels,
        patch,
    })
}

impl<F: Scalar> PatchGrid<F> {
    pub fn count(&self) -> usize {
        (self.size / self.patch) * (self.size / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Per-patch normalized pixels: (x - mean) / sqrt(var + eps).
    pub fn normalized_row(&self, i: usize) -> Vec<F> {
        let sd = (self.vars[i] + PIXEL_EPS).sqrt();
        self.patches
            .row_slice(i)
            .iter()
            .map(|v| F::from_f64((v.as_f64() - self.means[i]) / sd))
            .collect()
    }

    pub fn to_image(&self) -> Tensor<F> {
        self.image_from(&self.patches).unwrap()
    }

    /// Reassemble an image from any patch matrix with this grid's geometry.
    pub fn image_from(&self, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, plen) = patches.dims2();
        if n != self.count() || plen != self.patch_len() {
            return Err(Error::ShapeMismatch {
                op: "image_from",
                lhs: vec![self.count(), self.patch_len()],
                rhs: vec![n, plen],
            });
        }
        let side = self.size / self.patch;
        let mut out = vec![F::from_f64(0.0); self.channels * self.size * self.size];
        for py in 0..side {
            for px in 0..side {
                let row = patches.row_slice(py * side + px);
                let mut k = 0;
                for c in 0..self.channels {
                    for dy in 0..self.patch {
                        let y = py * self.patch + dy;
                        let base = c * self.size * self.size + y * self.size + px * self.patch;
                        out[base..base + self.patch]
                            .copy_from_slice(&row[k..k + self.patch]);
                        k += self.patch;
                    }
                }
            }
        }
        Tensor::from_vec(vec![self.channels, self.size, self.size], out)
    }
}

/// A kept/masked partition of patch indices, both halves sorted ascending.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    /// No masking: every patch kept. Evaluation features are extracted this
    /// way (rank/probe metrics run on unmasked images).
    pub fn keep_all(n: usize) -> MaskSpec {
        MaskSpec {
            kept: (0..n).collect(),
            masked: Vec::new(),
            ratio: 0.0,
            seed: 0,
        }
    }

    /// Check the two halves partition 0..n.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kept.len() + self.masked.len() != n {
            return Err(Error::invalid(format!(
                "mask covers {} of {n} patches",
                self.kept.len() + self.masked.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.kept.iter().chain(&self.masked) {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!("bad or duplicate patch index {i}")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Uniformly random mask over `n` patches: a seeded permutation is drawn and
/// its first round(ratio * n) entries are masked.
pub fn random_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::DegenerateMask(format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::DegenerateMask(format!(
            "ratio {ratio} on {n} patches masks {k}; need a proper partition"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stream = Rng::new(seed).derive("mask").stream();
    stream.shuffle(&mut perm);
    let mut masked = perm[..k].to_vec();
    let mut kept = perm[k..].to_vec();
    masked.sort_unstable();
    kept.sort_unstable();
    Ok(MaskSpec {
        kept,
        masked,
        ratio,
        seed,
    })
}

/// Fixed 2-D sinusoidal position table for a side x side grid: half the
/// width encodes the column, half the row, each as interleaved-free
/// [sin(p*w_i)..., cos(p*w_i)...] with dim/4 log-spaced frequencies.
pub fn sincos_pos_table<F: Scalar>(dim: usize, side: usize) -> Result<Tensor<F>> {
    if dim % 4 != 0 {
        return Err(Error::invalid(format!(
            "position table width {dim} must be a multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(side * side * dim);
    for y in 0..side {
        for x in 0..side {
            for &(pos, _) in &[(x as f64, 0), (y as f64, 1)] {
                for &w in &omega {
                    data.push(F::from_f64((pos * w).sin()));
                }
                for &w in &omega {
                    data.push(F::from_f64((pos * w).cos()));
                }
            }
        }
    }
    Tensor::from_vec(vec![side * side, dim], data)
}

/// Encoder outputs for one image: the raw (pre-norm) token stream, the
/// post-norm stream, and the pre-norm skip taps restricted to kept-patch
/// rows. `kept_rows` are token-row indices of the kept patches (offset by
/// one when a CLS token is present).
pub struct Encoded {
    pub pre: Var,
    pub normed: Var,
    pub taps: Vec<Var>,
    pub kept_rows: Vec<usize>,
    pub has_cls: bool,
}

pub struct Mae<F: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: LayerStack,
    pub decoder: LayerStack,
    pos: Tensor<F>,
    embed_w: ParamId,
    embed_b: ParamId,
    cls: Option<ParamId>,
    enc_norm_g: ParamId,
    enc_norm_b: ParamId,
    mask_token: ParamId,
    fuse: Vec<(ParamId, ParamId)>,
    dec_norm_g: ParamId,
    dec_norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Scalar> Mae<F> {
    pub fn new(cfg: ModelConfig, seed: u64, arena: &mut ParamArena<F>) -> Result<Mae<F>> {
        cfg.validate()?;
        let rng = Rng::new(seed).derive("init");
        let d = cfg.dim;
        let plen = cfg.patch_len();

        let embed_w = arena.register("enc.embed.w", init_matrix(&rng, "enc.embed.w", plen, d), true);
        let embed_b = arena.register("enc.embed.b", Tensor::zeros(vec![1, d]), false);
        let cls = if cfg.cls_token {
            let mut tok = Tensor::zeros(vec![1, d]);
            rng.derive("enc.cls").stream().fill_normal(tok.as_mut_slice(), 0.02);
            Some(arena.register("enc.cls", tok, false))
        } else {
            None
        };
        let encoder = LayerStack::new(
            arena,
            &rng,
            "enc",
            d,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.schedule.clone(),
            cfg.variant,
            cfg.decay_target,
            true,
        )?;
        let enc_norm_g = arena.register("enc.norm.g", Tensor::filled(vec![1, d], F::one()), false);
        let enc_norm_b = arena.register("enc.norm.b", Tensor::zeros(vec![1, d]), false);

        // Decoder: plain residual blocks, no decay.
        let dec_schedule = AlphaSchedule::new(ScheduleKind::Constant, cfg.decoder_depth(), 1.0)?;
        let decoder = LayerStack::new(
            arena,
            &rng,
            "dec",
            d,
            cfg.heads,
            cfg.mlp_ratio,
            dec_schedule,
            ShortcutVariant::Baseline,
            DecayTarget::Both,
            true,
        )?;
        let mask_token = arena.register("dec.mask", Tensor::zeros(vec![1, d]), false);
        let mut fuse = Vec::with_capacity(cfg.decoder_depth());
        for j in 0..cfg.decoder_depth() {
            let wname = format!("dec.{j}.fuse.w");
            let w = arena.register(&wname, init_matrix(&rng, &wname, 2 * d, d), true);
            let b = arena.register(&format!("dec.{j}.fuse.b"), Tensor::zeros(vec![1, d]), false);
            fuse.push((w, b));
        }
        let dec_norm_g = arena.register("dec.norm.g", Tensor::filled(vec![1, d], F::one()), false);
        let dec_norm_b = arena.register("dec.norm.b", Tensor::zeros(vec![1, d]), false);
        // Zero-init head: an untrained model reconstructs the bias image.
        let head_w = arena.register("dec.head.w", Tensor::zeros(vec![d, plen]), true);
        let head_b = arena.register("dec.head.b", Tensor::zeros(vec![1, plen]), false);

        let pos = sincos_pos_table(d, cfg.side())?;
        Ok(Mae {
            cfg,
            encoder,
            decoder,
            pos,
            embed_w,
            embed_b,
            cls,
            enc_norm_g,
            enc_norm_b,
            mask_token,
            fuse,
            dec_norm_g,
            dec_norm_b,
            head_w,
            head_b,
        })
    }

    /// Embed the kept patches (linear projection + position entries), in
    /// ascending patch order.
    pub fn embed_kept(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let plen = self.cfg.patch_len();
        let d = self.cfg.dim;
        let k = mask.kept.len();
        let mut pdata = Vec::with_capacity(k * plen);
        let mut posd = Vec::with_capacity(k * d);
        for &i in &mask.kept {
            pdata.extend_from_slice(grid.patches.row_slice(i));
            posd.extend_from_slice(self.pos.row_slice(i));
        }
        let patches = tape.constant(Tensor::matrix(k, plen, pdata)?)?;
        let pos = tape.constant(Tensor::matrix(k, d, posd)?)?;
        let e = tape.matmul(patches, binding.var(self.embed_w))?;
        let e = tape.add_row(e, binding.var(self.embed_b))?;
        tape.add(e, pos)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        mask: &MaskSpec,
    ) -> Result<Encoded> {
        mask.validate(self.cfg.patch_count())?;
        let k = mask.kept.len();
        if k == 0 {
            return Err(Error::DegenerateMask("no kept patches to encode".into()));
        }
        let offset = usize::from(self.cls.is_some());
        let tokens = self.embed_kept(tape, binding, grid, mask)?;
        let t = k + offset;
        let kept_rows: Vec<usize> = (offset..t).collect();
        let mut x = if let Some(cls) = self.cls {
            let c = tape.scatter_rows(binding.var(cls), &[0], t)?;
            let p = tape.scatter_rows(tokens, &kept_rows, t)?;
            tape.add(c, p)?
        } else {
            tokens
        };
        let mut taps = Vec::with_capacity(self.cfg.decoder_depth());
        for l in 1..=self.encoder.depth() {
            x = self.encoder.forward_layer(tape, binding, x, l)?;
            if l % self.cfg.skip_period == 0 {
                taps.push(tape.gather_rows(x, &kept_rows)?);
            }
        }
        let normed = tape.layer_norm(
            x,
            binding.var(self.enc_norm_g),
            binding.var(self.enc_norm_b),
            F::from_f64(LN_EPS),
        )?;
        Ok(Encoded {
            pre: x,
            normed,
            taps,
            kept_rows,
            has_cls: offset == 1,
        })
    }

    /// Rebuild the full patch sequence (mask token at masked positions,
    /// position entries added), fuse skip taps layer by layer, and map to
    /// per-patch pixel predictions.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        enc: &Encoded,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let n = self.cfg.patch_count();
        let depth = self.decoder.depth();
        if self.cfg.use_skips && enc.taps.len() != depth {
            return Err(Error::invalid(format!(
                "skip bundle carries {} taps for decoder depth {depth}",
                enc.taps.len()
            )));
        }
        let kept_feats = tape.gather_rows(enc.normed, &enc.kept_rows)?;
        let mask_rep = if mask.masked.is_empty() {
            None
        } else {
            Some(tape.repeat_row(binding.var(self.mask_token), mask.masked.len())?)
        };
        // Scatter to full length; zeros elsewhere are overwritten by the
        // other half of the partition.
        let rebuild = |tape: &mut Tape<F>, kept_part: Var| -> Result<Var> {
            let mut s = tape.scatter_rows(kept_part, &mask.kept, n)?;
            if let Some(m) = mask_rep {
                let ms = tape.scatter_rows(m, &mask.masked, n)?;
                s = tape.add(s, ms)?;
            }
            Ok(s)
        };
        let pos = tape.constant(self.pos.clone())?;
        let mut stream = rebuild(tape, kept_feats)?;
        stream = tape.add(stream, pos)?;
        for j in 1..=depth {
            if self.cfg.use_skips {
                let skip = rebuild(tape, enc.taps[j - 1])?;
                let cat = tape.concat_cols(stream, skip)?;
                let (fw, fb) = self.fuse[j - 1];
                let fused = tape.matmul(cat, binding.var(fw))?;
                stream = tape.add_row(fused, binding.var(fb))?;
            }
            stream = self.decoder.forward_layer(tape, binding, stream, j)?;
        }
        let normed = tape.layer_norm(
            stream,
            binding.var(self.dec_norm_g),
            binding.var(self.dec_norm_b),
            F::from_f64(LN_EPS),
        )?;
        let out = tape.matmul(normed, binding.var(self.head_w))?;
        tape.add_row(out, binding.var(self.head_b))
    }

    /// Mean squared error against per-patch normalized targets, masked
    /// patches only.
    pub fn mae_loss(
        &self,
        tape: &mut Tape<F>,
        pred: Var,
        grid: &PatchGrid<F>,
        mask: &MaskSpec,
    ) -> Result<Var> {
        if mask.masked.is_empty() {
            return Err(Error::invalid("loss needs at least one masked patch"));
        }
        let plen = self.cfg.patch_len();
        let mut tdata = Vec::with_capacity(mask.masked.len() * plen);
        for &i in &mask.masked {
            tdata.extend(grid.normalized_row(i));
        }
        let target = tape.constant(Tensor::matrix(mask.masked.len(), plen, tdata)?)?;
        let pm = tape.gather_rows(pred, &mask.masked)?;
        let diff = tape.sub(pm, target)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean_all(sq)
    }

    pub fn forward_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        mask: &MaskSpec,
    ) -> Result<(Var, Var)> {
        let enc = self.encode(tape, binding, grid, mask)?;
        let pred = self.decode(tape, binding, &enc, mask)?;
        let loss = self.mae_loss(tape, pred, grid, mask)?;
        Ok((loss, pred))
    }

    /// Image-level feature on the unmasked image: post-norm CLS embedding,
    /// or the token mean when no CLS token is configured.
    pub fn feature(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
    ) -> Result<Var> {
        let mask = MaskSpec::keep_all(self.cfg.patch_count());
        let enc = self.encode(tape, binding, grid, &mask)?;
        pooled_feature(tape, &enc)
    }

    /// Reconstruction in pixel space: model predictions (un-normalized with
    /// the target patch moments) at masked positions, ground truth at kept
    /// positions.
    pub fn reconstruction(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        mask: &MaskSpec,
    ) -> Result<Tensor<F>> {
        let enc = self.encode(tape, binding, grid, mask)?;
        let pred = self.decode(tape, binding, &enc, mask)?;
        let pv = tape.value(pred);
        let mut full = grid.patches.clone();
        for &i in &mask.masked {
            let sd = (grid.vars[i] + PIXEL_EPS).sqrt();
            for j in 0..self.cfg.patch_len() {
                full.set(i, j, F::from_f64(pv.at(i, j).as_f64() * sd + grid.means[i]));
            }
        }
        grid.image_from(&full)
    }
}

fn pooled_feature<F: Scalar>(tape: &mut Tape<F>, enc: &Encoded) -> Result<Var> {
    if enc.has_cls {
        tape.gather_rows(enc.normed, &[0])
    } else {
        let t = tape.value(enc.normed).dims2().0;
        let avg = Tensor::matrix(1, t, vec![F::from_f64(1.0 / t as f64); t])?;
        let avg = tape.constant(avg)?;
        tape.matmul(avg, enc.normed)
    }
}

/// Supervised classifier: the same decay-scheduled token encoder on the full
/// (unmasked) patch sequence, with a linear head on the CLS feature.
pub struct Classifier<F: Scalar> {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub stack: LayerStack,
    pos: Tensor<F>,
    embed_w: ParamId,
    embed_b: ParamId,
    cls: Option<ParamId>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(
        cfg: ModelConfig,
        classes: usize,
        seed: u64,
        arena: &mut ParamArena<F>,
    ) -> Result<Classifier<F>> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        let rng = Rng::new(seed).derive("init");
        let d = cfg.dim;
        let embed_w = arena.register("cls.embed.w", init_matrix(&rng, "cls.embed.w", cfg.patch_len(), d), true);
        let embed_b = arena.register("cls.embed.b", Tensor::zeros(vec![1, d]), false);
        let cls = if cfg.cls_token {
            let mut tok = Tensor::zeros(vec![1, d]);
            rng.derive("cls.tok").stream().fill_normal(tok.as_mut_slice(), 0.02);
            Some(arena.register("cls.tok", tok, false))
        } else {
            None
        };
        let stack = LayerStack::new(
            arena,
            &rng,
            "cls",
            d,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.schedule.clone(),
            cfg.variant,
            cfg.decay_target,
            true,
        )?;
        let norm_g = arena.register("cls.norm.g", Tensor::filled(vec![1, d], F::one()), false);
        let norm_b = arena.register("cls.norm.b", Tensor::zeros(vec![1, d]), false);
        // The head must not start at zero: blocks are identity at init, so
        // features are input-independent and a zero head would cancel its own
        // gradient on label-balanced batches, freezing the whole model.
        let head_w = arena.register("cls.head.w", init_matrix(&rng, "cls.head.w", d, classes), true);
        let head_b = arena.register("cls.head.b", Tensor::zeros(vec![1, classes]), false);
        let pos = sincos_pos_table(d, cfg.side())?;
        Ok(Classifier {
            cfg,
            classes,
            stack,
            pos,
            embed_w,
            embed_b,
            cls,
            norm_g,
            norm_b,
            head_w,
            head_b,
        })
    }

    fn encode(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
    ) -> Result<Encoded> {
        let n = self.cfg.patch_count();
        let patches = tape.constant(grid.patches.clone())?;
        let pos = tape.constant(self.pos.clone())?;
        let e = tape.matmul(patches, binding.var(self.embed_w))?;
        let e = tape.add_row(e, binding.var(self.embed_b))?;
        let tokens = tape.add(e, pos)?;
        let offset = usize::from(self.cls.is_some());
        let t = n + offset;
        let kept_rows: Vec<usize> = (offset..t).collect();
        let mut x = if let Some(cls) = self.cls {
            let c = tape.scatter_rows(binding.var(cls), &[0], t)?;
            let p = tape.scatter_rows(tokens, &kept_rows, t)?;
            tape.add(c, p)?
        } else {
            tokens
        };
        x = self.stack.forward(tape, binding, x)?;
        let normed = tape.layer_norm(
            x,
            binding.var(self.norm_g),
            binding.var(self.norm_b),
            F::from_f64(LN_EPS),
        )?;
        Ok(Encoded {
            pre: x,
            normed,
            taps: Vec::new(),
            kept_rows,
            has_cls: offset == 1,
        })
    }

    pub fn feature(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
    ) -> Result<Var> {
        let enc = self.encode(tape, binding, grid)?;
        pooled_feature(tape, &enc)
    }

    pub fn logits(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
    ) -> Result<Var> {
        let feat = self.feature(tape, binding, grid)?;
        let out = tape.matmul(feat, binding.var(self.head_w))?;
        tape.add_row(out, binding.var(self.head_b))
    }

    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        grid: &PatchGrid<F>,
        label: usize,
    ) -> Result<Var> {
        if label >= self.classes {
            return Err(Error::invalid(format!(
                "label {label} outside {} classes",
                self.classes
            )));
        }
        let logits = self.logits(tape, binding, grid)?;
        tape.cross_entropy(logits, &[label])
    }
}

/// Replace masked patches with per-channel fill values (display helper for
/// the "masked input" row of reconstruction grids).
pub fn masked_fill<F: Scalar>(
    grid: &PatchGrid<F>,
    mask: &MaskSpec,
    fill: &[f64],
) -> Result<Tensor<F>> {
    if fill.len() != grid.channels {
        return Err(Error::invalid(format!(
            "{} fill values for {} channels",
            fill.len(),
            grid.channels
        )));
    }
    let mut patches = grid.patches.clone();
    let pp = grid.patch * grid.patch;
    for &i in &mask.masked {
        for c in 0..grid.channels {
            for j in 0..pp {
                patches.set(i, c * pp + j, F::from_f64(fill[c]));
            }
        }
    }
    grid.image_from(&patches)
}

/// Map a [channels, size, size] image to interleaved 8-bit RGB, inverting
/// the per-channel normalization (v*std + mean, clamped to [0,1]).
pub fn image_rgb<F: Scalar>(img: &Tensor<F>, mean: &[f64], std: &[f64]) -> Result<Vec<u8>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("expected [channels, size, size] image"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot render {c} channels as RGB")));
    }
    if mean.len() != c || std.len() != c {
        return Err(Error::invalid("channel statistics length mismatch"));
    }
    let src = img.as_slice();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let chan = if c == 1 { 0 } else { ch };
                let v = src[chan * h * w + y * w + x].as_f64() * std[chan] + mean[chan];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Tile equally sized RGB cells into one image, row-major.
pub fn tile_grid(
    rows: &[Vec<Vec<u8>>],
    cell_w: usize,
    cell_h: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::invalid("empty image grid"));
    }
    let cols = rows[0].len();
    for row in rows {
        if row.len() != cols {
            return Err(Error::invalid("ragged image grid"));
        }
        for cell in row {
            if cell.len() != cell_w * cell_h * 3 {
                return Err(Error::invalid("grid cell size mismatch"));
            }
        }
    }
    let width = cols * cell_w;
    let height = rows.len() * cell_h;
    let mut out = vec![0u8; width * height * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            for y in 0..cell_h {
                let dst = ((ri * cell_h + y) * width + ci * cell_w) * 3;
                let src = y * cell_w * 3;
                out[dst..dst + cell_w * 3].copy_from_slice(&cell[src..src + cell_w * 3]);
            }
        }
    }
    Ok((width, height, out))
}

/// Binary PPM (P6), 8-bit.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "{} bytes for {width}x{height} RGB",
            rgb.len()
        )));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format!("P6\n{width} {height}\n255\n").as_bytes())
        .and_then(|()| f.write_all(rgb))
        .map_err(|e| Error::io(path, e))
}
