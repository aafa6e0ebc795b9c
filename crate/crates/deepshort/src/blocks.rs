//! Residual blocks and the decayed shortcut around them.
//!
//! Each transformer layer is two sub-blocks, attention and MLP, both in the
//! pre-norm convention: the layer norm lives inside f, the shortcut outside,
//! `x <- gain * x + f(x)`. A third, norm-free linear block kind exists as a
//! surrogate for the expansion identities, where exact linearity matters.
//!
//! Layer norm uses eps = 1e-6; GELU is the tanh approximation (constants in
//! `tensor::tape`). Final projections are zero-initialized by default, which
//! makes a freshly built stack an exact multiple of the identity.

use crate::error::{Error, Result};
use crate::schedules::{AlphaSchedule, ScheduleKind};
use crate::tensor::{Binding, ParamArena, ParamId, Rng, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
/// Abort threshold for the feature-norm guard.
pub const RMS_LIMIT: f64 = 1e4;
const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Root-mean-square of all elements, accumulated in f64 ascending order.
pub fn rms<F: Scalar>(t: &Tensor<F>) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for &x in t.as_slice() {
        let v = x.as_f64();
        acc += v * v;
    }
    (acc / t.len() as f64).sqrt()
}

fn guard_rms<F: Scalar>(tape: &Tape<F>, v: Var, layer: usize) -> Result<()> {
    let r = rms(tape.value(v));
    if !r.is_finite() || r > RMS_LIMIT {
        return Err(Error::NormExplosion {
            layer,
            rms: r,
            limit: RMS_LIMIT,
        });
    }
    Ok(())
}

/// Uniform fan-in init: U(-1/sqrt(fan_in), +1/sqrt(fan_in)), drawn from a
/// stream keyed by the parameter name so values do not depend on
/// registration order.
pub(crate) fn init_matrix<F: Scalar>(rng: &Rng, name: &str, rows: usize, cols: usize) -> Tensor<F> {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut stream = rng.derive(name).stream();
    let data = (0..rows * cols)
        .map(|_| F::from_f64((stream.uniform_f64() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

enum BlockParams {
    Attention {
        heads: usize,
        norm_g: ParamId,
        norm_b: ParamId,
        qkv_w: ParamId,
        qkv_b: ParamId,
        proj_w: ParamId,
        proj_b: ParamId,
    },
    Mlp {
        norm_g: ParamId,
        norm_b: ParamId,
        fc1_w: ParamId,
        fc1_b: ParamId,
        fc2_w: ParamId,
        fc2_b: ParamId,
    },
    Linear {
        w: ParamId,
        b: ParamId,
    },
}

/// One residual sub-block f. Forward preserves shape [n x d].
pub struct Block {
    pub dim: usize,
    pub zero_init: bool,
    params: BlockParams,
}

impl Block {
    pub fn attention<F: Scalar>(
        arena: &mut ParamArena<F>,
        rng: &Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        zero_init: bool,
    ) -> Result<Block> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let norm_g = arena.register(&name("norm.g"), Tensor::filled(vec![1, dim], F::one()), false);
        let norm_b = arena.register(&name("norm.b"), Tensor::zeros(vec![1, dim]), false);
        let qkv_w = arena.register(
            &name("qkv.w"),
            init_matrix(rng, &name("qkv.w"), dim, 3 * dim),
            true,
        );
        let qkv_b = arena.register(&name("qkv.b"), Tensor::zeros(vec![1, 3 * dim]), false);
        let proj_w = arena.register(
            &name("proj.w"),
            if zero_init {
                Tensor::zeros(vec![dim, dim])
            } else {
                init_matrix(rng, &name("proj.w"), dim, dim)
            },
            true,
        );
        let proj_b = arena.register(&name("proj.b"), Tensor::zeros(vec![1, dim]), false);
        Ok(Block {
            dim,
            zero_init,
            params: BlockParams::Attention {
                heads,
                norm_g,
                norm_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
            },
        })
    }

    pub fn mlp<F: Scalar>(
        arena: &mut ParamArena<F>,
        rng: &Rng,
        prefix: &str,
        dim: usize,
        ratio: usize,
        zero_init: bool,
    ) -> Result<Block> {
        if ratio == 0 {
            return Err(Error::invalid("mlp hidden ratio must be at least 1"));
        }
        let hidden = dim * ratio;
        let name = |s: &str| format!("{prefix}.{s}");
        let norm_g = arena.register(&name("norm.g"), Tensor::filled(vec![1, dim], F::one()), false);
        let norm_b = arena.register(&name("norm.b"), Tensor::zeros(vec![1, dim]), false);
        let fc1_w = arena.register(
            &name("fc1.w"),
            init_matrix(rng, &name("fc1.w"), dim, hidden),
            true,
        );
        let fc1_b = arena.register(&name("fc1.b"), Tensor::zeros(vec![1, hidden]), false);
        let fc2_w = arena.register(
            &name("fc2.w"),
            if zero_init {
                Tensor::zeros(vec![hidden, dim])
            } else {
                init_matrix(rng, &name("fc2.w"), hidden, dim)
            },
            true,
        );
        let fc2_b = arena.register(&name("fc2.b"), Tensor::zeros(vec![1, dim]), false);
        Ok(Block {
            dim,
            zero_init,
            params: BlockParams::Mlp {
                norm_g,
                norm_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            },
        })
    }

    /// Norm-free single dense layer, f(x) = x W + b. Exactly linear, which
    /// the contribution-expansion identities rely on.
    pub fn linear<F: Scalar>(
        arena: &mut ParamArena<F>,
        rng: &Rng,
        prefix: &str,
        dim: usize,
        zero_init: bool,
    ) -> Result<Block> {
        let name = |s: &str| format!("{prefix}.{s}");
        let w = arena.register(
            &name("w"),
            if zero_init {
                Tensor::zeros(vec![dim, dim])
            } else {
                init_matrix(rng, &name("w"), dim, dim)
            },
            true,
        );
        let b = arena.register(&name("b"), Tensor::zeros(vec![1, dim]), false);
        Ok(Block {
            dim,
            zero_init,
            params: BlockParams::Linear { w, b },
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.params {
            BlockParams::Attention { .. } => "attention",
            BlockParams::Mlp { .. } => "mlp",
            BlockParams::Linear { .. } => "linear",
        }
    }

    /// f(x): pre-norm, then the block body, ending in the (zero-init target)
    /// output projection.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        x: Var,
    ) -> Result<Var> {
        match &self.params {
            BlockParams::Attention {
                heads,
                norm_g,
                norm_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
            } => {
                let d = self.dim;
                let dh = d / heads;
                let h = tape.layer_norm(
                    x,
                    binding.var(*norm_g),
                    binding.var(*norm_b),
                    F::from_f64(LN_EPS),
                )?;
                let qkv = tape.matmul(h, binding.var(*qkv_w))?;
                let qkv = tape.add_row(qkv, binding.var(*qkv_b))?;
                let q = tape.slice_cols(qkv, 0, d)?;
                let k = tape.slice_cols(qkv, d, 2 * d)?;
                let v = tape.slice_cols(qkv, 2 * d, 3 * d)?;
                let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                let mut merged: Option<Var> = None;
                for head in 0..*heads {
                    let (lo, hi) = (head * dh, (head + 1) * dh);
                    let qh = tape.slice_cols(q, lo, hi)?;
                    let kh = tape.slice_cols(k, lo, hi)?;
                    let vh = tape.slice_cols(v, lo, hi)?;
                    let kt = tape.transpose(kh)?;
                    let scores = tape.matmul(qh, kt)?;
                    let scores = tape.scale(scores, scale)?;
                    let attn = tape.softmax_rows(scores)?;
                    let oh = tape.matmul(attn, vh)?;
                    merged = Some(match merged {
                        None => oh,
                        Some(acc) => tape.concat_cols(acc, oh)?,
                    });
                }
                let o = merged.expect("at least one head");
                let out = tape.matmul(o, binding.var(*proj_w))?;
                tape.add_row(out, binding.var(*proj_b))
            }
            BlockParams::Mlp {
                norm_g,
                norm_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            } => {
                let h = tape.layer_norm(
                    x,
                    binding.var(*norm_g),
                    binding.var(*norm_b),
                    F::from_f64(LN_EPS),
                )?;
                let a = tape.matmul(h, binding.var(*fc1_w))?;
                let a = tape.add_row(a, binding.var(*fc1_b))?;
                let a = tape.gelu(a)?;
                let out = tape.matmul(a, binding.var(*fc2_w))?;
                tape.add_row(out, binding.var(*fc2_b))
            }
            BlockParams::Linear { w, b } => {
                let out = tape.matmul(x, binding.var(*w))?;
                tape.add_row(out, binding.var(*b))
            }
        }
    }
}

/// Shortcut gain for one sub-block: a schedule constant or a trainable
/// scalar parameter.
#[derive(Debug, Clone, Copy)]
pub enum Gain {
    Fixed(f64),
    Learned(ParamId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutVariant {
    /// gain * x + f(x)
    Decayed,
    /// x + sqrt(0.5) * f(x)
    ResidualScaled,
    /// sqrt(0.5) * (x + f(x))
    BothScaled,
    /// x + f(x)
    Baseline,
}

impl ShortcutVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decayed" => Ok(ShortcutVariant::Decayed),
            "residual_scaled" => Ok(ShortcutVariant::ResidualScaled),
            "both_scaled" => Ok(ShortcutVariant::BothScaled),
            "baseline" => Ok(ShortcutVariant::Baseline),
            other => Err(Error::invalid(format!(
                "unknown shortcut variant `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShortcutVariant::Decayed => "decayed",
            ShortcutVariant::ResidualScaled => "residual_scaled",
            ShortcutVariant::BothScaled => "both_scaled",
            ShortcutVariant::Baseline => "baseline",
        }
    }
}

/// Which sub-blocks the decay applies to; the other keeps gain 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayTarget {
    Both,
    AttentionOnly,
    MlpOnly,
}

impl DecayTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(DecayTarget::Both),
            "attention_only" => Ok(DecayTarget::AttentionOnly),
            "mlp_only" => Ok(DecayTarget::MlpOnly),
            other => Err(Error::invalid(format!("unknown decay target `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayTarget::Both => "both",
            DecayTarget::AttentionOnly => "attention_only",
            DecayTarget::MlpOnly => "mlp_only",
        }
    }
}

/// Apply one residual update around `block`. `layer` is the 1-based index
/// reported by the norm guard.
pub fn shortcut_apply<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    x: Var,
    block: &Block,
    gain: Gain,
    variant: ShortcutVariant,
    layer: usize,
) -> Result<Var> {
    let f = block.forward(tape, binding, x)?;
    let out = match variant {
        ShortcutVariant::Decayed => match gain {
            Gain::Fixed(a) => {
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::invalid(format!(
                        "shortcut gain {a} outside (0, 1] at layer {layer}"
                    )));
                }
                tape.add_scaled(f, x, F::from_f64(a))?
            }
            // Learned gains are deliberately unconstrained.
            Gain::Learned(id) => {
                let sx = tape.scale_var(x, binding.var(id))?;
                tape.add(sx, f)?
            }
        },
        ShortcutVariant::ResidualScaled => tape.add_scaled(x, f, F::from_f64(SQRT_HALF))?,
        ShortcutVariant::BothScaled => {
            let s = tape.add(x, f)?;
            tape.scale(s, F::from_f64(SQRT_HALF))?
        }
        ShortcutVariant::Baseline => tape.add(x, f)?,
    };
    guard_rms(tape, out, layer)?;
    Ok(out)
}

/// A full pre-norm transformer column: depth layers of (attention, mlp),
/// each sub-block wrapped in the configured shortcut.
pub struct Layer {
    pub attn: Block,
    pub mlp: Block,
    gain_attn: Option<ParamId>,
    gain_mlp: Option<ParamId>,
}

pub struct LayerStack {
    pub layers: Vec<Layer>,
    pub schedule: AlphaSchedule,
    pub variant: ShortcutVariant,
    pub decay_target: DecayTarget,
}

impl LayerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        arena: &mut ParamArena<F>,
        rng: &Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        schedule: AlphaSchedule,
        variant: ShortcutVariant,
        decay_target: DecayTarget,
        zero_init: bool,
    ) -> Result<LayerStack> {
        let mut layers = Vec::with_capacity(schedule.depth);
        for l in 0..schedule.depth {
            let attn = Block::attention(
                arena,
                rng,
                &format!("{prefix}.{l}.attn"),
                dim,
                heads,
                zero_init,
            )?;
            let mlp = Block::mlp(arena, rng, &format!("{prefix}.{l}.mlp"), dim, ratio, zero_init)?;
            let (gain_attn, gain_mlp) = if schedule.kind == ScheduleKind::Learnable {
                // One unconstrained scalar per shortcut, starting at the
                // baseline value 1; weight decay applies like any parameter.
                (
                    Some(arena.register(
                        &format!("{prefix}.{l}.gain.attn"),
                        Tensor::scalar(F::one()),
                        true,
                    )),
                    Some(arena.register(
                        &format!("{prefix}.{l}.gain.mlp"),
                        Tensor::scalar(F::one()),
                        true,
                    )),
                )
            } else {
                (None, None)
            };
            layers.push(Layer {
                attn,
                mlp,
                gain_attn,
                gain_mlp,
            });
        }
        Ok(LayerStack {
            layers,
            schedule,
            variant,
            decay_target,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Shortcut gains for 1-based layer `l`, honoring the decay target.
    pub fn gains(&self, l: usize) -> (Gain, Gain) {
        let layer = &self.layers[l - 1];
        if self.schedule.kind == ScheduleKind::Learnable {
            let ga = layer.gain_attn.map(Gain::Learned).unwrap_or(Gain::Fixed(1.0));
            let gm = layer.gain_mlp.map(Gain::Learned).unwrap_or(Gain::Fixed(1.0));
            return match self.decay_target {
                DecayTarget::Both => (ga, gm),
                DecayTarget::AttentionOnly => (ga, Gain::Fixed(1.0)),
                DecayTarget::MlpOnly => (Gain::Fixed(1.0), gm),
            };
        }
        let a = self.schedule.value(l);
        match self.decay_target {
            DecayTarget::Both => (Gain::Fixed(a), Gain::Fixed(a)),
            DecayTarget::AttentionOnly => (Gain::Fixed(a), Gain::Fixed(1.0)),
            DecayTarget::MlpOnly => (Gain::Fixed(1.0), Gain::Fixed(a)),
        }
    }

    /// One layer: attention shortcut then MLP shortcut.
    pub fn forward_layer<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        x: Var,
        l: usize,
    ) -> Result<Var> {
        let layer = &self.layers[l - 1];
        let (ga, gm) = self.gains(l);
        let x = shortcut_apply(tape, binding, x, &layer.attn, ga, self.variant, l)?;
        shortcut_apply(tape, binding, x, &layer.mlp, gm, self.variant, l)
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        mut x: Var,
    ) -> Result<Var> {
        for l in 1..=self.depth() {
            x = self.forward_layer(tape, binding, x, l)?;
        }
        Ok(x)
    }

    /// Identity-path gain of the whole stack at initialization: the factor
    /// multiplying x_0 in the output when every block is zero-init.
    pub fn echo_factor(&self) -> f64 {
        let mut product = 1.0f64;
        for l in 1..=self.depth() {
            for gain in [self.gains(l).0, self.gains(l).1] {
                let per_shortcut = match self.variant {
                    ShortcutVariant::Decayed => match gain {
                        Gain::Fixed(a) => a,
                        Gain::Learned(_) => 1.0, // init value
                    },
                    ShortcutVariant::ResidualScaled | ShortcutVariant::Baseline => 1.0,
                    ShortcutVariant::BothScaled => SQRT_HALF,
                };
                product *= per_shortcut;
            }
        }
        product
    }
}

/// Eq-style expansion of a single-f-per-layer decayed stack: the output
/// splits into an input echo scaled by the full gain product plus one term
/// per block scaled by the gains above it.
pub struct Expansion<F> {
    pub input_echo: Tensor<F>,
    pub block_terms: Vec<Tensor<F>>,
    pub output: Tensor<F>,
}

impl<F: Scalar> Expansion<F> {
    /// input echo + all block terms, summed in layer order.
    pub fn sum(&self) -> Tensor<F> {
        let mut acc = self.input_echo.clone();
        for term in &self.block_terms {
            let dst = acc.as_mut_slice();
            for (d, &s) in dst.iter_mut().zip(term.as_slice()) {
                *d += s;
            }
        }
        acc
    }
}

pub fn expand_contributions<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    blocks: &[Block],
    schedule: &AlphaSchedule,
    x0: Var,
) -> Result<Expansion<F>> {
    if blocks.len() != schedule.depth {
        return Err(Error::invalid(format!(
            "{} blocks but schedule depth {}",
            blocks.len(),
            schedule.depth
        )));
    }
    let depth = blocks.len();
    let mut x = x0;
    let mut f_values = Vec::with_capacity(depth);
    for (i, block) in blocks.iter().enumerate() {
        let l = i + 1;
        let f = block.forward(tape, binding, x)?;
        f_values.push(tape.value(f).clone());
        x = tape.add_scaled(f, x, F::from_f64(schedule.value(l)))?;
    }
    let output = tape.value(x).clone();
    let mut block_terms = Vec::with_capacity(depth);
    for (i, fv) in f_values.iter().enumerate() {
        let mut coeff = 1.0f64;
        for l in (i + 2)..=depth {
            coeff *= schedule.value(l);
        }
        block_terms.push(fv.scaled(F::from_f64(coeff)));
    }
    let mut echo = 1.0f64;
    for l in 1..=depth {
        echo *= schedule.value(l);
    }
    let input_echo = tape.value(x0).scaled(F::from_f64(echo));
    Ok(Expansion {
        input_echo,
        block_terms,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::ScheduleKind;
    use crate::tensor::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut stream = Rng::new(seed).derive("input").stream();
        let data = (0..rows * cols).map(|_| stream.normal_f64()).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    // Straight-line reference implementations, independent of the tape ops.
    fn ref_layer_norm(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter()
            .enumerate()
            .map(|(j, &x)| g[j] * (x - mean) * inv + b[j])
            .collect()
    }

    fn ref_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
    }

    fn ref_matvec(x: &[f64], w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (rows, cols) = w.dims2();
        assert_eq!(x.len(), rows);
        (0..cols)
            .map(|j| {
                let mut acc = b[j];
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w.at(i, j);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn zero_init_blocks_output_zero() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(1);
        let attn = Block::attention(&mut arena, &rng, "a", 8, 2, true).unwrap();
        let mlp = Block::mlp(&mut arena, &rng, "m", 8, 4, true).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let x = tape.leaf(rand_input(3, 8, 5), false).unwrap();
        for block in [&attn, &mlp] {
            let f = block.forward(&mut tape, &binding, x).unwrap();
            assert!(tape.value(f).as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decayed_zero_init_is_exactly_alpha_x() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(2);
        let mlp = Block::mlp(&mut arena, &rng, "m", 6, 2, true).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(2, 6, 7);
        let x = tape.leaf(input.clone(), false).unwrap();
        let out = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &mlp,
            Gain::Fixed(0.7),
            ShortcutVariant::Decayed,
            1,
        )
        .unwrap();
        for (o, i) in tape.value(out).as_slice().iter().zip(input.as_slice()) {
            assert_eq!(*o, 0.7 * i);
        }
    }

    #[test]
    fn alpha_one_decayed_is_bitwise_baseline() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(3);
        let attn = Block::attention(&mut arena, &rng, "a", 8, 2, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let x = tape.leaf(rand_input(4, 8, 9), false).unwrap();
        let decayed = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &attn,
            Gain::Fixed(1.0),
            ShortcutVariant::Decayed,
            1,
        )
        .unwrap();
        let baseline = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &attn,
            Gain::Fixed(1.0),
            ShortcutVariant::Baseline,
            1,
        )
        .unwrap();
        assert_eq!(tape.value(decayed), tape.value(baseline));
    }

    #[test]
    fn linear_surrogate_matches_hand_formula() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(4);
        let lin = Block::linear(&mut arena, &rng, "lin", 3, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(2, 3, 11);
        let x = tape.leaf(input.clone(), false).unwrap();
        let out = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &lin,
            Gain::Fixed(0.8),
            ShortcutVariant::Decayed,
            1,
        )
        .unwrap();
        let w = arena.value(arena.find("lin.w").unwrap()).clone();
        for r in 0..2 {
            let wx = ref_matvec(input.row_slice(r), &w, &[0.0; 3]);
            for j in 0..3 {
                assert_relative_eq!(
                    tape.value(out).at(r, j),
                    0.8 * input.at(r, j) + wx[j],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn scaled_variants_match_their_formulas() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(5);
        let lin = Block::linear(&mut arena, &rng, "lin", 4, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(1, 4, 13);
        let x = tape.leaf(input.clone(), false).unwrap();
        let f = lin.forward(&mut tape, &binding, x).unwrap();
        let f_val = tape.value(f).clone();

        let res = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &lin,
            Gain::Fixed(1.0),
            ShortcutVariant::ResidualScaled,
            1,
        )
        .unwrap();
        let both = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &lin,
            Gain::Fixed(1.0),
            ShortcutVariant::BothScaled,
            1,
        )
        .unwrap();
        for j in 0..4 {
            assert_relative_eq!(
                tape.value(res).at(0, j),
                input.at(0, j) + SQRT_HALF * f_val.at(0, j),
                epsilon = 1e-15
            );
            assert_relative_eq!(
                tape.value(both).at(0, j),
                SQRT_HALF * (input.at(0, j) + f_val.at(0, j)),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn single_token_attention_reduces_to_projected_value() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(6);
        let attn = Block::attention(&mut arena, &rng, "a", 4, 2, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(1, 4, 17);
        let x = tape.leaf(input.clone(), false).unwrap();
        let out = attn.forward(&mut tape, &binding, x).unwrap();

        // With one token every attention weight is 1, so the output is just
        // proj(V(norm(x))).
        let g = arena.value(arena.find("a.norm.g").unwrap()).as_slice();
        let b = arena.value(arena.find("a.norm.b").unwrap()).as_slice();
        let h = ref_layer_norm(input.row_slice(0), g, b);
        let qkv_w = arena.value(arena.find("a.qkv.w").unwrap()).clone();
        let qkv_b = arena.value(arena.find("a.qkv.b").unwrap()).as_slice();
        let qkv = ref_matvec(&h, &qkv_w, qkv_b);
        let v = &qkv[8..12];
        let proj_w = arena.value(arena.find("a.proj.w").unwrap()).clone();
        let proj_b = arena.value(arena.find("a.proj.b").unwrap()).as_slice();
        let expect = ref_matvec(v, &proj_w, proj_b);
        for j in 0..4 {
            assert_relative_eq!(tape.value(out).at(0, j), expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn two_token_attention_matches_reference_computation() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(7);
        let dim = 4;
        let heads = 2;
        let dh = dim / heads;
        let attn = Block::attention(&mut arena, &rng, "a", dim, heads, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(2, dim, 19);
        let x = tape.leaf(input.clone(), false).unwrap();
        let out = attn.forward(&mut tape, &binding, x).unwrap();

        let g = arena.value(arena.find("a.norm.g").unwrap()).as_slice().to_vec();
        let b = arena.value(arena.find("a.norm.b").unwrap()).as_slice().to_vec();
        let qkv_w = arena.value(arena.find("a.qkv.w").unwrap()).clone();
        let qkv_b = arena.value(arena.find("a.qkv.b").unwrap()).as_slice().to_vec();
        let proj_w = arena.value(arena.find("a.proj.w").unwrap()).clone();
        let proj_b = arena.value(arena.find("a.proj.b").unwrap()).as_slice().to_vec();

        let qkv: Vec<Vec<f64>> = (0..2)
            .map(|r| ref_matvec(&ref_layer_norm(input.row_slice(r), &g, &b), &qkv_w, &qkv_b))
            .collect();
        let mut mixed = vec![vec![0.0; dim]; 2];
        for head in 0..heads {
            let (qo, ko, vo) = (head * dh, dim + head * dh, 2 * dim + head * dh);
            for r in 0..2 {
                let mut scores = [0.0f64; 2];
                for c in 0..2 {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += qkv[r][qo + j] * qkv[c][ko + j];
                    }
                    scores[c] = dot / (dh as f64).sqrt();
                }
                let m = scores[0].max(scores[1]);
                let e0 = (scores[0] - m).exp();
                let e1 = (scores[1] - m).exp();
                let z = e0 + e1;
                for j in 0..dh {
                    mixed[r][head * dh + j] =
                        (e0 / z) * qkv[0][vo + j] + (e1 / z) * qkv[1][vo + j];
                }
            }
        }
        for r in 0..2 {
            let expect = ref_matvec(&mixed[r], &proj_w, &proj_b);
            for j in 0..dim {
                assert_relative_eq!(tape.value(out).at(r, j), expect[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mlp_matches_composed_reference() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(8);
        let mlp = Block::mlp(&mut arena, &rng, "m", 4, 2, false).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(1, 4, 23);
        let x = tape.leaf(input.clone(), false).unwrap();
        let out = mlp.forward(&mut tape, &binding, x).unwrap();

        let g = arena.value(arena.find("m.norm.g").unwrap()).as_slice();
        let b = arena.value(arena.find("m.norm.b").unwrap()).as_slice();
        let h = ref_layer_norm(input.row_slice(0), g, b);
        let fc1_w = arena.value(arena.find("m.fc1.w").unwrap()).clone();
        let fc1_b = arena.value(arena.find("m.fc1.b").unwrap()).as_slice();
        let a: Vec<f64> = ref_matvec(&h, &fc1_w, fc1_b)
            .into_iter()
            .map(ref_gelu)
            .collect();
        let fc2_w = arena.value(arena.find("m.fc2.w").unwrap()).clone();
        let fc2_b = arena.value(arena.find("m.fc2.b").unwrap()).as_slice();
        let expect = ref_matvec(&a, &fc2_w, fc2_b);
        for j in 0..4 {
            assert_relative_eq!(tape.value(out).at(0, j), expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn expansion_zero_init_has_only_the_echo_term() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(9);
        let blocks: Vec<Block> = (0..3)
            .map(|i| Block::linear(&mut arena, &rng, &format!("b{i}"), 4, true).unwrap())
            .collect();
        let schedule = AlphaSchedule::new(ScheduleKind::Linear, 3, 0.6).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(2, 4, 29);
        let x0 = tape.leaf(input.clone(), false).unwrap();
        let exp = expand_contributions(&mut tape, &binding, &blocks, &schedule, x0).unwrap();
        for term in &exp.block_terms {
            assert!(term.as_slice().iter().all(|&v| v == 0.0));
        }
        assert_eq!(exp.sum(), exp.input_echo);
        assert!(exp.output.max_abs_diff(&exp.sum()) < 1e-15);
    }

    #[test]
    fn expansion_depth_one_base_case() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(10);
        let blocks = vec![Block::linear(&mut arena, &rng, "b0", 4, false).unwrap()];
        let schedule = AlphaSchedule::new(ScheduleKind::Linear, 1, 0.6).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let input = rand_input(1, 4, 31);
        let x0 = tape.leaf(input.clone(), false).unwrap();
        let exp = expand_contributions(&mut tape, &binding, &blocks, &schedule, x0).unwrap();
        // terms are alpha_1 * x0 and f(x0), in that order
        for j in 0..4 {
            assert_relative_eq!(exp.input_echo.at(0, j), 0.6 * input.at(0, j), epsilon = 1e-15);
        }
        assert!(exp.output.max_abs_diff(&exp.sum()) < 1e-12);
    }

    #[test]
    fn expansion_random_linear_depth_four() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(11);
        let blocks: Vec<Block> = (0..4)
            .map(|i| Block::linear(&mut arena, &rng, &format!("b{i}"), 6, false).unwrap())
            .collect();
        let schedule = AlphaSchedule::new(ScheduleKind::Linear, 4, 0.6).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let x0 = tape.leaf(rand_input(3, 6, 37), false).unwrap();
        let exp = expand_contributions(&mut tape, &binding, &blocks, &schedule, x0).unwrap();
        assert!(exp.output.max_abs_diff(&exp.sum()) < 1e-10);
    }

    #[test]
    fn stack_init_identity_echo_in_f32() {
        for (depth, alpha_min) in [(2usize, 0.6f64), (6, 0.8), (12, 1.0)] {
            let mut arena = ParamArena::<f32>::new();
            let rng = Rng::new(12);
            let schedule = AlphaSchedule::new(ScheduleKind::Linear, depth, alpha_min).unwrap();
            let stack = LayerStack::new(
                &mut arena,
                &rng,
                "enc",
                16,
                4,
                2,
                schedule,
                ShortcutVariant::Decayed,
                DecayTarget::Both,
                true,
            )
            .unwrap();
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, &arena).unwrap();
            let input = rand_input(3, 16, 41).cast::<f32>();
            let x0 = tape.leaf(input.clone(), false).unwrap();
            let out = stack.forward(&mut tape, &binding, x0).unwrap();
            let echo = stack.echo_factor();
            for (o, i) in tape.value(out).as_slice().iter().zip(input.as_slice()) {
                let expect = echo * i.as_f64();
                let denom = expect.abs().max(1e-6);
                assert!(
                    ((o.as_f64() - expect) / denom).abs() < 1e-6,
                    "depth {depth} alpha {alpha_min}: {o} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn gradient_reaches_layer_one_at_depth_twelve() {
        let mut arena = ParamArena::<f32>::new();
        let rng = Rng::new(13);
        let schedule = AlphaSchedule::new(ScheduleKind::Linear, 12, 0.5).unwrap();
        let stack = LayerStack::new(
            &mut arena,
            &rng,
            "enc",
            8,
            2,
            2,
            schedule,
            ShortcutVariant::Decayed,
            DecayTarget::Both,
            true,
        )
        .unwrap();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let x0 = tape.leaf(rand_input(2, 8, 43).cast::<f32>(), false).unwrap();
        let out = stack.forward(&mut tape, &binding, x0).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        // The first layer's zero-init projection must receive gradient: no
        // dead path even under the strongest decay.
        let proj = arena.find("enc.0.attn.proj.w").unwrap();
        let grads = binding.take_grads(&mut tape);
        let gnorm: f64 = grads[proj]
            .as_ref()
            .unwrap()
            .as_slice()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        assert!(gnorm > 0.0, "layer-1 gradient collapsed");
    }

    #[test]
    fn norm_guard_names_the_layer() {
        let mut arena = ParamArena::<f64>::new();
        let rng = Rng::new(14);
        let lin = Block::linear(&mut arena, &rng, "big", 2, false).unwrap();
        let id = arena.find("big.w").unwrap();
        arena.set_value(id, Tensor::matrix(2, 2, vec![3e4, 0.0, 0.0, 3e4]).unwrap());
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &arena).unwrap();
        let x = tape.leaf(Tensor::row(vec![1.0, 1.0]), false).unwrap();
        let err = shortcut_apply(
            &mut tape,
            &binding,
            x,
            &lin,
            Gain::Fixed(1.0),
            ShortcutVariant::Decayed,
            7,
        )
        .unwrap_err();
        match err {
            Error::NormExplosion { layer, rms, .. } => {
                assert_eq!(layer, 7);
                assert!(rms > RMS_LIMIT);
            }
            other => panic!("expected norm explosion, got {other}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shapes_are_preserved(
            rows in 1usize..5,
            variant_ix in 0usize..4,
            kind_ix in 0usize..3,
        ) {
            let mut arena = ParamArena::<f64>::new();
            let rng = Rng::new(15);
            let dim = 8;
            let block = match kind_ix {
                0 => Block::attention(&mut arena, &rng, "p", dim, 2, false).unwrap(),
                1 => Block::mlp(&mut arena, &rng, "p", dim, 2, false).unwrap(),
                _ => Block::linear(&mut arena, &rng, "p", dim, false).unwrap(),
            };
            let variant = [
                ShortcutVariant::Decayed,
                ShortcutVariant::ResidualScaled,
                ShortcutVariant::BothScaled,
                ShortcutVariant::Baseline,
            ][variant_ix];
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, &arena).unwrap();
            let x = tape.leaf(rand_input(rows, dim, 47), false).unwrap();
            let out = shortcut_apply(&mut tape, &binding, x, &block, Gain::Fixed(0.8), variant, 1).unwrap();
            prop_assert_eq!(tape.value(out).shape(), &[rows, dim]);
        }
    }
}
