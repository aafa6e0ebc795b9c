//! AdamW with decoupled weight decay, and the warmup-then-cosine learning
//! rate schedule. Moment updates run in f64 regardless of parameter
//! precision so the arithmetic is the same for f32 and f64 models.

use crate::error::{Error, Result};
use crate::tensor::{ParamArena, Scalar, Tensor};

/// Learning rate at 0-based `step` of `total` steps: linear ramp to `peak`
/// over the first `warmup` steps, then cosine decay toward zero.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = warmup.min(total);
    let step = step.min(total.saturating_sub(1));
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Number of warmup steps for a run: `frac` of the total, rounded.
pub fn warmup_steps(total: u64, frac: f64) -> u64 {
    ((total as f64 * frac).round() as u64).min(total)
}

/// First-/second-moment state for every parameter in an arena, in
/// registration order. Parameters whose gradient slot is `None` in a step
/// (never touched by the loss) keep their moments unchanged.
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed optimizer steps (drives bias correction).
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(arena: &ParamArena<F>, weight_decay: f64) -> AdamW<F> {
        let zeros = |p: &Tensor<F>| Tensor::zeros(p.shape().to_vec());
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: arena.iter().map(|(_, p)| zeros(&p.value)).collect(),
            v: arena.iter().map(|(_, p)| zeros(&p.value)).collect(),
        }
    }

    /// Rebuild optimizer state from checkpointed moments.
    pub fn restore(
        arena: &ParamArena<F>,
        weight_decay: f64,
        step: u64,
        m: Vec<Tensor<F>>,
        v: Vec<Tensor<F>>,
    ) -> Result<AdamW<F>> {
        if m.len() != arena.len() || v.len() != arena.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} moment pairs for {} parameters",
                m.len().min(v.len()),
                arena.len()
            )));
        }
        for ((_, p), (mm, vv)) in arena.iter().zip(m.iter().zip(&v)) {
            if mm.shape() != p.value.shape() || vv.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for `{}`",
                    p.name
                )));
            }
        }
        let mut opt = AdamW::new(arena, weight_decay);
        opt.step = step;
        opt.m = m;
        opt.v = v;
        Ok(opt)
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// One decoupled-decay step. `grads` is arena-ordered, as returned by
    /// `Binding::take_grads`.
    pub fn apply(
        &mut self,
        arena: &mut ParamArena<F>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != arena.len() {
            return Err(Error::invalid(format!(
                "{} gradient slots for {} parameters",
                grads.len(),
                arena.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let flags: Vec<(bool, bool)> = arena.iter().map(|(_, p)| (p.decay, p.trainable)).collect();
        for id in 0..grads.len() {
            let Some(g) = &grads[id] else { continue };
            let (decay, trainable) = flags[id];
            if !trainable {
                continue;
            }
            if g.shape() != arena.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: g.shape().to_vec(),
                    rhs: arena.value(id).shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of parameter {id}"),
                });
            }
            let gd = g.as_slice();
            let m = self.m[id].as_mut_slice();
            let v = self.v[id].as_mut_slice();
            let w = arena.value_mut(id).as_mut_slice();
            for i in 0..gd.len() {
                let gi = gd[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = F::from_f64(mi);
                v[i] = F::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let mut wi = w[i].as_f64() - lr * update;
                if decay {
                    wi -= lr * self.weight_decay * w[i].as_f64();
                }
                w[i] = F::from_f64(wi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_arena() -> (ParamArena<f64>, usize) {
        let mut arena = ParamArena::new();
        let id = arena.register("w", Tensor::row(vec![5.0, -3.0, 2.0]), false);
        (arena, id)
    }

    #[test]
    fn warmup_ramps_linearly_to_peak() {
        let total = 100;
        let warmup = 10;
        for s in 0..warmup {
            let lr = lr_at(s, total, warmup, 1.0);
            assert!((lr - (s + 1) as f64 / warmup as f64).abs() < 1e-15);
        }
        assert!((lr_at(warmup - 1, total, warmup, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_decays_monotonically_to_near_zero() {
        let total = 200;
        let warmup = warmup_steps(total, 0.05);
        assert_eq!(warmup, 10);
        let mut prev = f64::INFINITY;
        for s in warmup..total {
            let lr = lr_at(s, total, warmup, 3e-4);
            assert!(lr <= prev + 1e-18, "not monotone at {s}");
            assert!(lr > 0.0);
            prev = lr;
        }
        assert!(lr_at(total - 1, total, warmup, 3e-4) < 3e-4 * 0.01);
    }

    #[test]
    fn zero_total_and_zero_warmup_edge_cases() {
        assert_eq!(lr_at(0, 0, 0, 1.0), 0.0);
        // no warmup: starts at peak and decays
        assert!((lr_at(0, 10, 0, 0.5) - 0.5).abs() < 1e-15);
        assert!(lr_at(9, 10, 0, 0.5) < 0.5);
    }

    #[test]
    fn quadratic_objective_converges() {
        // minimize 0.5 * ||w - target||^2; gradient is w - target
        let (mut arena, id) = quad_arena();
        let target = [1.0, 2.0, -4.0];
        let mut opt = AdamW::new(&arena, 0.0);
        let total = 1000;
        for i in 0..total {
            let w = arena.value(id).as_slice().to_vec();
            let g: Vec<f64> = w.iter().zip(&target).map(|(wi, ti)| wi - ti).collect();
            let grads = vec![Some(Tensor::row(g))];
            let lr = lr_at(i, total, 0, 5e-2);
            opt.apply(&mut arena, &grads, lr).unwrap();
        }
        for (wi, ti) in arena.value(id).as_slice().iter().zip(&target) {
            assert!((wi - ti).abs() < 1e-3, "{wi} vs {ti}");
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // with bias correction, |update| ~= lr * g / |g| = lr on step one
        let (mut arena, id) = quad_arena();
        let before = arena.value(id).as_slice().to_vec();
        let mut opt = AdamW::new(&arena, 0.0);
        let grads = vec![Some(Tensor::row(vec![0.3, -0.7, 0.01]))];
        opt.apply(&mut arena, &grads, 1e-2).unwrap();
        for (a, b) in arena.value(id).as_slice().iter().zip(&before) {
            let step = (a - b).abs();
            assert!((step - 1e-2).abs() < 1e-4, "step {step}");
        }
    }

    #[test]
    fn decay_flag_controls_weight_shrinkage() {
        let mut arena: ParamArena<f64> = ParamArena::new();
        let wd_id = arena.register("w", Tensor::row(vec![2.0]), true);
        let nd_id = arena.register("b", Tensor::row(vec![2.0]), false);
        let mut opt = AdamW::new(&arena, 0.1);
        // zero gradient: Adam term vanishes, only decay can move weights
        let grads = vec![
            Some(Tensor::row(vec![0.0])),
            Some(Tensor::row(vec![0.0])),
        ];
        opt.apply(&mut arena, &grads, 1e-1).unwrap();
        assert!((arena.value(wd_id).as_slice()[0] - 2.0 * (1.0 - 1e-1 * 0.1)).abs() < 1e-12);
        assert_eq!(arena.value(nd_id).as_slice()[0], 2.0);
    }

    #[test]
    fn untouched_parameters_keep_their_moments() {
        let mut arena = ParamArena::new();
        arena.register("w", Tensor::row(vec![1.0]), true);
        let mut opt = AdamW::new(&arena, 0.1);
        opt.apply(&mut arena, &[None], 1e-1).unwrap();
        assert_eq!(arena.value(0).as_slice()[0], 1.0);
        assert_eq!(opt.m[0].as_slice()[0], 0.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let (mut arena, _) = quad_arena();
        let mut opt = AdamW::new(&arena, 0.0);
        let grads = vec![Some(Tensor::row(vec![f64::NAN, 0.0, 0.0]))];
        assert!(opt.apply(&mut arena, &grads, 1e-2).is_err());
    }

    #[test]
    fn restore_checks_shapes_and_counts() {
        let (arena, _) = quad_arena();
        let m = vec![Tensor::row(vec![0.0; 3])];
        let v = vec![Tensor::row(vec![0.0; 3])];
        let opt = AdamW::restore(&arena, 0.0, 5, m, v).unwrap();
        assert_eq!(opt.step, 5);
        assert!(AdamW::restore(&arena, 0.0, 5, vec![], vec![]).is_err());
        let bad = vec![Tensor::row(vec![0.0; 2])];
        let v = vec![Tensor::row(vec![0.0; 3])];
        assert!(AdamW::restore(&arena, 0.0, 5, bad, v).is_err());
    }
}
