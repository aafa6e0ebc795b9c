//! Finite-difference verification of backward-pass gradients.
//!
//! Central differences (f(x+h) - f(x-h)) / 2h per coordinate, always in f64.
//! The error metric is |analytic - numeric| / (max(|analytic|, |numeric|) +
//! 1e-6); the additive softening keeps coordinates whose true gradient is
//! zero from dividing rounding noise by itself.

use crate::error::Result;
use crate::tensor::{Binding, ParamArena, Rng, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat coordinate of the worst relative error.
    pub worst: Option<(String, usize)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6)
}

/// Compare backward gradients of every trainable parameter in `arena`
/// against central differences of the loss built by `f`.
///
/// `f` must be a deterministic function of the parameter values: any masks,
/// noise draws, or inputs it uses have to be fixed outside the closure.
/// `per_param_limit` bounds the coordinates probed per parameter (0 = all);
/// oversized parameters get a seeded random subset.
pub fn check_params(
    arena: &mut ParamArena<f64>,
    h: f64,
    per_param_limit: usize,
    seed: u64,
    mut f: impl FnMut(&mut Tape<f64>, &Binding) -> Result<Var>,
) -> Result<GradReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, arena)?;
    let loss = f(&mut tape, &binding)?;
    tape.backward(loss)?;
    let analytic = binding.take_grads(&mut tape);
    drop(tape);

    let eval = |arena: &ParamArena<f64>, f: &mut dyn FnMut(
        &mut Tape<f64>,
        &Binding,
    ) -> Result<Var>|
     -> Result<f64> {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, arena)?;
        let loss = f(&mut tape, &binding)?;
        Ok(tape.value(loss).as_slice()[0])
    };

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };

    let ids: Vec<usize> = arena
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let len = arena.value(id).len();
        let coords: Vec<usize> = if per_param_limit == 0 || len <= per_param_limit {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            let mut stream = Rng::new(seed).derive(&arena.get(id).name).stream();
            stream.shuffle(&mut all);
            let mut picked = all[..per_param_limit].to_vec();
            picked.sort_unstable();
            picked
        };
        for j in coords {
            let orig = arena.value(id).as_slice()[j];
            arena.value_mut(id).as_mut_slice()[j] = orig + h;
            let plus = eval(arena, &mut f)?;
            arena.value_mut(id).as_mut_slice()[j] = orig - h;
            let minus = eval(arena, &mut f)?;
            arena.value_mut(id).as_mut_slice()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id]
                .as_ref()
                .map_or(0.0, |g| g.as_slice()[j]);
            let rel = rel_err(a, numeric);
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((arena.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}
