//! Per-layer shortcut gain schedules.
//!
//! A residual layer computes `x_{l+1} = alpha_l * x_l + f(x_l)`. The gains
//! alpha_1..alpha_L come from one of four schedules: the linear ramp
//! `alpha_l = 1 - l * (1 - alpha_min) / L`, a half-cosine interpolation from
//! 1 down to alpha_min, a constant, or unconstrained learnable scalars. The
//! product of the gains, `prod_{l=1..L} alpha_l`, measures how much of the
//! layer-0 identity signal survives to the output at initialization.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Constant,
    /// Gains live in the parameter arena, one scalar per shortcut,
    /// initialized to 1; the schedule only carries that initialization.
    Learnable,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "constant" => Ok(ScheduleKind::Constant),
            "learnable" => Ok(ScheduleKind::Learnable),
            other => Err(Error::invalid(format!(
                "unknown schedule kind `{other}` (expected linear|cosine|constant|learnable)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Learnable => "learnable",
        }
    }
}

fn validate(l: usize, depth: usize, alpha_min: f64) -> Result<()> {
    if depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    if l == 0 || l > depth {
        return Err(Error::invalid(format!(
            "layer index {l} outside 1..={depth}"
        )));
    }
    if !(alpha_min > 0.0 && alpha_min <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_min {alpha_min} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Linear ramp `1 - l * (1 - alpha_min) / L`. The endpoint is pinned so
/// `alpha_L == alpha_min` bitwise rather than within rounding of the ramp
/// arithmetic.
pub fn alpha_linear(l: usize, depth: usize, alpha_min: f64) -> Result<f64> {
    validate(l, depth, alpha_min)?;
    if l == depth {
        return Ok(alpha_min);
    }
    let v = 1.0 - (l as f64) * (1.0 - alpha_min) / (depth as f64);
    Ok(v.clamp(alpha_min, 1.0))
}

/// Half-cosine interpolation `alpha_min + (1 - alpha_min)(1 + cos(pi l / L))/2`,
/// endpoint pinned like the linear ramp.
pub fn alpha_cosine(l: usize, depth: usize, alpha_min: f64) -> Result<f64> {
    validate(l, depth, alpha_min)?;
    if l == depth {
        return Ok(alpha_min);
    }
    let phase = std::f64::consts::PI * l as f64 / depth as f64;
    let v = alpha_min + (1.0 - alpha_min) * (1.0 + phase.cos()) / 2.0;
    Ok(v.clamp(alpha_min, 1.0))
}

/// Initial values for per-shortcut learnable gains: one scalar for the
/// attention shortcut and one for the MLP shortcut of each layer, all 1.0,
/// so the starting forward pass equals the undecayed baseline.
pub fn learnable_alpha_init(depth: usize) -> Vec<f64> {
    vec![1.0; 2 * depth]
}

#[derive(Debug, Clone)]
pub struct AlphaSchedule {
    pub kind: ScheduleKind,
    pub alpha_min: f64,
    pub depth: usize,
    /// Per-layer decrement of the linear ramp, (1 - alpha_min) / L.
    pub delta: f64,
    /// alpha_1..alpha_L.
    pub values: Vec<f64>,
}

impl AlphaSchedule {
    pub fn new(kind: ScheduleKind, depth: usize, alpha_min: f64) -> Result<Self> {
        validate(1, depth, alpha_min)?;
        let values: Vec<f64> = (1..=depth)
            .map(|l| match kind {
                ScheduleKind::Linear => alpha_linear(l, depth, alpha_min),
                ScheduleKind::Cosine => alpha_cosine(l, depth, alpha_min),
                ScheduleKind::Constant => Ok(alpha_min),
                // Learnable gains start at the baseline; training replaces them.
                ScheduleKind::Learnable => Ok(1.0),
            })
            .collect::<Result<_>>()?;
        Ok(AlphaSchedule {
            kind,
            alpha_min,
            depth,
            delta: (1.0 - alpha_min) / depth as f64,
            values,
        })
    }

    pub fn value(&self, l: usize) -> f64 {
        assert!(l >= 1 && l <= self.depth, "layer index {l} out of range");
        self.values[l - 1]
    }
}

/// Product of the per-layer gains: the fraction of the input identity signal
/// reaching the output at initialization (counting each layer once).
#[derive(Debug, Clone, Copy)]
pub struct EffectiveDecay {
    pub value: f64,
    pub log10_value: f64,
}

pub fn effective_alpha(schedule: &AlphaSchedule) -> EffectiveDecay {
    let mut product = 1.0f64;
    for &a in &schedule.values {
        product *= a;
    }
    EffectiveDecay {
        value: product,
        log10_value: product.log10(),
    }
}

/// Default advisor grid: 0.50 to 0.95 in steps of 0.05. Values below 0.5
/// are excluded because training destabilizes there.
pub fn default_advisor_grid() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AdviceRow {
    pub alpha_min: f64,
    pub alpha_eff: f64,
    pub log10_alpha_eff: f64,
    pub inside: bool,
}

#[derive(Debug, Clone)]
pub struct Advice {
    pub rows: Vec<AdviceRow>,
    pub recommended: f64,
    /// False when no candidate lands inside the target interval; the
    /// recommendation is then the nearest candidate by log distance.
    pub feasible: bool,
}

/// Evaluate a grid of alpha_min candidates for depth `depth` under the
/// linear schedule and recommend one whose gain product lands in
/// `[target.0, target.1)`. Ties go to the larger alpha_min (gentler decay).
pub fn advise_alpha_min(depth: usize, target: (f64, f64), grid: &[f64]) -> Result<Advice> {
    if grid.is_empty() {
        return Err(Error::invalid("advisor grid is empty"));
    }
    if !(target.0 > 0.0 && target.0 < target.1) {
        return Err(Error::invalid(format!(
            "target interval [{}, {}) is not a positive nonempty range",
            target.0, target.1
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &a in grid {
        let schedule = AlphaSchedule::new(ScheduleKind::Linear, depth, a)?;
        let eff = effective_alpha(&schedule);
        rows.push(AdviceRow {
            alpha_min: a,
            alpha_eff: eff.value,
            log10_alpha_eff: eff.log10_value,
            inside: eff.value >= target.0 && eff.value < target.1,
        });
    }
    let feasible_best = rows
        .iter()
        .filter(|r| r.inside)
        .fold(None::<&AdviceRow>, |best, r| match best {
            Some(b) if b.alpha_min >= r.alpha_min => Some(b),
            _ => Some(r),
        });
    if let Some(best) = feasible_best {
        return Ok(Advice {
            recommended: best.alpha_min,
            feasible: true,
            rows,
        });
    }
    // Nothing inside: pick the candidate whose log10 product is closest to
    // the interval, larger alpha_min winning ties.
    let (lo, hi) = (target.0.log10(), target.1.log10());
    let dist = |x: f64| {
        if x < lo {
            lo - x
        } else if x > hi {
            x - hi
        } else {
            0.0
        }
    };
    let mut best = rows[0];
    for r in &rows[1..] {
        let (dr, db) = (dist(r.log10_alpha_eff), dist(best.log10_alpha_eff));
        if dr < db || (dr == db && r.alpha_min > best.alpha_min) {
            best = *r;
        }
    }
    Ok(Advice {
        recommended: best.alpha_min,
        feasible: false,
        rows,
    })
}

/// Layer-by-layer table for the CLI: index, gain, running product and its
/// log10, followed by the advisor verdict for the same depth.
pub fn schedule_table(schedule: &AlphaSchedule, target: (f64, f64)) -> Result<String> {
    let mut out = String::new();
    writeln!(
        out,
        "# kind={} depth={} alpha_min={}",
        schedule.kind.name(),
        schedule.depth,
        schedule.alpha_min
    )
    .unwrap();
    writeln!(out, "{:>5} {:>12} {:>14} {:>12}", "l", "alpha_l", "prod_alpha", "log10_prod").unwrap();
    let mut product = 1.0f64;
    for (i, &a) in schedule.values.iter().enumerate() {
        product *= a;
        writeln!(
            out,
            "{:>5} {:>12.6} {:>14.6e} {:>12.4}",
            i + 1,
            a,
            product,
            product.log10()
        )
        .unwrap();
    }
    let advice = advise_alpha_min(schedule.depth, target, &default_advisor_grid())?;
    writeln!(
        out,
        "# advisor: alpha_min={:.2} puts prod_alpha in [{:.0e}, {:.0e}){}",
        advice.recommended,
        target.0,
        target.1,
        if advice.feasible {
            ""
        } else {
            " (warning: no grid candidate inside target; nearest chosen)"
        }
    )
    .unwrap();
    Ok(out)
}

/// Format trained per-shortcut gains in the two-row layout used for
/// reporting: layer indices across, attention gains then MLP gains below.
pub fn learnable_alpha_table(attn: &[f64], mlp: &[f64]) -> String {
    assert_eq!(attn.len(), mlp.len(), "per-layer gain rows differ in length");
    let mut header = String::from("layer    ");
    let mut row_a = String::from("attn     ");
    let mut row_m = String::from("mlp      ");
    for (i, (&a, &m)) in attn.iter().zip(mlp).enumerate() {
        write!(header, "{:>8}", i + 1).unwrap();
        write!(row_a, "{a:>8.3}").unwrap();
        write!(row_m, "{m:>8.3}").unwrap();
    }
    format!("{header}\n{row_a}\n{row_m}\n")
}
