//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! Every key has a default, so a minimal file only states what it changes.
//! Unknown sections or keys are hard errors with line numbers; the canonical
//! serialization emits every key in a fixed order and round-trips bitwise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::blocks::{DecayTarget, ShortcutVariant};
use crate::diffusion::{BackboneConfig, DiffusionConfig};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::schedules::{AlphaSchedule, ScheduleKind};

/// Which training loop a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Mae,
    Cls,
    Ddpm,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(ExperimentKind::Mae),
            "cls" => Ok(ExperimentKind::Cls),
            "ddpm" => Ok(ExperimentKind::Ddpm),
            other => Err(Error::invalid(format!(
                "unknown experiment kind `{other}` (expected mae|cls|ddpm)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Mae => "mae",
            ExperimentKind::Cls => "cls",
            ExperimentKind::Ddpm => "ddpm",
        }
    }
}

/// Where training images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Procedural shape-times-color images, any size >= 8.
    SyntheticShapes,
    /// 2x2 single-channel images drawn from two intensity modes.
    ToyTwoMode,
    /// Standard binary batch files under `root`.
    Cifar10Binary,
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic-shapes" => Ok(DataSource::SyntheticShapes),
            "toy-two-mode" => Ok(DataSource::ToyTwoMode),
            "cifar10-binary" => Ok(DataSource::Cifar10Binary),
            other => Err(Error::invalid(format!(
                "unknown dataset source `{other}` (expected synthetic-shapes|toy-two-mode|cifar10-binary)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSource::SyntheticShapes => "synthetic-shapes",
            DataSource::ToyTwoMode => "toy-two-mode",
            DataSource::Cifar10Binary => "cifar10-binary",
        }
    }
}

/// Peak learning rate: either a literal value or `auto`, which transfers a
/// reference rate of 6e-4 at batch 1024 to the configured batch size by
/// linear scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSpec {
    Auto,
    Fixed(f64),
}

impl LrSpec {
    pub const REFERENCE_LR: f64 = 6e-4;
    pub const REFERENCE_BATCH: f64 = 1024.0;

    pub fn peak(&self, batch: usize) -> f64 {
        match self {
            LrSpec::Auto => Self::REFERENCE_LR * batch as f64 / Self::REFERENCE_BATCH,
            LrSpec::Fixed(v) => *v,
        }
    }
}

/// Everything a run needs, flattened. Section membership only matters for
/// the file format; see [`RunConfig::canonical`] for the full key list.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out: PathBuf,
    // [model]
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub depth: usize,
    pub schedule_kind: ScheduleKind,
    pub alpha_min: f64,
    pub variant: ShortcutVariant,
    pub decay_target: DecayTarget,
    pub skip_period: usize,
    pub use_skips: bool,
    pub cls_token: bool,
    // [diffusion]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub conditional: bool,
    pub long_skips: bool,
    // [optimizer]
    pub lr: LrSpec,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch: usize,
    pub checkpoint_every: usize,
    // [dataset]
    pub source: DataSource,
    pub root: PathBuf,
    pub classes: usize,
    pub train_n: usize,
    pub eval_n: usize,
    pub split_seed: u64,
    // [metrics]
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Report 0.000 in the seconds column so metrics files are byte-stable.
    pub deterministic_timing: bool,
    // [state] -- resume bookkeeping carried inside checkpoints
    pub state_epoch: usize,
    pub state_step: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ExperimentKind::Mae,
            seed: 0,
            out: PathBuf::from("runs/run"),
            size: 32,
            channels: 3,
            patch: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            depth: 6,
            schedule_kind: ScheduleKind::Linear,
            alpha_min: 0.6,
            variant: ShortcutVariant::Decayed,
            decay_target: DecayTarget::Both,
            skip_period: 2,
            use_skips: true,
            cls_token: true,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
            conditional: false,
            long_skips: true,
            lr: LrSpec::Auto,
            weight_decay: 5e-2,
            warmup_frac: 0.05,
            epochs: 100,
            batch: 64,
            checkpoint_every: 25,
            source: DataSource::SyntheticShapes,
            root: PathBuf::from("."),
            classes: 4,
            train_n: 256,
            eval_n: 256,
            split_seed: 7,
            eval_every: 25,
            eval_samples: 256,
            deterministic_timing: true,
            state_epoch: 0,
            state_step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Run,
    Model,
    Diffusion,
    Optimizer,
    Dataset,
    Metrics,
    State,
}

impl Section {
    fn parse(name: &str) -> Option<Section> {
        Some(match name {
            "run" => Section::Run,
            "model" => Section::Model,
            "diffusion" => Section::Diffusion,
            "optimizer" => Section::Optimizer,
            "dataset" => Section::Dataset,
            "metrics" => Section::Metrics,
            "state" => Section::State,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Section::Run => "run",
            Section::Model => "model",
            Section::Diffusion => "diffusion",
            Section::Optimizer => "optimizer",
            Section::Dataset => "dataset",
            Section::Metrics => "metrics",
            Section::State => "state",
        }
    }
}

fn parse_usize(key: &str, v: &str) -> std::result::Result<usize, String> {
    v.parse()
        .map_err(|_| format!("{key}: `{v}` is not a non-negative integer"))
}

fn parse_u64(key: &str, v: &str) -> std::result::Result<u64, String> {
    v.parse()
        .map_err(|_| format!("{key}: `{v}` is not a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> std::result::Result<f64, String> {
    v.parse()
        .map_err(|_| format!("{key}: `{v}` is not a number"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: `{v}` is not `true` or `false`")),
    }
}

impl RunConfig {
    /// Assign one `key = value` pair. Returns a message without location;
    /// the parser attaches the file and line.
    fn assign(&mut self, sec: Section, key: &str, v: &str) -> std::result::Result<(), String> {
        let unknown = || Err(format!("unknown key `{key}` in [{}]", sec.name()));
        match sec {
            Section::Run => match key {
                "kind" => self.kind = ExperimentKind::parse(v).map_err(|e| e.to_string())?,
                "seed" => self.seed = parse_u64(key, v)?,
                "out" => self.out = PathBuf::from(v),
                _ => return unknown(),
            },
            Section::Model => match key {
                "size" => self.size = parse_usize(key, v)?,
                "channels" => self.channels = parse_usize(key, v)?,
                "patch" => self.patch = parse_usize(key, v)?,
                "dim" => self.dim = parse_usize(key, v)?,
                "heads" => self.heads = parse_usize(key, v)?,
                "mlp_ratio" => self.mlp_ratio = parse_usize(key, v)?,
                "mask_ratio" => {
                    let m = parse_f64(key, v)?;
                    if !(m > 0.0 && m < 1.0) {
                        return Err(format!("mask_ratio {m} outside (0, 1)"));
                    }
                    self.mask_ratio = m;
                }
                "depth" => self.depth = parse_usize(key, v)?,
                "schedule" => {
                    self.schedule_kind = ScheduleKind::parse(v).map_err(|e| e.to_string())?
                }
                "alpha_min" => {
                    let a = parse_f64(key, v)?;
                    if !(a > 0.0 && a <= 1.0) {
                        return Err(format!("alpha_min {a} outside (0, 1]"));
                    }
                    self.alpha_min = a;
                }
                "variant" => self.variant = ShortcutVariant::parse(v).map_err(|e| e.to_string())?,
                "decay_target" => {
                    self.decay_target = DecayTarget::parse(v).map_err(|e| e.to_string())?
                }
                "skip_period" => self.skip_period = parse_usize(key, v)?,
                "use_skips" => self.use_skips = parse_bool(key, v)?,
                "cls_token" => self.cls_token = parse_bool(key, v)?,
                _ => return unknown(),
            },
            Section::Diffusion => match key {
                "timesteps" => self.timesteps = parse_usize(key, v)?,
                "beta_start" => self.beta_start = parse_f64(key, v)?,
                "beta_end" => self.beta_end = parse_f64(key, v)?,
                "conditional" => self.conditional = parse_bool(key, v)?,
                "long_skips" => self.long_skips = parse_bool(key, v)?,
                _ => return unknown(),
            },
            Section::Optimizer => match key {
                "lr" => {
                    self.lr = if v == "auto" {
                        LrSpec::Auto
                    } else {
                        let r = parse_f64(key, v)?;
                        if !(r > 0.0) {
                            return Err(format!("lr {r} must be positive (or `auto`)"));
                        }
                        LrSpec::Fixed(r)
                    }
                }
                "weight_decay" => {
                    let w = parse_f64(key, v)?;
                    if !(w >= 0.0) {
                        return Err(format!("weight_decay {w} must be non-negative"));
                    }
                    self.weight_decay = w;
                }
                "warmup_frac" => {
                    let w = parse_f64(key, v)?;
                    if !(0.0..=0.5).contains(&w) {
                        return Err(format!("warmup_frac {w} outside [0, 0.5]"));
                    }
                    self.warmup_frac = w;
                }
                "epochs" => self.epochs = parse_usize(key, v)?,
                "batch" => {
                    let b = parse_usize(key, v)?;
                    if b == 0 {
                        return Err("batch must be at least 1".to_string());
                    }
                    self.batch = b;
                }
                "checkpoint_every" => self.checkpoint_every = parse_usize(key, v)?,
                _ => return unknown(),
            },
            Section::Dataset => match key {
                "source" => self.source = DataSource::parse(v).map_err(|e| e.to_string())?,
                "root" => self.root = PathBuf::from(v),
                "classes" => self.classes = parse_usize(key, v)?,
                "train" => self.train_n = parse_usize(key, v)?,
                "eval" => self.eval_n = parse_usize(key, v)?,
                "split_seed" => self.split_seed = parse_u64(key, v)?,
                _ => return unknown(),
            },
            Section::Metrics => match key {
                "eval_every" => self.eval_every = parse_usize(key, v)?,
                "eval_samples" => self.eval_samples = parse_usize(key, v)?,
                "deterministic_timing" => self.deterministic_timing = parse_bool(key, v)?,
                _ => return unknown(),
            },
            Section::State => match key {
                "epoch" => self.state_epoch = parse_usize(key, v)?,
                "step" => self.state_step = parse_u64(key, v)?,
                _ => return unknown(),
            },
        }
        Ok(())
    }

    /// Parse config text. `origin` names the source in error messages
    /// (a path for files, a tag like `<checkpoint>` for embedded blobs).
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let err = |line: usize, msg: String| Error::Config {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut cfg = RunConfig::default();
        let mut section: Option<Section> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "unterminated [section] header".to_string()))?;
                section = Some(
                    Section::parse(name)
                        .ok_or_else(|| err(line, format!("unknown section `[{name}]`")))?,
                );
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| err(line, "expected `key = value`".to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            let sec =
                section.ok_or_else(|| err(line, "key before any [section] header".to_string()))?;
            cfg.assign(sec, key, value).map_err(|m| err(line, m))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Canonical serialization: every key, fixed order. `parse(canonical(c))`
    /// reproduces `c` bitwise and `canonical(parse(f))` is a normal form.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[run]").unwrap();
        writeln!(w, "kind = {}", self.kind.name()).unwrap();
        writeln!(w, "seed = {}", self.seed).unwrap();
        writeln!(w, "out = {}", self.out.display()).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[model]").unwrap();
        writeln!(w, "size = {}", self.size).unwrap();
        writeln!(w, "channels = {}", self.channels).unwrap();
        writeln!(w, "patch = {}", self.patch).unwrap();
        writeln!(w, "dim = {}", self.dim).unwrap();
        writeln!(w, "heads = {}", self.heads).unwrap();
        writeln!(w, "mlp_ratio = {}", self.mlp_ratio).unwrap();
        writeln!(w, "mask_ratio = {}", self.mask_ratio).unwrap();
        writeln!(w, "depth = {}", self.depth).unwrap();
        writeln!(w, "schedule = {}", self.schedule_kind.name()).unwrap();
        writeln!(w, "alpha_min = {}", self.alpha_min).unwrap();
        writeln!(w, "variant = {}", self.variant.name()).unwrap();
        writeln!(w, "decay_target = {}", self.decay_target.name()).unwrap();
        writeln!(w, "skip_period = {}", self.skip_period).unwrap();
        writeln!(w, "use_skips = {}", self.use_skips).unwrap();
        writeln!(w, "cls_token = {}", self.cls_token).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[diffusion]").unwrap();
        writeln!(w, "timesteps = {}", self.timesteps).unwrap();
        writeln!(w, "beta_start = {}", self.beta_start).unwrap();
        writeln!(w, "beta_end = {}", self.beta_end).unwrap();
        writeln!(w, "conditional = {}", self.conditional).unwrap();
        writeln!(w, "long_skips = {}", self.long_skips).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[optimizer]").unwrap();
        match self.lr {
            LrSpec::Auto => writeln!(w, "lr = auto").unwrap(),
            LrSpec::Fixed(v) => writeln!(w, "lr = {v}").unwrap(),
        }
        writeln!(w, "weight_decay = {}", self.weight_decay).unwrap();
        writeln!(w, "warmup_frac = {}", self.warmup_frac).unwrap();
        writeln!(w, "epochs = {}", self.epochs).unwrap();
        writeln!(w, "batch = {}", self.batch).unwrap();
        writeln!(w, "checkpoint_every = {}", self.checkpoint_every).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[dataset]").unwrap();
        writeln!(w, "source = {}", self.source.name()).unwrap();
        writeln!(w, "root = {}", self.root.display()).unwrap();
        writeln!(w, "classes = {}", self.classes).unwrap();
        writeln!(w, "train = {}", self.train_n).unwrap();
        writeln!(w, "eval = {}", self.eval_n).unwrap();
        writeln!(w, "split_seed = {}", self.split_seed).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[metrics]").unwrap();
        writeln!(w, "eval_every = {}", self.eval_every).unwrap();
        writeln!(w, "eval_samples = {}", self.eval_samples).unwrap();
        writeln!(w, "deterministic_timing = {}", self.deterministic_timing).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[state]").unwrap();
        writeln!(w, "epoch = {}", self.state_epoch).unwrap();
        writeln!(w, "step = {}", self.state_step).unwrap();
        s
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::new(self.schedule_kind, self.depth, self.alpha_min)
    }

    /// Encoder/classifier geometry plus the decay schedule.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            size: self.size,
            channels: self.channels,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            mask_ratio: self.mask_ratio,
            schedule: self.schedule()?,
            variant: self.variant,
            decay_target: self.decay_target,
            skip_period: self.skip_period,
            use_skips: self.use_skips,
            cls_token: self.cls_token,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let cfg = BackboneConfig {
            size: self.size,
            channels: self.channels,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            schedule: self.schedule()?,
            variant: self.variant,
            decay_target: self.decay_target,
            long_skips: self.long_skips,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        let cfg = DiffusionConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            backbone: self.backbone_config()?,
            classes: if self.conditional {
                Some(self.classes)
            } else {
                None
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr.peak(self.batch)
    }

    /// Cross-field checks for the configured experiment kind.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExperimentKind::Mae | ExperimentKind::Cls => {
                self.model_config()?;
            }
            ExperimentKind::Ddpm => {
                self.diffusion_config()?;
            }
        }
        if self.train_n == 0 {
            return Err(Error::invalid("dataset train split is empty"));
        }
        if self.eval_n == 0 {
            return Err(Error::invalid("dataset eval split is empty"));
        }
        Ok(())
    }

    /// Copy with resume bookkeeping zeroed, for comparing run identity.
    pub fn without_state(&self) -> RunConfig {
        let mut c = self.clone();
        c.state_epoch = 0;
        c.state_step = 0;
        c
    }

    /// Copy with resume bookkeeping set, for embedding into a checkpoint.
    pub fn with_state(&self, epoch: usize, step: u64) -> RunConfig {
        let mut c = self.clone();
        c.state_epoch = epoch;
        c.state_step = step;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_bitwise() {
        let cfg = RunConfig::default();
        let text = cfg.canonical();
        let back = RunConfig::parse(&text, "<mem>").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = RunConfig::parse("[model]\nalpha_min = 0.8\n", "<mem>").unwrap();
        let mut expect = RunConfig::default();
        expect.alpha_min = 0.8;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = RunConfig::parse("", "<mem>").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# run description\n\n[run]\nseed = 3\n  # indented comment\n[model]\ndim = 64\n";
        let cfg = RunConfig::parse(text, "<mem>").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dim, 64);
    }

    #[test]
    fn alpha_min_domain_error_names_bound() {
        let e = RunConfig::parse("[model]\nalpha_min = 1.5\n", "cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("cfg:2"), "{msg}");
        assert!(msg.contains("(0, 1]"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let e = RunConfig::parse("[model]\nwidth = 5\n", "cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("cfg:2"), "{msg}");
        assert!(msg.contains("unknown key `width`"), "{msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let e = RunConfig::parse("[trainer]\nlr = 0.1\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("unknown section"), "{e}");
    }

    #[test]
    fn key_outside_section_is_rejected() {
        let e = RunConfig::parse("seed = 1\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("before any [section]"), "{e}");
    }

    #[test]
    fn malformed_line_is_rejected() {
        let e = RunConfig::parse("[run]\nseed\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("key = value"), "{e}");
    }

    #[test]
    fn lr_auto_scales_linearly_from_reference() {
        let mut cfg = RunConfig::default();
        cfg.batch = 64;
        assert!((cfg.peak_lr() - 6e-4 * 64.0 / 1024.0).abs() < 1e-18);
        cfg.lr = LrSpec::Fixed(1e-3);
        assert_eq!(cfg.peak_lr(), 1e-3);
    }

    #[test]
    fn lr_parses_auto_and_fixed() {
        let cfg = RunConfig::parse("[optimizer]\nlr = auto\n", "<mem>").unwrap();
        assert_eq!(cfg.lr, LrSpec::Auto);
        let cfg = RunConfig::parse("[optimizer]\nlr = 0.002\n", "<mem>").unwrap();
        assert_eq!(cfg.lr, LrSpec::Fixed(0.002));
        assert!(RunConfig::parse("[optimizer]\nlr = -1\n", "<mem>").is_err());
    }

    #[test]
    fn nondefault_values_survive_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.kind = ExperimentKind::Ddpm;
        cfg.seed = 99;
        cfg.out = PathBuf::from("runs/ddpm-a");
        cfg.size = 8;
        cfg.channels = 1;
        cfg.patch = 2;
        cfg.dim = 48;
        cfg.depth = 4;
        cfg.schedule_kind = ScheduleKind::Cosine;
        cfg.alpha_min = 0.7;
        cfg.variant = ShortcutVariant::Baseline;
        cfg.decay_target = DecayTarget::MlpOnly;
        cfg.conditional = true;
        cfg.long_skips = false;
        cfg.lr = LrSpec::Fixed(3.5e-4);
        cfg.source = DataSource::ToyTwoMode;
        cfg.classes = 2;
        cfg.state_epoch = 12;
        cfg.state_step = 480;
        let back = RunConfig::parse(&cfg.canonical(), "<mem>").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_config_builder_checks_geometry() {
        let mut cfg = RunConfig::default();
        cfg.size = 30; // not divisible by patch 4
        assert!(cfg.model_config().is_err());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn state_helpers() {
        let cfg = RunConfig::default().with_state(7, 280);
        assert_eq!(cfg.state_epoch, 7);
        assert_eq!(cfg.state_step, 280);
        assert_eq!(cfg.without_state(), RunConfig::default());
    }
}
