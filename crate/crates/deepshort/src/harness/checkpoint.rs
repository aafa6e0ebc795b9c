//! Checkpoint container ("DSCK"): the run's canonical config text followed
//! by named tensor records in the DSTN snapshot format. Every checkpoint
//! carries enough to rebuild the model, the optimizer, and the position in
//! the run, so resuming continues the original trajectory exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::optim::AdamW;
use crate::tensor::{ParamArena, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u32 = 1;

/// Parsed checkpoint: embedded config (with `[state]` filled in) plus the
/// named tensors, in file order.
#[derive(Debug)]
pub struct CheckpointData<F> {
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> CheckpointData<F> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copy every `param.*` record into the arena. The name sets must match
    /// exactly: a checkpoint for a different architecture is an error, not a
    /// partial load.
    pub fn apply_params(&self, arena: &mut ParamArena<F>) -> Result<()> {
        let mut seen = 0usize;
        for (name, tensor) in &self.tensors {
            let Some(pname) = name.strip_prefix("param.") else {
                continue;
            };
            let id = arena.find(pname).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter `{pname}` not in this model"))
            })?;
            if arena.value(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{pname}` has shape {:?} in the checkpoint, {:?} in the model",
                    tensor.shape(),
                    arena.value(id).shape()
                )));
            }
            arena.set_value(id, tensor.clone());
            seen += 1;
        }
        if seen != arena.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} model parameters",
                arena.len()
            )));
        }
        Ok(())
    }

    /// Rebuild the optimizer from `opt.m.*` / `opt.v.*` records; `None` when
    /// the checkpoint carries no optimizer state.
    pub fn optimizer(&self, arena: &ParamArena<F>, weight_decay: f64) -> Result<Option<AdamW<F>>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with("opt.m.")) {
            return Ok(None);
        }
        let mut m = Vec::with_capacity(arena.len());
        let mut v = Vec::with_capacity(arena.len());
        for (_, p) in arena.iter() {
            let mm = self.tensor(&format!("opt.m.{}", p.name)).ok_or_else(|| {
                Error::Checkpoint(format!("missing optimizer moment for `{}`", p.name))
            })?;
            let vv = self.tensor(&format!("opt.v.{}", p.name)).ok_or_else(|| {
                Error::Checkpoint(format!("missing optimizer moment for `{}`", p.name))
            })?;
            m.push(mm.clone());
            v.push(vv.clone());
        }
        let opt = AdamW::restore(arena, weight_decay, self.config.state_step, m, v)?;
        Ok(Some(opt))
    }
}

/// Write a checkpoint: the config exactly as given (callers fill `[state]`
/// first via `RunConfig::with_state`), all parameters, and optionally the
/// optimizer moments.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    cfg: &RunConfig,
    arena: &ParamArena<F>,
    opt: Option<&AdamW<F>>,
) -> Result<()> {
    let cfg_text = cfg.canonical();
    let mut records: Vec<(String, &Tensor<F>)> = arena
        .iter()
        .map(|(_, p)| (format!("param.{}", p.name), p.value.as_ref()))
        .collect();
    if let Some(opt) = opt {
        let (m, v) = opt.moments();
        for ((_, p), t) in arena.iter().zip(m) {
            records.push((format!("opt.m.{}", p.name), t));
        }
        for ((_, p), t) in arena.iter().zip(v) {
            records.push((format!("opt.v.{}", p.name), t));
        }
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(cfg_text.as_bytes());
    bytes.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in &records {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("record name too long: {name}")));
        }
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        tensor.write_dstn(&mut bytes);
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, n: usize) -> Option<&'a [u8]> {
    let end = cursor.checked_add(n).filter(|&e| e <= bytes.len())?;
    let s = &bytes[*cursor..end];
    *cursor = end;
    Some(s)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<CheckpointData<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut cursor = 0usize;
    let magic = take(&bytes, &mut cursor, 4).ok_or_else(|| fail("truncated"))?;
    if magic != MAGIC {
        return Err(fail("bad magic (not a DSCK checkpoint)"));
    }
    let version = take(&bytes, &mut cursor, 4).ok_or_else(|| fail("truncated"))?;
    let version = u32::from_le_bytes(version.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let len = take(&bytes, &mut cursor, 8).ok_or_else(|| fail("truncated"))?;
    let cfg_len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
    let cfg_bytes = take(&bytes, &mut cursor, cfg_len).ok_or_else(|| fail("truncated"))?;
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| fail("config blob is not UTF-8"))?
        .to_string();
    let config = RunConfig::parse(&cfg_text, &format!("{}:<config>", path.display()))?;
    let count = take(&bytes, &mut cursor, 4).ok_or_else(|| fail("truncated"))?;
    let count = u32::from_le_bytes(count.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = take(&bytes, &mut cursor, 2).ok_or_else(|| fail("truncated"))?;
        let name_len = u16::from_le_bytes(nl.try_into().unwrap()) as usize;
        let nb = take(&bytes, &mut cursor, name_len).ok_or_else(|| fail("truncated"))?;
        let name = std::str::from_utf8(nb)
            .map_err(|_| fail("record name is not UTF-8"))?
            .to_string();
        let tensor = Tensor::<F>::read_dstn(&bytes, &mut cursor)?;
        tensors.push((name, tensor));
    }
    if cursor != bytes.len() {
        return Err(fail("trailing bytes after the last record"));
    }
    Ok(CheckpointData { config, tensors })
}
