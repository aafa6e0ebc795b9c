//! Depth-indexed shortcut decay for small transformer models.
//!
//! Residual blocks here compute `x_{l+1} = alpha_l * x_l + f(x_l)` where the
//! shortcut gain `alpha_l` shrinks with depth instead of staying pinned at 1.
//! The crate provides the pieces needed to study what that does to learned
//! representations on a single CPU:
//!
//! - [`tensor`]: dense tensors, deterministic reverse-mode autodiff, seeded
//!   RNG streams, and the DSTN snapshot format;
//! - [`schedules`]: the shortcut gain schedules and their diagnostics;
//! - [`blocks`]: attention / MLP residual blocks with the decayed shortcut;
//! - [`models`]: a masked autoencoder and a supervised classifier built from
//!   those blocks;
//! - [`diffusion`]: a small denoising diffusion model with long skip
//!   connections;
//! - [`analysis`]: effective rank, nearest-neighbour and linear probes;
//! - [`harness`]: config parsing, datasets, the optimizer, checkpoints, the
//!   training loop, and the command-line interface.
//!
//! Everything is written against a bitwise-determinism contract: identical
//! seed, config, and thread budget reproduce identical metrics files and
//! checkpoints.

pub mod analysis;
pub mod blocks;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod models;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
