//! Checkpoint files, fitness evaluation and the optimization driver around
//! [`evomerge_core`].
//!
//! * [`archive`]: the binary tensor archive format.
//! * [`config`]: JSON configs and `--set` overrides.
//! * [`checkpoint`], [`manifest`]: optimizer checkpoints and run manifests.
//! * [`fitness`]: vector-target, linear-task and external-generator fitness.
//! * [`fixtures`]: seeded benchmark problems.
//! * [`grid`]: brute-force reference search.
//! * [`optimize`]: the CMA-ES merge driver.
//! * [`cli`]: the `evomerge` command.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fitness;
pub mod fixtures;
pub mod grid;
pub mod inspect;
pub mod manifest;
pub mod optimize;
pub mod process;
pub mod text;

pub use error::{Error, Result};
