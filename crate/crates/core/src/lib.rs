//! Pure building blocks for evolutionary model merging.
//!
//! * [`tensor`]: named f32 tensors and key filtering.
//! * [`merge`]: task vectors, DARE, TIES trim/elect/merge, and the linear,
//!   SLERP and task-arithmetic baselines.
//! * [`genotype`]: the unit-box encoding of merge hyperparameters.
//! * [`cmaes`]: a deterministic, resumable CMA-ES.
//! * [`metrics`]: BLEU, ROUGE-L and METEOR.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod cmaes;
pub mod error;
pub mod genotype;
pub mod merge;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use genotype::GenotypeLayout;
pub use merge::{MergeConfig, Normalize, TaskSet, TaskVector, TrimScope};
pub use tensor::{KeyFilter, Tensor, TensorMap};
