//! Mapping between the optimizer's unit-box search vector and [`MergeConfig`].
//!
//! Gene order for `K` tasks:
//!
//! | genes                         | decoded as                 |
//! |-------------------------------|----------------------------|
//! | `g[0]` (or `g[0..K]` per task) | `alpha = g * ALPHA_MAX`   |
//! | next `K`                      | `k_t = g`                  |
//! | next `K`                      | `c_t = g * C_MAX`          |
//! | last                          | `lambda = g * LAMBDA_MAX`  |
//!
//! Genes are clamped to `[0, 1]` before decoding. With a shared drop rate the
//! vector has `2K + 2` genes. When the drop rate is pinned (`fixed_alpha`), its
//! gene is still present but ignored.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::merge::{MergeConfig, ALPHA_MAX, C_MAX, LAMBDA_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeLayout {
    pub tasks: usize,
    #[serde(default)]
    pub per_task_alpha: bool,
    #[serde(default)]
    pub fixed_alpha: Option<f64>,
}

impl GenotypeLayout {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            per_task_alpha: false,
            fixed_alpha: None,
        }
    }

    fn alpha_genes(&self) -> usize {
        if self.per_task_alpha {
            self.tasks
        } else {
            1
        }
    }

    pub fn dims(&self) -> usize {
        self.alpha_genes() + 2 * self.tasks + 1
    }

    /// Decodes `genes` into a configuration, copying the non-searched fields
    /// (filter, normalization, trim scope, mask policy) from `template` and
    /// using `seed` for DARE.
    pub fn decode(&self, genes: &[f64], template: &MergeConfig, seed: u64) -> Result<MergeConfig> {
        if genes.len() != self.dims() {
            return Err(invalid(
                "genotype",
                alloc::format!("expected {} genes, got {}", self.dims(), genes.len()),
            ));
        }
        if genes.iter().any(|g| !g.is_finite()) {
            return Err(invalid("genotype", "non-finite gene"));
        }
        let g: Vec<f64> = genes.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let a = self.alpha_genes();
        let k = self.tasks;
        let alphas: Vec<f64> = match self.fixed_alpha {
            Some(v) => alloc::vec![v; a],
            None => g[..a].iter().map(|v| v * ALPHA_MAX).collect(),
        };
        let (alpha, alpha_per_task) = if self.per_task_alpha {
            (alphas[0], Some(alphas))
        } else {
            (alphas[0], None)
        };
        Ok(MergeConfig {
            alpha,
            alpha_per_task,
            k: g[a..a + k].to_vec(),
            c: g[a + k..a + 2 * k].iter().map(|v| v * C_MAX).collect(),
            lambda: g[a + 2 * k] * LAMBDA_MAX,
            seed,
            ..template.clone()
        })
    }

    /// Inverse of [`decode`](Self::decode) for a configuration inside the bounds.
    pub fn encode(&self, cfg: &MergeConfig) -> Result<Vec<f64>> {
        if cfg.tasks() != self.tasks || cfg.c.len() != self.tasks {
            return Err(invalid("config", "task count does not match the layout"));
        }
        let mut genes = Vec::with_capacity(self.dims());
        if self.per_task_alpha {
            genes.extend((0..self.tasks).map(|t| cfg.alpha_for(t) / ALPHA_MAX));
        } else {
            genes.push(cfg.alpha / ALPHA_MAX);
        }
        genes.extend_from_slice(&cfg.k);
        genes.extend(cfg.c.iter().map(|c| c / C_MAX));
        genes.push(cfg.lambda / LAMBDA_MAX);
        Ok(genes)
    }
}
