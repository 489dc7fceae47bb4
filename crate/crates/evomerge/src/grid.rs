//! Exhaustive grid search over the genotype box, used to check the optimizer.

use std::collections::HashSet;

use evomerge_core::{GenotypeLayout, MergeConfig, TaskSet};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitness::Evaluator;

pub const MAX_GRID: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_genotype: Vec<f64>,
    pub best_config: MergeConfig,
    pub best_fitness: f64,
    /// Grid points enumerated.
    pub points: usize,
    /// Distinct configurations actually evaluated.
    pub evaluations: usize,
}

/// Coordinates of a `points`-per-dimension grid on `[0, 1]`; a single point sits at 0.5.
pub fn axis(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5],
        p => (0..p).map(|i| i as f64 / (p - 1) as f64).collect(),
    }
}

/// Evaluates every grid genotype with the drop rate pinned to 0.
///
/// Genotypes are visited in lexicographic order (first gene slowest) and
/// those decoding to an already seen configuration are skipped. Ties go to
/// the lexicographically smallest genotype.
pub fn grid_oracle(
    tasks: &TaskSet,
    evaluator: &Evaluator,
    layout: &GenotypeLayout,
    template: &MergeConfig,
    points: usize,
) -> Result<GridResult> {
    let layout = GenotypeLayout {
        fixed_alpha: Some(0.0),
        ..layout.clone()
    };
    let dims = layout.dims();
    let coords = axis(points);
    let total = (0..dims).try_fold(1usize, |acc, _| {
        acc.checked_mul(points).filter(|&n| n <= MAX_GRID)
    });
    let total = match total {
        Some(n) if n > 0 => n,
        _ => {
            return Err(Error::config(
                "grid",
                format!("{points}^{dims} points exceeds the limit of {MAX_GRID} (or is empty)"),
            ))
        }
    };
    let mut seen = HashSet::new();
    let mut unique = Vec::new();
    for idx in 0..total {
        let mut genes = vec![0.0; dims];
        let mut rest = idx;
        for d in (0..dims).rev() {
            genes[d] = coords[rest % points];
            rest /= points;
        }
        let cfg = layout.decode(&genes, template, template.seed)?;
        let key = serde_json::to_vec(&cfg).map_err(|e| Error::Internal(e.to_string()))?;
        if seen.insert(key) {
            unique.push((genes, cfg));
        }
    }
    let fitness: Vec<f64> = unique
        .par_iter()
        .map(|(_, cfg)| {
            let merged = tasks.merge(cfg)?;
            evaluator.evaluate(&merged, tasks.domain())
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, f) in fitness.iter().enumerate() {
        if *f > fitness[best] {
            best = i;
        }
    }
    let (genes, cfg) = unique.swap_remove(best);
    Ok(GridResult {
        best_genotype: genes,
        best_config: cfg,
        best_fitness: fitness[best],
        points: total,
        evaluations: fitness.len(),
    })
}
