//! Seeded desk-scale merge problems.
//!
//! Linear suite: `n_features` coefficients live in `llm.weight`, next to a
//! frozen `vision.proj` that no merge touches. The first `max(1, f/4)`
//! features are shared by every task; each remaining feature `j` belongs to
//! task `j % K`. Task `t` sees `n_samples` rows that are zero outside its
//! features, with `y = X w_true + N(0, 0.1²)`. Its fine-tuned model is the
//! ridge fit pulled toward the base,
//! `w_t = (XᵀX + ρI)⁻¹ (Xᵀy + ρ θ_init)` with `ρ = 0.1`, so features the task
//! never sees keep their base value. The `eval` and `holdout` splits use all
//! features.
//!
//! Vector fixture: `dim` merge-domain elements split over two `llm.*`
//! tensors; fine-tuned models are the base plus standard-normal task
//! vectors; the target is a TIES merge at a configuration off the 5-point
//! grid plus `N(0, 0.01²)` noise.

use evomerge_core::merge::{ties_dare_merge, MergeConfig};
use evomerge_core::{Tensor, TensorMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const RIDGE: f64 = 0.1;
pub const LABEL_NOISE: f64 = 0.1;
pub const TARGET_NOISE: f64 = 0.01;
pub const WEIGHT_TENSOR: &str = "llm.weight";
pub const FROZEN_TENSOR: &str = "vision.proj";

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Solves `(XᵀX + ρI) w = Xᵀy + ρ·prior` for row-major `x` with `prior.len()` columns.
pub fn ridge_solve(x: &[f64], y: &[f64], prior: &[f64], rho: f64) -> Result<Vec<f64>> {
    let cols = prior.len();
    if cols == 0 || x.len() != y.len() * cols {
        return Err(Error::Data(format!(
            "design matrix has {} values for {} rows and {cols} columns",
            x.len(),
            y.len()
        )));
    }
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::config("ridge", "coefficient must be positive"));
    }
    let xm = DMatrix::from_row_slice(y.len(), cols, x);
    let a = xm.transpose() * &xm + DMatrix::identity(cols, cols) * rho;
    let b =
        xm.transpose() * DVector::from_column_slice(y) + DVector::from_column_slice(prior) * rho;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Data("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

#[derive(Debug, Clone)]
pub struct LinearSuite {
    pub base: TensorMap,
    pub models: Vec<TensorMap>,
    /// `task{t}.x`, `task{t}.y`, `eval.x`, `eval.y`, `holdout.x`, `holdout.y`.
    pub suite: TensorMap,
    pub w_true: Vec<f64>,
}

pub fn shared_features(n_features: usize) -> usize {
    (n_features / 4).max(1)
}

/// True when task `t` of `n_tasks` observes feature `j`.
pub fn task_sees(j: usize, t: usize, n_tasks: usize, n_features: usize) -> bool {
    j < shared_features(n_features) || j % n_tasks == t
}

fn design(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    w_true: &[f64],
    active: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(rows * cols);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut target = 0.0;
        for (j, w) in w_true.iter().enumerate() {
            let v = normal(rng);
            let v = if active(j) { v } else { 0.0 };
            target += v * w;
            x.push(v);
        }
        y.push(target + LABEL_NOISE * normal(rng));
    }
    (x, y)
}

pub fn make_linear_suite(
    seed: u64,
    n_tasks: usize,
    n_features: usize,
    n_samples: usize,
) -> Result<LinearSuite> {
    if n_tasks == 0 || n_features == 0 || n_samples == 0 {
        return Err(Error::config(
            "fixture",
            "tasks, features and samples must be at least 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..n_features).map(|_| normal(&mut rng)).collect();
    // f32-representable so the base round-trips through archives unchanged
    let theta_init: Vec<f64> = (0..n_features)
        .map(|_| (0.5 * normal(&mut rng)) as f32 as f64)
        .collect();
    let frozen: Vec<f32> = (0..4).map(|_| normal(&mut rng) as f32).collect();

    let mut base = TensorMap::new();
    base.insert(WEIGHT_TENSOR, Tensor::vector(f32s(&theta_init)));
    base.insert(FROZEN_TENSOR, Tensor::new(vec![2, 2], frozen).expect("2x2"));

    let mut suite = TensorMap::new();
    let mut models = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let (x, y) = design(&mut rng, n_samples, n_features, &w_true, |j| {
            task_sees(j, t, n_tasks, n_features)
        });
        let w = ridge_solve(&x, &y, &theta_init, RIDGE)?;
        let mut model = base.clone();
        model.insert(WEIGHT_TENSOR, Tensor::vector(f32s(&w)));
        models.push(model);
        suite.insert(
            format!("task{t}.x"),
            Tensor::new(vec![n_samples, n_features], f32s(&x))?,
        );
        suite.insert(format!("task{t}.y"), Tensor::vector(f32s(&y)));
    }
    for split in ["eval", "holdout"] {
        let (x, y) = design(&mut rng, n_samples, n_features, &w_true, |_| true);
        suite.insert(
            format!("{split}.x"),
            Tensor::new(vec![n_samples, n_features], f32s(&x))?,
        );
        suite.insert(format!("{split}.y"), Tensor::vector(f32s(&y)));
    }
    suite.metadata_mut().insert("seed".into(), seed.to_string());
    Ok(LinearSuite {
        base,
        models,
        suite,
        w_true,
    })
}

#[derive(Debug, Clone)]
pub struct VectorFixture {
    pub base: TensorMap,
    pub models: Vec<TensorMap>,
    pub target: TensorMap,
    /// Configuration the target was merged with, before noise.
    pub config: MergeConfig,
}

/// Off-grid merge settings: `k` from 0.6 to 0.85, `c` from 0.7 to 1.3, `λ = 1.1`.
pub fn off_grid_config(n_tasks: usize) -> MergeConfig {
    let span = (n_tasks.max(2) - 1) as f64;
    // endpoint-exact interpolation, so two tasks get exactly (0.6, 0.85) and (0.7, 1.3)
    let lerp = |lo: f64, hi: f64, t: usize| (lo * (span - t as f64) + hi * t as f64) / span;
    let mut cfg = MergeConfig::identity(n_tasks);
    cfg.k = (0..n_tasks).map(|t| lerp(0.6, 0.85, t)).collect();
    cfg.c = (0..n_tasks).map(|t| lerp(0.7, 1.3, t)).collect();
    cfg.lambda = 1.1;
    cfg.include = vec!["llm.*".into()];
    cfg
}

pub fn make_vector_fixture(seed: u64, n_tasks: usize, dim: usize) -> Result<VectorFixture> {
    if n_tasks == 0 || dim < 2 {
        return Err(Error::config(
            "fixture",
            "need at least 1 task and 2 dimensions",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let halves = [
        ("llm.block0.weight", dim / 2),
        ("llm.block1.weight", dim - dim / 2),
    ];
    let mut base = TensorMap::new();
    for (name, n) in halves {
        base.insert(
            name,
            Tensor::vector((0..n).map(|_| normal(&mut rng) as f32).collect()),
        );
    }
    base.insert(
        FROZEN_TENSOR,
        Tensor::new(
            vec![2, 2],
            (0..4).map(|_| normal(&mut rng) as f32).collect(),
        )
        .expect("2x2"),
    );
    let mut models = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let mut m = base.clone();
        for (name, _) in halves {
            let b = base.get(name).expect("inserted");
            let data = b
                .data()
                .iter()
                .map(|&v| v + normal(&mut rng) as f32)
                .collect();
            m.insert(name, Tensor::vector(data));
        }
        models.push(m);
    }
    let config = off_grid_config(n_tasks);
    let refs: Vec<&TensorMap> = models.iter().collect();
    let mut target = ties_dare_merge(&base, &refs, &config)?;
    for (name, _) in halves {
        let t = target.get(name).expect("merged");
        let data = t
            .data()
            .iter()
            .map(|&v| (v as f64 + TARGET_NOISE * normal(&mut rng)) as f32)
            .collect();
        target.insert(name, Tensor::vector(data));
    }
    Ok(VectorFixture {
        base,
        models,
        target,
        config,
    })
}
