//! Task-vector arithmetic: DARE, TIES trim/elect/disjoint-merge, and the
//! linear, SLERP and task-arithmetic baselines.
//!
//! Task vectors are held in f64 over the flattened merge domain (tensors in
//! name order, each row-major). Differences of two f32 values are then exact
//! whenever their magnitudes are within 2^29 of each other, so the recovery
//! configuration reproduces a fine-tuned checkpoint bit-for-bit.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{aligned_keys, KeyFilter, Tensor, TensorMap};

/// Upper bound on the DARE drop rate; keeps the 1/(1-alpha) rescale finite.
pub const ALPHA_MAX: f64 = 0.9;
/// Upper bound on per-task merge weights.
pub const C_MAX: f64 = 2.0;
/// Upper bound on the global scale.
pub const LAMBDA_MAX: f64 = 2.0;

/// Layout of a flattened merge domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl Domain {
    /// Builds the domain from aligned key names, taking shapes from `shapes_from`.
    pub fn from_keys(keys: Vec<String>, shapes_from: &TensorMap) -> Result<Self> {
        let mut shapes = Vec::with_capacity(keys.len());
        let mut offsets = Vec::with_capacity(keys.len() + 1);
        offsets.push(0);
        for name in &keys {
            let t = shapes_from.get(name).ok_or_else(|| Error::MissingKey {
                map_index: 0,
                name: name.clone(),
            })?;
            shapes.push(t.shape().to_vec());
            offsets.push(offsets.last().unwrap() + t.numel());
        }
        Ok(Self {
            names: keys,
            shapes,
            offsets,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Total element count `d`.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Flat index range occupied by the `i`-th tensor.
    pub fn range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Concatenates the domain's tensors from `map` in domain order, widened to f64.
    pub fn flatten(&self, map: &TensorMap) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for name in &self.names {
            let t = map.get(name).expect("domain key present");
            out.extend(t.data().iter().map(|&v| v as f64));
        }
        out
    }
}

/// Elementwise difference between a fine-tuned checkpoint and its base,
/// restricted to the merge domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    domain: Domain,
    values: Vec<f64>,
}

impl TaskVector {
    pub fn from_parts(domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(invalid(
                "values",
                alloc::format!("expected {} values, got {}", domain.len(), values.len()),
            ));
        }
        Ok(Self { domain, values })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            domain: self.domain.clone(),
            values,
        }
    }
}

/// Per-parameter elected sign, each in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectedSigns(pub Vec<i8>);

impl ElectedSigns {
    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }
}

/// Divisor used by the disjoint merge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    /// Divide by the number of sign-agreeing tasks.
    #[default]
    Count,
    /// Divide by the summed weights of the sign-agreeing tasks.
    WeightSum,
}

/// Whether trimming ranks magnitudes across the whole domain or per tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    #[default]
    Global,
    PerTensor,
}

/// Merge hyperparameters (the phenotype searched by the optimizer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Shared DARE drop rate.
    pub alpha: f64,
    /// Optional per-task drop rates; overrides `alpha` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_per_task: Option<Vec<f64>>,
    /// Retained fraction per task.
    pub k: Vec<f64>,
    /// Merge weight per task.
    pub c: Vec<f64>,
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default)]
    pub trim_scope: TrimScope,
    #[serde(default)]
    pub fixed_mask: bool,
}

impl MergeConfig {
    /// Configuration that reproduces each fine-tuned model's own contribution
    /// unchanged: no drops, no trimming, unit weights and scale.
    pub fn identity(tasks: usize) -> Self {
        Self {
            alpha: 0.0,
            alpha_per_task: None,
            k: alloc::vec![1.0; tasks],
            c: alloc::vec![1.0; tasks],
            lambda: 1.0,
            seed: 0,
            include: Vec::new(),
            exclude: Vec::new(),
            normalize: Normalize::Count,
            trim_scope: TrimScope::Global,
            fixed_mask: false,
        }
    }

    pub fn tasks(&self) -> usize {
        self.k.len()
    }

    pub fn filter(&self) -> KeyFilter {
        KeyFilter {
            include: self.include.clone(),
            exclude: self.exclude.clone(),
        }
    }

    /// Drop rate applied to task `t`.
    pub fn alpha_for(&self, t: usize) -> f64 {
        match &self.alpha_per_task {
            Some(a) => a[t],
            None => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tasks = self.k.len();
        if tasks == 0 {
            return Err(invalid("k", "at least one task is required"));
        }
        if self.c.len() != tasks {
            return Err(invalid(
                "c",
                alloc::format!("expected {tasks} weights, got {}", self.c.len()),
            ));
        }
        check_range("alpha", self.alpha, ALPHA_MAX)?;
        if let Some(a) = &self.alpha_per_task {
            if a.len() != tasks {
                return Err(invalid(
                    "alpha_per_task",
                    alloc::format!("expected {tasks} rates, got {}", a.len()),
                ));
            }
            for &v in a {
                check_range("alpha_per_task", v, ALPHA_MAX)?;
            }
        }
        for &v in &self.k {
            check_range("k", v, 1.0)?;
        }
        for &v in &self.c {
            check_range("c", v, C_MAX)?;
        }
        check_range("lambda", self.lambda, LAMBDA_MAX)
    }
}

fn check_range(name: &'static str, value: f64, max: f64) -> Result<()> {
    if value.is_finite() && (0.0..=max).contains(&value) {
        Ok(())
    } else {
        Err(invalid(
            name,
            alloc::format!("{value} is outside [0, {max}]"),
        ))
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed: `splitmix64(seed + (index + 1) * 0x9E3779B97F4A7C15)`
/// with wrapping arithmetic.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Builds the merge domain for a set of maps under `filter`.
pub fn merge_domain(maps: &[&TensorMap], filter: &KeyFilter) -> Result<Domain> {
    let keys = aligned_keys(maps, filter)?;
    Domain::from_keys(keys, maps[0])
}

/// `theta_ft - theta_init` over the filtered, aligned domain.
pub fn task_vector(
    theta_ft: &TensorMap,
    theta_init: &TensorMap,
    filter: &KeyFilter,
) -> Result<TaskVector> {
    let domain = merge_domain(&[theta_init, theta_ft], filter)?;
    Ok(task_vector_on(&domain, theta_ft, theta_init))
}

fn task_vector_on(domain: &Domain, theta_ft: &TensorMap, theta_init: &TensorMap) -> TaskVector {
    let ft = domain.flatten(theta_ft);
    let init = domain.flatten(theta_init);
    let values = ft.iter().zip(&init).map(|(a, b)| a - b).collect();
    TaskVector {
        domain: domain.clone(),
        values,
    }
}

/// Drop-and-rescale: each element is zeroed with probability `alpha` (one
/// uniform draw per element from a ChaCha8 stream seeded with `seed`, in flat
/// order) and survivors are divided by `1 - alpha`.
pub fn dare(tau: &TaskVector, alpha: f64, seed: u64) -> Result<TaskVector> {
    check_range("alpha", alpha, ALPHA_MAX)?;
    if alpha == 0.0 {
        return Ok(tau.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - alpha;
    let values = tau
        .values
        .iter()
        .map(|&v| {
            let dropped = rng.random::<f64>() < alpha;
            if dropped {
                0.0
            } else {
                v / keep
            }
        })
        .collect();
    Ok(tau.with_values(values))
}

/// Number of elements kept when retaining fraction `k` of `d`.
pub fn retained_count(k: f64, d: usize) -> usize {
    let r = libm::ceil(k * d as f64);
    (r.max(0.0) as usize).min(d)
}

/// Keeps the `ceil(k * d)` largest-magnitude entries over the whole domain.
pub fn trim(tau: &TaskVector, k: f64) -> Result<TaskVector> {
    trim_scoped(tau, k, TrimScope::Global)
}

/// Keeps the largest-magnitude entries, ranking either globally or within
/// each tensor. Ties at the threshold go to the smaller flat index.
pub fn trim_scoped(tau: &TaskVector, k: f64, scope: TrimScope) -> Result<TaskVector> {
    check_range("k", k, 1.0)?;
    let mut values = alloc::vec![0.0; tau.len()];
    match scope {
        TrimScope::Global => keep_top(&tau.values, &mut values, k),
        TrimScope::PerTensor => {
            for i in 0..tau.domain.names.len() {
                let range = tau.domain.range(i);
                keep_top(&tau.values[range.clone()], &mut values[range], k);
            }
        }
    }
    Ok(tau.with_values(values))
}

fn keep_top(src: &[f64], dst: &mut [f64], k: f64) {
    let r = retained_count(k, src.len());
    if r == src.len() {
        dst.copy_from_slice(src);
        return;
    }
    if r == 0 {
        return;
    }
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        libm::fabs(src[b])
            .total_cmp(&libm::fabs(src[a]))
            .then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.select_nth_unstable_by(r - 1, by_rank);
    for &i in &order[..r] {
        dst[i] = src[i];
    }
}

fn check_aligned(taus: &[TaskVector]) -> Result<&Domain> {
    let first = taus
        .first()
        .ok_or_else(|| invalid("taus", "at least one task vector is required"))?;
    if taus.iter().any(|t| t.domain != first.domain) {
        return Err(Error::DomainMismatch);
    }
    Ok(&first.domain)
}

/// Sign of the per-parameter sum over tasks (summed in task order).
pub fn elect(taus: &[TaskVector]) -> Result<ElectedSigns> {
    let domain = check_aligned(taus)?;
    let signs = (0..domain.len())
        .map(|p| {
            let mut total = 0.0;
            for tau in taus {
                total += tau.values[p];
            }
            sign(total)
        })
        .collect();
    Ok(ElectedSigns(signs))
}

/// Weighted merge of the entries whose sign agrees with the elected sign.
///
/// With [`Normalize::Count`] the weighted sum is divided by the number of
/// agreeing tasks; with [`Normalize::WeightSum`] by their summed weights
/// (zero when that sum is zero). Parameters with no agreeing task, or an
/// elected sign of zero, merge to zero.
pub fn disjoint_merge(
    taus: &[TaskVector],
    c: &[f64],
    signs: &ElectedSigns,
    normalize: Normalize,
) -> Result<TaskVector> {
    let domain = check_aligned(taus)?;
    if c.len() != taus.len() {
        return Err(invalid(
            "c",
            alloc::format!("expected {} weights, got {}", taus.len(), c.len()),
        ));
    }
    if signs.0.len() != domain.len() {
        return Err(Error::DomainMismatch);
    }
    let values = signs
        .0
        .iter()
        .enumerate()
        .map(|(p, &gamma)| {
            if gamma == 0 {
                return 0.0;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut weight = 0.0;
            for (tau, &ct) in taus.iter().zip(c) {
                let v = tau.values[p];
                if sign(v) == gamma {
                    sum += ct * v;
                    count += 1;
                    weight += ct;
                }
            }
            let divisor = match normalize {
                Normalize::Count => count as f64,
                Normalize::WeightSum => weight,
            };
            if count == 0 || divisor == 0.0 {
                0.0
            } else {
                sum / divisor
            }
        })
        .collect();
    Ok(taus[0].with_values(values))
}

/// `theta_init + lambda * merged` on the merge domain; every other tensor is
/// copied from `passthrough`.
pub fn apply_merge(
    theta_init: &TensorMap,
    merged: &TaskVector,
    lambda: f64,
    passthrough: &TensorMap,
) -> Result<TensorMap> {
    apply_scaled(theta_init, merged.domain(), passthrough, |p, base| {
        base + lambda * merged.values[p]
    })
}

fn apply_scaled(
    theta_init: &TensorMap,
    domain: &Domain,
    passthrough: &TensorMap,
    mut value: impl FnMut(usize, f64) -> f64,
) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    *out.metadata_mut() = passthrough.metadata().clone();
    for (name, tensor) in passthrough.iter() {
        if domain
            .names
            .binary_search_by(|n| n.as_str().cmp(name))
            .is_err()
        {
            out.insert(name, tensor.clone());
        }
    }
    for (i, name) in domain.names.iter().enumerate() {
        let base = theta_init.get(name).ok_or_else(|| Error::MissingKey {
            map_index: 0,
            name: name.clone(),
        })?;
        if base.shape() != domain.shapes[i].as_slice() {
            return Err(Error::ShapeMismatch {
                map_index: 0,
                name: name.clone(),
                expected: domain.shapes[i].clone(),
                found: base.shape().to_vec(),
            });
        }
        let start = domain.offsets[i];
        let data = base
            .data()
            .iter()
            .enumerate()
            .map(|(j, &b)| value(start + j, b as f64) as f32)
            .collect();
        out.insert(name.clone(), Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Base checkpoint plus precomputed task vectors, for repeated merges with
/// different configurations over the same domain.
#[derive(Debug, Clone)]
pub struct TaskSet {
    base: TensorMap,
    taus: Vec<TaskVector>,
}

impl TaskSet {
    pub fn new(
        theta_init: &TensorMap,
        thetas_ft: &[&TensorMap],
        filter: &KeyFilter,
    ) -> Result<Self> {
        if thetas_ft.is_empty() {
            return Err(invalid(
                "thetas_ft",
                "at least one fine-tuned model is required",
            ));
        }
        let mut maps = Vec::with_capacity(thetas_ft.len() + 1);
        maps.push(theta_init);
        maps.extend_from_slice(thetas_ft);
        let domain = merge_domain(&maps, filter)?;
        let taus = thetas_ft
            .iter()
            .map(|ft| task_vector_on(&domain, ft, theta_init))
            .collect();
        Ok(Self {
            base: theta_init.clone(),
            taus,
        })
    }

    pub fn base(&self) -> &TensorMap {
        &self.base
    }

    pub fn task_vectors(&self) -> &[TaskVector] {
        &self.taus
    }

    pub fn domain(&self) -> &Domain {
        self.taus[0].domain()
    }

    pub fn tasks(&self) -> usize {
        self.taus.len()
    }

    /// Merged task vector for `cfg`, before scaling. Task `t` uses DARE seed
    /// `mix_seed(cfg.seed, t)`.
    pub fn merged_vector(&self, cfg: &MergeConfig) -> Result<TaskVector> {
        cfg.validate()?;
        if cfg.tasks() != self.taus.len() {
            return Err(invalid(
                "k",
                alloc::format!(
                    "config has {} tasks, inputs have {}",
                    cfg.tasks(),
                    self.taus.len()
                ),
            ));
        }
        let trimmed = self
            .taus
            .iter()
            .enumerate()
            .map(|(t, tau)| {
                let dropped = dare(tau, cfg.alpha_for(t), mix_seed(cfg.seed, t as u64))?;
                trim_scoped(&dropped, cfg.k[t], cfg.trim_scope)
            })
            .collect::<Result<Vec<_>>>()?;
        let signs = elect(&trimmed)?;
        disjoint_merge(&trimmed, &cfg.c, &signs, cfg.normalize)
    }

    pub fn merge(&self, cfg: &MergeConfig) -> Result<TensorMap> {
        let merged = self.merged_vector(cfg)?;
        apply_merge(&self.base, &merged, cfg.lambda, &self.base)
    }
}

/// DARE on every task, TIES trim/elect/merge, then scale onto the base.
/// Tensors outside `cfg`'s filter are copied from `theta_init`.
pub fn ties_dare_merge(
    theta_init: &TensorMap,
    thetas_ft: &[&TensorMap],
    cfg: &MergeConfig,
) -> Result<TensorMap> {
    TaskSet::new(theta_init, thetas_ft, &cfg.filter())?.merge(cfg)
}

/// Elementwise weighted average. Weights must sum to one within 1e-9.
/// Tensors outside the filter come from the first model.
pub fn linear_merge(thetas: &[&TensorMap], w: &[f64], filter: &KeyFilter) -> Result<TensorMap> {
    if thetas.is_empty() {
        return Err(invalid("thetas", "at least one model is required"));
    }
    if w.len() != thetas.len() {
        return Err(invalid(
            "w",
            alloc::format!("expected {} weights, got {}", thetas.len(), w.len()),
        ));
    }
    let total: f64 = w.iter().sum();
    if !total.is_finite() || libm::fabs(total - 1.0) > 1e-9 {
        return Err(invalid(
            "w",
            alloc::format!("weights sum to {total}, expected 1"),
        ));
    }
    let domain = merge_domain(thetas, filter)?;
    let flat: Vec<Vec<f64>> = thetas.iter().map(|m| domain.flatten(m)).collect();
    apply_scaled(thetas[0], &domain, thetas[0], |p, _| {
        let mut acc = 0.0;
        for (values, &wi) in flat.iter().zip(w) {
            acc += wi * values[p];
        }
        acc
    })
}

/// Spherical interpolation of flattened vectors.
///
/// Falls back to linear interpolation when the angle is below 1e-6 rad, its
/// sine is below 1e-6 (nearly antiparallel), or either norm is below 1e-12.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    let lerp = || {
        a.iter()
            .zip(b)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect()
    };
    if na < 1e-12 || nb < 1e-12 {
        return lerp();
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let omega = libm::acos(cos);
    let sin_omega = libm::sin(omega);
    if omega < 1e-6 || sin_omega < 1e-6 {
        return lerp();
    }
    let wa = libm::sin((1.0 - t) * omega) / sin_omega;
    let wb = libm::sin(t * omega) / sin_omega;
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Per-tensor SLERP between two checkpoints; tensors outside the filter come
/// from `theta_a`.
pub fn slerp_merge(
    theta_a: &TensorMap,
    theta_b: &TensorMap,
    t: f64,
    filter: &KeyFilter,
) -> Result<TensorMap> {
    check_range("t", t, 1.0)?;
    let domain = merge_domain(&[theta_a, theta_b], filter)?;
    let a = domain.flatten(theta_a);
    let b = domain.flatten(theta_b);
    let mut values = Vec::with_capacity(a.len());
    for i in 0..domain.names.len() {
        let r = domain.range(i);
        values.extend(slerp(&a[r.clone()], &b[r], t));
    }
    apply_scaled(theta_a, &domain, theta_a, |p, _| values[p])
}

/// `theta_init + lambda * sum_t c_t * tau_t`, without trimming or election.
pub fn task_arithmetic_merge(
    theta_init: &TensorMap,
    taus: &[TaskVector],
    c: &[f64],
    lambda: f64,
) -> Result<TensorMap> {
    let domain = check_aligned(taus)?;
    if c.len() != taus.len() {
        return Err(invalid(
            "c",
            alloc::format!("expected {} weights, got {}", taus.len(), c.len()),
        ));
    }
    apply_scaled(theta_init, domain, theta_init, |p, base| {
        let mut acc = 0.0;
        for (tau, &ct) in taus.iter().zip(c) {
            acc += ct * tau.values[p];
        }
        base + lambda * acc
    })
}
