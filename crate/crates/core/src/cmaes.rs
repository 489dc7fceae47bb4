//! Deterministic, resumable (mu/mu_w, lambda)-CMA-ES with box clipping.
//!
//! Fitness is maximized. Sampling for generation `g` draws from a ChaCha8
//! stream seeded with `mix_seed(seed, g)`, so [`CmaState::ask`] is a pure
//! function of the state and a snapshot fully determines the remaining
//! trajectory.
//!
//! Default strategy parameters, with `n` the dimension, `lambda` the
//! population size and `mu = floor(lambda / 2)` parents:
//!
//! ```text
//! w_i      ∝ ln(mu + 1/2) - ln(i),  i = 1..mu, normalized to sum 1
//! mu_eff   = 1 / Σ w_i²
//! c_sigma  = (mu_eff + 2) / (n + mu_eff + 5)
//! d_sigma  = 1 + 2·max(0, sqrt((mu_eff - 1)/(n + 1)) - 1) + c_sigma
//! c_c      = (4 + mu_eff/n) / (n + 4 + 2·mu_eff/n)
//! c_1      = 2 / ((n + 1.3)² + mu_eff)
//! c_mu     = min(1 - c_1, 2·(mu_eff - 2 + 1/mu_eff) / ((n + 2)² + mu_eff))
//! chi_n    = sqrt(n)·(1 - 1/(4n) + 1/(21n²))
//! ```
//!
//! The eigendecomposition of `C` is refreshed every
//! `ceil(1 / (10·n·(c_1 + c_mu)))` generations.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::merge::mix_seed;

/// How the budget in [`CmaParams::max_generations`] is counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUnit {
    #[default]
    Generations,
    /// The budget counts objective evaluations; the run stops after the
    /// first generation that reaches it.
    Evaluations,
}

/// Optional replacements for the default learning rates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmu: Option<f64>,
}

impl RateOverrides {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

fn default_sigma0() -> f64 {
    1.0 / 6.0
}

fn default_budget() -> usize {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub n: usize,
    /// Defaults to `4 + floor(3 ln n)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popsize: Option<usize>,
    /// Defaults to `floor(popsize / 2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<usize>,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    /// Defaults to 0.5 in every coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean0: Option<Vec<f64>>,
    /// Run budget, counted in `budget_unit`.
    #[serde(default = "default_budget")]
    pub max_generations: usize,
    #[serde(default)]
    pub budget_unit: BudgetUnit,
    #[serde(default)]
    pub seed: u64,
    /// Per-dimension `[lo, hi]`; defaults to `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "RateOverrides::is_default")]
    pub rates: RateOverrides,
}

/// `4 + floor(3 ln n)`.
pub fn default_popsize(n: usize) -> usize {
    4 + libm::floor(3.0 * libm::log(n as f64)) as usize
}

impl CmaParams {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            popsize: None,
            mu: None,
            sigma0: default_sigma0(),
            mean0: None,
            max_generations: default_budget(),
            budget_unit: BudgetUnit::Generations,
            seed,
            bounds: None,
            rates: RateOverrides::default(),
        }
    }

    pub fn popsize(&self) -> usize {
        self.popsize.unwrap_or_else(|| default_popsize(self.n))
    }

    pub fn mu(&self) -> usize {
        self.mu.unwrap_or(self.popsize() / 2)
    }

    pub fn mean0(&self) -> Vec<f64> {
        self.mean0
            .clone()
            .unwrap_or_else(|| alloc::vec![0.5; self.n])
    }

    pub fn bounds(&self) -> Vec<[f64; 2]> {
        self.bounds
            .clone()
            .unwrap_or_else(|| alloc::vec![[0.0, 1.0]; self.n])
    }

    /// Number of generations the budget allows.
    pub fn generation_limit(&self) -> usize {
        match self.budget_unit {
            BudgetUnit::Generations => self.max_generations,
            BudgetUnit::Evaluations => self.max_generations.div_ceil(self.popsize()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "dimension must be positive"));
        }
        let popsize = self.popsize();
        if popsize < 2 {
            return Err(invalid("popsize", "must be at least 2"));
        }
        let mu = self.mu();
        if mu == 0 || mu >= popsize {
            return Err(invalid(
                "mu",
                alloc::format!("{mu} must be in 1..{popsize}"),
            ));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(invalid("sigma0", "must be positive"));
        }
        let bounds = self.bounds();
        if bounds.len() != self.n {
            return Err(invalid(
                "bounds",
                "one [lo, hi] pair per dimension is required",
            ));
        }
        if bounds
            .iter()
            .any(|[lo, hi]| lo >= hi || !lo.is_finite() || !hi.is_finite())
        {
            return Err(invalid("bounds", "each pair needs finite lo < hi"));
        }
        let mean0 = self.mean0();
        if mean0.len() != self.n || mean0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mean0", "needs n finite values"));
        }
        Ok(())
    }
}

/// Resolved strategy constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub n: usize,
    pub popsize: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c1: f64,
    pub cmu: f64,
    pub chi_n: f64,
    pub eigen_interval: usize,
}

impl Strategy {
    pub fn from_params(params: &CmaParams) -> Result<Self> {
        params.validate()?;
        let n = params.n;
        let nf = n as f64;
        let popsize = params.popsize();
        let mu = params.mu();
        let raw: Vec<f64> = (1..=mu)
            .map(|i| libm::log(mu as f64 + 0.5) - libm::log(i as f64))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let rates = &params.rates;
        let c_sigma = rates
            .c_sigma
            .unwrap_or((mu_eff + 2.0) / (nf + mu_eff + 5.0));
        let d_sigma = rates.d_sigma.unwrap_or(
            1.0 + 2.0 * (libm::sqrt((mu_eff - 1.0) / (nf + 1.0)) - 1.0).max(0.0) + c_sigma,
        );
        let c_c = rates
            .c_c
            .unwrap_or((4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf));
        let c1 = rates.c1.unwrap_or(2.0 / ((nf + 1.3) * (nf + 1.3) + mu_eff));
        let cmu = rates.cmu.unwrap_or(
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0) * (nf + 2.0) + mu_eff))
                .min(1.0 - c1),
        );
        let chi_n = libm::sqrt(nf) * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        let eigen_interval = (libm::ceil(1.0 / (10.0 * nf * (c1 + cmu))) as usize).max(1);
        Ok(Self {
            n,
            popsize,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            cmu,
            chi_n,
            eigen_interval,
        })
    }
}

/// Best candidate seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub genotype: Vec<f64>,
    pub fitness: f64,
    pub generation: usize,
}

/// Plain-data copy of the full optimizer state, for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaSnapshot {
    pub params: CmaParams,
    pub generation: usize,
    pub evaluations: usize,
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Row-major `n x n`.
    pub covariance: Vec<f64>,
    pub path_sigma: Vec<f64>,
    pub path_c: Vec<f64>,
    /// Row-major `n x n`; column `j` is the `j`-th eigenvector of the covariance.
    pub eigenvectors: Vec<f64>,
    /// Square roots of the eigenvalues.
    pub axis_lengths: Vec<f64>,
    pub eigen_generation: usize,
    pub eigen_resets: usize,
    pub best: Option<BestSoFar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    params: CmaParams,
    strategy: Strategy,
    bounds: Vec<[f64; 2]>,
    generation: usize,
    evaluations: usize,
    mean: Vec<f64>,
    sigma: f64,
    cov: Vec<f64>,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
    eigen_generation: usize,
    eigen_resets: usize,
    best: Option<BestSoFar>,
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = alloc::vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

impl CmaState {
    pub fn new(params: CmaParams) -> Result<Self> {
        let strategy = Strategy::from_params(&params)?;
        let n = params.n;
        let bounds = params.bounds();
        let mean = params.mean0();
        Ok(Self {
            sigma: params.sigma0,
            strategy,
            bounds,
            generation: 0,
            evaluations: 0,
            mean,
            cov: identity(n),
            p_sigma: alloc::vec![0.0; n],
            p_c: alloc::vec![0.0; n],
            b: identity(n),
            d: alloc::vec![1.0; n],
            eigen_generation: 0,
            eigen_resets: 0,
            best: None,
            params,
        })
    }

    pub fn params(&self) -> &CmaParams {
        &self.params
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn best(&self) -> Option<&BestSoFar> {
        self.best.as_ref()
    }

    /// Times the covariance was reset to identity after a failed decomposition.
    pub fn eigen_resets(&self) -> usize {
        self.eigen_resets
    }

    pub fn is_finished(&self) -> bool {
        self.generation >= self.params.generation_limit()
    }

    /// Clips a point into the search box.
    pub fn clip(&self, x: &mut [f64]) {
        for (v, [lo, hi]) in x.iter_mut().zip(&self.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Samples the next generation: `mean + sigma * B * D * z`, clipped.
    pub fn ask(&self) -> Vec<Vec<f64>> {
        let n = self.strategy.n;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.params.seed, self.generation as u64));
        (0..self.strategy.popsize)
            .map(|_| {
                let scaled: Vec<f64> = self
                    .d
                    .iter()
                    .map(|d| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        d * z
                    })
                    .collect();
                let mut x: Vec<f64> = (0..n)
                    .map(|i| {
                        let row = &self.b[i * n..(i + 1) * n];
                        let step: f64 = row.iter().zip(&scaled).map(|(b, s)| b * s).sum();
                        self.mean[i] + self.sigma * step
                    })
                    .collect();
                self.clip(&mut x);
                x
            })
            .collect()
    }

    /// Updates the distribution from one evaluated generation. Entries are
    /// ranked by fitness, highest first, ties by position in `evaluated`.
    pub fn tell(&mut self, evaluated: &[(Vec<f64>, f64)]) -> Result<()> {
        let s = &self.strategy;
        let n = s.n;
        if evaluated.len() != s.popsize {
            return Err(invalid(
                "evaluated",
                alloc::format!("expected {} candidates, got {}", s.popsize, evaluated.len()),
            ));
        }
        for (index, (x, f)) in evaluated.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::NonFiniteFitness { index, value: *f });
            }
            if x.len() != n || x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(
                    "evaluated",
                    alloc::format!("candidate {index} is not a finite {n}-vector"),
                ));
            }
        }
        let mut order: Vec<usize> = (0..evaluated.len()).collect();
        order.sort_by(|&a, &b| evaluated[b].1.total_cmp(&evaluated[a].1).then(a.cmp(&b)));

        let top = order[0];
        let improved = self
            .best
            .as_ref()
            .is_none_or(|best| evaluated[top].1 > best.fitness);
        if improved {
            self.best = Some(BestSoFar {
                genotype: evaluated[top].0.clone(),
                fitness: evaluated[top].1,
                generation: self.generation,
            });
        }

        let ys: Vec<Vec<f64>> = order[..s.mu]
            .iter()
            .map(|&i| {
                evaluated[i]
                    .0
                    .iter()
                    .zip(&self.mean)
                    .map(|(x, m)| (x - m) / self.sigma)
                    .collect()
            })
            .collect();
        let mut y_w = alloc::vec![0.0; n];
        for (y, w) in ys.iter().zip(&s.weights) {
            for (acc, v) in y_w.iter_mut().zip(y) {
                *acc += w * v;
            }
        }
        for (m, y) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * y;
        }

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let bt_y: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| self.b[i * n + j] * y_w[i]).sum::<f64>() / self.d[j])
            .collect();
        let whitened: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.b[i * n + j] * bt_y[j]).sum())
            .collect();

        let cs = s.c_sigma;
        let norm_factor = libm::sqrt(cs * (2.0 - cs) * s.mu_eff);
        for (p, w) in self.p_sigma.iter_mut().zip(&whitened) {
            *p = (1.0 - cs) * *p + norm_factor * w;
        }
        let ps_norm = libm::sqrt(self.p_sigma.iter().map(|v| v * v).sum());
        let gen = (self.generation + 1) as f64;
        let h_sigma = ps_norm / libm::sqrt(1.0 - libm::pow(1.0 - cs, 2.0 * gen))
            < (1.4 + 2.0 / (n as f64 + 1.0)) * s.chi_n;
        let cc = s.c_c;
        let pc_factor = if h_sigma {
            libm::sqrt(cc * (2.0 - cc) * s.mu_eff)
        } else {
            0.0
        };
        for (p, y) in self.p_c.iter_mut().zip(&y_w) {
            *p = (1.0 - cc) * *p + pc_factor * y;
        }
        let delta_h = if h_sigma { 0.0 } else { cc * (2.0 - cc) };

        let decay = 1.0 - s.c1 - s.cmu;
        for i in 0..n {
            for j in 0..=i {
                let mut rank_mu = 0.0;
                for (y, w) in ys.iter().zip(&s.weights) {
                    rank_mu += w * y[i] * y[j];
                }
                let idx = i * n + j;
                let old = self.cov[idx];
                let value = decay * old
                    + s.c1 * (self.p_c[i] * self.p_c[j] + delta_h * old)
                    + s.cmu * rank_mu;
                self.cov[idx] = value;
                self.cov[j * n + i] = value;
            }
        }

        self.sigma *= libm::exp((cs / s.d_sigma) * (ps_norm / s.chi_n - 1.0));
        self.generation += 1;
        self.evaluations += evaluated.len();
        if self.generation - self.eigen_generation >= s.eigen_interval {
            self.decompose();
        }
        Ok(())
    }

    fn decompose(&mut self) {
        let n = self.strategy.n;
        self.eigen_generation = self.generation;
        let matrix = nalgebra::DMatrix::from_row_slice(n, n, &self.cov);
        let eigen = matrix.symmetric_eigen();
        let valid = eigen.eigenvalues.iter().all(|v| v.is_finite() && *v > 0.0)
            && eigen.eigenvectors.iter().all(|v| v.is_finite());
        if !valid {
            self.cov = identity(n);
            self.b = identity(n);
            self.d = alloc::vec![1.0; n];
            self.eigen_resets += 1;
            return;
        }
        for i in 0..n {
            for j in 0..n {
                self.b[i * n + j] = eigen.eigenvectors[(i, j)];
            }
        }
        self.d = eigen.eigenvalues.iter().map(|v| libm::sqrt(*v)).collect();
    }

    pub fn snapshot(&self) -> CmaSnapshot {
        CmaSnapshot {
            params: self.params.clone(),
            generation: self.generation,
            evaluations: self.evaluations,
            mean: self.mean.clone(),
            sigma: self.sigma,
            covariance: self.cov.clone(),
            path_sigma: self.p_sigma.clone(),
            path_c: self.p_c.clone(),
            eigenvectors: self.b.clone(),
            axis_lengths: self.d.clone(),
            eigen_generation: self.eigen_generation,
            eigen_resets: self.eigen_resets,
            best: self.best.clone(),
        }
    }

    pub fn from_snapshot(snap: CmaSnapshot) -> Result<Self> {
        let strategy = Strategy::from_params(&snap.params)?;
        let n = strategy.n;
        let square = [&snap.covariance, &snap.eigenvectors];
        let vectors = [
            &snap.mean,
            &snap.path_sigma,
            &snap.path_c,
            &snap.axis_lengths,
        ];
        if square.iter().any(|m| m.len() != n * n) || vectors.iter().any(|v| v.len() != n) {
            return Err(invalid(
                "snapshot",
                "array sizes do not match the dimension",
            ));
        }
        if !(snap.sigma.is_finite() && snap.sigma > 0.0) {
            return Err(invalid("snapshot", "step size must be positive"));
        }
        Ok(Self {
            bounds: snap.params.bounds(),
            strategy,
            generation: snap.generation,
            evaluations: snap.evaluations,
            mean: snap.mean,
            sigma: snap.sigma,
            cov: snap.covariance,
            p_sigma: snap.path_sigma,
            p_c: snap.path_c,
            b: snap.eigenvectors,
            d: snap.axis_lengths,
            eigen_generation: snap.eigen_generation,
            eigen_resets: snap.eigen_resets,
            best: snap.best,
            params: snap.params,
        })
    }
}

/// One line of the optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub gen: usize,
    /// Best fitness seen so far.
    pub best: f64,
    /// Mean fitness of this generation's candidates.
    pub mean_fitness: f64,
    /// Step size after the update.
    pub sigma: f64,
    pub best_genotype: Vec<f64>,
}

impl GenerationRecord {
    pub fn from_generation(state: &CmaState, fitnesses: &[f64]) -> Self {
        let best = state.best().expect("told at least once");
        Self {
            gen: state.generation() - 1,
            best: best.fitness,
            mean_fitness: fitnesses.iter().sum::<f64>() / fitnesses.len() as f64,
            sigma: state.sigma(),
            best_genotype: best.genotype.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_genotype: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<GenerationRecord>,
    pub state: CmaState,
}

#[derive(Debug)]
pub enum RunError<E> {
    Cma(Error),
    /// The objective failed; `state` is the last completed generation and
    /// can be used to resume.
    Objective {
        error: E,
        state: Box<CmaState>,
    },
}

impl<E> From<Error> for RunError<E> {
    fn from(e: Error) -> Self {
        RunError::Cma(e)
    }
}

/// Runs ask/tell until the budget is spent, evaluating candidates in order.
///
/// With a zero budget the (clipped) initial mean is evaluated once and
/// returned as the best point.
pub fn run<E>(
    params: CmaParams,
    objective: impl FnMut(&[f64]) -> core::result::Result<f64, E>,
) -> core::result::Result<RunOutcome, RunError<E>> {
    resume(CmaState::new(params)?, objective)
}

/// Continues a run from `state` until its budget is spent.
pub fn resume<E>(
    mut state: CmaState,
    mut objective: impl FnMut(&[f64]) -> core::result::Result<f64, E>,
) -> core::result::Result<RunOutcome, RunError<E>> {
    if state.params.generation_limit() == 0 {
        let mut x = state.mean.clone();
        state.clip(&mut x);
        let fitness = match objective(&x) {
            Ok(f) => f,
            Err(error) => {
                return Err(RunError::Objective {
                    error,
                    state: Box::new(state),
                })
            }
        };
        return Ok(RunOutcome {
            best_genotype: x,
            best_fitness: fitness,
            history: Vec::new(),
            state,
        });
    }
    let mut history = Vec::new();
    while !state.is_finished() {
        let candidates = state.ask();
        let mut fitnesses = Vec::with_capacity(candidates.len());
        for x in &candidates {
            match objective(x) {
                Ok(f) => fitnesses.push(f),
                Err(error) => {
                    return Err(RunError::Objective {
                        error,
                        state: Box::new(state),
                    })
                }
            }
        }
        let evaluated: Vec<(Vec<f64>, f64)> = candidates
            .into_iter()
            .zip(fitnesses.iter().copied())
            .collect();
        state.tell(&evaluated)?;
        history.push(GenerationRecord::from_generation(&state, &fitnesses));
    }
    let best = state.best.clone().expect("at least one generation");
    Ok(RunOutcome {
        best_genotype: best.genotype,
        best_fitness: best.fitness,
        history,
        state,
    })
}
