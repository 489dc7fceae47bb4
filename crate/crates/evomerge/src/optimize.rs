//! The evolutionary merge driver: CMA-ES over merge configurations.
//!
//! Evo config JSON (paths relative to the config file):
//!
//! ```json
//! {
//!   "base": "base.safetensors",
//!   "models": ["model0.safetensors", "model1.safetensors"],
//!   "merge": {"include": ["llm.*"], "exclude": [], "normalize": "count",
//!             "trim_scope": "global", "fixed_mask": false},
//!   "genotype": {"per_task_alpha": false, "fixed_alpha": null},
//!   "cma": {"sigma0": 0.1666, "max_generations": 600, "budget_unit": "generations"},
//!   "fitness": {"kind": "vector_target", "target": "target.safetensors"},
//!   "holdout_fitness": null,
//!   "seed": 0,
//!   "on_error": "abort"
//! }
//! ```
//!
//! `on_error` is `"abort"` or `{"penalty": <fitness>}`. Every field of `cma`
//! is optional; its seed defaults to the run seed.
//!
//! Each candidate's DARE seed is the run seed folded with the bit patterns of
//! its genes (`s = mix_seed(s, bits)` gene by gene), so identical candidates
//! share a mask. With `fixed_mask` every candidate uses the run seed.
//! Fitness values are cached per run, keyed by the JSON bytes of the decoded
//! configuration.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use evomerge_core::cmaes::{BudgetUnit, CmaParams, CmaState, GenerationRecord, RateOverrides};
use evomerge_core::merge::mix_seed;
use evomerge_core::{GenotypeLayout, MergeConfig, Normalize, TaskSet, TensorMap, TrimScope};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::{load_archive, save_archive, write_atomic, ArchiveOptions};
use crate::checkpoint::Checkpoint;
use crate::config::resolve;
use crate::error::{Error, Result};
use crate::fitness::{EvalOptions, Evaluator, FitnessSpec};
use crate::manifest::{now, RunManifest};

pub const BEST_CONFIG_FILE: &str = "best_config.json";
pub const MERGED_FILE: &str = "merged.safetensors";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Merge settings that are not searched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeTemplate {
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

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeOptions {
    #[serde(default)]
    pub per_task_alpha: bool,
    #[serde(default)]
    pub fixed_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmaSection {
    #[serde(default)]
    pub popsize: Option<usize>,
    #[serde(default)]
    pub mu: Option<usize>,
    #[serde(default)]
    pub sigma0: Option<f64>,
    #[serde(default)]
    pub mean0: Option<Vec<f64>>,
    #[serde(default)]
    pub max_generations: Option<usize>,
    #[serde(default)]
    pub budget_unit: Option<BudgetUnit>,
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub rates: Option<RateOverrides>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    #[default]
    Abort,
    /// Score failed evaluations with this fitness instead of stopping.
    Penalty(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    pub base: PathBuf,
    pub models: Vec<PathBuf>,
    #[serde(default)]
    pub merge: MergeTemplate,
    #[serde(default)]
    pub genotype: GenotypeOptions,
    #[serde(default)]
    pub cma: CmaSection,
    pub fitness: FitnessSpec,
    #[serde(default)]
    pub holdout_fitness: Option<FitnessSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub on_error: ErrorPolicy,
}

impl EvoConfig {
    pub fn layout(&self) -> GenotypeLayout {
        GenotypeLayout {
            tasks: self.models.len(),
            per_task_alpha: self.genotype.per_task_alpha,
            fixed_alpha: self.genotype.fixed_alpha,
        }
    }

    pub fn template(&self) -> MergeConfig {
        let mut cfg = MergeConfig::identity(self.models.len());
        cfg.include = self.merge.include.clone();
        cfg.exclude = self.merge.exclude.clone();
        cfg.normalize = self.merge.normalize;
        cfg.trim_scope = self.merge.trim_scope;
        cfg.fixed_mask = self.merge.fixed_mask;
        cfg.seed = self.seed;
        cfg
    }

    pub fn cma_params(&self) -> CmaParams {
        let c = &self.cma;
        let mut p = CmaParams::new(self.layout().dims(), c.seed.unwrap_or(self.seed));
        p.popsize = c.popsize;
        p.mu = c.mu;
        if let Some(s) = c.sigma0 {
            p.sigma0 = s;
        }
        p.mean0 = c.mean0.clone();
        if let Some(g) = c.max_generations {
            p.max_generations = g;
        }
        if let Some(u) = c.budget_unit {
            p.budget_unit = u;
        }
        p.bounds = c.bounds.clone();
        if let Some(r) = &c.rates {
            p.rates = r.clone();
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config(
                "models",
                "at least one fine-tuned model is required",
            ));
        }
        if let Some(a) = self.genotype.fixed_alpha {
            let mut probe = self.template();
            probe.alpha = a;
            probe
                .validate()
                .map_err(|e| Error::config("genotype.fixed_alpha", e))?;
        }
        if let ErrorPolicy::Penalty(p) = self.on_error {
            if !p.is_finite() {
                return Err(Error::config("on_error.penalty", "must be finite"));
            }
        }
        self.cma_params()
            .validate()
            .map_err(|e| Error::config("cma", e))
    }
}

/// Loaded inputs plus a cached fitness function over genotypes.
pub struct Problem {
    pub tasks: TaskSet,
    pub evaluator: Evaluator,
    pub layout: GenotypeLayout,
    pub template: MergeConfig,
    pub policy: ErrorPolicy,
    cache: Mutex<HashMap<Vec<u8>, f64>>,
}

impl Problem {
    pub fn load(cfg: &EvoConfig, base_dir: &Path, eval: &EvalOptions) -> Result<Self> {
        cfg.validate()?;
        let opts = ArchiveOptions::default();
        let base = load_archive(&resolve(base_dir, &cfg.base), opts)?;
        let models = cfg
            .models
            .iter()
            .map(|p| load_archive(&resolve(base_dir, p), opts))
            .collect::<Result<Vec<TensorMap>, _>>()?;
        let refs: Vec<&TensorMap> = models.iter().collect();
        let template = cfg.template();
        let tasks = TaskSet::new(&base, &refs, &template.filter())?;
        if tasks.domain().is_empty() {
            return Err(Error::Usage("empty merge domain".into()));
        }
        let evaluator = Evaluator::load(&cfg.fitness, base_dir, eval)?;
        evaluator.check(tasks.domain())?;
        Ok(Self {
            tasks,
            evaluator,
            layout: cfg.layout(),
            template,
            policy: cfg.on_error,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn candidate_seed(&self, genes: &[f64]) -> u64 {
        if self.template.fixed_mask {
            return self.template.seed;
        }
        genes
            .iter()
            .fold(self.template.seed, |s, g| mix_seed(s, g.to_bits()))
    }

    pub fn config_for(&self, genes: &[f64]) -> Result<MergeConfig> {
        Ok(self
            .layout
            .decode(genes, &self.template, self.candidate_seed(genes))?)
    }

    pub fn merged(&self, genes: &[f64]) -> Result<TensorMap> {
        Ok(self.tasks.merge(&self.config_for(genes)?)?)
    }

    /// Fitness of a configuration, ignoring the error policy and the cache.
    pub fn evaluate_config(&self, cfg: &MergeConfig) -> Result<f64> {
        let merged = self.tasks.merge(cfg)?;
        let f = self.evaluator.evaluate(&merged, self.tasks.domain())?;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::Evaluation(format!("fitness is {f}")))
        }
    }

    pub fn fitness(&self, genes: &[f64]) -> Result<f64> {
        let cfg = self.config_for(genes)?;
        let key = serde_json::to_vec(&cfg).map_err(|e| Error::Internal(e.to_string()))?;
        if let Some(f) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*f);
        }
        let f = match (self.evaluate_config(&cfg), self.policy) {
            (Ok(f), _) => f,
            (Err(e), ErrorPolicy::Penalty(p)) => {
                log::warn!("evaluation failed, scoring {p}: {e}");
                p
            }
            (Err(e), ErrorPolicy::Abort) => return Err(e),
        };
        self.cache.lock().expect("cache lock").insert(key, f);
        Ok(f)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Replaces `cma.max_generations`.
    pub budget: Option<usize>,
    /// Worker threads for candidate evaluation; all cores when unset.
    pub jobs: Option<usize>,
    /// Stop once this many generations are complete, as if interrupted.
    pub stop_after: Option<usize>,
    pub eval: EvalOptions,
    pub config_paths: Vec<PathBuf>,
    /// Resolved config recorded in the manifest.
    pub resolved_config: Option<Value>,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub best_genotype: Vec<f64>,
    pub best_config: MergeConfig,
    pub best_fitness: f64,
    pub holdout_fitness: Option<f64>,
    pub generations: usize,
    pub evaluations: usize,
    /// False when stopped early by `stop_after`; final artifacts are then not
    /// written, and `best_fitness` is NaN if no generation ran.
    pub completed: bool,
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Internal(e.to_string()))
}

/// Keeps the first `generations` records of a history file, dropping any
/// records (or a torn final line) written after the checkpoint.
fn truncate_history(path: &Path, generations: usize) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    let mut count = 0;
    for line in BufReader::new(file).lines() {
        if count == generations {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), count + 1)))?;
        if rec.gen != count {
            return Err(Error::Data(format!(
                "{}:{}: expected generation {count}, found {}",
                path.display(),
                count + 1,
                rec.gen
            )));
        }
        kept.push_str(&line);
        kept.push('\n');
        count += 1;
    }
    if count < generations {
        return Err(Error::Data(format!(
            "{} has {count} records but the checkpoint is at generation {generations}",
            path.display()
        )));
    }
    write_atomic(path, kept.as_bytes()).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn initial_state(cfg: &EvoConfig, opts: &RunOptions, history: &Path) -> Result<CmaState> {
    let mut params = cfg.cma_params();
    if let Some(b) = opts.budget {
        params.max_generations = b;
    }
    match &opts.resume {
        None => {
            File::create(history).map_err(|e| Error::io(history, e))?;
            Ok(CmaState::new(params)?)
        }
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            ck.params.max_generations = params.max_generations;
            if ck.params != params {
                return Err(Error::Usage(format!(
                    "{} was written for different optimizer settings",
                    path.display()
                )));
            }
            let state = ck.into_state()?;
            truncate_history(history, state.generation())?;
            log::info!("resuming at generation {}", state.generation());
            Ok(state)
        }
    }
}

/// Runs (or resumes) an optimization, writing history and a checkpoint
/// after every generation and the final artifacts into `opts.out_dir`.
pub fn run_optimize(
    cfg: &EvoConfig,
    base_dir: &Path,
    opts: &RunOptions,
) -> Result<OptimizeOutcome> {
    let started = now();
    let problem = Problem::load(cfg, base_dir, &opts.eval)?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let history = out.join(HISTORY_FILE);
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut state = initial_state(cfg, opts, &history)?;
    Checkpoint::from_state(&state).save(&checkpoint)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;

    let (best_genotype, best_fitness, evaluations) = if state.params().generation_limit() == 0 {
        let mut x = state.params().mean0();
        state.clip(&mut x);
        let f = problem.fitness(&x)?;
        (x, f, 1)
    } else {
        while !state.is_finished() {
            if opts.stop_after.is_some_and(|g| state.generation() >= g) {
                log::info!("stopping after generation {}", state.generation());
                // before the first generation the mean stands in, unevaluated
                let (genotype, fitness) = match state.best() {
                    Some(b) => (b.genotype.clone(), b.fitness),
                    None => {
                        let mut x = state.mean().to_vec();
                        state.clip(&mut x);
                        (x, f64::NAN)
                    }
                };
                return Ok(OptimizeOutcome {
                    best_config: problem.config_for(&genotype)?,
                    best_genotype: genotype,
                    best_fitness: fitness,
                    holdout_fitness: None,
                    generations: state.generation(),
                    evaluations: state.evaluations(),
                    completed: false,
                });
            }
            let candidates = state.ask();
            let fitnesses: Vec<f64> = pool
                .install(|| {
                    candidates
                        .par_iter()
                        .map(|g| problem.fitness(g))
                        .collect::<Result<_>>()
                })
                .map_err(|e| {
                    Error::Evaluation(format!(
                        "{e} (resume from {} at generation {})",
                        checkpoint.display(),
                        state.generation()
                    ))
                })?;
            let told: Vec<(Vec<f64>, f64)> = candidates
                .into_iter()
                .zip(fitnesses.iter().copied())
                .collect();
            state.tell(&told)?;
            let rec = GenerationRecord::from_generation(&state, &fitnesses);
            log::info!(
                "gen {} best {:.6e} mean {:.6e} sigma {:.4e}",
                rec.gen,
                rec.best,
                rec.mean_fitness,
                rec.sigma
            );
            append_line(&history, &json_line(&rec)?)?;
            Checkpoint::from_state(&state).save(&checkpoint)?;
        }
        if state.eigen_resets() > 0 {
            log::warn!(
                "covariance was reset to identity {} time(s)",
                state.eigen_resets()
            );
        }
        let best = state.best().expect("at least one generation");
        (best.genotype.clone(), best.fitness, state.evaluations())
    };

    let best_config = problem.config_for(&best_genotype)?;
    let merged = problem.tasks.merge(&best_config)?;
    let holdout_fitness = match &cfg.holdout_fitness {
        Some(spec) => {
            let ev = Evaluator::load(spec, base_dir, &opts.eval)?;
            ev.check(problem.tasks.domain())?;
            Some(ev.evaluate(&merged, problem.tasks.domain())?)
        }
        None => None,
    };

    let best_path = out.join(BEST_CONFIG_FILE);
    let merged_path = out.join(MERGED_FILE);
    let mut text =
        serde_json::to_string_pretty(&best_config).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    write_atomic(&best_path, text.as_bytes()).map_err(|e| Error::io(&best_path, e))?;
    save_archive(&merged, &merged_path, ArchiveOptions::default())?;

    let mut manifest = RunManifest::new("optimize", started);
    manifest.config_paths = opts.config_paths.clone();
    manifest.config = opts.resolved_config.clone();
    manifest.seeds.insert("run".into(), cfg.seed);
    manifest.seeds.insert("cma".into(), state.params().seed);
    manifest
        .seeds
        .insert("best_candidate".into(), best_config.seed);
    manifest.best_config = Some(best_config.clone());
    manifest.best_fitness = Some(best_fitness);
    manifest.holdout_fitness = holdout_fitness;
    manifest.generations = Some(state.generation());
    manifest.evaluations = Some(evaluations);
    for (k, p) in [
        ("best_config", &best_path),
        ("merged", &merged_path),
        ("history", &history),
        ("checkpoint", &checkpoint),
    ] {
        manifest.outputs.insert(k.into(), p.clone());
    }
    if let Some(r) = &opts.resume {
        manifest.config_paths.push(r.clone());
    }
    manifest.finish(&out.join(MANIFEST_FILE))?;

    Ok(OptimizeOutcome {
        best_genotype,
        best_config,
        best_fitness,
        holdout_fitness,
        generations: state.generation(),
        evaluations,
        completed: true,
    })
}
