//! The `evomerge` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use evomerge_core::merge::{
    linear_merge, merge_domain, slerp_merge, task_arithmetic_merge, task_vector,
};
use evomerge_core::{KeyFilter, MergeConfig, Tensor, TensorMap};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::{self, load_archive, save_archive, ArchiveOptions};
use crate::config::{self, config_dir, Override};
use crate::error::{exit, Error, Result};
use crate::fitness::EvalOptions;
use crate::fixtures::{self, make_linear_suite, make_vector_fixture};
use crate::grid::grid_oracle;
use crate::inspect::contributions;
use crate::manifest::{now, RunManifest};
use crate::optimize::{run_optimize, EvoConfig, Problem, RunOptions};
use crate::text::{build_corpus, read_lines, TokenizerSpec};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (archive format 1, checkpoint format 1, manifest format 1)"
);

#[derive(Debug, Parser)]
#[command(name = "evomerge", version, long_version = LONG_VERSION, about = "Evolutionary DARE/TIES model merging")]
pub struct Cli {
    /// Increase log detail on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the task vector `model - base` as an archive.
    Diff(DiffArgs),
    /// Merge fine-tuned models into a base checkpoint.
    Merge(MergeArgs),
    /// Search merge hyperparameters with CMA-ES.
    Optimize(OptimizeArgs),
    /// Brute-force the merge hyperparameters on a grid.
    Grid(GridArgs),
    /// Score hypotheses against references (BLEU-1..4, ROUGE-L, METEOR).
    Score(ScoreArgs),
    /// Report per-model densities and weights of a merge config.
    Inspect(InspectArgs),
    /// Generate a seeded benchmark problem.
    GenFixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Glob selecting tensors to merge (repeatable; default all).
    #[arg(long = "include")]
    pub include: Vec<String>,
    /// Glob excluding tensors (repeatable).
    #[arg(long = "exclude")]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ties,
    Linear,
    Slerp,
    TaskArithmetic,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Method config JSON. `ties`: a MergeConfig; `linear`: {"weights":[..]};
    /// `slerp`: {"t":f}; `task-arithmetic`: {"c":[..],"lambda":f}. All accept
    /// "include"/"exclude".
    #[arg(long)]
    pub config: PathBuf,
    /// Base checkpoint (required for ties and task-arithmetic).
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "ties")]
    pub method: Method,
    /// Override a config value, `key=value` (repeatable).
    #[arg(long = "set")]
    pub set: Vec<Override>,
    /// Fine-tuned checkpoints.
    #[arg(required = true)]
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set")]
    pub set: Vec<Override>,
    /// Continue from a checkpoint written by an earlier run into the same `--out`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Budget in the configured unit, replacing `cma.max_generations`.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Parallel candidate evaluations (default: logical cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Parent directory for per-evaluation work dirs.
    #[arg(long)]
    pub work_root: Option<PathBuf>,
    /// Keep per-evaluation work dirs.
    #[arg(long)]
    pub keep_work: bool,
    /// Stop once this many generations are done, leaving only the checkpoint and history.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set")]
    pub set: Vec<Override>,
    /// Points per genotype dimension.
    #[arg(long, default_value_t = 5)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Hypotheses, one segment per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// References, aligned with `--hyp` by line.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// `ws`, `char`, or `cmd:<argv>`.
    #[arg(long, default_value = "ws")]
    pub tokenizer: TokenizerSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// MergeConfig JSON, e.g. an optimize run's best_config.json.
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Linear,
    Vector,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub kind: FixtureKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub tasks: usize,
    /// Linear: number of features.
    #[arg(long, default_value_t = 12)]
    pub features: usize,
    /// Linear: rows per task and per evaluation split.
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    /// Vector: merge-domain size.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Generations written into the generated evo config.
    #[arg(long, default_value_t = 600)]
    pub budget: usize,
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    write_stdout(&text)
}

// a closed pipe (`| head`) is not an error worth reporting
fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Error::io(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn load(path: &Path) -> Result<TensorMap> {
    Ok(load_archive(path, ArchiveOptions::default())?)
}

fn cmd_diff(a: &DiffArgs) -> Result<()> {
    let base = load(&a.base)?;
    let model = load(&a.model)?;
    let filter = KeyFilter::new(a.filter.include.iter(), a.filter.exclude.iter());
    // alignment problems are flag errors for this command
    let as_usage = |e: evomerge_core::Error| Error::Usage(e.to_string());
    let domain = merge_domain(&[&base, &model], &filter).map_err(as_usage)?;
    if domain.is_empty() {
        return Err(Error::Usage("empty merge domain".into()));
    }
    let tau = task_vector(&model, &base, &filter).map_err(as_usage)?;
    let mut out = TensorMap::new();
    for (i, (name, shape)) in domain.names().iter().zip(domain.shapes()).enumerate() {
        let values = tau.values()[domain.range(i)]
            .iter()
            .map(|&v| v as f32)
            .collect();
        out.insert(name.clone(), Tensor::new(shape.clone(), values)?);
    }
    save_archive(&out, &a.out, ArchiveOptions::default())?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearSpec {
    weights: Vec<f64>,
    #[serde(default)]
    include: Vec<String>,
    #[serde(default)]
    exclude: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SlerpSpec {
    t: f64,
    #[serde(default)]
    include: Vec<String>,
    #[serde(default)]
    exclude: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskArithmeticSpec {
    c: Vec<f64>,
    lambda: f64,
    #[serde(default)]
    include: Vec<String>,
    #[serde(default)]
    exclude: Vec<String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{name}.manifest.json"))
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let started = now();
    let doc = config::read_json(&a.config)?;
    let mut resolved = doc.clone();
    for ov in &a.set {
        config::apply_override(&mut resolved, ov)?;
    }
    let ctx = a.config.display().to_string();
    let models = a
        .models
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TensorMap> = models.iter().collect();
    let need_base = || {
        a.base.as_ref().ok_or_else(|| {
            Error::Usage(format!("--method {:?} needs --base", a.method).to_lowercase())
        })
    };
    let mut seeds = Vec::new();
    let mut best_config = None;
    let merged = match a.method {
        Method::Ties => {
            let cfg: MergeConfig = config::from_value(resolved.clone(), &[], &ctx)?;
            cfg.validate().map_err(|e| Error::config(&ctx, e))?;
            if cfg.tasks() != refs.len() {
                return Err(Error::config(
                    &ctx,
                    format!(
                        "config has {} tasks but {} models were given",
                        cfg.tasks(),
                        refs.len()
                    ),
                ));
            }
            let base = load(need_base()?)?;
            seeds.push(("merge".to_string(), cfg.seed));
            let merged = evomerge_core::merge::ties_dare_merge(&base, &refs, &cfg)?;
            best_config = Some(cfg);
            merged
        }
        Method::Linear => {
            let spec: LinearSpec = config::from_value(resolved.clone(), &[], &ctx)?;
            let filter = KeyFilter::new(spec.include.iter(), spec.exclude.iter());
            if spec.weights.len() != refs.len() {
                return Err(Error::config(
                    &ctx,
                    format!("{} weights for {} models", spec.weights.len(), refs.len()),
                ));
            }
            linear_merge(&refs, &spec.weights, &filter).map_err(|e| match e {
                evomerge_core::Error::InvalidParameter { .. } => Error::config(&ctx, e),
                e => e.into(),
            })?
        }
        Method::Slerp => {
            if refs.len() != 2 {
                return Err(Error::Usage(format!(
                    "slerp interpolates exactly 2 models, got {}",
                    refs.len()
                )));
            }
            let spec: SlerpSpec = config::from_value(resolved.clone(), &[], &ctx)?;
            if !(0.0..=1.0).contains(&spec.t) {
                return Err(Error::config(
                    &ctx,
                    format!("t = {} is outside [0, 1]", spec.t),
                ));
            }
            let filter = KeyFilter::new(spec.include.iter(), spec.exclude.iter());
            slerp_merge(refs[0], refs[1], spec.t, &filter)?
        }
        Method::TaskArithmetic => {
            let spec: TaskArithmeticSpec = config::from_value(resolved.clone(), &[], &ctx)?;
            if spec.c.len() != refs.len() {
                return Err(Error::config(
                    &ctx,
                    format!("{} weights for {} models", spec.c.len(), refs.len()),
                ));
            }
            let base = load(need_base()?)?;
            let filter = KeyFilter::new(spec.include.iter(), spec.exclude.iter());
            let taus = refs
                .iter()
                .map(|m| task_vector(m, &base, &filter))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            task_arithmetic_merge(&base, &taus, &spec.c, spec.lambda)?
        }
    };
    save_archive(&merged, &a.out, ArchiveOptions::default())?;

    let mut m = RunManifest::new("merge", started);
    m.config_paths.push(a.config.clone());
    if let Some(b) = &a.base {
        m.config_paths.push(b.clone());
    }
    m.config_paths.extend(a.models.iter().cloned());
    m.config =
        Some(json!({"method": format!("{:?}", a.method).to_lowercase(), "config": resolved}));
    m.seeds.extend(seeds);
    m.best_config = best_config;
    m.outputs.insert("merged".into(), a.out.clone());
    m.finish(&manifest_path(&a.out))
}

fn load_evo(path: &Path, set: &[Override]) -> Result<(EvoConfig, Value)> {
    let mut doc = config::read_json(path)?;
    for ov in set {
        config::apply_override(&mut doc, ov)?;
    }
    let cfg = config::from_value(doc.clone(), &[], &path.display().to_string())?;
    Ok((cfg, doc))
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let (cfg, doc) = load_evo(&a.config, &a.set)?;
    let opts = RunOptions {
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
        budget: a.budget,
        jobs: a.jobs,
        stop_after: a.stop_after,
        eval: EvalOptions {
            work_root: a.work_root.clone(),
            keep_work: a.keep_work,
        },
        config_paths: vec![a.config.clone()],
        resolved_config: Some(doc),
    };
    let outcome = run_optimize(&cfg, &config_dir(&a.config), &opts)?;
    print_json(&json!({
        "completed": outcome.completed,
        "generations": outcome.generations,
        "evaluations": outcome.evaluations,
        "best_fitness": outcome.best_fitness,
        "holdout_fitness": outcome.holdout_fitness,
        "best_genotype": outcome.best_genotype,
        "best_config": outcome.best_config,
    }))
}

fn cmd_grid(a: &GridArgs) -> Result<()> {
    let (cfg, _) = load_evo(&a.config, &a.set)?;
    let problem = Problem::load(&cfg, &config_dir(&a.config), &EvalOptions::default())?;
    let r = grid_oracle(
        &problem.tasks,
        &problem.evaluator,
        &problem.layout,
        &problem.template,
        a.points,
    )?;
    print_json(&json!({
        "points": r.points,
        "evaluations": r.evaluations,
        "best_fitness": r.best_fitness,
        "best_genotype": r.best_genotype,
        "best_config": r.best_config,
    }))
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} has {} lines but {} has {}",
            a.hyp.display(),
            hyps.len(),
            a.reference.display(),
            refs.len()
        )));
    }
    let corpus = build_corpus(&hyps, &refs, &a.tokenizer)?;
    print_json(&evomerge_core::metrics::score_report(&corpus))
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let cfg: MergeConfig = config::load(&a.config, &[])?;
    cfg.validate()
        .map_err(|e| Error::config(a.config.display().to_string(), e))?;
    let report = contributions(&cfg);
    match a.format {
        Format::Json => print_json(&report),
        Format::Text => write_stdout(&report.to_text()),
    }
}

fn cmd_gen_fixture(a: &FixtureArgs) -> Result<()> {
    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let save =
        |name: &str, m: &TensorMap| save_archive(m, &out.join(name), ArchiveOptions::default());
    let (base, models, extra, fitness, holdout, merge, genotype) = match a.kind {
        FixtureKind::Linear => {
            let s = make_linear_suite(a.seed, a.tasks, a.features, a.samples)?;
            let fitness =
                json!({"kind": "linear_tasks", "suite": "suite.safetensors", "split": "eval"});
            let holdout =
                json!({"kind": "linear_tasks", "suite": "suite.safetensors", "split": "holdout"});
            let merge = json!({"include": [fixtures::WEIGHT_TENSOR]});
            (
                s.base,
                s.models,
                ("suite.safetensors", s.suite),
                fitness,
                holdout,
                merge,
                json!({}),
            )
        }
        FixtureKind::Vector => {
            let f = make_vector_fixture(a.seed, a.tasks, a.dim)?;
            let fitness = json!({"kind": "vector_target", "target": "target.safetensors"});
            let merge = json!({"include": f.config.include});
            (
                f.base,
                f.models,
                ("target.safetensors", f.target),
                fitness,
                Value::Null,
                merge,
                json!({"fixed_alpha": 0.0}),
            )
        }
    };
    save("base.safetensors", &base)?;
    let mut model_names = Vec::new();
    for (t, m) in models.iter().enumerate() {
        let name = format!("model{t}.safetensors");
        save(&name, m)?;
        model_names.push(name);
    }
    save(extra.0, &extra.1)?;
    let evo = json!({
        "base": "base.safetensors",
        "models": model_names,
        "merge": merge,
        "genotype": genotype,
        "cma": {"max_generations": a.budget},
        "fitness": fitness,
        "holdout_fitness": holdout,
        "seed": a.seed,
    });
    let mut text =
        serde_json::to_string_pretty(&evo).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    let evo_path = out.join("evo.json");
    archive::write_atomic(&evo_path, text.as_bytes()).map_err(|e| Error::io(&evo_path, e))?;
    let mut files = vec!["base.safetensors".to_string()];
    files.extend(model_names);
    files.push(extra.0.to_string());
    files.push("evo.json".to_string());
    print_json(&json!({"out": out, "files": files}))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Diff(a) => cmd_diff(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Score(a) => cmd_score(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::GenFixture(a) => cmd_gen_fixture(a),
    }
}

/// Parses the process arguments, runs the command, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
