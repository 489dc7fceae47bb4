//! Fitness evaluators: higher is better.
//!
//! `FitnessSpec` JSON, tagged by `kind`:
//!
//! ```json
//! {"kind":"vector_target","target":"target.safetensors"}
//! {"kind":"linear_tasks","suite":"suite.safetensors","split":"eval","weight_tensor":"llm.weight"}
//! {"kind":"external_generator","argv":["./gen"],"prompts":"prompts.jsonl",
//!  "references":"refs.jsonl","tokenizer":"ws","metric":"rouge_l","timeout_secs":300,"seed":0}
//! ```
//!
//! Relative paths resolve against the directory of the config file.
//!
//! ## Generator protocol
//!
//! For each evaluation the merged checkpoint is written to a fresh directory
//! under the work root and the generator is run once as
//! `argv... --weights <archive> --prompts <jsonl> --seed <u64>`. Prompt
//! records are `{"id":str,"image":path-or-null,"prompt":str}`. The generator
//! prints one `{"id":str,"output":str}` line per prompt to stdout, in input
//! order. A non-zero exit, timeout, or malformed output fails the evaluation
//! with the generator's stderr attached. References are JSONL
//! `{"id":str,"reference":str}` matched to prompts by id.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use evomerge_core::merge::Domain;
use evomerge_core::metrics::{Corpus, TokenSeq};
use evomerge_core::TensorMap;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive, ArchiveOptions};
use crate::config::resolve;
use crate::error::{Error, Result};
use crate::process;
use crate::text::{Metric, TokenizerSpec};

fn default_split() -> String {
    "eval".into()
}

fn default_weight_tensor() -> String {
    "llm.weight".into()
}

fn default_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitnessSpec {
    /// `-||merged - target||_2` over the merge domain.
    VectorTarget { target: PathBuf },
    /// `-MSE` of the linear model held in `weight_tensor` on the suite's
    /// `<split>.x` / `<split>.y` tensors.
    LinearTasks {
        suite: PathBuf,
        #[serde(default = "default_split")]
        split: String,
        #[serde(default = "default_weight_tensor")]
        weight_tensor: String,
    },
    /// Corpus metric of generated text against references.
    ExternalGenerator {
        argv: Vec<String>,
        prompts: PathBuf,
        references: PathBuf,
        #[serde(default)]
        tokenizer: TokenizerSpec,
        #[serde(default)]
        metric: Metric,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Parent of per-evaluation directories; the system temp dir when unset.
    pub work_root: Option<PathBuf>,
    pub keep_work: bool,
}

#[derive(Debug, Clone)]
pub struct LinearData {
    rows: usize,
    cols: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    weight_tensor: String,
}

impl LinearData {
    pub fn from_suite(suite: &TensorMap, split: &str, weight_tensor: &str) -> Result<Self> {
        let get = |name: String| {
            suite
                .get(&name)
                .ok_or_else(|| Error::Data(format!("suite has no tensor `{name}`")))
        };
        let x = get(format!("{split}.x"))?;
        let y = get(format!("{split}.y"))?;
        let (rows, cols) = match x.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Data(format!(
                    "`{split}.x` has shape {s:?}, expected [rows, features]"
                )))
            }
        };
        if y.shape() != [rows] {
            return Err(Error::Data(format!(
                "`{split}.y` has shape {:?}, expected [{rows}]",
                y.shape()
            )));
        }
        if rows == 0 {
            return Err(Error::Data(format!("split `{split}` has no rows")));
        }
        Ok(Self {
            rows,
            cols,
            x: x.data().iter().map(|&v| v as f64).collect(),
            y: y.data().iter().map(|&v| v as f64).collect(),
            weight_tensor: weight_tensor.to_string(),
        })
    }

    /// Mean squared error of `w` on this split.
    pub fn mse_of(&self, w: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.rows {
            let row = &self.x[i * self.cols..(i + 1) * self.cols];
            let pred: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            let r = pred - self.y[i];
            total += r * r;
        }
        total / self.rows as f64
    }

    pub fn mse(&self, model: &TensorMap) -> Result<f64> {
        let w = model
            .get(&self.weight_tensor)
            .ok_or_else(|| Error::Data(format!("model has no tensor `{}`", self.weight_tensor)))?;
        if w.numel() != self.cols {
            return Err(Error::Data(format!(
                "`{}` has {} elements, the suite has {} features",
                self.weight_tensor,
                w.numel(),
                self.cols
            )));
        }
        let w: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        Ok(self.mse_of(&w))
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    argv: Vec<String>,
    prompts: PathBuf,
    ids: Vec<String>,
    references: Vec<TokenSeq>,
    tokenizer: TokenizerSpec,
    metric: Metric,
    timeout: Duration,
    seed: u64,
    options: EvalOptions,
}

#[derive(Deserialize)]
struct PromptRecord {
    id: String,
    #[serde(default)]
    #[allow(dead_code)]
    image: Option<String>,
    #[allow(dead_code)]
    prompt: String,
}

#[derive(Deserialize)]
struct ReferenceRecord {
    id: String,
    reference: String,
}

#[derive(Deserialize)]
struct OutputRecord {
    id: String,
    output: String,
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

impl Generator {
    #[allow(clippy::too_many_arguments)]
    fn load(
        argv: &[String],
        prompts: &Path,
        references: &Path,
        tokenizer: &TokenizerSpec,
        metric: Metric,
        timeout_secs: f64,
        seed: u64,
        base_dir: &Path,
        options: &EvalOptions,
    ) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::config("fitness.argv", "must name a command"));
        }
        if !(timeout_secs.is_finite() && timeout_secs > 0.0) {
            return Err(Error::config("fitness.timeout_secs", "must be positive"));
        }
        let mut argv = argv.to_vec();
        // `./gen` style programs are relative to the config, bare names use PATH
        if argv[0].contains('/') {
            argv[0] = resolve(base_dir, Path::new(&argv[0])).display().to_string();
        }
        let prompts = resolve(base_dir, prompts);
        let references = resolve(base_dir, references);
        let records: Vec<PromptRecord> = jsonl(&prompts)?;
        if records.is_empty() {
            return Err(Error::Data(format!("{}: no prompts", prompts.display())));
        }
        let refs: Vec<ReferenceRecord> = jsonl(&references)?;
        let mut by_id = HashMap::new();
        for r in refs {
            if by_id.insert(r.id.clone(), r.reference).is_some() {
                return Err(Error::Data(format!(
                    "{}: duplicate id `{}`",
                    references.display(),
                    r.id
                )));
            }
        }
        let mut ids = Vec::with_capacity(records.len());
        let mut reference_tokens = Vec::with_capacity(records.len());
        for p in records {
            if ids.contains(&p.id) {
                return Err(Error::Data(format!(
                    "{}: duplicate id `{}`",
                    prompts.display(),
                    p.id
                )));
            }
            let text = by_id
                .get(&p.id)
                .ok_or_else(|| Error::Data(format!("no reference for prompt `{}`", p.id)))?;
            reference_tokens.push(tokenizer.tokenize(text)?);
            ids.push(p.id);
        }
        Ok(Self {
            argv,
            prompts,
            ids,
            references: reference_tokens,
            tokenizer: tokenizer.clone(),
            metric,
            timeout: Duration::from_secs_f64(timeout_secs),
            seed,
            options: options.clone(),
        })
    }

    /// Runs the generator on `merged` and returns its raw outputs in prompt order.
    pub fn generate(&self, merged: &TensorMap) -> Result<Vec<String>> {
        let mut builder = tempfile::Builder::new();
        builder.prefix("evomerge-eval-");
        let dir = match &self.options.work_root {
            Some(root) => {
                fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
                builder.tempdir_in(root)
            }
            None => builder.tempdir(),
        }
        .map_err(|e| Error::io("work dir", e))?;
        let weights = dir.path().join("weights.safetensors");
        save_archive(merged, &weights, ArchiveOptions::default())?;
        let mut argv = self.argv.clone();
        argv.extend([
            "--weights".to_string(),
            weights.display().to_string(),
            "--prompts".to_string(),
            self.prompts.display().to_string(),
            "--seed".to_string(),
            self.seed.to_string(),
        ]);
        let result = process::run(&argv, b"", self.timeout, None);
        if self.options.keep_work {
            let kept = dir.keep();
            log::info!("kept work dir {}", kept.display());
        }
        let out = result?;
        let stdout = String::from_utf8(out.stdout)
            .map_err(|_| Error::Evaluation("generator printed invalid UTF-8".into()))?;
        let mut outputs = Vec::with_capacity(self.ids.len());
        for (i, line) in stdout.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let rec: OutputRecord = serde_json::from_str(line)
                .map_err(|e| Error::Evaluation(format!("generator output line {}: {e}", i + 1)))?;
            match self.ids.get(i) {
                Some(id) if *id == rec.id => outputs.push(rec.output),
                Some(id) => {
                    return Err(Error::Evaluation(format!(
                        "generator output line {} has id `{}`, expected `{id}`",
                        i + 1,
                        rec.id
                    )))
                }
                None => {
                    return Err(Error::Evaluation(
                        "generator printed more records than prompts".into(),
                    ))
                }
            }
        }
        if outputs.len() != self.ids.len() {
            return Err(Error::Evaluation(format!(
                "generator printed {} records for {} prompts",
                outputs.len(),
                self.ids.len()
            )));
        }
        Ok(outputs)
    }

    pub fn evaluate(&self, merged: &TensorMap) -> Result<f64> {
        let outputs = self.generate(merged)?;
        let pairs = outputs
            .iter()
            .zip(&self.references)
            .map(|(o, r)| Ok((self.tokenizer.tokenize(o)?, r.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.metric.score(&Corpus::new(pairs)?)
    }
}

/// A loaded, validated fitness function.
#[derive(Debug, Clone)]
pub enum Evaluator {
    Vector { target: TensorMap },
    Linear(LinearData),
    External(Box<Generator>),
}

impl Evaluator {
    pub fn load(spec: &FitnessSpec, base_dir: &Path, options: &EvalOptions) -> Result<Self> {
        Ok(match spec {
            FitnessSpec::VectorTarget { target } => Evaluator::Vector {
                target: load_archive(&resolve(base_dir, target), ArchiveOptions::default())?,
            },
            FitnessSpec::LinearTasks {
                suite,
                split,
                weight_tensor,
            } => {
                let suite = load_archive(&resolve(base_dir, suite), ArchiveOptions::default())?;
                Evaluator::Linear(LinearData::from_suite(&suite, split, weight_tensor)?)
            }
            FitnessSpec::ExternalGenerator {
                argv,
                prompts,
                references,
                tokenizer,
                metric,
                timeout_secs,
                seed,
            } => Evaluator::External(Box::new(Generator::load(
                argv,
                prompts,
                references,
                tokenizer,
                *metric,
                *timeout_secs,
                *seed,
                base_dir,
                options,
            )?)),
        })
    }

    /// Checks that merged models over `domain` can be scored.
    pub fn check(&self, domain: &Domain) -> Result<()> {
        match self {
            Evaluator::Vector { target } => {
                for (name, shape) in domain.names().iter().zip(domain.shapes()) {
                    match target.get(name) {
                        Some(t) if t.shape() == shape.as_slice() => {}
                        Some(t) => {
                            return Err(Error::Data(format!(
                                "target tensor `{name}` has shape {:?}, expected {shape:?}",
                                t.shape()
                            )))
                        }
                        None => {
                            return Err(Error::Data(format!("target is missing tensor `{name}`")))
                        }
                    }
                }
                Ok(())
            }
            Evaluator::Linear(data) => {
                let i = domain.names().iter().position(|n| *n == data.weight_tensor);
                match i {
                    Some(i) if domain.range(i).len() == data.cols => Ok(()),
                    Some(_) => Err(Error::Data(format!(
                        "`{}` does not have {} elements",
                        data.weight_tensor, data.cols
                    ))),
                    None => Err(Error::Data(format!(
                        "`{}` is not in the merge domain",
                        data.weight_tensor
                    ))),
                }
            }
            Evaluator::External(_) => Ok(()),
        }
    }

    pub fn evaluate(&self, merged: &TensorMap, domain: &Domain) -> Result<f64> {
        match self {
            Evaluator::Vector { target } => {
                let a = domain.flatten(merged);
                let b = domain.flatten(target);
                let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
                Ok(-sq.sqrt())
            }
            Evaluator::Linear(data) => Ok(-data.mse(merged)?),
            Evaluator::External(g) => g.evaluate(merged),
        }
    }
}
