use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evomerge::archive::{load_archive, save_archive, ArchiveOptions};
use evomerge_core::{Tensor, TensorMap};
use serde_json::Value;

fn evomerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evomerge"))
        .args(args)
        .output()
        .expect("spawn evomerge")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn archive(dir: &Path, name: &str, tensors: &[(&str, Vec<f32>)]) -> PathBuf {
    let mut m = TensorMap::new();
    for (k, v) in tensors {
        m.insert(*k, Tensor::vector(v.clone()));
    }
    let p = dir.join(name);
    save_archive(&m, &p, ArchiveOptions::default()).unwrap();
    p
}

struct Models {
    _dir: tempfile::TempDir,
    root: PathBuf,
    base: PathBuf,
    models: Vec<PathBuf>,
}

fn three_models() -> Models {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let base = archive(
        &root,
        "base.safetensors",
        &[("llm.w", vec![0.0; 4]), ("vision.p", vec![1.0, 1.0])],
    );
    let models = (0..3)
        .map(|t| {
            let w: Vec<f32> = (0..4)
                .map(|i| (i as f32 - 1.5) * (t as f32 + 1.0))
                .collect();
            archive(
                &root,
                &format!("m{t}.safetensors"),
                &[("llm.w", w), ("vision.p", vec![1.0, 1.0])],
            )
        })
        .collect();
    Models {
        _dir: dir,
        root,
        base,
        models,
    }
}

#[test]
fn version_names_formats() {
    let out = evomerge(&["--version"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(env!("CARGO_PKG_VERSION")), "{text}");
    assert!(text.contains("archive format 1"), "{text}");
}

#[test]
fn unknown_flag_is_usage() {
    assert_eq!(code(&evomerge(&["merge", "--bogus"])), 2);
    assert_eq!(code(&evomerge(&[])), 2);
}

#[test]
fn diff_writes_task_vector() {
    let m = three_models();
    let out = m.root.join("tau.safetensors");
    let r = evomerge(&[
        "diff",
        "--base",
        s(&m.base),
        "--model",
        s(&m.models[1]),
        "--out",
        s(&out),
        "--include",
        "llm.*",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let tau = load_archive(&out, ArchiveOptions::default()).unwrap();
    assert_eq!(tau.get("llm.w").unwrap().data(), &[-3.0, -1.0, 1.0, 3.0]);
    assert!(!tau.contains("vision.p"));
}

#[test]
fn diff_with_empty_domain_is_usage() {
    let m = three_models();
    let out = m.root.join("tau.safetensors");
    let r = evomerge(&[
        "diff",
        "--base",
        s(&m.base),
        "--model",
        s(&m.models[0]),
        "--out",
        s(&out),
        "--include",
        "nothing.*",
    ]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("empty merge domain"), "{}", stderr(&r));
    assert!(!out.exists());
}

#[test]
fn misaligned_models_are_rejected() {
    let m = three_models();
    let odd = archive(&m.root, "odd.safetensors", &[("llm.w", vec![0.0; 5])]);
    let r = evomerge(&[
        "diff",
        "--base",
        s(&m.base),
        "--model",
        s(&odd),
        "--out",
        s(&m.root.join("x.safetensors")),
    ]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));

    let cfg = m.root.join("linear.json");
    fs::write(&cfg, r#"{"weights": [0.5, 0.5]}"#).unwrap();
    let r = evomerge(&[
        "merge",
        "--method",
        "linear",
        "--config",
        s(&cfg),
        "--out",
        s(&m.root.join("y.safetensors")),
        s(&m.models[0]),
        s(&odd),
    ]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
}

#[test]
fn ties_merge_is_deterministic_and_writes_manifest() {
    let m = three_models();
    let cfg = m.root.join("ties.json");
    fs::write(
        &cfg,
        r#"{"alpha": 0.5, "k": [0.5, 0.5, 1.0], "c": [1.0, 0.5, 0.25], "lambda": 1.0,
            "seed": 3, "include": ["llm.*"]}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = m.root.join(name);
        let mut args = vec![
            "merge",
            "--config",
            s(&cfg),
            "--base",
            s(&m.base),
            "--out",
            s(&out),
        ];
        args.extend(m.models.iter().map(|p| s(p)));
        let r = evomerge(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        out
    };
    let a = run("a.safetensors");
    let b = run("b.safetensors");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let merged = load_archive(&a, ArchiveOptions::default()).unwrap();
    assert_eq!(merged.get("vision.p").unwrap().data(), &[1.0, 1.0]);

    let manifest: Value =
        serde_json::from_slice(&fs::read(m.root.join("a.safetensors.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "merge");
    assert_eq!(manifest["best_config"]["seed"], 3);
}

#[test]
fn set_overrides_config_values() {
    let m = three_models();
    let cfg = m.root.join("ta.json");
    fs::write(&cfg, r#"{"c": [1.0, 1.0, 1.0], "lambda": 1.0}"#).unwrap();
    let out = m.root.join("ta.safetensors");
    let mut args = vec![
        "merge",
        "--method",
        "task-arithmetic",
        "--config",
        s(&cfg),
        "--base",
        s(&m.base),
        "--out",
        s(&out),
        "--set",
        "c.1=0",
        "--set",
        "c.2=0",
        "--set",
        "lambda=0.5",
    ];
    args.extend(m.models.iter().map(|p| s(p)));
    let r = evomerge(&args);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let merged = load_archive(&out, ArchiveOptions::default()).unwrap();
    assert_eq!(
        merged.get("llm.w").unwrap().data(),
        &[-0.75, -0.25, 0.25, 0.75]
    );

    let r = evomerge(&[
        "merge",
        "--method",
        "task-arithmetic",
        "--config",
        s(&cfg),
        "--base",
        s(&m.base),
        "--out",
        s(&out),
        "--set",
        "lambda",
        s(&m.models[0]),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn slerp_needs_exactly_two_models() {
    let m = three_models();
    let cfg = m.root.join("slerp.json");
    fs::write(&cfg, r#"{"t": 0.5}"#).unwrap();
    let out = m.root.join("s.safetensors");
    let mut args = vec![
        "merge",
        "--method",
        "slerp",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ];
    args.extend(m.models.iter().map(|p| s(p)));
    let r = evomerge(&args);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());

    let r = evomerge(&[
        "merge",
        "--method",
        "slerp",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        s(&m.models[0]),
        s(&m.models[1]),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
}

#[test]
fn missing_and_corrupt_inputs() {
    let m = three_models();
    let cfg = m.root.join("ties.json");
    fs::write(&cfg, r#"{"k": [1.0], "c": [1.0], "lambda": 1.0}"#).unwrap();
    let out = s(&m.root.join("o.safetensors")).to_string();
    let r = evomerge(&[
        "merge",
        "--config",
        "/nonexistent/ties.json",
        "--base",
        s(&m.base),
        "--out",
        &out,
        s(&m.models[0]),
    ]);
    assert_eq!(code(&r), 2);

    let broken = m.root.join("broken.safetensors");
    fs::write(&broken, [8, 0, 0, 0, 0, 0, 0, 0, b'{']).unwrap();
    let r = evomerge(&[
        "merge",
        "--config",
        s(&cfg),
        "--base",
        s(&m.base),
        "--out",
        &out,
        s(&broken),
    ]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));

    fs::write(
        &cfg,
        r#"{"k": [1.0], "c": [1.0], "lambda": 1.0, "colour": 1}"#,
    )
    .unwrap();
    let r = evomerge(&[
        "merge",
        "--config",
        s(&cfg),
        "--base",
        s(&m.base),
        "--out",
        &out,
        s(&m.models[0]),
    ]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
}

#[test]
fn score_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "a b c d\nthe the the\n").unwrap();
    fs::write(&reference, "a c b d\nthe cat\n").unwrap();
    let report = stdout_json(&evomerge(&[
        "score",
        "--hyp",
        s(&hyp),
        "--ref",
        s(&reference),
    ]));
    for key in ["bleu1", "bleu4", "rouge_l", "meteor"] {
        let v = report[key]
            .as_f64()
            .unwrap_or_else(|| panic!("{key} missing: {report}"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    fs::write(&reference, "a c b d\n").unwrap();
    let r = evomerge(&["score", "--hyp", s(&hyp), "--ref", s(&reference)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("2 lines"), "{}", stderr(&r));

    let r = evomerge(&[
        "score",
        "--hyp",
        s(&hyp),
        "--ref",
        s(&reference),
        "--tokenizer",
        "bpe",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn identical_text_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("same.txt");
    fs::write(
        &p,
        "no acute cardiopulmonary process\nheart size is normal\n",
    )
    .unwrap();
    let report = stdout_json(&evomerge(&["score", "--hyp", s(&p), "--ref", s(&p)]));
    assert_eq!(report["bleu4"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);
}

#[test]
fn optimize_resumes_from_generation_zero() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(
        code(&evomerge(&[
            "gen-fixture",
            "vector",
            "--out",
            s(&fx),
            "--budget",
            "8"
        ])),
        0
    );
    let cfg = fx.join("evo.json");
    let out = dir.path().join("run");
    let first = stdout_json(&evomerge(&[
        "optimize",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--stop-after",
        "0",
    ]));
    assert_eq!(first["completed"], false);
    assert!(first["best_fitness"].is_null());
    assert!(!out.join("best_config.json").exists());
    let done = stdout_json(&evomerge(&[
        "optimize",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--resume",
        s(&out.join("checkpoint.json")),
    ]));
    assert_eq!(done["completed"], true);
    assert_eq!(done["generations"], 8);

    let direct = dir.path().join("direct");
    let again = stdout_json(&evomerge(&[
        "optimize",
        "--config",
        s(&cfg),
        "--out",
        s(&direct),
    ]));
    assert_eq!(done["best_genotype"], again["best_genotype"]);
}

#[test]
fn resume_rejects_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    evomerge(&["gen-fixture", "vector", "--out", s(&fx), "--budget", "4"]);
    let cfg = fx.join("evo.json");
    let out = dir.path().join("run");
    stdout_json(&evomerge(&[
        "optimize",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--stop-after",
        "2",
    ]));
    let r = evomerge(&[
        "optimize",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--resume",
        s(&out.join("checkpoint.json")),
        "--set",
        "cma.popsize=20",
    ]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
}

#[test]
fn zero_budget_evaluates_initial_mean() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    evomerge(&["gen-fixture", "vector", "--out", s(&fx)]);
    let out = dir.path().join("run");
    let r = stdout_json(&evomerge(&[
        "optimize",
        "--config",
        s(&fx.join("evo.json")),
        "--out",
        s(&out),
        "--budget",
        "0",
    ]));
    assert_eq!(r["evaluations"], 1);
    assert!(r["best_genotype"]
        .as_array()
        .unwrap()
        .iter()
        .all(|g| g == 0.5));
    assert!(out.join("merged.safetensors").exists());
}

#[test]
fn inspect_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("best.json");
    fs::write(
        &cfg,
        r#"{"alpha": 0.0, "k": [0.25, 0.75], "c": [0.5, 1.5], "lambda": 1.5}"#,
    )
    .unwrap();
    let report = stdout_json(&evomerge(&["inspect", s(&cfg), "--format", "json"]));
    assert_eq!(report["models"][1]["share"], 0.75);
    assert_eq!(report["models"][0]["density"], 0.25);
    let text = evomerge(&["inspect", s(&cfg)]);
    assert_eq!(code(&text), 0);
    assert!(String::from_utf8_lossy(&text.stdout).starts_with("lambda 1.5\n"));
    fs::write(
        &cfg,
        r#"{"alpha": 0.0, "k": [0.25], "c": [0.5, 1.5], "lambda": 1.5}"#,
    )
    .unwrap();
    assert_eq!(code(&evomerge(&["inspect", s(&cfg)])), 2);
}
