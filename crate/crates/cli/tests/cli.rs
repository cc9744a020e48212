use std::path::Path;
use std::process::Command;

use modeprompt::commands::{self, AUDIT_FILE, CHECKPOINT_FILE, CONVERGENCE_FILE, EVAL_FILE, GRADCHECK_FILE, METRICS_FILE};
use modeprompt::config::{ConvergenceSettings, SEED_ENV};
use modeprompt::{checkpoint, report, CliError, RunConfig};
use tempfile::TempDir;

fn quick_run(out: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.seed = 11;
    run.out = out.to_path_buf();
    run.train.steps = 40;
    run.train.lr = 5e-2;
    run.eval.pairs = 64;
    run.gradcheck.configs = 3;
    run
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_modeprompt"));
    c.env_remove(SEED_ENV);
    c
}

#[test]
fn init_config_file_parses_to_defaults() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.cfg");
    commands::init_config(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}

#[test]
fn unknown_key_in_file_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "model.width = 8\nfoo=1\n").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("foo"), "{err}");
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent");
    assert!(matches!(RunConfig::load(&missing), Err(CliError::Io { .. })));
    let err = commands::eval(&missing, None, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(commands::audit_params(12, 768, 64, Some(&missing), dir.path()).is_err());
}

#[test]
fn every_command_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let run = quick_run(dir.path());
        commands::train(&run).unwrap();
        commands::eval(&dir.path().join(CHECKPOINT_FILE), Some(3), dir.path()).unwrap();
        commands::gradcheck(&run).unwrap();
        commands::audit_params(12, 768, 64, Some(&dir.path().join(CHECKPOINT_FILE)), dir.path()).unwrap();
        let settings = ConvergenceSettings { problems: 5, max_dim: 8, steps: 50 };
        commands::convergence(&settings, 2, dir.path()).unwrap();
    }
    for file in [METRICS_FILE, CHECKPOINT_FILE, EVAL_FILE, GRADCHECK_FILE, AUDIT_FILE, CONVERGENCE_FILE] {
        assert_eq!(read(a.path().join(file)), read(b.path().join(file)), "{file} differs");
    }
}

#[test]
fn reloaded_checkpoint_evaluates_like_the_trained_model() {
    let dir = TempDir::new().unwrap();
    let run = quick_run(dir.path());
    let outcome = commands::train(&run).unwrap();
    let in_process = commands::evaluate(&outcome.model, &run, 5).unwrap();
    let from_disk = commands::eval(&outcome.checkpoint, Some(5), dir.path()).unwrap();
    assert_eq!(in_process, from_disk);
    let (model, _) = checkpoint::load(&outcome.checkpoint).unwrap();
    assert_eq!(model, outcome.model);
}

#[test]
fn tampered_checkpoint_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let run = quick_run(dir.path());
    let outcome = commands::train(&run).unwrap();
    let text = std::fs::read_to_string(&outcome.checkpoint).unwrap();
    std::fs::write(&outcome.checkpoint, text.replacen("run.seed = 11", "run.seed = 12", 1)).unwrap();
    let err = checkpoint::load(&outcome.checkpoint).unwrap_err();
    assert!(matches!(err, CliError::Corrupt { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn output_schemas_match_documented_columns() {
    let dir = TempDir::new().unwrap();
    let run = quick_run(dir.path());
    commands::train(&run).unwrap();
    commands::convergence(&ConvergenceSettings { problems: 2, max_dim: 4, steps: 3 }, 0, dir.path()).unwrap();
    commands::audit_params(12, 768, 32, None, dir.path()).unwrap();
    commands::eval(&dir.path().join(CHECKPOINT_FILE), None, dir.path()).unwrap();

    let metrics = String::from_utf8(read(dir.path().join(METRICS_FILE))).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,lr,loss_total,loss_itc,loss_itm,recall_at_1"));
    assert_eq!(lines.clone().count(), run.train.steps);
    assert!(lines.all(|l| l.split(',').count() == 6));

    let conv = String::from_utf8(read(dir.path().join(CONVERGENCE_FILE))).unwrap();
    assert_eq!(conv.lines().next(), Some("problem,step,loss_gap,bound"));
    assert_eq!(conv.lines().count(), 1 + 2 * 4);

    let audit: serde_json::Value = serde_json::from_slice(&read(dir.path().join(AUDIT_FILE))).unwrap();
    let rows = audit.as_array().unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["mode_approx", "lora", "uniadapter"]);
    assert_eq!(rows[1]["formula_count"], 5_308_416);
    assert!(rows[1]["flag"].is_string());
    for row in rows {
        for key in ["method", "L", "d", "r", "formula_count", "allocated_count"] {
            assert!(row.get(key).is_some(), "audit row lacks {key}");
        }
    }

    let eval: serde_json::Value = serde_json::from_slice(&read(dir.path().join(EVAL_FILE))).unwrap();
    for key in ["seed", "pairs", "batch_size", "batches", "recall_at_1", "recall_at_5"] {
        assert!(eval.get(key).is_some(), "eval lacks {key}");
    }
    assert_eq!(report::METRICS_HEADER.split(',').count(), 6);
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let status = |c: &mut Command| c.output().unwrap().status.code();

    assert_eq!(status(bin().args(["train", "--out", out, "--set", "train.steps=5"])), Some(0));
    assert_eq!(status(bin().args(["train", "--out", out, "--set", "model.temperature=0"])), Some(2));
    assert_eq!(status(bin().args(["train", "--out", out, "--set", "foo=1"])), Some(2));
    assert_eq!(status(bin().args(["eval", "--checkpoint", "/nonexistent/model.ckpt"])), Some(1));
    // A huge finite-difference step cannot meet the tolerance.
    let gc = ["gradcheck", "--out", out, "--set", "gradcheck.configs=2", "--set", "gradcheck.eps=0.5"];
    assert_eq!(status(bin().args(gc)), Some(4));
    let lr = ["train", "--out", out, "--set", "train.steps=3", "--set", "train.lr=1e300"];
    assert_eq!(status(bin().args(lr)), Some(3));
}

#[test]
fn seed_env_var_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let run = |sub: &str, env: Option<&str>, seed: Option<&str>| {
        let out = dir.path().join(sub);
        let mut c = bin();
        c.args(["train", "--out", out.to_str().unwrap(), "--set", "train.steps=5"]);
        if let Some(e) = env {
            c.env(SEED_ENV, e);
        }
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        read(out.join(METRICS_FILE))
    };
    let from_env = run("env", Some("7"), None);
    assert_eq!(from_env, run("flag", None, Some("7")));
    assert_ne!(from_env, run("default", None, None));

    let mut bad = bin();
    bad.args(["train", "--out", dir.path().to_str().unwrap()]).env(SEED_ENV, "seven");
    assert_eq!(bad.output().unwrap().status.code(), Some(2));
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = bin()
        .args(["train", "--out", out, "--set", "train.steps=2", "--no-gated-query", "--context", "mean"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let (model, run) = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(!run.model.gated_query && model.params.gates.is_empty());
    assert_eq!(model.config.context, modeprompt_core::align::ContextMode::Mean);
}
