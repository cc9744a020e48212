//! The subcommands, callable in-process. Each one writes its artifacts
//! under an output directory and returns what it wrote.

use std::path::{Path, PathBuf};

use modeprompt_core::align::{ContextMode, GateMode};
use modeprompt_core::analysis::{audit_model, rate_suite, Method, ParamBudget, SuiteReport};
use modeprompt_core::backbone::{Model, ModelConfig};
use modeprompt_core::rng::SeededRng;
use modeprompt_core::train::gradcheck::{check_gradients, randomize_params, GradCheckConfig, GradCheckReport};
use modeprompt_core::train::{evaluate_retrieval, train_loop, BatchSampler, StepMetrics, SyntheticTask};

use crate::config::{ConvergenceSettings, GradcheckSettings};
use crate::report::{self, AuditRecord, EvalReport, GradcheckRow};
use crate::{checkpoint, write_file, CliError, Result, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const AUDIT_FILE: &str = "audit.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const EVAL_FILE: &str = "eval.json";

/// Stream id for drawing gradcheck configurations.
const GRADCHECK_STREAM: u64 = 10;

pub fn init_config(path: &Path) -> Result<()> {
    write_file(path, &RunConfig::default().to_text())
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Builds the model from the run seed, trains it and writes `metrics.csv`
/// and `model.ckpt` under `run.out`.
pub fn train(run: &RunConfig) -> Result<TrainOutcome> {
    run.validate()?;
    let model = Model::build(&run.model_config())?;
    let (model, metrics) = train_loop(model, &run.train_config())?;
    write_file(&run.out.join(METRICS_FILE), &report::metrics_csv(&metrics))?;
    let checkpoint = run.out.join(CHECKPOINT_FILE);
    checkpoint::save(&checkpoint, &model, run)?;
    Ok(TrainOutcome { model, metrics, checkpoint })
}

/// Recall on `run.eval.pairs` held-out pairs of the training task, drawn
/// from `seed`.
pub fn evaluate(model: &Model, run: &RunConfig, seed: u64) -> Result<EvalReport> {
    let t = &run.train;
    let task = SyntheticTask::new(&model.config, t.latent_dim, t.corruption, run.seed)?;
    let pairs = task.held_out(run.eval.pairs, seed);
    let r = evaluate_retrieval(model, &pairs, run.eval.batch_size)?;
    Ok(EvalReport {
        seed,
        pairs: r.pairs,
        batch_size: run.eval.batch_size,
        batches: r.batches,
        recall_at_1: r.recall_at_1,
        recall_at_5: r.recall_at_5,
    })
}

/// Loads a checkpoint and writes `eval.json` to `out`. The seed defaults to
/// the checkpoint's run seed.
pub fn eval(checkpoint: &Path, seed: Option<u64>, out: &Path) -> Result<EvalReport> {
    let (model, run) = checkpoint::load(checkpoint)?;
    let report = evaluate(&model, &run, seed.unwrap_or(run.seed))?;
    write_file(&out.join(EVAL_FILE), &report::to_json(&report))?;
    Ok(report)
}

/// One randomly drawn model shape for the gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub report: GradCheckReport,
}

fn random_case(settings: &GradcheckSettings, rng: &mut SeededRng) -> (ModelConfig, usize) {
    let context = [ContextMode::Enhance, ContextMode::Off, ContextMode::Random, ContextMode::Mean][rng.below(4)];
    let gate_mode = if rng.below(2) == 0 { GateMode::Softmax } else { GateMode::Sigmoid };
    let config = ModelConfig {
        width: 1 + rng.below(settings.max_width),
        vision_layers: 1 + rng.below(2),
        text_layers: 1 + rng.below(2),
        fusion_layers: 1 + rng.below(2),
        rank: 1 + rng.below(4),
        image_tokens: 1 + rng.below(3),
        text_tokens: 1 + rng.below(3),
        vocab: 4 + rng.below(8),
        gated_query: rng.below(4) != 0,
        gate_mode,
        context,
        seed: rng.next_u64(),
        ..ModelConfig::default()
    };
    (config, 1 + rng.below(settings.max_batch))
}

/// Checks every trainable entry of `settings.configs` random models with
/// randomized parameters.
pub fn gradcheck_suite(settings: &GradcheckSettings, seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = SeededRng::new(seed, GRADCHECK_STREAM);
    let check = GradCheckConfig { eps: settings.eps, ..GradCheckConfig::default() };
    let mut cases = Vec::with_capacity(settings.configs);
    for _ in 0..settings.configs {
        let (config, b) = random_case(settings, &mut rng);
        let mut model = Model::build(&config)?;
        randomize_params(&mut model, 0.3, config.seed);
        let pool = SyntheticTask::new(&config, 3, 0.2, config.seed)?.sample(b, config.seed);
        let batch = BatchSampler::new(pool, b, config.seed).next_batch();
        let report = check_gradients(&model, &batch, &check)?;
        cases.push(GradcheckCase { model: config, batch_size: b, report });
    }
    Ok(cases)
}

/// Writes `gradcheck.csv` and fails with an assertion error if any entry
/// is out of tolerance.
pub fn gradcheck(run: &RunConfig) -> Result<Vec<GradcheckRow>> {
    run.validate()?;
    let cases = gradcheck_suite(&run.gradcheck, run.seed)?;
    let rows: Vec<GradcheckRow> = cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            c.report.blocks.iter().map(move |b| GradcheckRow {
                config: i,
                block: b.block.to_string(),
                checked: b.checked,
                failures: b.failures,
                max_abs_err: b.max_abs_err,
                max_rel_err: b.max_rel_err,
            })
        })
        .collect();
    write_file(&run.out.join(GRADCHECK_FILE), &report::gradcheck_csv(&rows))?;
    let failures: usize = rows.iter().map(|r| r.failures).sum();
    if failures > 0 {
        return Err(CliError::Assertion(format!("{failures} gradient entries out of tolerance")));
    }
    Ok(rows)
}

/// Closed-form counts for all three methods at `(L, d, r)`, plus the live
/// count of a checkpointed model when one is given. Writes `audit.json`.
pub fn audit_params(layers: u64, width: u64, rank: u64, model: Option<&Path>, out: &Path) -> Result<Vec<AuditRecord>> {
    let published = layers == 12 && width == 768;
    let mut records = Method::ALL
        .iter()
        .map(|&m| Ok(AuditRecord::from_formula(&ParamBudget::from_formula(m, layers, width, rank)?, published)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = model {
        let (model, _) = checkpoint::load(path)?;
        records.push(AuditRecord::from_model(&audit_model(&model)));
    }
    write_file(&out.join(AUDIT_FILE), &report::to_json(&records))?;
    Ok(records)
}

/// Runs the gradient-descent rate suite and writes `convergence.csv`;
/// any step above its bound is an assertion failure.
pub fn convergence(settings: &ConvergenceSettings, seed: u64, out: &Path) -> Result<SuiteReport> {
    let report = rate_suite(seed, settings.problems, settings.max_dim, settings.steps)?;
    write_file(&out.join(CONVERGENCE_FILE), &report::convergence_csv(&report))?;
    if !report.passed() {
        return Err(CliError::Assertion(format!("{} steps exceed the rate bound", report.violations)));
    }
    Ok(report)
}
