//! Flat `section.key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Every key is optional and
//! falls back to its default, unknown or repeated keys are errors, and the
//! whole file is validated before anything runs.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use modeprompt_core::align::{ContextMode, GateMode};
use modeprompt_core::backbone::{GateInit, ModelConfig};
use modeprompt_core::train::{AdamWConfig, LrSchedule, Optimizer, TrainConfig};

use crate::CliError;

/// Env var that replaces `run.seed`.
pub const SEED_ENV: &str = "MODEPROMPT_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub pairs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    /// Number of random model configurations to check.
    pub configs: usize,
    pub max_width: usize,
    pub max_batch: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSettings {
    pub problems: usize,
    pub max_dim: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
    pub convergence: ConvergenceSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings { pairs: 256, batch_size: 8 },
            gradcheck: GradcheckSettings { configs: 20, max_width: 8, max_batch: 4, eps: 1e-6 },
            convergence: ConvergenceSettings { problems: 50, max_dim: 20, steps: 500 },
        }
    }
}

/// The value of `MODEPROMPT_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key} takes true or false, got {value:?}")),
    }
}

pub fn parse_context(value: &str) -> Result<ContextMode, String> {
    match value {
        "enhance" => Ok(ContextMode::Enhance),
        "off" => Ok(ContextMode::Off),
        "random" => Ok(ContextMode::Random),
        "mean" => Ok(ContextMode::Mean),
        _ => Err(format!("context must be enhance, off, random or mean, got {value:?}")),
    }
}

pub fn context_name(c: ContextMode) -> &'static str {
    match c {
        ContextMode::Enhance => "enhance",
        ContextMode::Off => "off",
        ContextMode::Random => "random",
        ContextMode::Mean => "mean",
    }
}

pub fn parse_gate_mode(value: &str) -> Result<GateMode, String> {
    match value {
        "softmax" => Ok(GateMode::Softmax),
        "sigmoid" => Ok(GateMode::Sigmoid),
        _ => Err(format!("gate_mode must be softmax or sigmoid, got {value:?}")),
    }
}

fn gate_mode_name(m: GateMode) -> &'static str {
    match m {
        GateMode::Softmax => "softmax",
        GateMode::Sigmoid => "sigmoid",
    }
}

pub fn parse_gate_init(value: &str) -> Result<GateInit, String> {
    match value {
        "zeros" => Ok(GateInit::Zeros),
        "ones" => Ok(GateInit::Ones),
        _ => Err(format!("gate_init must be zeros or ones, got {value:?}")),
    }
}

fn gate_init_name(g: GateInit) -> &'static str {
    match g {
        GateInit::Zeros => "zeros",
        GateInit::Ones => "ones",
    }
}

/// Current AdamW hyperparameters, or the defaults when SGD is selected.
fn adamw(train: &TrainConfig) -> AdamWConfig {
    match train.optimizer {
        Optimizer::AdamW(c) => c,
        Optimizer::Sgd => AdamWConfig::default(),
    }
}

fn set_adamw(train: &mut TrainConfig, f: impl FnOnce(&mut AdamWConfig)) {
    if let Optimizer::AdamW(c) = &mut train.optimizer {
        f(c);
    }
}

impl RunConfig {
    /// `(key, value, comment)` for every setting, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        let m = &self.model;
        let t = &self.train;
        let a = adamw(t);
        vec![
            ("run.seed", self.seed.to_string(), "seeds the backbone, adapter init, data and batches"),
            ("run.out", self.out.display().to_string(), "output directory"),
            ("model.width", m.width.to_string(), "embedding width d"),
            ("model.vision_layers", m.vision_layers.to_string(), ""),
            ("model.text_layers", m.text_layers.to_string(), ""),
            ("model.fusion_layers", m.fusion_layers.to_string(), ""),
            ("model.rank", m.rank.to_string(), "CP rank R"),
            ("model.image_tokens", m.image_tokens.to_string(), ""),
            ("model.text_tokens", m.text_tokens.to_string(), ""),
            ("model.vocab", m.vocab.to_string(), ""),
            ("model.temperature", m.temperature.to_string(), "contrastive temperature"),
            ("model.heads", m.heads.to_string(), "only 1 is supported"),
            ("model.feed_forward", m.feed_forward.to_string(), "must be false"),
            ("model.gate_mode", gate_mode_name(m.gate_mode).into(), "softmax | sigmoid"),
            ("model.gated_query", m.gated_query.to_string(), "false uses the plain residual"),
            ("model.gate_init", gate_init_name(m.gate_init).into(), "zeros | ones"),
            ("model.context", context_name(m.context).into(), "enhance | off | random | mean"),
            ("model.init_std", m.init_std.to_string(), "std of U, P, Lambda and the head weight"),
            ("model.embed_scale", m.embed_scale.to_string(), "expected embedding norm"),
            ("model.embed_noise", m.embed_noise.to_string(), "relative image/text embedding gap"),
            ("train.steps", t.steps.to_string(), ""),
            ("train.batch_size", t.batch_size.to_string(), ""),
            ("train.lr", t.lr.to_string(), "base learning rate"),
            (
                "train.optimizer",
                match t.optimizer {
                    Optimizer::AdamW(_) => "adamw".into(),
                    Optimizer::Sgd => "sgd".into(),
                },
                "adamw | sgd",
            ),
            ("train.beta1", a.beta1.to_string(), "AdamW only"),
            ("train.beta2", a.beta2.to_string(), "AdamW only"),
            ("train.eps", a.eps.to_string(), "AdamW only"),
            ("train.weight_decay", a.weight_decay.to_string(), "AdamW only, decoupled"),
            (
                "train.schedule",
                match t.schedule {
                    LrSchedule::Cosine => "cosine".into(),
                    LrSchedule::Constant => "constant".into(),
                },
                "cosine | constant",
            ),
            ("train.pairs", t.pairs.to_string(), "size of the fixed training pool"),
            ("train.latent_dim", t.latent_dim.to_string(), "synthetic latent dimension"),
            ("train.corruption", t.corruption.to_string(), "token corruption probability in [0, 1]"),
            ("eval.pairs", self.eval.pairs.to_string(), "held-out pairs"),
            ("eval.batch_size", self.eval.batch_size.to_string(), ""),
            ("gradcheck.configs", self.gradcheck.configs.to_string(), "random model configurations"),
            ("gradcheck.max_width", self.gradcheck.max_width.to_string(), ""),
            ("gradcheck.max_batch", self.gradcheck.max_batch.to_string(), ""),
            ("gradcheck.eps", self.gradcheck.eps.to_string(), "central-difference step"),
            ("convergence.problems", self.convergence.problems.to_string(), ""),
            ("convergence.max_dim", self.convergence.max_dim.to_string(), ""),
            ("convergence.steps", self.convergence.steps.to_string(), ""),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "run.out" => self.out = PathBuf::from(value),
            "model.width" => m.width = parse(key, value)?,
            "model.vision_layers" => m.vision_layers = parse(key, value)?,
            "model.text_layers" => m.text_layers = parse(key, value)?,
            "model.fusion_layers" => m.fusion_layers = parse(key, value)?,
            "model.rank" => m.rank = parse(key, value)?,
            "model.image_tokens" => m.image_tokens = parse(key, value)?,
            "model.text_tokens" => m.text_tokens = parse(key, value)?,
            "model.vocab" => m.vocab = parse(key, value)?,
            "model.temperature" => m.temperature = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.feed_forward" => m.feed_forward = parse_bool(key, value)?,
            "model.gate_mode" => m.gate_mode = parse_gate_mode(value)?,
            "model.gated_query" => m.gated_query = parse_bool(key, value)?,
            "model.gate_init" => m.gate_init = parse_gate_init(value)?,
            "model.context" => m.context = parse_context(value)?,
            "model.init_std" => m.init_std = parse(key, value)?,
            "model.embed_scale" => m.embed_scale = parse(key, value)?,
            "model.embed_noise" => m.embed_noise = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.optimizer" => {
                t.optimizer = match value {
                    "adamw" => Optimizer::AdamW(adamw(t)),
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(format!("optimizer must be adamw or sgd, got {value:?}")),
                }
            }
            "train.beta1" => {
                let v = parse(key, value)?;
                set_adamw(t, |c| c.beta1 = v)
            }
            "train.beta2" => {
                let v = parse(key, value)?;
                set_adamw(t, |c| c.beta2 = v)
            }
            "train.eps" => {
                let v = parse(key, value)?;
                set_adamw(t, |c| c.eps = v)
            }
            "train.weight_decay" => {
                let v = parse(key, value)?;
                set_adamw(t, |c| c.weight_decay = v)
            }
            "train.schedule" => {
                t.schedule = match value {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(format!("schedule must be cosine or constant, got {value:?}")),
                }
            }
            "train.pairs" => t.pairs = parse(key, value)?,
            "train.latent_dim" => t.latent_dim = parse(key, value)?,
            "train.corruption" => t.corruption = parse(key, value)?,
            "eval.pairs" => self.eval.pairs = parse(key, value)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, value)?,
            "gradcheck.configs" => self.gradcheck.configs = parse(key, value)?,
            "gradcheck.max_width" => self.gradcheck.max_width = parse(key, value)?,
            "gradcheck.max_batch" => self.gradcheck.max_batch = parse(key, value)?,
            "gradcheck.eps" => self.gradcheck.eps = parse(key, value)?,
            "convergence.problems" => self.convergence.problems = parse(key, value)?,
            "convergence.max_dim" => self.convergence.max_dim = parse(key, value)?,
            "convergence.steps" => self.convergence.steps = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses and validates a config file body.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        // The optimizer line may come after its hyperparameters.
        let mut deferred = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Validation(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            let result = if key == "train.optimizer" {
                cfg.set(key, value)
            } else {
                deferred.push((n, key, value));
                Ok(())
            };
            result.map_err(|e| CliError::Validation(format!("line {}: {e}", n + 1)))?;
        }
        for (n, key, value) in deferred {
            cfg.set(key, value).map_err(|e| CliError::Validation(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn set_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("expected key=value, got {assignment:?}")))?;
        self.set(key.trim(), value.trim()).map_err(CliError::Validation)
    }

    /// Replaces the seed with `MODEPROMPT_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.eval.batch_size == 0 || self.eval.pairs < self.eval.batch_size {
            return Err(CliError::Validation("eval needs 1 <= batch_size <= pairs".into()));
        }
        let g = &self.gradcheck;
        if g.max_width == 0 || g.max_batch == 0 || !(g.eps > 0.0 && g.eps.is_finite()) {
            return Err(CliError::Validation("gradcheck needs positive max_width, max_batch and eps".into()));
        }
        if self.convergence.max_dim == 0 {
            return Err(CliError::Validation("convergence.max_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// The model settings with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Fully commented file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# modeprompt run configuration\n");
        let mut section = "";
        for (key, value, comment) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                let _ = write!(out, "\n# [{s}]\n");
                section = s;
            }
            if comment.is_empty() {
                let _ = writeln!(out, "{key} = {value}");
            } else {
                let _ = writeln!(out, "{key} = {value}  # {comment}");
            }
        }
        out
    }
}
