//! Adapter-only training on synthetic pairs.
//!
//! The total objective is `ITC + ITM` with equal weights. Gradients come
//! from the reverse-mode tape and reach only the trainable blocks; the
//! frozen stack and embeddings are tape constants.

pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod optim;

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{forward_itc, Forward, Model, PairBatch, TrainableParams};
use crate::rng::{streams, SeededRng};
use crate::{Error, Result};

pub use data::{gen_synthetic, SyntheticPair, SyntheticTask};
pub use loss::{itc_loss, itm_loss, recall_at_1, recall_at_k};
pub use optim::{adamw_step, cosine_lr, sgd_step, AdamWConfig, AdamWState};

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub itc: f64,
    pub itm: f64,
    pub recall_at_1: f64,
}

/// Losses and gradients of `ITC + ITM` for one batch.
pub fn grad(model: &Model, batch: &PairBatch) -> Result<(LossBreakdown, TrainableParams)> {
    grad_scaled(model, batch, 1.0)
}

/// Gradients of `scale · (ITC + ITM)`.
pub fn grad_scaled(model: &Model, batch: &PairBatch, scale: f64) -> Result<(LossBreakdown, TrainableParams)> {
    let mut fwd = Forward::new(model, true);
    let vars = fwd.run(batch)?;
    let tape = fwd.tape();
    let losses = LossBreakdown {
        total: tape.scalar(vars.loss_total),
        itc: tape.scalar(vars.loss_itc),
        itm: tape.scalar(vars.loss_itm),
        recall_at_1: recall_at_1(tape.value(vars.similarity)),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", losses.total)));
    }
    Ok((losses, fwd.gradients(vars.loss_total, scale)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdamW(AdamWConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    /// Size of the fixed training pool.
    pub pairs: usize,
    pub latent_dim: usize,
    pub corruption: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-4,
            optimizer: Optimizer::AdamW(AdamWConfig::default()),
            schedule: LrSchedule::Cosine,
            pairs: 64,
            latent_dim: 8,
            corruption: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs < self.batch_size {
            return Err(Error::argument(format!(
                "need 1 <= batch_size <= pairs (batch_size={}, pairs={})",
                self.batch_size, self.pairs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::argument(format!("lr must be positive, got {}", self.lr)));
        }
        if let Optimizer::AdamW(c) = self.optimizer {
            if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || c.eps <= 0.0 || c.weight_decay < 0.0 {
                return Err(Error::argument("AdamW needs beta1, beta2 in [0, 1), eps > 0, weight_decay >= 0"));
            }
        }
        if self.latent_dim == 0 || !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::argument("latent_dim must be positive and corruption in [0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine_lr(self.lr, step, self.steps),
        }
    }
}

/// One metrics record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_itc: f64,
    pub loss_itm: f64,
    pub recall_at_1: f64,
}

/// Draws batches from a fixed pool: the pool is reshuffled at every epoch
/// boundary and cut into consecutive batches; the trailing partial batch is
/// dropped. Negatives pair text `i` with image `(i + s) mod B` for a random
/// shift `s ∈ [1, B)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<SyntheticPair>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(pool: Vec<SyntheticPair>, batch_size: usize, seed: u64) -> Self {
        let order = (0..pool.len()).collect();
        let mut s = Self { pool, order, cursor: usize::MAX, batch_size, rng: SeededRng::new(seed, streams::BATCHES) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> PairBatch {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let pairs: Vec<&SyntheticPair> = idx.iter().map(|&i| &self.pool[i]).collect();
        let b = pairs.len();
        let negatives = if b >= 2 {
            let shift = 1 + self.rng.below(b - 1);
            (0..b).map(|i| (i + shift) % b).collect()
        } else {
            Vec::new()
        };
        PairBatch {
            images: pairs.iter().map(|p| p.image_tokens.clone()).collect(),
            texts: pairs.iter().map(|p| p.text_tokens.clone()).collect(),
            negatives,
            context_seed: self.rng.next_u64(),
        }
    }
}

/// Model, optimizer state and batch stream of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adamw: Option<AdamWState>,
    sampler: BatchSampler,
    step: usize,
}

impl Trainer {
    /// Generates the training pool from the train seed and prepares the
    /// optimizer.
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let task = SyntheticTask::new(&model.config, config.latent_dim, config.corruption, config.seed)?;
        let pool = task.sample(config.pairs, config.seed);
        let adamw = match config.optimizer {
            Optimizer::AdamW(c) => Some(AdamWState::new(&model.params, c)),
            Optimizer::Sgd => None,
        };
        let sampler = BatchSampler::new(pool, config.batch_size, config.seed);
        Ok(Self { model, config, adamw, sampler, step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimization step; the metrics describe the batch before the
    /// update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.sampler.next_batch();
        let (losses, grads) = grad(&self.model, &batch).map_err(|e| at_step(e, self.step))?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        let lr = self.config.lr_at(self.step);
        match &mut self.adamw {
            Some(state) => adamw_step(&mut self.model.params, &grads, state, lr),
            None => sgd_step(&mut self.model.params, &grads, lr),
        }
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
        }
        let metrics = StepMetrics {
            step: self.step,
            lr,
            loss_total: losses.total,
            loss_itc: losses.itc,
            loss_itm: losses.itm,
            recall_at_1: losses.recall_at_1,
        };
        self.step += 1;
        Ok(metrics)
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at step {step}")),
        other => other,
    }
}

/// Runs `config.steps` steps and returns the trained model with one metrics
/// record per step.
pub fn train_loop(model: Model, config: &TrainConfig) -> Result<(Model, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let metrics = (0..config.steps).map(|_| trainer.step()).collect::<Result<Vec<_>>>()?;
    Ok((trainer.model, metrics))
}

/// In-batch retrieval quality of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub pairs: usize,
    pub batches: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

/// Splits `pairs` into consecutive batches of `batch_size` (dropping the
/// remainder) and averages image-to-text recall over every query.
pub fn evaluate_retrieval(model: &Model, pairs: &[SyntheticPair], batch_size: usize) -> Result<RetrievalReport> {
    if batch_size == 0 || pairs.len() < batch_size {
        return Err(Error::argument(format!(
            "need at least one full batch ({} pairs, batch size {batch_size})",
            pairs.len()
        )));
    }
    let batches = pairs.len() / batch_size;
    let (mut r1, mut r5) = (0.0, 0.0);
    for chunk in pairs.chunks_exact(batch_size) {
        let images: Vec<Vec<usize>> = chunk.iter().map(|p| p.image_tokens.clone()).collect();
        let texts: Vec<Vec<usize>> = chunk.iter().map(|p| p.text_tokens.clone()).collect();
        let sim = forward_itc(model, &images, &texts)?;
        r1 += recall_at_1(&sim);
        r5 += recall_at_k(&sim, 5);
    }
    Ok(RetrievalReport {
        pairs: batches * batch_size,
        batches,
        recall_at_1: r1 / batches as f64,
        recall_at_5: r5 / batches as f64,
    })
}
