//! Synthetic paired image/text token data.
//!
//! Each pair draws a latent `z ~ N(0, I_h)`. A task-level codebook holds one
//! Gaussian key per (position, token) and maps the latent to a list of
//! concept tokens, `concept[p] = argmax_v z · key[p][v]`. Image tokens read
//! the concepts in order; text tokens read them in a fixed task-specific
//! permutation (cycling when the text is longer). With `corruption = c`,
//! every emitted token is independently replaced by a uniform random token
//! with probability `c`, so `c = 0` gives a perfectly separable task and
//! `c = 1` destroys all pairing signal.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::ModelConfig;
use crate::rng::{streams, SeededRng};
use crate::tensor::{Matrix, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub id: usize,
    pub latent: Vector,
    pub image_tokens: Vec<usize>,
    pub text_tokens: Vec<usize>,
}

/// The latent-to-token mapping shared by every split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    latent_dim: usize,
    corruption: f64,
    vocab: usize,
    image_len: usize,
    text_len: usize,
    /// `(positions · vocab) × latent_dim`; row `p · vocab + v` is `key[p][v]`.
    keys: Matrix,
    text_order: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(config: &ModelConfig, latent_dim: usize, corruption: f64, task_seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::argument("latent_dim must be at least 1"));
        }
        if !(0.0..=1.0).contains(&corruption) {
            return Err(Error::argument(format!("corruption must lie in [0, 1], got {corruption}")));
        }
        let positions = config.image_tokens.max(config.text_tokens);
        let mut rng = SeededRng::new(task_seed, streams::TASK);
        let mut keys = Matrix::from_fn(positions * config.vocab, latent_dim, |_, _| rng.normal());
        for r in 0..keys.rows() {
            let norm = libm::sqrt(keys.row(r).iter().map(|x| x * x).sum::<f64>());
            keys.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        }
        let mut text_order: Vec<usize> = (0..positions).collect();
        rng.shuffle(&mut text_order);
        Ok(Self {
            latent_dim,
            corruption,
            vocab: config.vocab,
            image_len: config.image_tokens,
            text_len: config.text_tokens,
            keys,
            text_order,
        })
    }

    fn concepts(&self, z: &[f64]) -> Vec<usize> {
        let positions = self.text_order.len();
        (0..positions)
            .map(|p| {
                let score = |v: usize| {
                    let key = self.keys.row(p * self.vocab + v);
                    key.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
                };
                // First maximum wins.
                (1..self.vocab).fold(0, |best, v| if score(v) > score(best) { v } else { best })
            })
            .collect()
    }

    fn corrupt(&self, token: usize, rng: &mut SeededRng) -> usize {
        if self.corruption > 0.0 && rng.uniform() < self.corruption {
            rng.below(self.vocab)
        } else {
            token
        }
    }

    /// `n` pairs with ids `0..n`, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<SyntheticPair> {
        self.sample_stream(n, seed, streams::SAMPLES)
    }

    /// Like [`sample`](Self::sample) but from a separate stream, so it never
    /// reproduces a training pool drawn with the same seed.
    pub fn held_out(&self, n: usize, seed: u64) -> Vec<SyntheticPair> {
        self.sample_stream(n, seed, streams::HELD_OUT)
    }

    fn sample_stream(&self, n: usize, seed: u64, stream: u64) -> Vec<SyntheticPair> {
        let mut rng = SeededRng::new(seed, stream);
        (0..n)
            .map(|id| {
                let z: Vec<f64> = (0..self.latent_dim).map(|_| rng.normal()).collect();
                let concepts = self.concepts(&z);
                let image_tokens = (0..self.image_len).map(|p| self.corrupt(concepts[p], &mut rng)).collect();
                let text_tokens = (0..self.text_len)
                    .map(|p| self.corrupt(concepts[self.text_order[p % self.text_order.len()]], &mut rng))
                    .collect();
                SyntheticPair { id, latent: Vector::from(z.as_slice()), image_tokens, text_tokens }
            })
            .collect()
    }
}

/// Generates `n_pairs` pairs for the model's token shapes; the codebook comes
/// from `task_seed`, the latents from `seed`.
pub fn gen_synthetic(
    n_pairs: usize,
    config: &ModelConfig,
    latent_dim: usize,
    corruption: f64,
    task_seed: u64,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    Ok(SyntheticTask::new(config, latent_dim, corruption, task_seed)?.sample(n_pairs, seed))
}
