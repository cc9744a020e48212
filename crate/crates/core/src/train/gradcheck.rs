//! Central-difference verification of the tape gradients.

use alloc::vec::Vec;

use crate::backbone::{forward, Model, PairBatch, ParamBlock};
use crate::rng::SeededRng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, abs_tol: 1e-7, rel_tol: 1e-5 }
    }
}

impl GradCheckConfig {
    /// `|a − n| ≤ max(abs_tol, rel_tol · max(|a|, |n|))`.
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let tol = self.abs_tol.max(self.rel_tol * analytic.abs().max(numeric.abs()));
        (analytic - numeric).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: ParamBlock,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// Largest `|a − n| / max(|a|, |n|)` among entries where either is
    /// nonzero.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.failures == 0)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn max_abs_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_abs_err).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `loss_total` with central differences of
/// the forward loss, for every entry of every trainable block.
pub fn check_gradients(model: &Model, batch: &PairBatch, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, analytic) = super::grad(model, batch)?;
    let analytic: Vec<(ParamBlock, Vec<f64>)> = analytic.blocks().into_iter().map(|(b, g)| (b, g.to_vec())).collect();
    let mut probe = model.clone();
    let mut blocks = Vec::with_capacity(analytic.len());
    for (bi, (block, grads)) in analytic.iter().enumerate() {
        let mut report = BlockReport { block: *block, checked: 0, failures: 0, max_abs_err: 0.0, max_rel_err: 0.0 };
        for (j, &a) in grads.iter().enumerate() {
            let original = probe.params.blocks()[bi].1[j];
            probe.params.blocks_mut()[bi].1[j] = original + config.eps;
            let plus = forward(&probe, batch)?.loss_total;
            probe.params.blocks_mut()[bi].1[j] = original - config.eps;
            let minus = forward(&probe, batch)?.loss_total;
            probe.params.blocks_mut()[bi].1[j] = original;
            let n = (plus - minus) / (2.0 * config.eps);

            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            if !config.accepts(a, n) {
                report.failures += 1;
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { blocks })
}

/// Overwrites every trainable entry with `N(0, std²)` draws so that no
/// gradient path is switched off by the zero initialization.
pub fn randomize_params(model: &mut Model, std: f64, seed: u64) {
    let mut rng = SeededRng::new(seed, 0);
    for (_, block) in model.params.blocks_mut() {
        for x in block.iter_mut() {
            *x = rng.gaussian(std);
        }
    }
}
