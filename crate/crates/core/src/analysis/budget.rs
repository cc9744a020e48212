//! Trainable-parameter budgets of three adapter families.
//!
//! With `L` layers per encoder, width `d` and rank `r`, adapting the
//! query/key/value projections of one unimodal self-attention (3 matrices)
//! and one fusion self- plus cross-attention (6 matrices) per layer costs:
//!
//! | method      | count                          |
//! |-------------|--------------------------------|
//! | mode approx | `L · 9 · 2r + 2dr + 2Ld`       |
//! | LoRA        | `L · 9 · 2dr`                  |
//! | UniAdapter  | `L · 4dr`                      |

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::backbone::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Mode approximation: shared CP factors plus gates.
    ModeApprox,
    Lora,
    UniAdapter,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ModeApprox, Method::Lora, Method::UniAdapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ModeApprox => "mode_approx",
            Method::Lora => "lora",
            Method::UniAdapter => "uniadapter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mode_approx" | "mode-approx" => Ok(Method::ModeApprox),
            "lora" => Ok(Method::Lora),
            "uniadapter" => Ok(Method::UniAdapter),
            other => Err(Error::argument(format!("unknown method {other:?} (expected mode_approx, lora or uniadapter)"))),
        }
    }
}

fn overflow() -> Error {
    Error::argument("parameter count overflows u64")
}

/// Closed-form trainable-parameter count, in exact integer arithmetic.
pub fn param_count(method: Method, layers: u64, width: u64, rank: u64) -> Result<u64> {
    if layers == 0 || width == 0 || rank == 0 {
        return Err(Error::argument(format!(
            "L, d and r must be positive (L={layers}, d={width}, r={rank})"
        )));
    }
    let mul = |a: u64, b: u64| a.checked_mul(b).ok_or_else(overflow);
    match method {
        Method::ModeApprox => {
            let slices = mul(mul(layers, 9)?, mul(2, rank)?)?;
            let factors = mul(mul(2, width)?, rank)?;
            let gates = mul(mul(2, layers)?, width)?;
            slices.checked_add(factors).and_then(|s| s.checked_add(gates)).ok_or_else(overflow)
        }
        Method::Lora => mul(mul(mul(layers, 9)?, mul(2, width)?)?, rank),
        Method::UniAdapter => mul(mul(mul(layers, 4)?, width)?, rank),
    }
}

/// Count for an arbitrary stack of `slices` projections and
/// `fusion_layers` gated layers: `2dR + 2NR + 2·L_c·d`. With `N = 9L` and
/// `L_c = L` this is the mode-approximation row of [`param_count`].
pub fn stacked_count(width: u64, slices: u64, rank: u64, fusion_layers: u64) -> u64 {
    2 * width * rank + 2 * slices * rank + 2 * fusion_layers * width
}

/// Counts published alongside the formulas, in millions.
pub fn reported_millions(method: Method, rank: u64) -> Option<f64> {
    match (method, rank) {
        (Method::ModeApprox, 64) => Some(0.1),
        (Method::ModeApprox, 128) => Some(0.2),
        (Method::Lora, 32) => Some(10.6),
        (Method::UniAdapter, 128) => Some(4.6),
        (Method::UniAdapter, 512) => Some(18.8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBudget {
    pub method: Method,
    pub layers: u64,
    pub width: u64,
    pub rank: u64,
    pub formula_count: u64,
    /// Entries actually allocated by a live model, when one was audited.
    pub allocated_count: Option<u64>,
}

impl ParamBudget {
    pub fn from_formula(method: Method, layers: u64, width: u64, rank: u64) -> Result<Self> {
        Ok(Self { method, layers, width, rank, formula_count: param_count(method, layers, width, rank)?, allocated_count: None })
    }

    /// `allocated − formula`, when a model was audited.
    pub fn difference(&self) -> Option<i128> {
        self.allocated_count.map(|a| a as i128 - self.formula_count as i128)
    }

    /// Relative gap between the formula and a published count, if there is
    /// one for this method and rank.
    pub fn reported_gap(&self) -> Option<(f64, f64)> {
        let reported = reported_millions(self.method, self.rank)?;
        let formula = self.formula_count as f64 / 1e6;
        Some((reported, (formula - reported) / reported))
    }
}

/// Trainable entries of a built model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAudit {
    /// Adapter budget (`U, V, P, Λ, γ, β`); `layers` is the fusion depth and
    /// `formula_count` is [`stacked_count`] for the built stack.
    pub adapter: ParamBudget,
    pub slices: u64,
    /// The matching head, reported separately from the adapter.
    pub head_count: u64,
}

pub fn audit_model(model: &Model) -> ModelAudit {
    let c = &model.config;
    let p = &model.params;
    let (d, r, n, lc) = (c.width as u64, c.rank as u64, c.stack_len() as u64, c.fusion_layers as u64);
    let gate_layers = if c.gated_query { lc } else { 0 };
    let head_count = (p.head.weight.as_slice().len() + p.head.bias.as_slice().len()) as u64;
    let allocated = p.count() as u64 - head_count;
    ModelAudit {
        adapter: ParamBudget {
            method: Method::ModeApprox,
            layers: lc,
            width: d,
            rank: r,
            formula_count: stacked_count(d, n, r, gate_layers),
            allocated_count: Some(allocated),
        },
        slices: n,
        head_count,
    }
}
