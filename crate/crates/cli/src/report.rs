//! CSV and JSON report bodies. Every writer here is a pure function of its
//! input, which keeps repeated runs byte-identical.

use std::fmt::Write as _;

use modeprompt_core::analysis::{ModelAudit, ParamBudget, SuiteReport};
use modeprompt_core::train::StepMetrics;
use serde::Serialize;

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_itc,loss_itm,recall_at_1";
pub const CONVERGENCE_HEADER: &str = "problem,step,loss_gap,bound";
pub const GRADCHECK_HEADER: &str = "config,block,checked,failures,max_abs_err,max_rel_err";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.step, m.lr, m.loss_total, m.loss_itc, m.loss_itm, m.recall_at_1
        );
    }
    out
}

pub fn convergence_csv(report: &SuiteReport) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", r.problem, r.point.step, r.point.loss_gap, r.point.bound);
    }
    out
}

/// One row per trainable block of one checked configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub config: usize,
    pub block: String,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{GRADCHECK_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.config, r.block, r.checked, r.failures, r.max_abs_err, r.max_rel_err
        );
    }
    out
}

/// Published counts are rounded to 0.1M; anything further off is flagged.
pub const REPORTED_ROUNDING: f64 = 0.05;

/// A row of `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRecord {
    pub method: String,
    /// `formula` for the closed-form counts, `checkpoint` for a live model.
    pub source: &'static str,
    #[serde(rename = "L")]
    pub layers: u64,
    pub d: u64,
    pub r: u64,
    pub formula_count: u64,
    pub allocated_count: Option<u64>,
    /// Published count in millions, for the setting where one exists.
    pub reported_millions: Option<f64>,
    pub flag: Option<String>,
}

impl AuditRecord {
    /// `published` marks the 12-layer, width-768 setting the published
    /// counts refer to.
    pub fn from_formula(b: &ParamBudget, published: bool) -> Self {
        let reported = if published { b.reported_gap().map(|(r, _)| r) } else { None };
        let flag = reported.and_then(|r| {
            let formula = b.formula_count as f64 / 1e6;
            ((formula - r).abs() > REPORTED_ROUNDING).then(|| {
                format!("formula gives {formula:.2}M but the published count is {r}M")
            })
        });
        Self {
            method: b.method.to_string(),
            source: "formula",
            layers: b.layers,
            d: b.width,
            r: b.rank,
            formula_count: b.formula_count,
            allocated_count: b.allocated_count,
            reported_millions: reported,
            flag,
        }
    }

    pub fn from_model(a: &ModelAudit) -> Self {
        let b = &a.adapter;
        let flag = b
            .difference()
            .filter(|&diff| diff != 0)
            .map(|diff| format!("allocated count differs from the formula by {diff}"));
        Self {
            method: b.method.to_string(),
            source: "checkpoint",
            layers: b.layers,
            d: b.width,
            r: b.rank,
            formula_count: b.formula_count,
            allocated_count: b.allocated_count,
            reported_millions: None,
            flag,
        }
    }
}

/// Held-out retrieval quality, written as `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub pairs: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use modeprompt_core::analysis::Method;

    #[test]
    fn metrics_rows_follow_the_header() {
        let m = StepMetrics { step: 3, lr: 0.5, loss_total: 1.25, loss_itc: 1.0, loss_itm: 0.25, recall_at_1: 0.125 };
        assert_eq!(metrics_csv(&[m]), format!("{METRICS_HEADER}\n3,0.5,1.25,1,0.25,0.125\n"));
    }

    #[test]
    fn lora_gap_is_flagged_and_mode_approx_is_not() {
        let lora = ParamBudget::from_formula(Method::Lora, 12, 768, 32).unwrap();
        let rec = AuditRecord::from_formula(&lora, true);
        assert_eq!(rec.reported_millions, Some(10.6));
        assert!(rec.flag.is_some());
        let mode_approx = ParamBudget::from_formula(Method::ModeApprox, 12, 768, 64).unwrap();
        let rec = AuditRecord::from_formula(&mode_approx, true);
        assert_eq!((rec.formula_count, rec.flag), (130_560, None));
        assert_eq!(AuditRecord::from_formula(&lora, false).reported_millions, None);
    }

    #[test]
    fn audit_json_uses_documented_field_names() {
        let b = ParamBudget::from_formula(Method::UniAdapter, 6, 256, 8).unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&AuditRecord::from_formula(&b, false))).unwrap();
        for key in ["method", "L", "d", "r", "formula_count", "allocated_count"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
