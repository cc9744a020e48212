//! Parameter budgets and an empirical check of the linear convergence rate
//! of gradient descent on strongly convex quadratics.

pub mod budget;
pub mod convergence;
pub mod eigen;

pub use budget::{audit_model, param_count, stacked_count, Method, ModelAudit, ParamBudget};
pub use convergence::{
    low_rank_target, rate_suite, run_factored_gd, run_gd_quadratic, QuadraticProblem, RatePoint, SuiteReport,
    SuiteRow, BOUND_SLACK,
};
pub use eigen::symmetric_eigenvalues;
