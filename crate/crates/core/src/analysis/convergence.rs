//! Gradient descent on strongly convex quadratics, checked against the
//! geometric rate `L_n − L* ≤ (1 − m/M)ⁿ (L_0 − L*)` for step sizes
//! `η ≤ 1/M`, plus an observational run of the same descent on CP factors.

use alloc::format;
use alloc::vec::Vec;

use super::eigen::{symmetric_eigenvalues, DEFAULT_TOLERANCE};
use crate::mode_approx::{full_delta, init_adapter, CoefficientTable, GlobalFactors};
use crate::rng::{streams, SeededRng};
use crate::tensor::{Matrix, Tensor3};
use crate::{Error, Result};

/// `L(x) = ½ (x − x*)ᵀ A (x − x*)`, so the optimum value is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    a: Matrix,
    optimum: Vec<f64>,
    start: Vec<f64>,
    m: f64,
    big_m: f64,
}

impl QuadraticProblem {
    /// Validates `A` (symmetric to 1e-12, positive definite) and computes its
    /// extreme eigenvalues by Jacobi iteration.
    pub fn new(a: Matrix, optimum: Vec<f64>, start: Vec<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n || optimum.len() != n || start.len() != n || n == 0 {
            return Err(Error::argument(format!(
                "quadratic needs a square A and matching vectors (A {:?}, x* {}, x0 {})",
                a.shape(),
                optimum.len(),
                start.len()
            )));
        }
        let asym = a.max_abs_diff(&a.transpose());
        if asym > 1e-12 {
            return Err(Error::argument(format!("curvature is not symmetric (max |A − Aᵀ| = {asym:e})")));
        }
        let eig = symmetric_eigenvalues(&a, DEFAULT_TOLERANCE)?;
        let (m, big_m) = (eig[0], eig[n - 1]);
        if !(m > 0.0) {
            return Err(Error::argument(format!("curvature is not positive definite (λ_min = {m:e})")));
        }
        Ok(Self { a, optimum, start, m, big_m })
    }

    /// `A = BᵀB / n + δI` with Gaussian `B` and `δ ∈ [0.05, 1)`; the optimum
    /// and start point are standard normal.
    pub fn random(n: usize, rng: &mut SeededRng) -> Result<Self> {
        let b = Matrix::from_fn(n, n, |_, _| rng.normal());
        let delta = 0.05 + 0.95 * rng.uniform();
        let mut a = b.transpose().matmul(&b)?.scale(1.0 / n as f64);
        for i in 0..n {
            a[(i, i)] += delta;
        }
        // Exact symmetry: average away the rounding in BᵀB.
        let a = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        let optimum = (0..n).map(|_| rng.normal()).collect();
        let start = (0..n).map(|_| rng.normal()).collect();
        Self::new(a, optimum, start)
    }

    pub fn dimension(&self) -> usize {
        self.optimum.len()
    }

    pub fn curvature(&self) -> &Matrix {
        &self.a
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    /// Smallest eigenvalue of `A`.
    pub fn m(&self) -> f64 {
        self.m
    }

    /// Largest eigenvalue of `A`.
    pub fn big_m(&self) -> f64 {
        self.big_m
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.optimum).map(|(a, b)| a - b).collect()
    }

    /// `A (x − x*)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = self.residual(x);
        (0..r.len()).map(|i| self.a.row(i).iter().zip(&r).map(|(a, b)| a * b).sum()).collect()
    }

    /// `L(x) − L*`, which is `L(x)` by construction.
    pub fn loss(&self, x: &[f64]) -> f64 {
        let r = self.residual(x);
        0.5 * self.gradient(x).iter().zip(&r).map(|(g, e)| g * e).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub step: usize,
    pub loss_gap: f64,
    pub bound: f64,
}

impl RatePoint {
    pub fn within(&self, slack: f64) -> bool {
        self.loss_gap <= self.bound + slack
    }
}

/// Runs `x ← x − η ∇L(x)` from the problem's start point and records the
/// loss gap and the rate bound at steps `0..=steps`.
pub fn run_gd_quadratic(problem: &QuadraticProblem, eta: f64, steps: usize) -> Result<Vec<RatePoint>> {
    if !(eta > 0.0) || eta > 1.0 / problem.big_m {
        return Err(Error::argument(format!(
            "the rate bound assumes 0 < η ≤ 1/M; got η = {eta:e} with 1/M = {:e}",
            1.0 / problem.big_m
        )));
    }
    let contraction = 1.0 - problem.m / problem.big_m;
    let mut x = problem.start.clone();
    let initial = problem.loss(&x);
    let mut out = Vec::with_capacity(steps + 1);
    let mut factor = 1.0;
    for step in 0..=steps {
        if step > 0 {
            let g = problem.gradient(&x);
            x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= eta * gi);
            factor *= contraction;
        }
        out.push(RatePoint { step, loss_gap: problem.loss(&x), bound: factor * initial });
    }
    Ok(out)
}

/// Absolute slack allowed on top of the rate bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub problem: usize,
    pub point: RatePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub violations: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// `problems` random quadratics of dimension `1..=max_dim`, each run for
/// `steps` steps at `η = 1/M`.
pub fn rate_suite(seed: u64, problems: usize, max_dim: usize, steps: usize) -> Result<SuiteReport> {
    if max_dim == 0 {
        return Err(Error::argument("max_dim must be at least 1"));
    }
    let mut rng = SeededRng::new(seed, streams::PROBLEMS);
    let mut rows = Vec::with_capacity(problems * (steps + 1));
    let mut violations = 0;
    for p in 0..problems {
        let n = 1 + rng.below(max_dim);
        let problem = QuadraticProblem::random(n, &mut rng)?;
        for point in run_gd_quadratic(&problem, 1.0 / problem.big_m(), steps)? {
            if !point.within(BOUND_SLACK) {
                violations += 1;
            }
            rows.push(SuiteRow { problem: p, point });
        }
    }
    Ok(SuiteReport { rows, violations })
}

/// Random `d × d × N` target of CP rank at most `rank`.
pub fn low_rank_target(width: usize, slices: usize, rank: usize, seed: u64) -> Result<Tensor3> {
    let (mut f, c) = init_adapter(width, slices, rank, 1.0, seed)?;
    let mut rng = SeededRng::new(seed, streams::PROBLEMS);
    f.v = Matrix::from_fn(width, rank, |_, _| rng.normal());
    full_delta(&f, &c)
}

/// `½ ‖ΔW(U, V, P, Λ) − target‖²` and its factor gradients.
pub fn factored_loss(
    factors: &GlobalFactors,
    coeffs: &CoefficientTable,
    target: &Tensor3,
) -> Result<(f64, GlobalFactors, CoefficientTable)> {
    let delta = full_delta(factors, coeffs)?;
    let err = delta.sub(target)?;
    let loss = 0.5 * err.as_slice().iter().map(|e| e * e).sum::<f64>();
    let (d, r) = factors.u.shape();
    let n = factors.slices();
    let mut gu = Matrix::zeros(d, r);
    let mut gv = Matrix::zeros(d, r);
    let mut gp = Matrix::zeros(n, r);
    let mut gl = Matrix::zeros(n, r);
    for k in 0..n {
        let e = err.slice(k)?;
        let ev = e.matmul(&factors.v)?;
        let etu = e.transpose().matmul(&factors.u)?;
        for c in 0..r {
            let s = coeffs.lambda[(k, c)] * factors.p[(k, c)];
            // ∂L/∂s = u_cᵀ E v_c.
            let ds: f64 = (0..d).map(|i| factors.u[(i, c)] * ev[(i, c)]).sum();
            gp[(k, c)] = ds * coeffs.lambda[(k, c)];
            gl[(k, c)] = ds * factors.p[(k, c)];
            for i in 0..d {
                gu[(i, c)] += ev[(i, c)] * s;
                gv[(i, c)] += etu[(i, c)] * s;
            }
        }
    }
    Ok((loss, GlobalFactors { u: gu, v: gv, p: gp }, CoefficientTable { lambda: gl }))
}

/// Plain gradient descent on the CP factors of a `d × d × N` target,
/// starting from the adapter initialization (`V = 0`). Returns the loss at
/// steps `0..=steps`. No rate is asserted: the factored loss is not convex.
pub fn run_factored_gd(
    target: &Tensor3,
    rank: usize,
    eta: f64,
    steps: usize,
    init_std: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let [d1, d2, n] = target.dims();
    if d1 != d2 {
        return Err(Error::argument(format!("target slices must be square, got {d1} × {d2}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::argument(format!("step size must be positive, got {eta}")));
    }
    let (mut factors, mut coeffs) = init_adapter(d1, n, rank, init_std, seed)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, gf, gc) = factored_loss(&factors, &coeffs, target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("factored loss at step {step}")));
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        let update = |p: &mut Matrix, g: &Matrix| {
            p.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(x, gx)| *x -= eta * gx)
        };
        update(&mut factors.u, &gf.u);
        update(&mut factors.v, &gf.v);
        update(&mut factors.p, &gf.p);
        update(&mut coeffs.lambda, &gc.lambda);
    }
    Ok(losses)
}
