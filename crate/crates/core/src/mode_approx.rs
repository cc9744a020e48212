//! CP-factorized updates to a stacked frozen weight tensor.
//!
//! The frozen stack `W0 ∈ R^{d×d×N}` holds every adapted projection as one
//! frontal slice. Its learnable update is never stored densely during
//! training:
//!
//! ```text
//! ΔW[:, :, k] = U · diag(Λ[k] ⊙ P[k]) · Vᵀ
//! ```
//!
//! `U` and `V` are shared by every slice, `P` and `Λ` carry one row per
//! slice. Projections multiply on the right, `X · (W0[:, :, k] + ΔW[:, :, k])`,
//! matching the `X·W` attention convention; the column-vector form `W·x` is
//! the transpose of this.

use alloc::format;
use alloc::vec::Vec;

use crate::rng::{streams, SeededRng};
use crate::tensor::{Matrix, Tensor3};
use crate::{Error, Result};

/// Which encoder an attention slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Vision,
    Text,
    FusionSelf,
    FusionCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Key,
    Value,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Query, Role::Key, Role::Value];
}

/// Address of one projection matrix inside the frozen stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SliceKey {
    pub branch: Branch,
    pub layer: usize,
    pub role: Role,
}

/// Number of stacked projections for the given layer counts.
pub fn stack_len(vision_layers: usize, text_layers: usize, fusion_layers: usize) -> usize {
    3 * (vision_layers + text_layers) + 6 * fusion_layers
}

/// The frozen weight tensor plus the map from projection address to slice.
///
/// Slices are laid out vision layers first, then text, then fusion; inside a
/// fusion layer the self-attention triple precedes the cross-attention
/// triple, and every triple is ordered q, k, v.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStack {
    weights: Tensor3,
    index: Vec<SliceKey>,
    layers: [usize; 3],
}

impl FrozenStack {
    /// Lays out the index map for the given layer counts and checks that
    /// `weights` has one slice per projection.
    pub fn new(weights: Tensor3, vision_layers: usize, text_layers: usize, fusion_layers: usize) -> Result<Self> {
        let index = Self::layout(vision_layers, text_layers, fusion_layers);
        let [d1, d2, n] = weights.dims();
        if d1 != d2 || n != index.len() {
            return Err(Error::argument(format!(
                "stack of shape {:?} does not match {} projections of a square width",
                weights.dims(),
                index.len()
            )));
        }
        Ok(Self { weights, index, layers: [vision_layers, text_layers, fusion_layers] })
    }

    fn layout(vision_layers: usize, text_layers: usize, fusion_layers: usize) -> Vec<SliceKey> {
        let mut index = Vec::with_capacity(stack_len(vision_layers, text_layers, fusion_layers));
        let mut push = |branch, layer| {
            for role in Role::ALL {
                index.push(SliceKey { branch, layer, role });
            }
        };
        for l in 0..vision_layers {
            push(Branch::Vision, l);
        }
        for l in 0..text_layers {
            push(Branch::Text, l);
        }
        for l in 0..fusion_layers {
            push(Branch::FusionSelf, l);
            push(Branch::FusionCross, l);
        }
        index
    }

    pub fn width(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn layers(&self) -> [usize; 3] {
        self.layers
    }

    pub fn weights(&self) -> &Tensor3 {
        &self.weights
    }

    pub fn keys(&self) -> &[SliceKey] {
        &self.index
    }

    /// Slice index of a projection.
    pub fn slice_of(&self, key: SliceKey) -> Result<usize> {
        self.index
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| Error::argument(format!("no slice for {key:?}")))
    }

    pub fn frozen_slice(&self, k: usize) -> Result<Matrix> {
        self.weights.slice(k)
    }
}

/// Shared CP factors: `U, V ∈ R^{d×R}`, `P ∈ R^{N×R}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFactors {
    pub u: Matrix,
    pub v: Matrix,
    pub p: Matrix,
}

impl GlobalFactors {
    pub fn width(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn slices(&self) -> usize {
        self.p.rows()
    }
}

/// Per-slice coefficient vectors, one row of length `R` per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub lambda: Matrix,
}

/// Default standard deviation of the Gaussian factor initialization.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Draws `U`, `P` and `Λ` i.i.d. from `N(0, init_std²)` and sets `V = 0`,
/// so the update is exactly zero before training.
///
/// Draw order is `U` row-major, then `P`, then `Λ`, from the adapter stream
/// of `seed`.
pub fn init_adapter(
    width: usize,
    slices: usize,
    rank: usize,
    init_std: f64,
    seed: u64,
) -> Result<(GlobalFactors, CoefficientTable)> {
    if width == 0 || slices == 0 || rank == 0 {
        return Err(Error::argument(format!(
            "adapter dimensions must be positive (d={width}, N={slices}, R={rank})"
        )));
    }
    if !(init_std > 0.0 && init_std.is_finite()) {
        return Err(Error::argument(format!("init std must be positive, got {init_std}")));
    }
    let mut rng = SeededRng::new(seed, streams::ADAPTER);
    let mut draw = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.gaussian(init_std));
    let u = draw(width, rank);
    let p = draw(slices, rank);
    let lambda = draw(slices, rank);
    let v = Matrix::zeros(width, rank);
    Ok((GlobalFactors { u, v, p }, CoefficientTable { lambda }))
}

fn check_compatible(factors: &GlobalFactors, coeffs: &CoefficientTable) -> Result<()> {
    let (d, r) = factors.u.shape();
    if factors.v.shape() != (d, r) {
        return Err(Error::Shape { op: "factors U/V", left: factors.u.shape(), right: factors.v.shape() });
    }
    if factors.p.cols() != r || coeffs.lambda.shape() != factors.p.shape() {
        return Err(Error::Shape { op: "factors P/Λ", left: factors.p.shape(), right: coeffs.lambda.shape() });
    }
    Ok(())
}

fn check_slice(k: usize, n: usize) -> Result<()> {
    if k >= n {
        return Err(Error::argument(format!("slice {k} out of range for {n} slices")));
    }
    Ok(())
}

/// `Λ[k] ⊙ P[k]` as a `1 × R` row.
pub fn slice_scales(factors: &GlobalFactors, coeffs: &CoefficientTable, k: usize) -> Result<Matrix> {
    check_compatible(factors, coeffs)?;
    check_slice(k, factors.slices())?;
    let s: Vec<f64> = coeffs.lambda.row(k).iter().zip(factors.p.row(k)).map(|(l, p)| l * p).collect();
    Ok(Matrix::row_vector(&s))
}

/// Materialized update slice `U · diag(Λ[k] ⊙ P[k]) · Vᵀ`.
pub fn delta_slice(factors: &GlobalFactors, coeffs: &CoefficientTable, k: usize) -> Result<Matrix> {
    let s = slice_scales(factors, coeffs, k)?;
    factors.u.mul_row_broadcast(&s)?.matmul(&factors.v.transpose())
}

/// The full update tensor. Test and audit use only.
pub fn full_delta(factors: &GlobalFactors, coeffs: &CoefficientTable) -> Result<Tensor3> {
    let slices = (0..factors.slices())
        .map(|k| delta_slice(factors, coeffs, k))
        .collect::<Result<Vec<_>>>()?;
    Tensor3::from_slices(&slices)
}

/// `X · W0[:, :, k] + ((X · U) · diag(Λ[k] ⊙ P[k])) · Vᵀ`, without forming a
/// `d × d` update.
pub fn adapted_projection(
    x: &Matrix,
    stack: &FrozenStack,
    factors: &GlobalFactors,
    coeffs: &CoefficientTable,
    k: usize,
) -> Result<Matrix> {
    check_slice(k, stack.len())?;
    if factors.width() != stack.width() || factors.slices() != stack.len() {
        return Err(Error::Shape {
            op: "adapter vs stack",
            left: (factors.width(), factors.slices()),
            right: (stack.width(), stack.len()),
        });
    }
    let frozen = x.matmul(&stack.frozen_slice(k)?)?;
    let s = slice_scales(factors, coeffs, k)?;
    let update = x.matmul(&factors.u)?.mul_row_broadcast(&s)?.matmul(&factors.v.transpose())?;
    frozen.add(&update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frobenius;
    use alloc::vec;

    fn random_factors(rng: &mut SeededRng, d: usize, n: usize, r: usize) -> (GlobalFactors, CoefficientTable) {
        let mut m = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.normal());
        let f = GlobalFactors { u: m(d, r), v: m(d, r), p: m(n, r) };
        (f, CoefficientTable { lambda: m(n, r) })
    }

    #[test]
    fn stack_len_arithmetic() {
        assert_eq!(stack_len(2, 2, 2), 24);
        assert_eq!(stack_len(1, 1, 1), 12);
    }

    #[test]
    fn index_map_is_a_bijection_in_documented_order() {
        let n = stack_len(2, 1, 2);
        let stack = FrozenStack::new(Tensor3::zeros(3, 3, n), 2, 1, 2).unwrap();
        let keys = stack.keys();
        assert_eq!(keys.len(), n);
        for (k, key) in keys.iter().enumerate() {
            assert_eq!(stack.slice_of(*key).unwrap(), k);
        }
        assert_eq!(keys[0], SliceKey { branch: Branch::Vision, layer: 0, role: Role::Query });
        assert_eq!(keys[6], SliceKey { branch: Branch::Text, layer: 0, role: Role::Query });
        assert_eq!(keys[9], SliceKey { branch: Branch::FusionSelf, layer: 0, role: Role::Query });
        assert_eq!(keys[12], SliceKey { branch: Branch::FusionCross, layer: 0, role: Role::Query });
        assert_eq!(keys[n - 1], SliceKey { branch: Branch::FusionCross, layer: 1, role: Role::Value });
    }

    #[test]
    fn stack_rejects_wrong_slice_count() {
        assert!(FrozenStack::new(Tensor3::zeros(2, 2, 11), 1, 1, 1).is_err());
    }

    #[test]
    fn init_gives_zero_update() {
        let (f, c) = init_adapter(5, 7, 3, 0.3, 42).unwrap();
        assert!(f.v.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(frobenius(&full_delta(&f, &c).unwrap()), 0.0);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_adapter(4, 6, 2, 0.02, 9).unwrap();
        let b = init_adapter(4, 6, 2, 0.02, 9).unwrap();
        assert_eq!(a, b);
        let c = init_adapter(4, 6, 2, 0.02, 10).unwrap();
        assert_ne!(a.0.u, c.0.u);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(init_adapter(0, 1, 1, 0.02, 0).is_err());
        assert!(init_adapter(1, 0, 1, 0.02, 0).is_err());
        assert!(init_adapter(1, 1, 0, 0.02, 0).is_err());
        assert!(init_adapter(1, 1, 1, 0.0, 0).is_err());
        assert!(init_adapter(1, 1, 1, -1.0, 0).is_err());
    }

    #[test]
    fn delta_slice_single_rank_one_term() {
        let f = GlobalFactors {
            u: Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            v: Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap(),
            p: Matrix::from_rows(&[&[1.0]]).unwrap(),
        };
        let c = CoefficientTable { lambda: Matrix::from_rows(&[&[2.0]]).unwrap() };
        let expect = Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(delta_slice(&f, &c, 0).unwrap(), expect);
        assert!(delta_slice(&f, &c, 1).is_err());
    }

    #[test]
    fn delta_slice_matches_triple_sum() {
        let mut rng = SeededRng::new(1, 0);
        let (d, n, r) = (4, 6, 3);
        let (f, c) = random_factors(&mut rng, d, n, r);
        for k in 0..n {
            let got = delta_slice(&f, &c, k).unwrap();
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for q in 0..r {
                        acc += c.lambda[(k, q)] * f.u[(i, q)] * f.v[(j, q)] * f.p[(k, q)];
                    }
                    assert!((got[(i, j)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_delta_stacks_slices_and_is_linear_in_lambda() {
        let mut rng = SeededRng::new(2, 0);
        let (f, c) = random_factors(&mut rng, 3, 4, 2);
        let t = full_delta(&f, &c).unwrap();
        for k in 0..4 {
            assert_eq!(t.slice(k).unwrap(), delta_slice(&f, &c, k).unwrap());
        }
        let scaled = CoefficientTable { lambda: c.lambda.scale(-2.5) };
        let ts = full_delta(&f, &scaled).unwrap();
        let ratio = frobenius(&ts) / frobenius(&t);
        assert!((ratio - 2.5).abs() < 1e-12);
    }

    fn random_stack(rng: &mut SeededRng, d: usize, layers: [usize; 3]) -> FrozenStack {
        let n = stack_len(layers[0], layers[1], layers[2]);
        let w = Tensor3::from_fn([d, d, n], |_, _, _| rng.normal());
        FrozenStack::new(w, layers[0], layers[1], layers[2]).unwrap()
    }

    #[test]
    fn adapted_projection_zero_init_is_frozen_product() {
        let mut rng = SeededRng::new(3, 0);
        let stack = random_stack(&mut rng, 4, [1, 1, 1]);
        let (f, c) = init_adapter(4, stack.len(), 3, 0.5, 1).unwrap();
        let x = Matrix::from_fn(5, 4, |_, _| rng.normal());
        for k in 0..stack.len() {
            let frozen = x.matmul(&stack.frozen_slice(k).unwrap()).unwrap();
            assert_eq!(adapted_projection(&x, &stack, &f, &c, k).unwrap(), frozen);
        }
    }

    #[test]
    fn adapted_projection_matches_materialized_slice() {
        let mut rng = SeededRng::new(4, 0);
        let stack = random_stack(&mut rng, 6, [1, 2, 1]);
        let (f, c) = random_factors(&mut rng, 6, stack.len(), 4);
        let x = Matrix::from_fn(3, 6, |_, _| rng.normal());
        for k in 0..stack.len() {
            let w = stack.frozen_slice(k).unwrap().add(&delta_slice(&f, &c, k).unwrap()).unwrap();
            let expect = x.matmul(&w).unwrap();
            let got = adapted_projection(&x, &stack, &f, &c, k).unwrap();
            assert!(got.max_abs_diff(&expect) <= 1e-10 * expect.max_abs());
        }
    }

    #[test]
    fn adapted_projection_reduced_hand_case() {
        // W0 = 0 with d = 2 and the smallest valid layout; slice 0 carries the
        // single rank-one term from the delta_slice example.
        let n = stack_len(1, 0, 0);
        let stack = FrozenStack::new(Tensor3::zeros(2, 2, n), 1, 0, 0).unwrap();
        let f = GlobalFactors {
            u: Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            v: Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap(),
            p: Matrix::from_vec(n, 1, vec![1.0, 0.0, 0.0]).unwrap(),
        };
        let c = CoefficientTable { lambda: Matrix::from_vec(n, 1, vec![2.0, 0.0, 0.0]).unwrap() };
        let x = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let out = adapted_projection(&x, &stack, &f, &c, 0).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[0.0, 2.0]]).unwrap());
    }

    #[test]
    fn shared_factors_touch_every_active_slice() {
        let mut rng = SeededRng::new(5, 0);
        let (mut f, c) = random_factors(&mut rng, 3, 5, 2);
        let before: Vec<Matrix> = (0..5).map(|k| delta_slice(&f, &c, k).unwrap()).collect();
        f.u[(1, 0)] += 0.25;
        for (k, b) in before.iter().enumerate() {
            assert_ne!(&delta_slice(&f, &c, k).unwrap(), b, "slice {k} unaffected by U");
        }
    }

    #[test]
    fn range_errors() {
        let mut rng = SeededRng::new(6, 0);
        let stack = random_stack(&mut rng, 2, [1, 0, 0]);
        let (f, c) = init_adapter(2, 3, 1, 0.1, 0).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(adapted_projection(&x, &stack, &f, &c, 3), Err(Error::Argument(_))));
        assert!(matches!(
            adapted_projection(&Matrix::zeros(1, 3), &stack, &f, &c, 0),
            Err(Error::Shape { .. })
        ));
    }
}
