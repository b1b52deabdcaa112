//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations as they execute (define-by-run);
//! [`Tensor`] is a copyable handle into the tape. Tapes are single-use:
//! build a graph, call [`Tape::backward`] once, read gradients, drop.
//! The graph changes shape every training step (random neighborhoods), so
//! there is no static-graph mode.
//!
//! Conventions:
//! - Shape mismatches and invalid axes are programming errors and panic.
//! - Division by zero propagates infinities; `ln` of a non-positive value
//!   panics only on a tape built with [`Tape::new_checked`].
//! - Binary ops broadcast the right operand when its shape is a suffix of
//!   the left shape (covers bias adds and scalar nodes); nothing more.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};
use std::cell::{Cell, RefCell};

pub mod gradcheck;

/// Element type the tape can differentiate through. f32 for training,
/// f64 for gradient-check builds.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn cast(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self)
    }
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    BatchMatmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    ClampUnit { a: usize },
    SumAll { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, argmax: Vec<usize> },
    Reshape { a: usize },
    PermuteAxes { a: usize, perm: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    CausalSoftmax { a: usize },
    SoftmaxCrossEntropy { logits: usize, targets: Vec<usize>, mask: Option<Vec<bool>>, probs: ArrayD<T> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: ArrayD<T>, inv_std: ArrayD<T> },
    PairwiseRowCorr { a: usize, z: Array2<T>, sigma: Vec<T> },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of operations; nodes index earlier nodes, so reverse
/// index order is a reverse topological order.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
    checked: bool,
}

/// Handle to a tape node. Copyable; all arithmetic goes through methods or
/// the std operator impls, which panic if the operands live on different tapes.
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Scalar> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Scalar> std::fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(node {}, shape {:?})", self.idx, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), backward_done: Cell::new(false), checked: false }
    }

    /// A tape that additionally validates numerically hazardous inputs
    /// (currently: `ln` of non-positive values).
    pub fn new_checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, op, needs_grad });
        Tensor { tape: self, idx: nodes.len() - 1 }
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn var(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: T) -> Tensor<'_, T> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Run the reverse pass from a scalar loss. Single-use: calling this a
    /// second time on the same tape panics instead of silently accumulating.
    pub fn backward(&self, loss: Tensor<'_, T>) {
        assert!(std::ptr::eq(loss.tape, self), "loss lives on a different tape");
        assert!(!self.backward_done.get(), "backward already run; tapes are single-use");
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[loss.idx].value.ndim(), 0, "backward requires a scalar loss");
        nodes[loss.idx].grad = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for idx in (0..=loss.idx).rev() {
            if nodes[idx].grad.is_none() || !nodes[idx].needs_grad {
                continue;
            }
            // take the op out instead of cloning; some ops carry saved arrays
            let op = std::mem::replace(&mut nodes[idx].op, Op::Leaf);
            let contributions = backward_op(&nodes, idx, &op);
            nodes[idx].op = op;
            for (input, g) in contributions {
                match nodes[input].grad.as_mut() {
                    Some(acc) => *acc += &g,
                    None => nodes[input].grad = Some(g),
                }
            }
        }
    }
}

/// Reduce `g` to `shape` by summing the leading axes (inverse of the
/// suffix-broadcast rule used by the binary ops).
fn reduce_to_shape<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.sum_axis(Axis(0));
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    debug_assert_eq!(out.shape(), shape);
    out
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    let inv_sqrt2 = T::cast(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    let inv_sqrt2 = T::cast(std::f64::consts::FRAC_1_SQRT_2);
    let phi = half * (T::one() + (x * inv_sqrt2).erf());
    let inv_sqrt_2pi = T::cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let pdf = (-x * x * half).exp() * inv_sqrt_2pi;
    phi + x * pdf
}

/// Per-op vector-Jacobian products. Returns (input index, gradient) pairs;
/// inputs that do not require grad are skipped.
fn backward_op<T: Scalar>(nodes: &[Node<T>], idx: usize, op: &Op<T>) -> Vec<(usize, ArrayD<T>)> {
    let g = nodes[idx].grad.as_ref().unwrap();
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (g2, av, bv) = (as2(g), as2(&nodes[*a].value), as2(&nodes[*b].value));
            if nodes[*a].needs_grad {
                out.push((*a, g2.dot(&bv.t()).into_dyn()));
            }
            if nodes[*b].needs_grad {
                out.push((*b, av.t().dot(&g2).into_dyn()));
            }
        }
        Op::BatchMatmul { a, b } => {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let av = nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
            let bv = nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
            let n = g3.shape()[0];
            if nodes[*a].needs_grad {
                let mut da = ndarray::Array3::<T>::zeros((n, av.shape()[1], av.shape()[2]));
                for i in 0..n {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = bv.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                }
                out.push((*a, da.into_dyn()));
            }
            if nodes[*b].needs_grad {
                let mut db = ndarray::Array3::<T>::zeros((n, bv.shape()[1], bv.shape()[2]));
                for i in 0..n {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = av.index_axis(Axis(0), i);
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                out.push((*b, db.into_dyn()));
            }
        }
        Op::Add { a, b } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.clone()));
            }
            if nodes[*b].needs_grad {
                out.push((*b, reduce_to_shape(g, nodes[*b].value.shape())));
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.clone()));
            }
            if nodes[*b].needs_grad {
                out.push((*b, reduce_to_shape(&g.mapv(|v| -v), nodes[*b].value.shape())));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].needs_grad {
                let bb = bv.broadcast(av.raw_dim()).unwrap();
                out.push((*a, (g * &bb).into_dyn()));
            }
            if nodes[*b].needs_grad {
                out.push((*b, reduce_to_shape(&(g * av), bv.shape())));
            }
        }
        Op::Div { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let bb = bv.broadcast(av.raw_dim()).unwrap().to_owned();
            if nodes[*a].needs_grad {
                out.push((*a, g / &bb));
            }
            if nodes[*b].needs_grad {
                let db = g * av / &(bb.clone() * &bb);
                out.push((*b, reduce_to_shape(&db.mapv(|v| -v), bv.shape())));
            }
        }
        Op::Neg { a } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.mapv(|v| -v)));
            }
        }
        Op::Scale { a, c } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.mapv(|v| v * *c)));
            }
        }
        Op::AddScalar { a } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.clone()));
            }
        }
        Op::Gelu { a } => {
            if nodes[*a].needs_grad {
                let mut da = nodes[*a].value.mapv(gelu_grad);
                da *= g;
                out.push((*a, da));
            }
        }
        Op::Exp { a } => {
            if nodes[*a].needs_grad {
                out.push((*a, g * &nodes[idx].value));
            }
        }
        Op::Ln { a } => {
            if nodes[*a].needs_grad {
                out.push((*a, g / &nodes[*a].value));
            }
        }
        Op::Sqrt { a } => {
            if nodes[*a].needs_grad {
                let half = T::cast(0.5);
                let da = Zip::from(g).and(&nodes[idx].value).map_collect(|&gv, &y| gv * half / y);
                out.push((*a, da));
            }
        }
        Op::Abs { a } => {
            if nodes[*a].needs_grad {
                let da = Zip::from(g).and(&nodes[*a].value).map_collect(|&gv, &x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                out.push((*a, da));
            }
        }
        Op::ClampUnit { a } => {
            if nodes[*a].needs_grad {
                out.push((*a, g.clone()));
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                let gv = g[[]];
                out.push((*a, ArrayD::from_elem(nodes[*a].value.raw_dim(), gv)));
            }
        }
        Op::SumAxis { a, axis } => {
            if nodes[*a].needs_grad {
                let expanded = g.clone().insert_axis(Axis(*axis));
                let da = expanded.broadcast(nodes[*a].value.raw_dim()).unwrap().to_owned();
                out.push((*a, da));
            }
        }
        Op::MeanAxis { a, axis } => {
            if nodes[*a].needs_grad {
                let n = T::cast(nodes[*a].value.shape()[*axis] as f64);
                let expanded = g.mapv(|v| v / n).insert_axis(Axis(*axis));
                let da = expanded.broadcast(nodes[*a].value.raw_dim()).unwrap().to_owned();
                out.push((*a, da));
            }
        }
        Op::MaxAxis { a, axis, argmax } => {
            if nodes[*a].needs_grad {
                let mut da = ArrayD::zeros(nodes[*a].value.raw_dim());
                for ((mut lane, &am), &gv) in
                    da.lanes_mut(Axis(*axis)).into_iter().zip(argmax).zip(g.iter())
                {
                    lane[am] = gv;
                }
                out.push((*a, da));
            }
        }
        Op::Reshape { a } => {
            if nodes[*a].needs_grad {
                let da = g.clone().into_shape_with_order(nodes[*a].value.raw_dim()).unwrap();
                out.push((*a, da));
            }
        }
        Op::PermuteAxes { a, perm } => {
            if nodes[*a].needs_grad {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let da = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                out.push((*a, da));
            }
        }
        Op::Narrow { a, axis, start } => {
            if nodes[*a].needs_grad {
                let mut da = ArrayD::zeros(nodes[*a].value.raw_dim());
                let len = g.shape()[*axis];
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(g);
                out.push((*a, da));
            }
        }
        Op::IndexSelect { a, axis, indices } => {
            if nodes[*a].needs_grad {
                // scatter-add: indices may repeat (e.g. token embedding rows)
                let mut da = ArrayD::zeros(nodes[*a].value.raw_dim());
                for (k, &i) in indices.iter().enumerate() {
                    let gk = g.index_axis(Axis(*axis), k);
                    let mut slot = da.index_axis_mut(Axis(*axis), i);
                    slot += &gk;
                }
                out.push((*a, da));
            }
        }
        Op::CausalSoftmax { a } => {
            if nodes[*a].needs_grad {
                let p = nodes[idx].value.view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, t, _) = p.dim();
                let mut da = ndarray::Array3::<T>::zeros((n, t, t));
                for i in 0..n {
                    for row in 0..t {
                        let mut dot = T::zero();
                        for col in 0..=row {
                            dot += g3[[i, row, col]] * p[[i, row, col]];
                        }
                        for col in 0..=row {
                            da[[i, row, col]] = p[[i, row, col]] * (g3[[i, row, col]] - dot);
                        }
                    }
                }
                out.push((*a, da.into_dyn()));
            }
        }
        Op::SoftmaxCrossEntropy { logits, targets, mask, probs } => {
            if nodes[*logits].needs_grad {
                let gv = g[[]];
                let n_rows = targets.len();
                let valid: Vec<bool> = match mask {
                    Some(m) => m.clone(),
                    None => vec![true; n_rows],
                };
                let n_valid = valid.iter().filter(|&&v| v).count();
                let scale = gv / T::cast(n_valid as f64);
                let mut da = probs.clone();
                let vocab = da.shape()[1];
                {
                    let mut da2 = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for row in 0..n_rows {
                        if !valid[row] {
                            for col in 0..vocab {
                                da2[[row, col]] = T::zero();
                            }
                            continue;
                        }
                        da2[[row, targets[row]]] = da2[[row, targets[row]]] - T::one();
                        for col in 0..vocab {
                            da2[[row, col]] *= scale;
                        }
                    }
                }
                let da = da.into_shape_with_order(nodes[*logits].value.raw_dim()).unwrap();
                out.push((*logits, da));
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let gain_v = &nodes[*gain].value;
            let last = g.ndim() - 1;
            let c = T::cast(g.shape()[last] as f64);
            // dy ⊙ gain, reused by both the x and the gain paths
            let gy = g * &gain_v.broadcast(g.raw_dim()).unwrap();
            if nodes[*x].needs_grad {
                let mean_gy = gy.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
                let gyx = (&gy * xhat).mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
                let mut dx = &gy - &mean_gy.broadcast(g.raw_dim()).unwrap();
                dx = dx - xhat * &gyx.broadcast(g.raw_dim()).unwrap();
                let _ = c; // mean_axis already divides by the lane length
                dx *= &inv_std.broadcast(g.raw_dim()).unwrap();
                out.push((*x, dx));
            }
            if nodes[*gain].needs_grad {
                let dg = reduce_to_shape(&(g * xhat), nodes[*gain].value.shape());
                out.push((*gain, dg));
            }
            if nodes[*bias].needs_grad {
                out.push((*bias, reduce_to_shape(g, nodes[*bias].value.shape())));
            }
        }
        Op::PairwiseRowCorr { a, z, sigma } => {
            if nodes[*a].needs_grad {
                let (s, m) = z.dim();
                let sqrt_s = T::cast((s as f64).sqrt());
                // symmetric pair-gradient matrix, zero diagonal
                let mut gm = Array2::<T>::zeros((m, m));
                let mut p = 0usize;
                for i in 0..m {
                    for j in (i + 1)..m {
                        let gp = g[[p]];
                        gm[[i, j]] = gp;
                        gm[[j, i]] = gp;
                        p += 1;
                    }
                }
                let dz = z.dot(&gm); // [S, M]
                // dC through both the direct path and the per-column norm
                let a_col = (&dz * z).sum_axis(Axis(0)); // Σ_t dZ_tj Z_tj
                let mut da = Array2::<T>::zeros((s, m));
                for j in 0..m {
                    let sj = sigma[j];
                    for i in 0..s {
                        // C_ij = Z_ij * sqrt(S) * sigma_j
                        let c_ij = z[[i, j]] * sqrt_s * sj;
                        let direct = dz[[i, j]] / (sqrt_s * sj);
                        // A_j in C-units: Σ_t dZ_tj C_tj = a_col[j] * sqrt(S) * sigma_j
                        let a_c = a_col[j] * sqrt_s * sj;
                        let via_sigma = a_c * c_ij / (sqrt_s * sj * sj * sj * T::cast(s as f64));
                        da[[i, j]] = direct - via_sigma;
                    }
                }
                // mean-subtraction backward
                let col_means = da.mean_axis(Axis(0)).unwrap();
                for j in 0..m {
                    for i in 0..s {
                        da[[i, j]] = da[[i, j]] - col_means[j];
                    }
                }
                out.push((*a, da.into_dyn()));
            }
        }
    }
    out
}

impl<'t, T: Scalar> Tensor<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.ndim()
    }

    pub fn value(&self) -> ArrayD<T> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Read the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    fn with_values<R>(&self, other: &Self, f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.idx].value, &nodes[other.idx].value)
    }

    pub fn scalar_value(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value;
        assert_eq!(v.ndim(), 0, "scalar_value on non-scalar tensor");
        v[[]]
    }

    /// Gradient accumulated by the last backward pass, if any reached this node.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.tape.nodes.borrow()[self.idx].grad.clone()
    }

    fn same_tape(&self, other: &Self) {
        assert!(std::ptr::eq(self.tape, other.tape), "tensors live on different tapes");
    }

    fn needs2(&self, other: &Self) -> bool {
        self.tape.needs(self.idx) || self.tape.needs(other.idx)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let out = self.with_values(&rhs, |a, b| {
            assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
            assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
            assert_eq!(
                a.shape()[1],
                b.shape()[0],
                "matmul inner dimensions disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            as2(a).dot(&as2(b)).into_dyn()
        });
        self.tape.push(out, Op::Matmul { a: self.idx, b: rhs.idx }, self.needs2(&rhs))
    }

    /// `[n,m,k] x [n,k,p] -> [n,m,p]`, one matrix product per leading index.
    pub fn batch_matmul(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let out = self.with_values(&rhs, |a, b| {
            assert_eq!(a.ndim(), 3, "batch_matmul lhs must be 3-d");
            assert_eq!(b.ndim(), 3, "batch_matmul rhs must be 3-d");
            assert_eq!(a.shape()[0], b.shape()[0], "batch sizes disagree");
            assert_eq!(a.shape()[2], b.shape()[1], "batch_matmul inner dimensions disagree");
            let av = a.view().into_dimensionality::<Ix3>().unwrap();
            let bv = b.view().into_dimensionality::<Ix3>().unwrap();
            let (n, m, p) = (a.shape()[0], a.shape()[1], b.shape()[2]);
            let mut out = ndarray::Array3::<T>::zeros((n, m, p));
            for i in 0..n {
                out.index_axis_mut(Axis(0), i)
                    .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        });
        self.tape.push(out, Op::BatchMatmul { a: self.idx, b: rhs.idx }, self.needs2(&rhs))
    }

    fn binary(self, rhs: Self, f: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>, op: Op<T>) -> Self {
        self.same_tape(&rhs);
        let out = self.with_values(&rhs, |a, b| {
            let (a_shape, b_shape) = (a.shape(), b.shape());
            assert!(
                b_shape.len() <= a_shape.len()
                    && a_shape[a_shape.len() - b_shape.len()..] == b_shape[..],
                "right operand shape {:?} is not a suffix of left shape {:?}",
                b_shape,
                a_shape
            );
            f(a, b)
        });
        self.tape.push(out, op, self.needs2(&rhs))
    }

    pub fn add(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a + &b.broadcast(a.raw_dim()).unwrap(), Op::Add { a: self.idx, b: rhs.idx })
    }

    pub fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a - &b.broadcast(a.raw_dim()).unwrap(), Op::Sub { a: self.idx, b: rhs.idx })
    }

    pub fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a * &b.broadcast(a.raw_dim()).unwrap(), Op::Mul { a: self.idx, b: rhs.idx })
    }

    /// Elementwise division; a zero divisor propagates infinities.
    pub fn div(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a / &b.broadcast(a.raw_dim()).unwrap(), Op::Div { a: self.idx, b: rhs.idx })
    }

    pub fn neg(self) -> Self {
        let out = self.with_value(|a| a.mapv(|v| -v));
        self.tape.push(out, Op::Neg { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn scale(self, c: T) -> Self {
        let out = self.with_value(|a| a.mapv(|v| v * c));
        self.tape.push(out, Op::Scale { a: self.idx, c }, self.tape.needs(self.idx))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let out = self.with_value(|a| a.mapv(|v| v + c));
        self.tape.push(out, Op::AddScalar { a: self.idx }, self.tape.needs(self.idx))
    }

    /// GELU in the exact Gaussian-CDF form: `x * Phi(x)`.
    pub fn gelu(self) -> Self {
        let out = self.with_value(|a| a.mapv(gelu_value));
        self.tape.push(out, Op::Gelu { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn exp(self) -> Self {
        let out = self.with_value(|a| a.mapv(|v| v.exp()));
        self.tape.push(out, Op::Exp { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn ln(self) -> Self {
        let out = self.with_value(|v| {
            if self.tape.checked {
                assert!(
                    v.iter().all(|&x| x > T::zero()),
                    "ln of non-positive value on a checked tape"
                );
            }
            v.mapv(|x| x.ln())
        });
        self.tape.push(out, Op::Ln { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn sqrt(self) -> Self {
        let out = self.with_value(|a| a.mapv(|v| v.sqrt()));
        self.tape.push(out, Op::Sqrt { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn abs(self) -> Self {
        let out = self.with_value(|a| a.mapv(|v| v.abs()));
        self.tape.push(out, Op::Abs { a: self.idx }, self.tape.needs(self.idx))
    }

    /// Clamp values into `[-1, 1]` with identity gradient. Used to cancel the
    /// at-most-1-ulp overshoot of correlation ratios; anything larger than
    /// float rounding would indicate a bug upstream.
    pub fn clamp_unit(self) -> Self {
        let one = T::one();
        let out = self.with_value(|a| a.mapv(|v| v.min(one).max(-one)));
        self.tape.push(out, Op::ClampUnit { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn sum_all(self) -> Self {
        let out = self.with_value(|v| {
            assert!(!v.is_empty(), "sum over an empty tensor");
            ArrayD::from_elem(IxDyn(&[]), v.iter().fold(T::zero(), |acc, &x| acc + x))
        });
        self.tape.push(out, Op::SumAll { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn mean_all(self) -> Self {
        let n = self.with_value(|v| v.len());
        self.sum_all().scale(T::cast(1.0 / n as f64))
    }

    fn check_axis(&self, axis: usize) {
        let shape = self.shape();
        assert!(axis < shape.len(), "axis {} out of range for shape {:?}", axis, shape);
        assert!(shape[axis] > 0, "reduction over empty axis {}", axis);
    }

    pub fn sum_axis(self, axis: usize) -> Self {
        self.check_axis(axis);
        let out = self.with_value(|v| v.sum_axis(Axis(axis)));
        self.tape.push(out, Op::SumAxis { a: self.idx, axis }, self.tape.needs(self.idx))
    }

    pub fn mean_axis(self, axis: usize) -> Self {
        self.check_axis(axis);
        let out = self.with_value(|v| v.mean_axis(Axis(axis)).unwrap());
        self.tape.push(out, Op::MeanAxis { a: self.idx, axis }, self.tape.needs(self.idx))
    }

    /// Max along an axis; the gradient routes to the first position attaining
    /// the maximum (ties break toward the lowest index).
    pub fn max_axis(self, axis: usize) -> Self {
        self.check_axis(axis);
        let (out, argmax) = self.with_value(|v| {
            let mut argmax = Vec::new();
            let mut maxima = Vec::new();
            for lane in v.lanes(Axis(axis)) {
                let mut best = 0usize;
                for (i, &x) in lane.iter().enumerate() {
                    if x > lane[best] {
                        best = i;
                    }
                }
                argmax.push(best);
                maxima.push(lane[best]);
            }
            let mut out_shape = v.shape().to_vec();
            out_shape.remove(axis);
            (ArrayD::from_shape_vec(IxDyn(&out_shape), maxima).unwrap(), argmax)
        });
        self.tape.push(out, Op::MaxAxis { a: self.idx, axis, argmax }, self.tape.needs(self.idx))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = self.value();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape from {:?} to {:?} changes element count",
            v.shape(),
            shape
        );
        let out = v.into_shape_with_order(IxDyn(shape)).unwrap();
        self.tape.push(out, Op::Reshape { a: self.idx }, self.tape.needs(self.idx))
    }

    pub fn permute_axes(self, perm: &[usize]) -> Self {
        let out = self.with_value(|v| {
            assert_eq!(perm.len(), v.ndim(), "permutation length must equal rank");
            v.view().permuted_axes(IxDyn(perm)).as_standard_layout().to_owned()
        });
        self.tape.push(out, Op::PermuteAxes { a: self.idx, perm: perm.to_vec() }, self.tape.needs(self.idx))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let out = self.with_value(|v| {
            assert!(axis < v.ndim() && start + len <= v.shape()[axis], "narrow out of bounds");
            v.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned()
        });
        self.tape.push(out, Op::Narrow { a: self.idx, axis, start }, self.tape.needs(self.idx))
    }

    /// Gather slices along `axis`; duplicate indices are allowed and their
    /// gradients accumulate (this is the embedding-lookup primitive).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Self {
        let out = self.with_value(|v| {
            assert!(axis < v.ndim(), "index_select axis out of range");
            let bound = v.shape()[axis];
            assert!(indices.iter().all(|&i| i < bound), "index_select index out of range");
            v.select(Axis(axis), indices)
        });
        self.tape.push(
            out,
            Op::IndexSelect { a: self.idx, axis, indices: indices.to_vec() },
            self.tape.needs(self.idx),
        )
    }

    /// Row-wise causal softmax on `[n, t, t]` attention scores: row `r`
    /// normalizes over columns `0..=r`; later columns get probability zero.
    pub fn causal_softmax(self) -> Self {
        let out = self.with_value(|v| {
            assert_eq!(v.ndim(), 3, "causal_softmax expects [n, t, t]");
            assert_eq!(v.shape()[1], v.shape()[2], "causal_softmax expects square score matrices");
            let vv = v.view().into_dimensionality::<Ix3>().unwrap();
            let (n, t, _) = vv.dim();
            let mut out = ndarray::Array3::<T>::zeros((n, t, t));
            for i in 0..n {
                for row in 0..t {
                    let mut m = vv[[i, row, 0]];
                    for col in 1..=row {
                        m = m.max(vv[[i, row, col]]);
                    }
                    let mut denom = T::zero();
                    for col in 0..=row {
                        let e = (vv[[i, row, col]] - m).exp();
                        out[[i, row, col]] = e;
                        denom += e;
                    }
                    for col in 0..=row {
                        out[[i, row, col]] = out[[i, row, col]] / denom;
                    }
                }
            }
            out.into_dyn()
        });
        self.tape.push(out, Op::CausalSoftmax { a: self.idx }, self.tape.needs(self.idx))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    /// `self` is `[..., vocab]` flattened internally to `[rows, vocab]`;
    /// `targets` has one class index per row. Rows where `mask` is false are
    /// excluded from the mean.
    pub fn softmax_cross_entropy(self, targets: &[usize], mask: Option<&[bool]>) -> Self {
        let (out, probs) = self.with_value(|v| {
            let vocab = *v.shape().last().expect("cross entropy needs at least 1-d input");
            let rows = v.len() / vocab;
            assert_eq!(targets.len(), rows, "one target per row required");
            assert!(targets.iter().all(|&t| t < vocab), "target id out of range");
            if let Some(m) = mask {
                assert_eq!(m.len(), rows, "mask length must equal row count");
                assert!(m.iter().any(|&x| x), "all rows masked out");
            }
            let flat = v.view().into_shape_with_order((rows, vocab)).unwrap();
            let mut probs = Array2::<T>::zeros((rows, vocab));
            let mut loss = T::zero();
            let mut n_valid = 0usize;
            for r in 0..rows {
                let valid = mask.map_or(true, |m| m[r]);
                if !valid {
                    continue;
                }
                n_valid += 1;
                let row = flat.row(r);
                let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
                let mut denom = T::zero();
                for c in 0..vocab {
                    denom += (row[c] - m).exp();
                }
                let lse = m + denom.ln();
                loss += lse - row[targets[r]];
                for c in 0..vocab {
                    probs[[r, c]] = (row[c] - lse).exp();
                }
            }
            loss = loss / T::cast(n_valid as f64);
            (ArrayD::from_elem(IxDyn(&[]), loss), probs)
        });
        self.tape.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits: self.idx,
                targets: targets.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                probs: probs.into_dyn(),
            },
            self.tape.needs(self.idx),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Self, bias: Self, eps: T) -> Self {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            let gain_v = &nodes[gain.idx].value;
            let bias_v = &nodes[bias.idx].value;
            let last = v.ndim() - 1;
            let c = v.shape()[last];
            assert_eq!(gain_v.shape(), [c], "gain shape must be [last axis]");
            assert_eq!(bias_v.shape(), [c], "bias shape must be [last axis]");
            let mean = v.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
            let centered = v - &mean.broadcast(v.raw_dim()).unwrap();
            let var = centered.mapv(|x| x * x).mean_axis(Axis(last)).unwrap();
            let inv_std = var.mapv(|x| T::one() / (x + eps).sqrt()).insert_axis(Axis(last));
            let xhat = &centered * &inv_std.broadcast(v.raw_dim()).unwrap();
            let out = &xhat * &gain_v.broadcast(v.raw_dim()).unwrap()
                + &bias_v.broadcast(v.raw_dim()).unwrap();
            (out, xhat, inv_std)
        };
        let needs = self.tape.needs(self.idx) || self.tape.needs(gain.idx) || self.tape.needs(bias.idx);
        self.tape.push(
            out,
            Op::LayerNorm { x: self.idx, gain: gain.idx, bias: bias.idx, xhat, inv_std },
            needs,
        )
    }

    /// All pairwise Pearson correlations between the columns of a
    /// `[samples, m]` matrix, in lexicographic (i, j) column order, i < j.
    /// `eps` is added to each population variance before the square root, so
    /// constant columns yield correlation 0 instead of NaN.
    pub fn pairwise_row_corr(self, eps: T) -> Self {
        let (out, z, sigma) = self.with_value(|v| {
            assert_eq!(v.ndim(), 2, "pairwise_row_corr expects [samples, units]");
            let (s, m) = (v.shape()[0], v.shape()[1]);
            assert!(s >= 2, "need at least 2 samples for correlations");
            assert!(m >= 2, "need at least 2 columns for pairs");
            let v2 = as2(v);
            let sqrt_s = T::cast((s as f64).sqrt());
            let mut z = Array2::<T>::zeros((s, m));
            let mut sigma = Vec::with_capacity(m);
            for j in 0..m {
                let col = v2.column(j);
                let mean = col.iter().fold(T::zero(), |a, &x| a + x) / T::cast(s as f64);
                let var = col.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
                    / T::cast(s as f64);
                let sd = (var + eps).sqrt();
                sigma.push(sd);
                for i in 0..s {
                    z[[i, j]] = (col[i] - mean) / (sqrt_s * sd);
                }
            }
            let corr = z.t().dot(&z); // [m, m], corr[i][j] = r_ij
            let n_pairs = m * (m - 1) / 2;
            let mut r = Vec::with_capacity(n_pairs);
            for i in 0..m {
                for j in (i + 1)..m {
                    r.push(corr[[i, j]]);
                }
            }
            (ArrayD::from_shape_vec(IxDyn(&[n_pairs]), r).unwrap(), z, sigma)
        });
        self.tape.push(out, Op::PairwiseRowCorr { a: self.idx, z, sigma }, self.tape.needs(self.idx))
    }
}

impl<'t, T: Scalar> std::ops::Add for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Tensor::add(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Tensor::sub(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Tensor::mul(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Div for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Tensor::div(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Neg for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn neg(self) -> Self::Output {
        Tensor::neg(self)
    }
}

/// Pearson correlation of two equal-length vectors with population
/// normalization, composed from primitives so it stays differentiable in
/// both arguments. `eps` is added to each variance before the square root;
/// a zero-variance argument therefore yields correlation 0.
pub fn pearson<'t, T: Scalar>(x: Tensor<'t, T>, y: Tensor<'t, T>, eps: T) -> Tensor<'t, T> {
    assert_eq!(x.ndim(), 1, "pearson expects 1-d vectors");
    assert_eq!(x.shape(), y.shape(), "pearson arguments must have equal length");
    let n = x.shape()[0];
    assert!(n >= 2, "pearson needs at least 2 observations");
    let inv_n = T::cast(1.0 / n as f64);
    let mx = x.mean_all();
    let my = y.mean_all();
    let cx = x.sub(mx);
    let cy = y.sub(my);
    let cov = cx.mul(cy).sum_all().scale(inv_n);
    let sx = cx.mul(cx).sum_all().scale(inv_n).add_scalar(eps).sqrt();
    let sy = cy.mul(cy).sum_all().scale(inv_n).add_scalar(eps).sqrt();
    cov.div(sx.mul(sy))
}

/// Default variance guard for unit-activation correlations.
pub const CORR_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::<f64>::new();
        let i2 = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let x = tape.leaf(arr2(&[[3.0, 4.0], [5.0, 6.0]]).into_dyn());
        assert_eq!(i2.matmul(x).value(), x.value());

        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[1.0], [1.0]]).into_dyn());
        assert_eq!(a.matmul(b).value(), arr2(&[[3.0], [7.0]]).into_dyn());
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_panics() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let _ = a.matmul(b);
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(dyn1(&[0.0, 10.0, -10.0]));
        let y = x.gelu().value();
        assert_abs_diff_eq!(y[[0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[1]], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[[2]], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn reductions_match_hand_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(dyn1(&[1.0, 2.0, 3.0]));
        assert_abs_diff_eq!(x.mean_all().scalar_value(), 2.0);
        let ones = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 3]), 1.0));
        assert_eq!(ones.sum_axis(1).value(), dyn1(&[3.0, 3.0]));
    }

    #[test]
    fn max_axis_routes_gradient_to_first_argmax() {
        let tape = Tape::<f64>::new();
        let x = tape.var(dyn1(&[1.0, 5.0, 5.0, 2.0]));
        let y = x.max_axis(0);
        assert_abs_diff_eq!(y.scalar_value(), 5.0);
        tape.backward(y);
        assert_eq!(x.grad().unwrap(), dyn1(&[0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn softmax_ce_uniform_logits_is_log_vocab() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 4])));
        let loss = logits.softmax_cross_entropy(&[0, 1, 2, 3, 0, 1], None);
        assert_abs_diff_eq!(loss.scalar_value(), 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_ce_confident_correct_logits_vanishes() {
        let tape = Tape::<f64>::new();
        let mut v = ArrayD::zeros(IxDyn(&[1, 4]));
        v[[0, 2]] = 50.0;
        let logits = tape.leaf(v);
        let loss = logits.softmax_cross_entropy(&[2], None);
        assert!(loss.scalar_value() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "target id out of range")]
    fn softmax_ce_rejects_bad_target() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4])));
        let _ = logits.softmax_cross_entropy(&[4], None);
    }

    #[test]
    fn softmax_ce_mask_drops_rows() {
        let tape = Tape::<f64>::new();
        let mut v = ArrayD::zeros(IxDyn(&[2, 2]));
        v[[1, 0]] = 100.0; // would dominate if included
        let logits = tape.leaf(v);
        let masked = logits.softmax_cross_entropy(&[0, 1], Some(&[true, false]));
        assert_abs_diff_eq!(masked.scalar_value(), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pearson_affine_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(dyn1(&[1.0, 2.0, 3.0]));
        let up = tape.leaf(dyn1(&[2.0, 4.0, 6.0]));
        let down = tape.leaf(dyn1(&[3.0, 2.0, 1.0]));
        let flat = tape.leaf(dyn1(&[1.0, 1.0, 1.0]));
        let eps = CORR_EPS;
        assert_abs_diff_eq!(pearson(x, up, eps).scalar_value(), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(pearson(x, down, eps).scalar_value(), -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(pearson(x, flat, eps).scalar_value(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_flat_argument_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.var(dyn1(&[1.0, 2.0, 3.0]));
        let flat = tape.var(dyn1(&[1.0, 1.0, 1.0]));
        let r = pearson(x, flat, CORR_EPS);
        tape.backward(r);
        // cov is exactly 0, so the only gradient path through x is scaled by it
        for g in x.grad().unwrap().iter() {
            assert_abs_diff_eq!(*g, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn pairwise_row_corr_matches_pairwise_pearson() {
        let tape = Tape::<f64>::new();
        let data = arr2(&[
            [1.0, 2.0, 0.5],
            [2.0, 1.0, 0.25],
            [3.0, 5.0, -1.0],
            [4.0, 3.0, 2.0],
        ]);
        let x = tape.leaf(data.clone().into_dyn());
        let r = x.pairwise_row_corr(1e-8).value();
        assert_eq!(r.shape(), &[3]);
        let cols: Vec<Vec<f64>> = (0..3).map(|j| data.column(j).to_vec()).collect();
        let mut k = 0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let xi = tape.leaf(dyn1(&cols[i]));
                let xj = tape.leaf(dyn1(&cols[j]));
                let expect = pearson(xi, xj, 1e-8).scalar_value();
                assert_abs_diff_eq!(r[[k]], expect, epsilon = 1e-12);
                k += 1;
            }
        }
    }

    #[test]
    fn causal_softmax_rows_are_simplex_and_causal() {
        let tape = Tape::<f64>::new();
        let mut v = ArrayD::zeros(IxDyn(&[1, 3, 3]));
        v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.3 - 1.0);
        let p = tape.leaf(v).causal_softmax().value();
        for row in 0..3 {
            let mut sum = 0.0;
            for col in 0..3 {
                if col > row {
                    assert_eq!(p[[0, row, col]], 0.0);
                } else {
                    sum += p[[0, row, col]];
                }
            }
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "reduction over empty axis")]
    fn reduction_over_empty_axis_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[3, 0])));
        let _ = x.sum_axis(1);
    }

    #[test]
    fn pearson_stays_in_unit_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(40);
        let tape = Tape::<f64>::new();
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = pearson(tape.leaf(dyn1(&x)), tape.leaf(dyn1(&y)), CORR_EPS).scalar_value();
            assert!(r.abs() <= 1.0 + 1e-12, "correlation {r} escaped [-1, 1]");
        }
    }

    #[test]
    fn backward_twice_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.var(dyn1(&[1.0, 2.0]));
        let loss = x.sum_all();
        tape.backward(loss);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(loss);
        }));
        assert!(result.is_err());
    }

    #[test]
    #[should_panic(expected = "ln of non-positive")]
    fn checked_tape_rejects_nonpositive_ln() {
        let tape = Tape::<f64>::new_checked();
        let x = tape.leaf(dyn1(&[1.0, 0.0]));
        let _ = x.ln();
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.var(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = tape.var(dyn1(&[1.0, 2.0, 3.0]));
        let loss = x.add(b).sum_all();
        tape.backward(loss);
        assert_eq!(b.grad().unwrap(), dyn1(&[2.0, 2.0, 2.0]));
    }
}
