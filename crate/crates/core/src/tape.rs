//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every forward pass builds a fresh [`Tape`]; ops append nodes and return
//! [`Var`] handles. [`Tape::backward`] walks the node list in reverse and
//! returns one gradient per node. All model math in this crate is expressed
//! through these ops, so a single gradient implementation serves the whole
//! pipeline and can be validated once against finite differences.
//!
//! Shapes are plain `(rows, cols)`; scalars are 1x1. Shape violations are
//! programming errors and panic — public APIs validate dimensions before
//! touching the tape.

use crate::scalar::Scalar;
use ndarray::{s, Array2, Axis};
use std::cell::RefCell;
use std::ops::Range;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    RowSoftmax(Var, Option<Array2<bool>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScalarMul(Var, Var),
    LayerNormRows(Var, f64),
    GateSelect {
        soft: Var,
        on_true: Var,
        on_false: Var,
        pick_true: bool,
    },
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `v`; zero-shaped `None` means "no path".
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// softplus(x) = ln(1 + e^x), computed without overflow.
fn stable_softplus<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    let pos = if x > zero { x } else { zero };
    pos + (-(x.abs())).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Array2<T>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Array2<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Array2<T>, &Array2<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with(v, |a| (a.nrows(), a.ncols()))
    }

    /// Clone a node's value out of the tape.
    pub fn value(&self, v: Var) -> Array2<T> {
        self.with(v, |a| a.clone())
    }

    /// Insert a constant / input / parameter leaf.
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 1x1 scalar leaf.
    pub fn scalar(&self, value: T) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add: shape mismatch");
            x + y
        });
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "sub: shape mismatch");
            x - y
        });
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul: shape mismatch");
            x * y
        });
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "div: shape mismatch");
            x / y
        });
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let kk = T::of(k);
        let v = self.with(a, |x| x.mapv(|e| e * kk));
        self.push(v, Op::Scale(a, k))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul: inner dim mismatch");
            x.dot(y)
        });
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.t().to_owned());
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(stable_sigmoid));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.tanh()));
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| if e > T::zero() { e } else { T::zero() }));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(stable_softplus));
        self.push(v, Op::Softplus(a))
    }

    /// Row-wise softmax. Masked-out entries (mask = false) get probability
    /// exactly zero; each row must keep at least one unmasked entry.
    pub fn row_softmax(&self, a: Var, mask: Option<Array2<bool>>) -> Var {
        let v = self.with(a, |x| {
            if let Some(m) = &mask {
                assert_eq!(m.dim(), x.dim(), "softmax: mask shape mismatch");
            }
            let mut out = Array2::<T>::zeros(x.dim());
            for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                let keep = |j: usize| mask.as_ref().map_or(true, |m| m[(i, j)]);
                let mut max = T::neg_infinity();
                for (j, &e) in row.iter().enumerate() {
                    if keep(j) && e > max {
                        max = e;
                    }
                }
                assert!(
                    max > T::neg_infinity(),
                    "softmax: row {i} fully masked"
                );
                let mut denom = T::zero();
                for (j, &e) in row.iter().enumerate() {
                    if keep(j) {
                        let w = (e - max).exp();
                        out[(i, j)] = w;
                        denom = denom + w;
                    }
                }
                for j in 0..row.len() {
                    out[(i, j)] = out[(i, j)] / denom;
                }
            }
            out
        });
        self.push(v, Op::RowSoftmax(a, mask))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.nrows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
            let mut out = Array2::<T>::zeros((rows, total));
            let mut at = 0;
            for p in parts {
                let val = &nodes[p.0].value;
                assert_eq!(val.nrows(), rows, "concat_cols: row mismatch");
                out.slice_mut(s![.., at..at + val.ncols()]).assign(val);
                at += val.ncols();
            }
            out
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.ncols();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.nrows()).sum();
            let mut out = Array2::<T>::zeros((total, cols));
            let mut at = 0;
            for p in parts {
                let val = &nodes[p.0].value;
                assert_eq!(val.ncols(), cols, "concat_rows: col mismatch");
                out.slice_mut(s![at..at + val.nrows(), ..]).assign(val);
                at += val.nrows();
            }
            out
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, range: Range<usize>) -> Var {
        let start = range.start;
        let v = self.with(a, |x| {
            assert!(range.end <= x.ncols(), "slice_cols: out of range");
            x.slice(s![.., range.clone()]).to_owned()
        });
        self.push(v, Op::SliceCols(a, start))
    }

    /// Single row as a 1xN matrix.
    pub fn row(&self, a: Var, i: usize) -> Var {
        self.gather_rows(a, vec![i])
    }

    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.with(a, |x| {
            let mut out = Array2::<T>::zeros((idx.len(), x.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(k).assign(&x.row(i));
            }
            out
        });
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(v, Op::SumAll(a))
    }

    /// Mean over rows: (m, n) -> (1, n).
    pub fn mean_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let m = T::of(x.nrows() as f64);
            let mut out = Array2::<T>::zeros((1, x.ncols()));
            for row in x.axis_iter(Axis(0)) {
                for (j, &e) in row.iter().enumerate() {
                    out[(0, j)] = out[(0, j)] + e;
                }
            }
            out.mapv_inplace(|e| e / m);
            out
        });
        self.push(v, Op::MeanRows(a))
    }

    /// Broadcast row add: (m, n) + (1, n).
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = self.with2(a, row, |x, r| {
            assert_eq!(r.nrows(), 1, "add_row: rhs must be a row vector");
            assert_eq!(r.ncols(), x.ncols(), "add_row: width mismatch");
            x + &r.row(0)
        });
        self.push(v, Op::AddRow(a, row))
    }

    /// Broadcast row multiply: (m, n) * (1, n).
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let v = self.with2(a, row, |x, r| {
            assert_eq!(r.nrows(), 1, "mul_row: rhs must be a row vector");
            assert_eq!(r.ncols(), x.ncols(), "mul_row: width mismatch");
            x * &r.row(0)
        });
        self.push(v, Op::MulRow(a, row))
    }

    /// Multiply a matrix by a 1x1 scalar variable.
    pub fn scalar_mul(&self, scalar: Var, a: Var) -> Var {
        let v = self.with2(scalar, a, |sv, x| {
            assert_eq!(sv.dim(), (1, 1), "scalar_mul: lhs must be 1x1");
            let k = sv[(0, 0)];
            x.mapv(|e| e * k)
        });
        self.push(v, Op::ScalarMul(scalar, a))
    }

    /// Per-row layer normalization (no affine part; compose with
    /// [`Tape::mul_row`] / [`Tape::add_row`] for gain and bias).
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let e = T::of(eps);
        let v = self.with(a, |x| {
            let n = T::of(x.ncols() as f64);
            let mut out = Array2::<T>::zeros(x.dim());
            for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                let mean = row.sum() / n;
                let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
                let std = (var + e).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    out[(i, j)] = (v - mean) / std;
                }
            }
            out
        });
        self.push(v, Op::LayerNormRows(a, eps))
    }

    /// Straight-through hard selection between two same-shaped branches.
    ///
    /// Forward copies one branch bit-exactly. Backward routes the output
    /// gradient to the chosen branch and feeds `soft` (a 1x1 relaxation of
    /// the selector) the gradient it would get if the output were
    /// `soft * on_true + (1 - soft) * on_false`.
    pub fn gate_select(&self, soft: Var, on_true: Var, on_false: Var, pick_true: bool) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[soft.0].value.dim(), (1, 1), "gate_select: soft must be 1x1");
            assert_eq!(
                nodes[on_true.0].value.dim(),
                nodes[on_false.0].value.dim(),
                "gate_select: branch shape mismatch"
            );
            if pick_true {
                nodes[on_true.0].value.clone()
            } else {
                nodes[on_false.0].value.clone()
            }
        };
        self.push(
            v,
            Op::GateSelect {
                soft,
                on_true,
                on_false,
                pick_true,
            },
        )
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            // Leaves keep their accumulated gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let mut acc = |v: Var, delta: Array2<T>| {
                match &mut grads[v.0] {
                    Some(g) => *g = &*g + &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, go.clone());
                    acc(*b, go.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, go.clone());
                    acc(*b, go.mapv(|e| -e));
                }
                Op::Mul(a, b) => {
                    acc(*a, &go * &nodes[b.0].value);
                    acc(*b, &go * &nodes[a.0].value);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[b.0].value;
                    acc(*a, &go / bv);
                    let av = &nodes[a.0].value;
                    acc(*b, go.mapv(|e| -e) * av / (bv * bv));
                }
                Op::Scale(a, k) => {
                    let kk = T::of(*k);
                    acc(*a, go.mapv(|e| e * kk));
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(*a, go.dot(&bv.t()));
                    acc(*b, av.t().dot(&go));
                }
                Op::Transpose(a) => acc(*a, go.t().to_owned()),
                Op::Sigmoid(a) => {
                    let sv = &node.value;
                    acc(*a, &go * &sv.mapv(|sg| sg * (T::one() - sg)));
                }
                Op::Tanh(a) => {
                    let tv = &node.value;
                    acc(*a, &go * &tv.mapv(|t| T::one() - t * t));
                }
                Op::Relu(a) => {
                    let xv = &nodes[a.0].value;
                    acc(
                        *a,
                        &go * &xv.mapv(|x| if x > T::zero() { T::one() } else { T::zero() }),
                    );
                }
                Op::Softplus(a) => {
                    let xv = &nodes[a.0].value;
                    acc(*a, &go * &xv.mapv(stable_sigmoid));
                }
                Op::RowSoftmax(a, _mask) => {
                    let y = &node.value;
                    let mut g = Array2::<T>::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let mut dot = T::zero();
                        for j in 0..y.ncols() {
                            dot = dot + go[(i, j)] * y[(i, j)];
                        }
                        for j in 0..y.ncols() {
                            g[(i, j)] = y[(i, j)] * (go[(i, j)] - dot);
                        }
                    }
                    acc(*a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        acc(*p, go.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = nodes[p.0].value.nrows();
                        acc(*p, go.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = &nodes[a.0].value;
                    let mut g = Array2::<T>::zeros(av.dim());
                    g.slice_mut(s![.., *start..*start + go.ncols()]).assign(&go);
                    acc(*a, g);
                }
                Op::GatherRows(a, idx) => {
                    let av = &nodes[a.0].value;
                    let mut g = Array2::<T>::zeros(av.dim());
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..go.ncols() {
                            g[(i, j)] = g[(i, j)] + go[(k, j)];
                        }
                    }
                    acc(*a, g);
                }
                Op::SumAll(a) => {
                    let av = &nodes[a.0].value;
                    acc(*a, Array2::from_elem(av.dim(), go[(0, 0)]));
                }
                Op::MeanRows(a) => {
                    let av = &nodes[a.0].value;
                    let m = T::of(av.nrows() as f64);
                    let mut g = Array2::<T>::zeros(av.dim());
                    for i in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            g[(i, j)] = go[(0, j)] / m;
                        }
                    }
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    acc(*a, go.clone());
                    let mut g = Array2::<T>::zeros((1, go.ncols()));
                    for i in 0..go.nrows() {
                        for j in 0..go.ncols() {
                            g[(0, j)] = g[(0, j)] + go[(i, j)];
                        }
                    }
                    acc(*row, g);
                }
                Op::MulRow(a, row) => {
                    let av = &nodes[a.0].value;
                    let rv = &nodes[row.0].value;
                    acc(*a, &go * &rv.row(0));
                    let mut g = Array2::<T>::zeros((1, go.ncols()));
                    for i in 0..go.nrows() {
                        for j in 0..go.ncols() {
                            g[(0, j)] = g[(0, j)] + go[(i, j)] * av[(i, j)];
                        }
                    }
                    acc(*row, g);
                }
                Op::ScalarMul(scalar, a) => {
                    let av = &nodes[a.0].value;
                    let sv = nodes[scalar.0].value[(0, 0)];
                    let mut dot = T::zero();
                    for (g, x) in go.iter().zip(av.iter()) {
                        dot = dot + *g * *x;
                    }
                    acc(*scalar, Array2::from_elem((1, 1), dot));
                    acc(*a, go.mapv(|e| e * sv));
                }
                Op::LayerNormRows(a, eps) => {
                    let xv = &nodes[a.0].value;
                    let y = &node.value;
                    let n = T::of(xv.ncols() as f64);
                    let e = T::of(*eps);
                    let mut g = Array2::<T>::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mean = row.sum() / n;
                        let var =
                            row.fold(T::zero(), |acc2, &v| acc2 + (v - mean) * (v - mean)) / n;
                        let std = (var + e).sqrt();
                        let mut go_mean = T::zero();
                        let mut goy_mean = T::zero();
                        for j in 0..xv.ncols() {
                            go_mean = go_mean + go[(i, j)];
                            goy_mean = goy_mean + go[(i, j)] * y[(i, j)];
                        }
                        go_mean = go_mean / n;
                        goy_mean = goy_mean / n;
                        for j in 0..xv.ncols() {
                            g[(i, j)] = (go[(i, j)] - go_mean - y[(i, j)] * goy_mean) / std;
                        }
                    }
                    acc(*a, g);
                }
                Op::GateSelect {
                    soft,
                    on_true,
                    on_false,
                    pick_true,
                } => {
                    let ev = &nodes[on_true.0].value;
                    let gv = &nodes[on_false.0].value;
                    let mut dot = T::zero();
                    for ((g, e), f) in go.iter().zip(ev.iter()).zip(gv.iter()) {
                        dot = dot + *g * (*e - *f);
                    }
                    acc(*soft, Array2::from_elem((1, 1), dot));
                    if *pick_true {
                        acc(*on_true, go);
                    } else {
                        acc(*on_false, go);
                    }
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(loss)/d(input k) where the expression is
    /// rebuilt from scratch for each perturbation. The output is weighted by
    /// a fixed pattern before summing so that ops with constant sums (e.g.
    /// softmax) still get a non-degenerate loss.
    fn check_op(
        inputs: &[Array2<f64>],
        build: impl Fn(&Tape<f64>, &[Var]) -> Var,
    ) {
        let weighted_loss = |t: &Tape<f64>, out: Var| {
            let (r, c) = t.shape(out);
            let w = t.leaf(Array2::from_shape_fn((r, c), |(i, j)| {
                0.4 + ((3 * i + 5 * j) as f64 * 0.9).sin()
            }));
            t.sum_all(t.mul(out, w))
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&tape, &vars);
        let loss = weighted_loss(&tape, out);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            let cols = input.ncols();
            for idx in 0..input.len() {
                let coord = (idx / cols, idx % cols);
                let eval = |delta: f64| {
                    let mut shifted = inputs.to_vec();
                    shifted[k][coord] += delta;
                    let t = Tape::new();
                    let vs: Vec<Var> = shifted.iter().map(|m| t.leaf(m.clone())).collect();
                    let o = build(&t, &vs);
                    t.value(weighted_loss(&t, o))[(0, 0)]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[coord];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} coord {coord:?}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 2, 3).mapv(|v| v + 2.5); // keep divisor away from 0
        check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]));
        check_op(&[a.clone()], |t, v| t.scale(v[0], -1.7));
        check_op(&[a.clone()], |t, v| t.sigmoid(v[0]));
        check_op(&[a.clone()], |t, v| t.tanh(v[0]));
        check_op(&[a.clone()], |t, v| t.softplus(v[0]));
        // Keep ReLU inputs away from the kink.
        let c = a.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_op(&[c], |t, v| t.relu(v[0]));
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 2, 4);
        let b = rand_mat(&mut rng, 4, 3);
        check_op(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        check_op(&[a.clone()], |t, v| t.transpose(v[0]));
        check_op(&[a.clone()], |t, v| t.row_softmax(v[0], None));
        let mask = array![
            [true, false, true, true],
            [false, true, true, false]
        ];
        check_op(&[a.clone()], move |t, v| t.row_softmax(v[0], Some(mask.clone())));
        check_op(&[a.clone()], |t, v| t.layer_norm_rows(v[0], 1e-5));
        check_op(&[a.clone()], |t, v| t.mean_rows(v[0]));
        check_op(&[a.clone()], |t, v| t.gather_rows(v[0], vec![1, 0, 1]));
        check_op(&[a.clone()], |t, v| t.slice_cols(v[0], 1..3));
        let row = rand_mat(&mut rng, 1, 4);
        check_op(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        check_op(&[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
        let s = rand_mat(&mut rng, 1, 1);
        check_op(&[s, a.clone()], |t, v| t.scalar_mul(v[0], v[1]));
        let b2 = rand_mat(&mut rng, 2, 4);
        check_op(&[a.clone(), b2.clone()], |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(&[a, b2], |t, v| t.concat_rows(&[v[0], v[1]]));
    }

    #[test]
    fn gate_select_is_bit_exact_and_straight_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = rand_mat(&mut rng, 1, 5);
        let g = rand_mat(&mut rng, 1, 5);
        let tape = Tape::new();
        let soft = tape.scalar(0.73);
        let ev = tape.leaf(e.clone());
        let gv = tape.leaf(g.clone());
        let picked = tape.gate_select(soft, ev, gv, true);
        assert_eq!(tape.value(picked), e);

        let loss = tape.sum_all(picked);
        let grads = tape.backward(loss);
        // d loss / d soft = sum(e - g) under the relaxed surrogate.
        let expect: f64 = e.iter().zip(g.iter()).map(|(a, b)| a - b).sum();
        assert!((grads.get(soft).unwrap()[(0, 0)] - expect).abs() < 1e-12);
        assert!(grads
            .get(ev)
            .unwrap()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(grads.get(gv).is_none());
    }

    #[test]
    fn chained_expression_grad() {
        // A small composite expression touching several ops at once.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 4);
        let b = rand_mat(&mut rng, 1, 4);
        check_op(&[x, w, b], |t, v| {
            let h = t.add_row(t.matmul(v[0], v[1]), v[2]);
            let a = t.tanh(h);
            let sm = t.row_softmax(a, None);
            t.mean_rows(t.mul(sm, a))
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]);
        let mask = array![[true, true, false], [true, true, true]];
        let y = tape.value(tape.row_softmax(x, Some(mask)));
        assert!((y.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((y.row(1).sum() - 1.0).abs() < 1e-12);
        assert_eq!(y[(0, 2)], 0.0);
    }
}
