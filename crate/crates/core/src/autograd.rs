//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. When
//! recording is disabled the node keeps only its value, so the same model code
//! serves both training and inference. [`Tape::backward`] walks the nodes in
//! reverse and returns gradients for every parameter leaf.

use crate::scalar::{sigmoid, step_fraction, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where an embedding row is written by [`Tape::embed_into`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedSlot {
    pub row: usize,
    pub col: usize,
    pub table_row: usize,
}

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Log { x: Var, floor: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    CumsumRows(Var),
    CumsumCols(Var),
    RowNorms(Var),
    Sum(Var),
    StepConstraint { raw: Var, max_step: T, eps: T },
    EmbedInto { base: Var, table: Var, slots: Vec<EmbedSlot>, width: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for the parameter leaves of one backward pass, keyed by the
/// parameter index passed to [`Tape::param`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, idx: usize) -> Option<&Tensor<T>> {
        self.grads.get(idx).and_then(Option::as_ref)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape: gradients can be taken.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only tape.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = self.record && needs_grad;
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Parameter leaf; `idx` identifies it in the returned [`ParamGrads`].
    pub fn param(&mut self, idx: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(idx), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulBt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x = *x + y;
            }
        }
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRow(a, b), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let g = self.needs(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let g = self.needs(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::abs);
        let g = self.needs(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.needs(a);
        self.push(v, Op::Square(a), g)
    }

    /// `ln(max(x, floor))`
    pub fn log(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        let g = self.needs(a);
        self.push(v, Op::Log { x: a, floor }, g)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let limit = if causal { (r + 1).min(x.cols()) } else { x.cols() };
            let row = &x.row(r)[..limit];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = v.row_mut(r);
            let mut total = T::zero();
            for (o, &xv) in out.iter_mut().zip(row) {
                *o = (xv - max).exp();
                total = total + *o;
            }
            for o in out[..limit].iter_mut() {
                *o = *o / total;
            }
        }
        let g = self.needs(a);
        self.push(v, Op::Softmax { x: a }, g)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × c` each).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let n = T::from_usize_lossy(cols);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut v = xhat.clone();
        for r in 0..rows {
            for ((o, &gk), &bk) in v.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * gk + bk;
            }
        }
        let g = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            v,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Mean over rows, giving a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize_lossy(x.rows());
        let mut v = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &xv) in v.data_mut().iter_mut().zip(x.row(r)) {
                *o = *o + xv;
            }
        }
        let v = v.map(|s| s / n);
        let g = self.needs(a);
        self.push(v, Op::MeanRows(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let g = self.needs(a);
        self.push(v, Op::SliceCols { x: a, start }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let v = Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        let g = self.needs(a);
        self.push(v, Op::SliceRows { x: a, start }, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    /// Running sum down each column.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let c = v.cols();
        for r in 1..v.rows() {
            for k in 0..c {
                let prev = v.get(r - 1, k);
                let cur = v.get(r, k);
                v.set(r, k, prev + cur);
            }
        }
        let g = self.needs(a);
        self.push(v, Op::CumsumRows(a), g)
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for k in 1..row.len() {
                row[k] = row[k] + row[k - 1];
            }
        }
        let g = self.needs(a);
        self.push(v, Op::CumsumCols(a), g)
    }

    /// Euclidean norm of each row, giving an `r × 1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows())
            .map(|r| x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let v = Tensor::from_vec(x.rows(), 1, data);
        let g = self.needs(a);
        self.push(v, Op::RowNorms(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Maps each raw displacement row `d` to `sigmoid(|d|) · max_step · d / |d|`,
    /// or to zero when `|d| < eps`.
    pub fn step_constraint(&mut self, raw: Var, max_step: T, eps: T) -> Var {
        let x = self.value(raw);
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let norm = x.row(r).iter().map(|&d| d * d).sum::<T>().sqrt();
            if norm < eps {
                continue;
            }
            let scale = step_fraction(norm) * max_step / norm;
            for (o, &d) in v.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = d * scale;
            }
        }
        let g = self.needs(raw);
        self.push(v, Op::StepConstraint { raw, max_step, eps }, g)
    }

    /// Copies `base` and writes `width`-wide rows of `table` at each slot.
    pub fn embed_into(&mut self, base: Var, table: Var, slots: &[EmbedSlot]) -> Var {
        let width = self.value(table).cols();
        let mut v = self.value(base).clone();
        {
            let t = self.value(table);
            for s in slots {
                v.row_mut(s.row)[s.col..s.col + width].copy_from_slice(t.row(s.table_row));
            }
        }
        let g = self.needs(base) || self.needs(table);
        self.push(
            v,
            Op::EmbedInto {
                base,
                table,
                slots: slots.to_vec(),
                width,
            },
            g,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var, num_params: usize) -> ParamGrads<T> {
        assert!(self.record, "backward on a non-recording tape");
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = ParamGrads {
            grads: vec![None; num_params],
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => accumulate(&mut out.grads[*p], gy),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = gy.matmul_bt(self.value(*b));
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_at(&gy);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.needs(*a) {
                        let ga = gy.matmul(self.value(*b));
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = gy.matmul_at(self.value(*a));
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], gy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], gy.map(|x| -x));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = gy.zip_map(self.value(*b), |g, y| g * y);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = gy.zip_map(self.value(*a), |g, x| g * x);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(*b) {
                        let mut gb = Tensor::zeros(1, gy.cols());
                        for r in 0..gy.rows() {
                            for (o, &g) in gb.data_mut().iter_mut().zip(gy.row(r)) {
                                *o = *o + g;
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], gy.map(|g| g * s));
                }
                Op::Relu(a) => {
                    let ga = gy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let ga = gy.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = gy.zip_map(&node.value, |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Abs(a) => {
                    let ga = gy.zip_map(self.value(*a), |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let ga = gy.zip_map(self.value(*a), |g, x| two * g * x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log { x, floor } => {
                    let floor = *floor;
                    let ga = gy.zip_map(self.value(*x), |g, xv| if xv > floor { g / xv } else { T::zero() });
                    accumulate(&mut grads[x.0], ga);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.shape();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut gg = Tensor::zeros(1, cols);
                        let mut gb = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for k in 0..cols {
                                let g = gy.get(r, k);
                                gg.data_mut()[k] = gg.data()[k] + g * xhat.get(r, k);
                                gb.data_mut()[k] = gb.data()[k] + g;
                            }
                        }
                        if self.needs(*gain) {
                            accumulate(&mut grads[gain.0], gg);
                        }
                        if self.needs(*bias) {
                            accumulate(&mut grads[bias.0], gb);
                        }
                    }
                    if self.needs(*x) {
                        let n = T::from_usize_lossy(cols);
                        let mut gx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let dxhat: Vec<T> =
                                (0..cols).map(|k| gy.get(r, k) * gv.data()[k]).collect();
                            let s1: T = dxhat.iter().copied().sum();
                            let s2: T = dxhat.iter().zip(xhat.row(r)).map(|(&d, &h)| d * h).sum();
                            let inv = inv_std[r];
                            for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv / n * (n * dxhat[k] - s1 - xhat.get(r, k) * s2);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let inv = T::one() / T::from_usize_lossy(rows);
                    let mut ga = Tensor::zeros(rows, gy.cols());
                    for r in 0..rows {
                        for (o, &g) in ga.row_mut(r).iter_mut().zip(gy.data()) {
                            *o = g * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..gy.rows() {
                        gx.row_mut(r)[*start..*start + gy.cols()].copy_from_slice(gy.row(r));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        if self.needs(*p) {
                            let mut gp = Tensor::zeros(gy.rows(), c);
                            for r in 0..gy.rows() {
                                gp.row_mut(r).copy_from_slice(&gy.row(r)[offset..offset + c]);
                            }
                            accumulate(&mut grads[p.0], gp);
                        }
                        offset += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    gx.data_mut()[start * c..(start + gy.rows()) * c].copy_from_slice(gy.data());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let c = gy.cols();
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.needs(*p) {
                            let gp = Tensor::from_vec(r, c, gy.data()[offset * c..(offset + r) * c].to_vec());
                            accumulate(&mut grads[p.0], gp);
                        }
                        offset += r;
                    }
                }
                Op::CumsumRows(a) => {
                    let mut ga = gy;
                    let c = ga.cols();
                    for r in (0..ga.rows().saturating_sub(1)).rev() {
                        for k in 0..c {
                            let next = ga.get(r + 1, k);
                            let cur = ga.get(r, k);
                            ga.set(r, k, cur + next);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::CumsumCols(a) => {
                    let mut ga = gy;
                    for r in 0..ga.rows() {
                        let row = ga.row_mut(r);
                        for k in (0..row.len().saturating_sub(1)).rev() {
                            row[k] = row[k] + row[k + 1];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RowNorms(a) => {
                    let xv = self.value(*a);
                    let mut ga = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let n = node.value.get(r, 0);
                        if n > T::zero() {
                            let g = gy.get(r, 0) / n;
                            for (o, &x) in ga.row_mut(r).iter_mut().zip(xv.row(r)) {
                                *o = g * x;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let xv = self.value(*a);
                    let g = gy.data()[0];
                    accumulate(&mut grads[a.0], Tensor::filled(xv.rows(), xv.cols(), g));
                }
                Op::StepConstraint { raw, max_step, eps } => {
                    let xv = self.value(*raw);
                    let mut ga = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let d = xv.row(r);
                        let norm = d.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm < *eps {
                            continue;
                        }
                        let s = step_fraction(norm);
                        let ds = s * (T::one() - s);
                        let g = gy.row(r);
                        // J = M [ σ'(n) u uᵀ + σ(n)/n (I − u uᵀ) ],  u = d / n
                        let u_dot_g: T = d.iter().zip(g).map(|(&dv, &gv)| dv * gv).sum::<T>() / norm;
                        for ((o, &dv), &gv) in ga.row_mut(r).iter_mut().zip(d).zip(g) {
                            let u = dv / norm;
                            *o = *max_step * (ds * u * u_dot_g + s / norm * (gv - u * u_dot_g));
                        }
                    }
                    accumulate(&mut grads[raw.0], ga);
                }
                Op::EmbedInto {
                    base,
                    table,
                    slots,
                    width,
                } => {
                    if self.needs(*table) {
                        let tv = self.value(*table);
                        let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                        for s in slots {
                            let src = &gy.row(s.row)[s.col..s.col + width];
                            for (o, &g) in gt.row_mut(s.table_row).iter_mut().zip(src) {
                                *o = *o + g;
                            }
                        }
                        accumulate(&mut grads[table.0], gt);
                    }
                    if self.needs(*base) {
                        let mut gb = gy;
                        for s in slots {
                            for o in gb.row_mut(s.row)[s.col..s.col + width].iter_mut() {
                                *o = T::zero();
                            }
                        }
                        accumulate(&mut grads[base.0], gb);
                    }
                }
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
