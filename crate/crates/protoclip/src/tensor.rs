//! Dense row-major float64 matrices and a Wengert-tape reverse-mode
//! autodiff engine.
//!
//! The tape is the only gradient mechanism in the crate: forward operations
//! are evaluated eagerly and recorded as nodes; [`Tape::backward`] replays
//! the recorded operations in strict reverse order, accumulating
//! vector-Jacobian products into per-node accumulators that start at exact
//! zero. A tape is single-owner and single-threaded by construction (it is
//! `!Sync` by usage; nothing in the crate shares one across threads).
//!
//! All loops run in a fixed deterministic order, so identical inputs produce
//! bitwise-identical outputs and gradients on every run.

use crate::error::{Error, Result};

/// Guard for norm-based divisions: rows with L2 norm at or below this cannot
/// be normalized.
pub const EPS_NORM: f64 = 1e-12;

// ── Matrix ──────────────────────────────────────────────────────────────────

/// Dense row-major matrix of `f64`. Immutable after construction; operations
/// return new matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Panics if `data.len() != rows * cols`;
    /// that is a programming error, not a runtime condition.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Single row vector (1 x d).
    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Matrix::new(1, cols, data)
    }

    /// Stacks equally-long rows into a matrix. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows: expected width {}", c);
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of the matrix with one flat entry shifted by `delta`
    /// (finite-difference probes).
    pub fn with_perturbed(&self, flat_index: usize, delta: f64) -> Matrix {
        let mut data = self.data.clone();
        data[flat_index] += delta;
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the given context if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }

    /// Matrix product. Inner dimensions must agree.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Matrix::new(n, m, out))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::new(self.cols, self.rows, out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid_scalar)
    }

    /// L2 norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Normalizes every row to unit L2 norm. Errors (naming the row) if any
    /// row norm is at or below [`EPS_NORM`].
    pub fn l2_normalize_rows(&self) -> Result<Matrix> {
        let mut data = self.data.clone();
        for i in 0..self.rows {
            let norm = self.row_norm(i);
            if norm <= EPS_NORM {
                return Err(Error::NearZeroNorm { row: i, norm, eps: EPS_NORM });
            }
            for v in &mut data[i * self.cols..(i + 1) * self.cols] {
                *v /= norm;
            }
        }
        Ok(Matrix::new(self.rows, self.cols, data))
    }

    /// Dot product of row `i` of `self` with row `j` of `other`.
    pub fn row_dot(&self, i: usize, other: &Matrix, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(other.row(j).iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Largest absolute elementwise difference; matrices must share a shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    // Split on the sign to avoid exp overflow for large negative inputs.
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Activation kinds supported by [`Tape::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Geometry of a 3x3, stride-1, zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
}

impl ConvGeom {
    pub fn input_cols(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_cols(&self) -> usize {
        self.out_channels * self.height * self.width
    }
}

enum Op {
    Input,
    Matmul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    /// `x` is N x d, `row` is 1 x d, added to every row of `x`.
    AddRow { x: ValueId, row: ValueId },
    /// `x` is N x d, `row` is 1 x d, multiplied into every row of `x`.
    MulRow { x: ValueId, row: ValueId },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    L2NormalizeRows { x: ValueId },
    /// Row-wise log-sum-exp with max-subtraction; N x d -> N x 1.
    LogSumExpRows { x: ValueId },
    /// Main diagonal of a square matrix; N x N -> N x 1.
    Diag { x: ValueId },
    MeanAll { x: ValueId },
    SumAll { x: ValueId },
    Conv3x3 { x: ValueId, kernel: ValueId, bias: ValueId, geom: ConvGeom },
    /// 2x2 max-pool with stride 2; ties resolve to the first element in scan
    /// order. `argmax` holds, per (row, output element), the flat input index
    /// of the winning entry.
    MaxPool2 { x: ValueId, channels: usize, height: usize, width: usize, argmax: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one [`Tape::backward`] pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> &Matrix {
        &self.grads[id.0]
    }
}

/// Wengert tape: eager forward evaluation with recorded operations, replayed
/// in strict reverse order by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (inputs included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers a leaf value. Inputs must be finite.
    pub fn input(&mut self, m: Matrix) -> Result<ValueId> {
        m.check_finite("tape input")?;
        Ok(self.push(m, Op::Input))
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar payload of a 1 x 1 node.
    pub fn scalar(&self, id: ValueId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.data[0]
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose { x })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product of same-shape operands.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale { x, c })
    }

    /// Adds a 1 x d row vector to every row of an N x d matrix (bias
    /// broadcast — the only broadcasting the engine performs).
    pub fn add_row(&mut self, x: ValueId, row: ValueId) -> Result<ValueId> {
        let (xm, rm) = (self.value(x), self.value(row));
        check_row_broadcast(xm, rm, "add_row")?;
        let cols = xm.cols();
        let value = Matrix::from_fn(xm.rows(), cols, |i, j| xm.get(i, j) + rm.get(0, j));
        Ok(self.push(value, Op::AddRow { x, row }))
    }

    /// Multiplies every row of an N x d matrix by a 1 x d row vector
    /// (attention-gate broadcast).
    pub fn mul_row(&mut self, x: ValueId, row: ValueId) -> Result<ValueId> {
        let (xm, rm) = (self.value(x), self.value(row));
        check_row_broadcast(xm, rm, "mul_row")?;
        let value = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| xm.get(i, j) * rm.get(0, j));
        Ok(self.push(value, Op::MulRow { x, row }))
    }

    /// Elementwise activation; rejects non-finite input.
    pub fn activation(&mut self, x: ValueId, kind: Activation) -> Result<ValueId> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.value(x).check_finite("relu input")?;
        let value = self.value(x).relu();
        Ok(self.push(value, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.value(x).check_finite("sigmoid input")?;
        let value = self.value(x).sigmoid();
        Ok(self.push(value, Op::Sigmoid { x }))
    }

    /// Normalizes every row to unit L2 norm; errors on any row with norm at
    /// or below [`EPS_NORM`].
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.value(x).l2_normalize_rows()?;
        Ok(self.push(value, Op::L2NormalizeRows { x }))
    }

    /// Row-wise log-sum-exp, computed with max-subtraction for stability.
    pub fn logsumexp_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        if xm.cols() == 0 {
            return Err(Error::Shape { op: "logsumexp_rows", detail: "zero columns".into() });
        }
        let mut out = Vec::with_capacity(xm.rows());
        for i in 0..xm.rows() {
            out.push(logsumexp_slice(xm.row(i)));
        }
        let value = Matrix::new(xm.rows(), 1, out);
        Ok(self.push(value, Op::LogSumExpRows { x }))
    }

    /// Main diagonal of a square matrix as an N x 1 column.
    pub fn diag(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        if xm.rows() != xm.cols() {
            return Err(Error::Shape {
                op: "diag",
                detail: format!("matrix is {}x{}, not square", xm.rows(), xm.cols()),
            });
        }
        let n = xm.rows();
        let value = Matrix::new(n, 1, (0..n).map(|i| xm.get(i, i)).collect());
        Ok(self.push(value, Op::Diag { x }))
    }

    /// Mean over all entries, as a 1 x 1 scalar node.
    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        if xm.is_empty() {
            return Err(Error::EmptyBatch { op: "mean_all" });
        }
        let mean = xm.data().iter().sum::<f64>() / xm.len() as f64;
        Ok(self.push(Matrix::new(1, 1, vec![mean]), Op::MeanAll { x }))
    }

    /// Sum over all entries, as a 1 x 1 scalar node.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let sum = self.value(x).data().iter().sum::<f64>();
        self.push(Matrix::new(1, 1, vec![sum]), Op::SumAll { x })
    }

    /// 3x3 convolution, stride 1, zero padding 1, over a batch of flattened
    /// channel-major images (entry `(c, i, j)` lives at `(c*H + i)*W + j`).
    /// `kernel` is `out_channels x (in_channels*9)`; `bias` is
    /// `1 x out_channels`.
    pub fn conv3x3(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: ValueId,
        geom: ConvGeom,
    ) -> Result<ValueId> {
        let (xm, km, bm) = (self.value(x), self.value(kernel), self.value(bias));
        if xm.cols() != geom.input_cols() {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!(
                    "input has {} columns, geometry {}x{}x{} needs {}",
                    xm.cols(),
                    geom.in_channels,
                    geom.height,
                    geom.width,
                    geom.input_cols()
                ),
            });
        }
        if km.shape() != (geom.out_channels, geom.in_channels * 9) {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!(
                    "kernel is {}x{}, expected {}x{}",
                    km.rows(),
                    km.cols(),
                    geom.out_channels,
                    geom.in_channels * 9
                ),
            });
        }
        if bm.shape() != (1, geom.out_channels) {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!("bias is {}x{}, expected 1x{}", bm.rows(), bm.cols(), geom.out_channels),
            });
        }
        let value = conv3x3_forward(xm, km, bm, geom);
        Ok(self.push(value, Op::Conv3x3 { x, kernel, bias, geom }))
    }

    /// 2x2 max-pool with stride 2 over flattened channel-major images.
    /// Height and width must be even.
    pub fn max_pool2(
        &mut self,
        x: ValueId,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<ValueId> {
        let xm = self.value(x);
        if xm.cols() != channels * height * width {
            return Err(Error::Shape {
                op: "max_pool2",
                detail: format!(
                    "input has {} columns, geometry {}x{}x{} needs {}",
                    xm.cols(),
                    channels,
                    height,
                    width,
                    channels * height * width
                ),
            });
        }
        if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(Error::Shape {
                op: "max_pool2",
                detail: format!("height {} and width {} must both be even", height, width),
            });
        }
        let (value, argmax) = max_pool2_forward(xm, channels, height, width);
        Ok(self.push(value, Op::MaxPool2 { x, channels, height, width, argmax }))
    }

    /// Replays the tape in strict reverse order of recording, accumulating
    /// vector-Jacobian products. `loss` must be a 1 x 1 node; its gradient is
    /// seeded with 1. Accumulators start at exact zero.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {}x{}", r, c),
            });
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        let mut touched = vec![false; self.nodes.len()];
        grads[loss.0] = Matrix::new(1, 1, vec![1.0]);
        touched[loss.0] = true;

        for idx in (0..=loss.0).rev() {
            if !touched[idx] {
                continue;
            }
            // Take the node's accumulated gradient; children accumulate into
            // earlier slots only (operands always precede their results).
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            self.accumulate_operands(idx, &g, &mut grads, &mut touched);
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }

    fn accumulate_operands(
        &self,
        idx: usize,
        g: &Matrix,
        grads: &mut [Matrix],
        touched: &mut [bool],
    ) {
        let accum = |id: ValueId, delta: Matrix, grads: &mut [Matrix], touched: &mut [bool]| {
            grads[id.0] = grads[id.0].add(&delta).expect("gradient shape invariant");
            touched[id.0] = true;
        };
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Matmul { a, b } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                // dA = g * B^T ; dB = A^T * g
                let da = g.matmul(&bm.transpose()).expect("matmul grad");
                let db = am.transpose().matmul(g).expect("matmul grad");
                accum(*a, da, grads, touched);
                accum(*b, db, grads, touched);
            }
            Op::Transpose { x } => accum(*x, g.transpose(), grads, touched),
            Op::Add { a, b } => {
                accum(*a, g.clone(), grads, touched);
                accum(*b, g.clone(), grads, touched);
            }
            Op::Sub { a, b } => {
                accum(*a, g.clone(), grads, touched);
                accum(*b, g.scale(-1.0), grads, touched);
            }
            Op::Mul { a, b } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accum(*a, g.hadamard(bm).expect("mul grad"), grads, touched);
                accum(*b, g.hadamard(am).expect("mul grad"), grads, touched);
            }
            Op::Scale { x, c } => accum(*x, g.scale(*c), grads, touched),
            Op::AddRow { x, row } => {
                accum(*x, g.clone(), grads, touched);
                let mut sums = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (j, s) in sums.iter_mut().enumerate() {
                        *s += g.get(i, j);
                    }
                }
                accum(*row, Matrix::row_vector(sums), grads, touched);
            }
            Op::MulRow { x, row } => {
                let (xm, rm) = (self.value(*x), self.value(*row));
                let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * rm.get(0, j));
                let mut sums = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (j, s) in sums.iter_mut().enumerate() {
                        *s += g.get(i, j) * xm.get(i, j);
                    }
                }
                accum(*x, dx, grads, touched);
                accum(*row, Matrix::row_vector(sums), grads, touched);
            }
            Op::Relu { x } => {
                let xm = self.value(*x);
                // Subgradient 0 at the kink.
                let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    if xm.get(i, j) > 0.0 {
                        g.get(i, j)
                    } else {
                        0.0
                    }
                });
                accum(*x, dx, grads, touched);
            }
            Op::Sigmoid { x } => {
                let ym = &self.nodes[idx].value;
                let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let y = ym.get(i, j);
                    g.get(i, j) * y * (1.0 - y)
                });
                accum(*x, dx, grads, touched);
            }
            Op::L2NormalizeRows { x } => {
                let xm = self.value(*x);
                let ym = &self.nodes[idx].value;
                // Per row: dX = (dY - y * (y . dY)) / ||x||
                let mut dx = Vec::with_capacity(g.len());
                for i in 0..g.rows() {
                    let norm = xm.row_norm(i);
                    let ydg: f64 = ym
                        .row(i)
                        .iter()
                        .zip(g.row(i).iter())
                        .map(|(y, gg)| y * gg)
                        .sum();
                    for j in 0..g.cols() {
                        dx.push((g.get(i, j) - ym.get(i, j) * ydg) / norm);
                    }
                }
                accum(*x, Matrix::new(g.rows(), g.cols(), dx), grads, touched);
            }
            Op::LogSumExpRows { x } => {
                let xm = self.value(*x);
                let ym = &self.nodes[idx].value;
                // d/dx_ij = softmax_j(row i) * dY_i, with softmax recovered
                // stably as exp(x_ij - lse_i).
                let dx = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| {
                    (xm.get(i, j) - ym.get(i, 0)).exp() * g.get(i, 0)
                });
                accum(*x, dx, grads, touched);
            }
            Op::Diag { x } => {
                let n = g.rows();
                let mut dx = Matrix::zeros(n, n);
                for i in 0..n {
                    dx.data[i * n + i] = g.get(i, 0);
                }
                accum(*x, dx, grads, touched);
            }
            Op::MeanAll { x } => {
                let xm = self.value(*x);
                let c = g.get(0, 0) / xm.len() as f64;
                accum(*x, Matrix::new(xm.rows(), xm.cols(), vec![c; xm.len()]), grads, touched);
            }
            Op::SumAll { x } => {
                let xm = self.value(*x);
                let c = g.get(0, 0);
                accum(*x, Matrix::new(xm.rows(), xm.cols(), vec![c; xm.len()]), grads, touched);
            }
            Op::Conv3x3 { x, kernel, bias, geom } => {
                let (xm, km) = (self.value(*x), self.value(*kernel));
                let (dx, dk, db) = conv3x3_backward(xm, km, g, *geom);
                accum(*x, dx, grads, touched);
                accum(*kernel, dk, grads, touched);
                accum(*bias, db, grads, touched);
            }
            Op::MaxPool2 { x, channels, height, width, argmax } => {
                let xm = self.value(*x);
                let out_cols = channels * (height / 2) * (width / 2);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for n in 0..xm.rows() {
                    for o in 0..out_cols {
                        let src = argmax[n * out_cols + o];
                        dx.data[n * xm.cols() + src] += g.get(n, o);
                    }
                }
                accum(*x, dx, grads, touched);
            }
        }
    }
}

fn check_row_broadcast(x: &Matrix, row: &Matrix, op: &'static str) -> Result<()> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: row.rows(),
            right_cols: row.cols(),
        });
    }
    Ok(())
}

/// Log-sum-exp of a slice with max-subtraction. Exact for single-element
/// slices: `m + ln(exp(0)) == m`.
pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

fn conv3x3_forward(x: &Matrix, k: &Matrix, b: &Matrix, geom: ConvGeom) -> Matrix {
    let ConvGeom { in_channels, height, width, out_channels } = geom;
    let mut out = Matrix::zeros(x.rows(), geom.output_cols());
    for n in 0..x.rows() {
        let xr = x.row(n);
        for co in 0..out_channels {
            for i in 0..height {
                for j in 0..width {
                    let mut acc = b.get(0, co);
                    for ci in 0..in_channels {
                        for di in 0..3usize {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= height as isize {
                                continue;
                            }
                            for dj in 0..3usize {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= width as isize {
                                    continue;
                                }
                                let xidx = (ci * height + ii as usize) * width + jj as usize;
                                acc += k.get(co, (ci * 3 + di) * 3 + dj) * xr[xidx];
                            }
                        }
                    }
                    out.data[n * geom.output_cols() + (co * height + i) * width + j] = acc;
                }
            }
        }
    }
    out
}

fn conv3x3_backward(x: &Matrix, k: &Matrix, g: &Matrix, geom: ConvGeom) -> (Matrix, Matrix, Matrix) {
    let ConvGeom { in_channels, height, width, out_channels } = geom;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut db = Matrix::zeros(1, out_channels);
    for n in 0..x.rows() {
        let xr = x.row(n);
        for co in 0..out_channels {
            for i in 0..height {
                for j in 0..width {
                    let go = g.get(n, (co * height + i) * width + j);
                    if go == 0.0 {
                        continue;
                    }
                    db.data[co] += go;
                    for ci in 0..in_channels {
                        for di in 0..3usize {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= height as isize {
                                continue;
                            }
                            for dj in 0..3usize {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= width as isize {
                                    continue;
                                }
                                let xidx = (ci * height + ii as usize) * width + jj as usize;
                                let kidx = (ci * 3 + di) * 3 + dj;
                                dk.data[co * k.cols() + kidx] += go * xr[xidx];
                                dx.data[n * x.cols() + xidx] += go * k.get(co, kidx);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

fn max_pool2_forward(x: &Matrix, channels: usize, height: usize, width: usize) -> (Matrix, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let out_cols = channels * oh * ow;
    let mut out = Matrix::zeros(x.rows(), out_cols);
    let mut argmax = vec![0usize; x.rows() * out_cols];
    for n in 0..x.rows() {
        let xr = x.row(n);
        for c in 0..channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for a in 0..2usize {
                        for b in 0..2usize {
                            let idx = (c * height + 2 * i + a) * width + 2 * j + b;
                            // Strict > keeps the first maximum on ties.
                            if xr[idx] > best {
                                best = xr[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (c * oh + i) * ow + j;
                    out.data[n * out_cols + o] = best;
                    argmax[n * out_cols + o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

// ── Gradient checking ───────────────────────────────────────────────────────

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the maximum relative error over all parameter
/// entries (`|analytic - numeric| / max(1, |numeric|)`).
///
/// `f` receives a fresh tape and one [`ValueId`] per parameter, in order, and
/// must return a 1 x 1 loss node. `eps` must lie in `[1e-7, 1e-3]`.
pub fn grad_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::EpsOutOfRange { eps });
    }

    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = register_all(&mut tape, ps)?;
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).shape() != (1, 1) {
            let (r, c) = tape.value(loss).shape();
            return Err(Error::Shape {
                op: "grad_check",
                detail: format!("loss must be 1x1, got {}x{}", r, c),
            });
        }
        Ok(tape.scalar(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids = register_all(&mut tape, params)?;
    let loss = f(&mut tape, &ids)?;
    let base = tape.value(loss);
    if base.shape() != (1, 1) {
        let (r, c) = base.shape();
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("loss must be 1x1, got {}x{}", r, c),
        });
    }
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite { context: "grad_check base evaluation".into() });
    }
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for k in 0..p.len() {
            let mut probe = params.to_vec();
            probe[pi] = p.with_perturbed(k, eps);
            let fp = eval(&probe)?;
            probe[pi] = p.with_perturbed(k, -eps);
            let fm = eval(&probe)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFiniteEval { param_index: pi });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn register_all(tape: &mut Tape, params: &[Matrix]) -> Result<Vec<ValueId>> {
    params.iter().map(|p| tape.input(p.clone())).collect()
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{}: {} vs {} (tol {})", what, a, b, tol);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Independent oracle: naive triple-loop matmul with no skip logic.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.cols(), b.rows());
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a.get(i, p) * b.get(p, j);
            }
            acc
        })
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, k, m) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, m);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            assert!(got.max_abs_diff(&want) < 1e-12, "{}x{}x{} mismatch", n, k, m);
        }
    }

    #[test]
    fn matmul_associative_at_desk_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &n in &[4usize, 16, 64] {
            let a = random_matrix(&mut rng, n, n);
            let b = random_matrix(&mut rng, n, n);
            let c = random_matrix(&mut rng, n, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10, "associativity at n={}", n);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 5);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x5"), "message was: {}", err);
    }

    #[test]
    fn activation_values_are_frozen() {
        let x = Matrix::row_vector(vec![2.0, -1.0, -3.0, 3.0, 0.0]);
        let s = x.sigmoid();
        assert_close(s.get(0, 0), 0.8807970779778823, 1e-12, "sigmoid(2)");
        assert_close(s.get(0, 1), 0.2689414213699951, 1e-12, "sigmoid(-1)");
        let r = x.relu();
        assert_eq!(r.data(), &[2.0, 0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn l2_normalize_unit_norm_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, 4, 9);
        let y = x.l2_normalize_rows().unwrap();
        for i in 0..y.rows() {
            assert_close(y.row_norm(i), 1.0, 1e-12, "unit norm");
        }
        let yy = y.l2_normalize_rows().unwrap();
        assert!(y.max_abs_diff(&yy) <= 1e-12, "normalize is idempotent");
    }

    #[test]
    fn l2_normalize_rejects_near_zero_rows() {
        let x = Matrix::row_vector(vec![1e-13, 0.0, 0.0]);
        match x.l2_normalize_rows() {
            Err(Error::NearZeroNorm { row: 0, .. }) => {}
            other => panic!("expected NearZeroNorm, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn logsumexp_is_stable_and_exact_for_singletons() {
        // Singleton: lse([x]) == x exactly.
        assert_eq!(logsumexp_slice(&[0.37]), 0.37);
        // Huge inputs that would overflow a naive exp-sum.
        let v = logsumexp_slice(&[1000.0, 1000.0]);
        assert_close(v, 1000.0 + 2f64.ln(), 1e-9, "lse of equal large values");
    }

    #[test]
    fn tape_untouched_leaf_has_exact_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        let b = tape.input(Matrix::row_vector(vec![3.0, 4.0])).unwrap();
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0], "off-path leaf stays at exact zero");
        assert_eq!(grads.get(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn tape_accumulates_over_reused_nodes() {
        // loss = sum(x ⊙ x) → d/dx = 2x, exercising accumulation when a node
        // feeds the same op twice.
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(vec![1.5, -2.0, 0.5])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::zeros(2, 2)).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn tape_rejects_non_finite_input() {
        let mut tape = Tape::new();
        let bad = Matrix::new(1, 2, vec![1.0, f64::NAN]);
        assert!(tape.input(bad).is_err());
    }

    #[test]
    fn grad_check_validates_eps_range() {
        let params = [Matrix::row_vector(vec![1.0])];
        let f = |tape: &mut Tape, ids: &[ValueId]| Ok(tape.sum_all(ids[0]));
        assert!(matches!(grad_check(f, &params, 1e-8), Err(Error::EpsOutOfRange { .. })));
        assert!(matches!(grad_check(f, &params, 1e-2), Err(Error::EpsOutOfRange { .. })));
        assert!(grad_check(f, &params, 1e-5).is_ok());
    }

    /// A named gradient-check case: input matrices plus the loss builder.
    type GradCase =
        (&'static str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>>);

    /// Every primitive op's tape gradient matches central finite differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 1e-5;
        let tol = 1e-6;

        // Shapes kept tiny; losses reduce through mean/sum so every op is on
        // the path to a scalar.
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = random_matrix(&mut rng, 3, 4);
        let row = random_matrix(&mut rng, 1, 4);

        let cases: Vec<GradCase> = vec![
            (
                "matmul",
                vec![a.clone(), b.clone()],
                Box::new(|t, ids| {
                    let y = t.matmul(ids[0], ids[1])?;
                    t.mean_all(y)
                }),
            ),
            (
                "transpose",
                vec![a.clone()],
                Box::new(|t, ids| {
                    let y = t.transpose(ids[0]);
                    let z = t.mul(y, y)?;
                    t.mean_all(z)
                }),
            ),
            (
                "add+sub+scale",
                vec![a.clone(), c.clone()],
                Box::new(|t, ids| {
                    let s = t.add(ids[0], ids[1])?;
                    let d = t.sub(s, ids[1])?;
                    let sc = t.scale(d, 2.5);
                    let sq = t.mul(sc, sc)?;
                    t.mean_all(sq)
                }),
            ),
            (
                "add_row+mul_row",
                vec![a.clone(), row.clone()],
                Box::new(|t, ids| {
                    let y = t.add_row(ids[0], ids[1])?;
                    let z = t.mul_row(y, ids[1])?;
                    let sq = t.mul(z, z)?;
                    t.mean_all(sq)
                }),
            ),
            (
                "sigmoid",
                vec![a.clone()],
                Box::new(|t, ids| {
                    let y = t.sigmoid(ids[0])?;
                    t.mean_all(y)
                }),
            ),
            (
                "l2_normalize_rows",
                vec![a.clone(), c.clone()],
                Box::new(|t, ids| {
                    let y = t.l2_normalize_rows(ids[0])?;
                    let z = t.mul(y, ids[1])?;
                    t.mean_all(z)
                }),
            ),
            (
                "logsumexp_rows+diag",
                vec![random_matrix(&mut rng.clone(), 4, 4)],
                Box::new(|t, ids| {
                    let lse = t.logsumexp_rows(ids[0])?;
                    let d = t.diag(ids[0])?;
                    let per_row = t.sub(lse, d)?;
                    t.mean_all(per_row)
                }),
            ),
        ];

        for (name, params, f) in cases {
            let err = grad_check(|t, ids| f(t, ids), &params, eps).unwrap();
            assert!(err < tol, "{} grad error {} exceeds {}", name, err, tol);
        }

        // relu separately, with inputs kept away from the kink so finite
        // differences are valid.
        let mut safe = random_matrix(&mut rng, 3, 4);
        safe = safe.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let err = grad_check(
            |t, ids| {
                let y = t.relu(ids[0])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[safe],
            eps,
        )
        .unwrap();
        assert!(err < tol, "relu grad error {}", err);
    }

    #[test]
    fn conv_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let geom = ConvGeom { in_channels: 2, height: 4, width: 4, out_channels: 3 };
        let x = random_matrix(&mut rng, 2, geom.input_cols());
        let k = random_matrix(&mut rng, geom.out_channels, geom.in_channels * 9);
        let bias = random_matrix(&mut rng, 1, geom.out_channels);
        let err = grad_check(
            |t, ids| {
                let y = t.conv3x3(ids[0], ids[1], ids[2], geom)?;
                let p = t.max_pool2(y, geom.out_channels, geom.height, geom.width)?;
                let sq = t.mul(p, p)?;
                t.mean_all(sq)
            },
            &[x, k, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv/pool grad error {}", err);
    }

    #[test]
    fn conv_matches_hand_computed_case() {
        // 1 channel, 2x2 image, kernel that picks the center tap only:
        // output == input + bias everywhere.
        let geom = ConvGeom { in_channels: 1, height: 2, width: 2, out_channels: 1 };
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // center of the 3x3 window
        let k = tape.input(Matrix::row_vector(kdata)).unwrap();
        let b = tape.input(Matrix::row_vector(vec![0.5])).unwrap();
        let y = tape.conv3x3(x, k, b, geom).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn max_pool_keeps_first_max_on_ties() {
        let mut tape = Tape::new();
        // 1 channel, 2x2: all equal → argmax is the first scanned (0, 0).
        let x = tape.input(Matrix::row_vector(vec![7.0, 7.0, 7.0, 7.0])).unwrap();
        let y = tape.max_pool2(x, 1, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let a = random_matrix(&mut rng, 6, 5);
            let b = random_matrix(&mut rng, 5, 6);
            let mut tape = Tape::new();
            let ai = tape.input(a).unwrap();
            let bi = tape.input(b).unwrap();
            let m = tape.matmul(ai, bi).unwrap();
            let lse = tape.logsumexp_rows(m).unwrap();
            let loss = tape.mean_all(lse).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut out = vec![tape.scalar(loss)];
            out.extend_from_slice(grads.get(ai).data());
            out
        };
        let x = run();
        let y = run();
        assert_eq!(x, y, "identical seeds must give bitwise-identical results");
    }
}
