//! Reverse-mode differentiation over dense row-major 2-D matrices.
//!
//! A [`Tape`] records primitive ops in construction order, so node ids are a
//! topological order and the backward sweep is a single reverse pass. Scalars
//! are 1×1 matrices. Shape mismatches are programming errors and panic at op
//! construction.

use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec size mismatch");
        Mat { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with optional transposes, via `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: &Mat,
    ta: bool,
    b: &Mat,
    tb: bool,
    beta: f64,
    c: &mut Mat,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: shapes and strides were checked above against the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log1p(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    MaxOverRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    RowLinear(usize, Rc<Vec<f64>>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient buffer for `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Mat {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Mat::zeros(v.rows, v.cols),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.id].value;
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        let (rows, cols) = value.shape();
        self.nodes.push(Node { value, op, needs_grad });
        Var { id, rows, cols }
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(a: Var, b: Var, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let m = Mat::from_vec(a.rows, a.cols, data);
        let ng = self.ng(&[a.id, b.id]);
        self.push(m, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let m = self.nodes[a.id].value.map(f);
        let ng = self.ng(&[a.id]);
        self.push(m, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b, "add");
        self.zip(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b, "sub");
        self.zip(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b, "mul");
        self.zip(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert!(row.rows == 1 && row.cols == a.cols, "add_row: shape mismatch");
        let va = &self.nodes[a.id].value;
        let vr = &self.nodes[row.id].value;
        let mut m = va.clone();
        for r in 0..m.rows {
            for (x, b) in m.data[r * m.cols..(r + 1) * m.cols].iter_mut().zip(&vr.data) {
                *x += b;
            }
        }
        let ng = self.ng(&[a.id, row.id]);
        self.push(m, Op::AddRow(a.id, row.id), ng)
    }

    /// Scales each row of an n×m matrix by the matching entry of an n×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert!(col.cols == 1 && col.rows == a.rows, "mul_col: shape mismatch");
        let va = &self.nodes[a.id].value;
        let vc = &self.nodes[col.id].value;
        let mut m = va.clone();
        for r in 0..m.rows {
            let s = vc.data[r];
            for x in m.data[r * m.cols..(r + 1) * m.cols].iter_mut() {
                *x *= s;
            }
        }
        let ng = self.ng(&[a.id, col.id]);
        self.push(m, Op::MulCol(a.id, col.id), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.id, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul: inner dimension mismatch");
        let m = matmul(&self.nodes[a.id].value, &self.nodes[b.id].value);
        let ng = self.ng(&[a.id, b.id]);
        self.push(m, Op::MatMul(a.id, b.id), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.cols, "matmul_bt: inner dimension mismatch");
        let mut c = Mat::zeros(a.rows, b.rows);
        gemm(1.0, &self.nodes[a.id].value, false, &self.nodes[b.id].value, true, 0.0, &mut c);
        let ng = self.ng(&[a.id, b.id]);
        self.push(c, Op::MatMulBt(a.id, b.id), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.id))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln_1p, Op::Log1p(a.id))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.id))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.id))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a.id))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.nodes[a.id].value.clone();
        for r in 0..m.rows {
            let row = &mut m.data[r * m.cols..(r + 1) * m.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::SoftmaxRows(a.id), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.data.iter().sum();
        let ng = self.ng(&[a.id]);
        self.push(Mat::scalar(s), Op::SumAll(a.id), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: n×m → n×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let m = Mat::from_vec(v.rows, 1, data);
        let ng = self.ng(&[a.id]);
        self.push(m, Op::SumRows(a.id), ng)
    }

    /// Column sums: n×m → 1×m.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let mut m = Mat::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, x) in m.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::SumCols(a.id), ng)
    }

    /// Repeats a 1×m row n times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(a.rows, 1, "broadcast_rows: expects a single row");
        let v = &self.nodes[a.id].value;
        let mut data = Vec::with_capacity(n * v.cols);
        for _ in 0..n {
            data.extend_from_slice(&v.data);
        }
        let m = Mat::from_vec(n, v.cols, data);
        let ng = self.ng(&[a.id]);
        self.push(m, Op::BroadcastRows(a.id), ng)
    }

    /// Column-wise maximum over rows: n×m → 1×m. Ties go to the lowest row.
    pub fn max_over_rows(&mut self, a: Var) -> Var {
        assert!(a.rows > 0, "max_over_rows: empty input");
        let v = &self.nodes[a.id].value;
        let mut m = Mat::from_vec(1, v.cols, v.row(0).to_vec());
        let mut arg = vec![0usize; v.cols];
        for r in 1..v.rows {
            for (c, x) in v.row(r).iter().enumerate() {
                if *x > m.data[c] {
                    m.data[c] = *x;
                    arg[c] = r;
                }
            }
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::MaxOverRows(a.id, arg), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols: row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = &self.nodes[p.id].value;
                m.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(v.row(r));
                off += p.cols;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.ng(&ids);
        self.push(m, Op::ConcatCols(ids), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols, "slice_cols: out of range");
        let v = &self.nodes[a.id].value;
        let mut m = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            m.data[r * len..(r + 1) * len].copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::SliceCols(a.id, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = &self.nodes[a.id].value;
        let mut m = Mat::zeros(idx.len(), v.cols);
        for (o, &i) in idx.iter().enumerate() {
            assert!(i < v.rows, "gather_rows: index out of range");
            m.data[o * v.cols..(o + 1) * v.cols].copy_from_slice(v.row(i));
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::GatherRows(a.id, idx.to_vec()), ng)
    }

    /// Per-row constant linear map: row r of the result is `a[r] · M_r`, with
    /// `mats` holding n row-major k×m blocks.
    pub fn row_linear(&mut self, a: Var, mats: Rc<Vec<f64>>, out_cols: usize) -> Var {
        let k = a.cols;
        assert_eq!(mats.len(), a.rows * k * out_cols, "row_linear: block size mismatch");
        let v = &self.nodes[a.id].value;
        let mut m = Mat::zeros(a.rows, out_cols);
        for r in 0..a.rows {
            let blk = &mats[r * k * out_cols..(r + 1) * k * out_cols];
            let x = v.row(r);
            let o = &mut m.data[r * out_cols..(r + 1) * out_cols];
            for (i, xi) in x.iter().enumerate() {
                if *xi == 0.0 {
                    continue;
                }
                for (oj, bij) in o.iter_mut().zip(&blk[i * out_cols..(i + 1) * out_cols]) {
                    *oj += xi * bij;
                }
            }
        }
        let ng = self.ng(&[a.id]);
        self.push(m, Op::RowLinear(a.id, mats), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        if output.rows != 1 || output.cols != 1 {
            return Err(DiffError::NonScalarOutput { rows: output.rows, cols: output.cols });
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Mat::scalar(1.0));
        for id in (0..=output.id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Mat>], id: usize, g: Mat) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat>], id: usize, f: impl FnOnce() -> Mat) {
        if self.nodes[id].needs_grad {
            let g = f();
            self.acc(grads, id, g);
        }
    }

    fn elementwise(&self, a: usize, out: usize, g: &Mat, d: impl Fn(f64, f64) -> f64) -> Mat {
        let x = &self.nodes[a].value;
        let y = &self.nodes[out].value;
        let data = x.data.iter().zip(&y.data).zip(&g.data).map(|((&xi, &yi), &gi)| gi * d(xi, yi)).collect();
        Mat::from_vec(x.rows, x.cols, data)
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(grads, a, || {
                    let vb = val(b);
                    Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect())
                });
                self.acc_with(grads, b, || {
                    let va = val(a);
                    Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect())
                });
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *row, || {
                    let mut s = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in s.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    s
                });
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                self.acc_with(grads, a, || {
                    let vc = val(col);
                    let mut m = g.clone();
                    for r in 0..m.rows {
                        let s = vc.data[r];
                        for x in m.data[r * m.cols..(r + 1) * m.cols].iter_mut() {
                            *x *= s;
                        }
                    }
                    m
                });
                self.acc_with(grads, col, || {
                    let va = val(a);
                    let data = (0..g.rows).map(|r| g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum()).collect();
                    Mat::from_vec(g.rows, 1, data)
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_with(grads, *a, || g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.acc_with(grads, *a, || g.clone()),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(grads, a, || {
                    let vb = val(b);
                    let mut m = Mat::zeros(g.rows, vb.rows);
                    gemm(1.0, g, false, vb, true, 0.0, &mut m);
                    m
                });
                self.acc_with(grads, b, || {
                    let va = val(a);
                    let mut m = Mat::zeros(va.cols, g.cols);
                    gemm(1.0, va, true, g, false, 0.0, &mut m);
                    m
                });
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                // c = a bᵀ: da = g b, db = gᵀ a
                self.acc_with(grads, a, || {
                    let vb = val(b);
                    let mut m = Mat::zeros(g.rows, vb.cols);
                    gemm(1.0, g, false, vb, false, 0.0, &mut m);
                    m
                });
                self.acc_with(grads, b, || {
                    let va = val(a);
                    let mut m = Mat::zeros(g.cols, va.cols);
                    gemm(1.0, g, true, va, false, 0.0, &mut m);
                    m
                });
            }
            Op::Tanh(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |_, y| 1.0 - y * y)),
            Op::Sigmoid(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |_, y| y * (1.0 - y))),
            Op::Softplus(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| sigmoid(x))),
            Op::Relu(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Sin(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| x.cos())),
            Op::Cos(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| -x.sin())),
            Op::Exp(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |_, y| y)),
            Op::Log1p(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| 1.0 / (1.0 + x))),
            Op::Square(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |x, _| 2.0 * x)),
            Op::Sqrt(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |_, y| 0.5 / y)),
            Op::Recip(a) => self.acc_with(grads, *a, || self.elementwise(*a, id, g, |_, y| -y * y)),
            Op::SoftmaxRows(a) => self.acc_with(grads, *a, || {
                let y = val(id);
                let mut m = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        m.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                m
            }),
            Op::SumAll(a) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    Mat::from_vec(v.rows, v.cols, vec![g.data[0]; v.rows * v.cols])
                });
            }
            Op::SumRows(a) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let mut m = Mat::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        for x in m.data[r * v.cols..(r + 1) * v.cols].iter_mut() {
                            *x = g.data[r];
                        }
                    }
                    m
                });
            }
            Op::SumCols(a) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let mut m = Mat::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        m.data[r * v.cols..(r + 1) * v.cols].copy_from_slice(&g.data);
                    }
                    m
                });
            }
            Op::BroadcastRows(a) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let mut s = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in s.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    s
                });
            }
            Op::MaxOverRows(a, arg) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let mut m = Mat::zeros(v.rows, v.cols);
                    for (c, &r) in arg.iter().enumerate() {
                        m.data[r * v.cols + c] = g.data[c];
                    }
                    m
                });
            }
            Op::ConcatCols(ids) => {
                let mut off = 0;
                for &p in ids {
                    let pc = self.nodes[p].value.cols;
                    self.acc_with(grads, p, || {
                        let mut m = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            m.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        m
                    });
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let mut m = Mat::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        m.data[r * v.cols + start..r * v.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    m
                });
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let mut m = Mat::zeros(v.rows, v.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, y) in m.data[i * v.cols..(i + 1) * v.cols].iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                    m
                });
            }
            Op::RowLinear(a, mats) => {
                let a = *a;
                self.acc_with(grads, a, || {
                    let v = val(a);
                    let (k, n) = (v.cols, g.cols);
                    let mut m = Mat::zeros(v.rows, k);
                    for r in 0..v.rows {
                        let blk = &mats[r * k * n..(r + 1) * k * n];
                        let gr = g.row(r);
                        for i in 0..k {
                            m.data[r * k + i] = blk[i * n..(i + 1) * n].iter().zip(gr).map(|(b, x)| b * x).sum();
                        }
                    }
                    m
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Directional central difference of `f` at `x` along `d` vs the tape gradient.
    fn check_directional(
        x: &[Mat],
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = x.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let dirs: Vec<Mat> = x.iter().map(|m| rand_mat(rng, m.rows, m.cols, -1.0, 1.0)).collect();
        let analytic: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(v, d)| grads.get(*v).data.iter().zip(&d.data).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let eval = |s: f64| {
            let mut t = Tape::new();
            let vs: Vec<Var> = x
                .iter()
                .zip(&dirs)
                .map(|(m, d)| {
                    t.leaf(Mat::from_vec(m.rows, m.cols, m.data.iter().zip(&d.data).map(|(a, b)| a + s * b).collect()))
                })
                .collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-5;
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6)
    }

    fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_mat(&mut rng, v.rows, v.cols, -1.0, 1.0));
        let p = t.mul(v, w);
        t.sum_all(p)
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).data[0], 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(3.0));
        let c = t.constant(Mat::scalar(5.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).data[0], 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(DiffError::NonScalarOutput { rows: 2, cols: 1 })));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(2.0));
        let a = t.scale(x, 3.0);
        let b = t.square(x);
        let c = t.add(a, b);
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).data[0], 7.0);
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 5, 4, -1.0, 1.0);
        let w1 = rand_mat(&mut rng, 4, 8, -0.5, 0.5);
        let b1 = rand_mat(&mut rng, 1, 8, -0.5, 0.5);
        let w2 = rand_mat(&mut rng, 8, 8, -0.5, 0.5);
        let w3 = rand_mat(&mut rng, 8, 1, -0.5, 0.5);
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.tanh(h);
            let h = t.matmul(h, v[3]);
            let h = t.softplus(h);
            let o = t.matmul(h, v[4]);
            let o = t.square(o);
            t.sum_all(o)
        };
        for _ in 0..10 {
            let err = check_directional(&[x.clone(), w1.clone(), b1.clone(), w2.clone(), w3.clone()], &f, &mut rng);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    type Case = (&'static str, Vec<(usize, usize, f64, f64)>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

    fn primitive_cases() -> Vec<Case> {
        vec![
            ("add", vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.add(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("sub", vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.sub(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("mul", vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.mul(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("add_row", vec![(3, 4, -1.0, 1.0), (1, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.add_row(v[0], v[1]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("mul_col", vec![(3, 4, -1.0, 1.0), (3, 1, -1.0, 1.0)], Box::new(|t, v| { let o = t.mul_col(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("scale", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.scale(v[0], -2.5); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("add_scalar", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.add_scalar(v[0], 0.7); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("matmul", vec![(3, 4, -1.0, 1.0), (4, 2, -1.0, 1.0)], Box::new(|t, v| { let o = t.matmul(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("matmul_bt", vec![(3, 4, -1.0, 1.0), (5, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.matmul_bt(v[0], v[1]); weighted_sum(t, o, 1) })),
            ("tanh", vec![(3, 4, -2.0, 2.0)], Box::new(|t, v| { let o = t.tanh(v[0]); weighted_sum(t, o, 1) })),
            ("sigmoid", vec![(3, 4, -3.0, 3.0)], Box::new(|t, v| { let o = t.sigmoid(v[0]); weighted_sum(t, o, 1) })),
            ("softplus", vec![(3, 4, -3.0, 3.0)], Box::new(|t, v| { let o = t.softplus(v[0]); weighted_sum(t, o, 1) })),
            ("relu", vec![(3, 4, 0.1, 2.0)], Box::new(|t, v| { let o = t.relu(v[0]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("sin", vec![(3, 4, -3.0, 3.0)], Box::new(|t, v| { let o = t.sin(v[0]); weighted_sum(t, o, 1) })),
            ("cos", vec![(3, 4, -3.0, 3.0)], Box::new(|t, v| { let o = t.cos(v[0]); weighted_sum(t, o, 1) })),
            ("exp", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.exp(v[0]); weighted_sum(t, o, 1) })),
            ("log1p", vec![(3, 4, 0.0, 3.0)], Box::new(|t, v| { let o = t.log1p(v[0]); weighted_sum(t, o, 1) })),
            ("sqrt", vec![(3, 4, 0.5, 3.0)], Box::new(|t, v| { let o = t.sqrt(v[0]); weighted_sum(t, o, 1) })),
            ("recip", vec![(3, 4, 0.5, 3.0)], Box::new(|t, v| { let o = t.recip(v[0]); weighted_sum(t, o, 1) })),
            ("softmax_rows", vec![(3, 4, -2.0, 2.0)], Box::new(|t, v| { let o = t.softmax_rows(v[0]); weighted_sum(t, o, 1) })),
            ("mean_all", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.square(v[0]); t.mean_all(o) })),
            ("sum_rows", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.sum_rows(v[0]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("sum_cols", vec![(3, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.sum_cols(v[0]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("broadcast_rows", vec![(1, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.broadcast_rows(v[0], 3); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("max_over_rows", vec![(5, 4, -1.0, 1.0)], Box::new(|t, v| { let o = t.max_over_rows(v[0]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("concat_cols", vec![(3, 2, -1.0, 1.0), (3, 3, -1.0, 1.0)], Box::new(|t, v| { let o = t.concat_cols(&[v[0], v[1]]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("slice_cols", vec![(3, 5, -1.0, 1.0)], Box::new(|t, v| { let o = t.slice_cols(v[0], 1, 3); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("gather_rows", vec![(4, 3, -1.0, 1.0)], Box::new(|t, v| { let o = t.gather_rows(v[0], &[2, 0, 2, 3]); let o = t.square(o); weighted_sum(t, o, 1) })),
            ("row_linear", vec![(3, 2, -1.0, 1.0)], Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let mats: Vec<f64> = (0..3 * 2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let o = t.row_linear(v[0], Rc::new(mats), 4);
                let o = t.square(o);
                weighted_sum(t, o, 1)
            })),
        ]
    }

    #[test]
    fn every_primitive_passes_directional_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (name, shapes, f) in primitive_cases() {
            for _ in 0..100 {
                let x: Vec<Mat> = shapes.iter().map(|&(r, c, lo, hi)| rand_mat(&mut rng, r, c, lo, hi)).collect();
                let err = check_directional(&x, f.as_ref(), &mut rng);
                assert!(err < 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t = Tape::new();
            let a = t.leaf(rand_mat(&mut rng, 6, 3, -1.0, 1.0));
            let b = t.leaf(rand_mat(&mut rng, 3, 2, -1.0, 1.0));
            let c = t.matmul(a, b);
            let c = t.tanh(c);
            let s = t.sum_all(c);
            let g = t.backward(s).unwrap();
            (g.get(a), g.get(b))
        };
        assert_eq!(build(), build());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn mismatched_add_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros(2, 2));
        let b = t.leaf(Mat::zeros(2, 3));
        t.add(a, b);
    }
}
