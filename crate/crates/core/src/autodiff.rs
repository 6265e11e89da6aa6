//! A small reverse-mode differentiation tape over dense row-major matrices.
//!
//! Only the primitives the registration network needs are provided. Every
//! value on the tape is a `rows x cols` matrix of `f64`; a set of points with
//! channels is `points x channels`, and groups of variable size are expressed
//! through segment offsets in [`Tape::segment_max_pool`] rather than a third
//! padded axis.
//!
//! Nodes are appended in execution order and [`Tape::backward`] walks them in
//! exact reverse. Gradients are only propagated into nodes that depend on a
//! leaf, so constant inputs (point coordinates, labels) cost nothing in the
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain dense matrix value, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row(&[v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    Sum(Var),
    MeanSquaredNorm(Var),
    NormalizeRows(Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// `argmax[g * cols + c]` is the winning input row, `usize::MAX` for a
    /// zero-filled empty segment.
    SegmentMax(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient of a leaf, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let [r, c] = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(shape_error("matmul", [m, k], [k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// Adds a `[1, n]` row to every row of `[m, n]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        let bs = self.shape(bias);
        if bs != [1, n] {
            return Err(shape_error("bias_add", [m, n], bs));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            row.iter_mut().zip(&b).for_each(|(o, bv)| *o += bv);
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Tensor::new(m, n, out)?, Op::BiasAdd(x, bias), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    fn elementwise_pair(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_error(name, sa, sb));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(sa[0], sa[1], out)?, op, tracked))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.map(x, |v| v * factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    /// Concatenation along the channel (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptySet("concat"));
        };
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(shape_error("concat", self.shape(first), s));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::Concat(parts.to_vec()), tracked))
    }

    /// Sum of all elements, `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean over rows of the squared row norm, `[1, 1]`.
    pub fn mean_squared_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows == 0 {
            return Err(Error::EmptySet("mean_squared_norm"));
        }
        let s = t.data.iter().map(|v| v * v).sum::<f64>() / t.rows as f64;
        Ok(self.unary(x, Tensor::scalar(s), Op::MeanSquaredNorm(x)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = t.data.clone();
        for (r, row) in out.chunks_exact_mut(t.cols.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > crate::tolerance::ZERO_NORM) {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let v = Tensor::new(t.rows, t.cols, out)?;
        Ok(self.unary(x, v, Op::NormalizeRows(x)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if start > end || end > cols {
            return Err(shape_error("slice_cols", [rows, cols], [start, end]));
        }
        let t = self.value(x);
        let out = (0..rows)
            .flat_map(|r| t.row_slice(r)[start..end].iter().copied())
            .collect();
        let v = Tensor::new(rows, end - start, out)?;
        Ok(self.unary(x, v, Op::SliceCols(x, start)))
    }

    /// Output row `k` is input row `indices[k]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_error("gather_rows", [rows, cols], [bad, 0]));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::new(indices.len(), cols, out)?;
        Ok(self.unary(x, v, Op::GatherRows(x, indices.to_vec())))
    }

    /// Element-wise max over all rows: `[points, channels] -> [1, channels]`.
    /// Ties route the gradient to the smallest row index.
    pub fn max_pool_set(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        if rows == 0 {
            return Err(Error::EmptySet("max_pool_set"));
        }
        self.segment_max_pool(x, &[0, rows], false)
    }

    /// Max pooling over consecutive row segments `offsets[g]..offsets[g+1]`,
    /// producing one output row per segment. An empty segment is an error
    /// unless `zero_fill_empty`, in which case it yields a zero row.
    pub fn segment_max_pool(&mut self, x: Var, offsets: &[usize], zero_fill_empty: bool) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if offsets.is_empty() || offsets[0] != 0 || *offsets.last().unwrap() != rows || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(shape_error("segment_max_pool", [rows, cols], [offsets.len(), 0]));
        }
        let groups = offsets.len() - 1;
        let t = self.value(x);
        let mut out = vec![0.0; groups * cols];
        let mut arg = vec![usize::MAX; groups * cols];
        for g in 0..groups {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            if lo == hi {
                if zero_fill_empty {
                    continue;
                }
                return Err(Error::EmptySet("segment_max_pool"));
            }
            let o = &mut out[g * cols..(g + 1) * cols];
            let a = &mut arg[g * cols..(g + 1) * cols];
            o.copy_from_slice(t.row_slice(lo));
            a.iter_mut().for_each(|v| *v = lo);
            for r in lo + 1..hi {
                for (c, &v) in t.row_slice(r).iter().enumerate() {
                    if v > o[c] {
                        o[c] = v;
                        a[c] = r;
                    }
                }
            }
        }
        let v = Tensor::new(groups, cols, out)?;
        Ok(self.unary(x, v, Op::SegmentMax(x, arg)))
    }

    /// Reverse pass from a `[1, 1]` loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {s:?}"
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {
                    if self.leaf_grads.len() < n {
                        self.leaf_grads.resize(n, None);
                    }
                    let [r, c] = self.nodes[i].value.shape();
                    match &mut self.leaf_grads[i] {
                        Some(acc) => add_into(&mut acc.data, &g),
                        slot => *slot = Some(Tensor { rows: r, cols: c, data: g }),
                    }
                }
                Op::Constant => {}
                _ => self.propagate(&self.nodes[i].op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(a);
                let n = self.shape(b)[1];
                // dA = G B^T
                self.accumulate(grads, a, |ga| {
                    gemm_acc(m, n, k, g, (n as isize, 1), self.value(b).data(), (1, n as isize), ga)
                });
                // dB = A^T G
                self.accumulate(grads, b, |gb| {
                    gemm_acc(k, m, n, self.value(a).data(), (1, k as isize), g, (n as isize, 1), gb)
                });
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, x, |gx| add_into(gx, g));
                let n = self.shape(b)[1];
                self.accumulate(grads, b, |gb| {
                    for row in g.chunks_exact(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Relu(x) => self.accumulate(grads, x, |gx| {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&out.data) {
                    if y > 0.0 {
                        *d += s;
                    }
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, x, |gx| {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&out.data) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, x, |gx| {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&out.data) {
                    *d += s * (1.0 - y * y);
                }
            }),
            Op::Scale(x, f) => self.accumulate(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * f)
            }),
            Op::Concat(ref parts) => {
                let rows = out.rows;
                let total = out.cols;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanSquaredNorm(x) => {
                let t = self.value(x);
                let f = 2.0 * g[0] / t.rows as f64;
                self.accumulate(grads, x, |gx| {
                    gx.iter_mut().zip(&t.data).for_each(|(d, v)| *d += f * v)
                });
            }
            Op::NormalizeRows(x) => {
                let t = self.value(x);
                let c = t.cols.max(1);
                self.accumulate(grads, x, |gx| {
                    for ((dx, xr), (yr, gr)) in gx
                        .chunks_exact_mut(c)
                        .zip(t.data.chunks_exact(c))
                        .zip(out.data.chunks_exact(c).zip(g.chunks_exact(c)))
                    {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &y), &gv) in dx.iter_mut().zip(yr).zip(gr) {
                            *d += (gv - y * yg) / n;
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let cols = self.shape(x)[1];
                let w = out.cols;
                self.accumulate(grads, x, |gx| {
                    for r in 0..out.rows {
                        add_into(&mut gx[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::GatherRows(x, ref idx) => {
                let c = out.cols;
                self.accumulate(grads, x, |gx| {
                    for (k, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SegmentMax(x, ref arg) => {
                let c = out.cols;
                self.accumulate(grads, x, |gx| {
                    for (e, &r) in arg.iter().enumerate() {
                        if r != usize::MAX {
                            gx[r * c + e % c] += g[e];
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn shape_error(op: &'static str, left: [usize; 2], right: [usize; 2]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// `c = a * b` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    gemm_with_beta(m, k, n, a, sa, b, sb, c, 0.0)
}

/// `c += a * b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    gemm_with_beta(m, k, n, a, sa, b, sb, c, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_with_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides describe dense row- or column-major layouts of those shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Central finite-difference checking of tape gradients.
pub mod gradcheck {
    use super::{Tape, Tensor, Var};
    use crate::error::Result;

    /// Step size for central differences.
    pub const STEP: f64 = 1e-6;

    #[derive(Debug, Clone)]
    pub struct InputCheck {
        pub input: usize,
        pub relative_error: f64,
        pub analytic_norm: f64,
    }

    /// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Builds `f(inputs)` on fresh tapes, compares the backward gradient of
    /// every input with central differences of step `h`.
    pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<InputCheck>>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;

        let mut report = Vec::with_capacity(inputs.len());
        let mut probe = inputs.to_vec();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = tape.grad_or_zeros(v);
            let mut numeric = vec![0.0; inputs[i].len()];
            for (e, slot) in numeric.iter_mut().enumerate() {
                let orig = inputs[i].data()[e];
                probe[i].data_mut()[e] = orig + h;
                let plus = eval(&probe)?;
                probe[i].data_mut()[e] = orig - h;
                let minus = eval(&probe)?;
                probe[i].data_mut()[e] = orig;
                *slot = (plus - minus) / (2.0 * h);
            }
            report.push(InputCheck {
                input: i,
                relative_error: relative_error(analytic.data(), &numeric),
                analytic_norm: analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, STEP};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        // Random fixed weights make the scalar depend on every element.
        let [r, c] = tape.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, c, 1));
        let y = tape.matmul(x, w)?;
        let _ = r;
        Ok(tape.sum(y))
    }

    fn assert_grad<F>(f: F, inputs: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        for c in check(f, inputs, STEP).unwrap() {
            assert!(c.relative_error < 1e-6, "input {} rel err {:e}", c.input, c.relative_error);
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn max_pool_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(1, 2, vec![1.0, 5.0]).unwrap());
        let y = tape.max_pool_set(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 5.0]);

        let x = tape.leaf(Tensor::new(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = tape.max_pool_set(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        let e = tape.constant(Tensor::zeros(0, 2));
        assert!(matches!(tape.max_pool_set(e), Err(Error::EmptySet(_))));
    }

    #[test]
    fn max_pool_ties_route_to_first_row_and_sum_to_incoming() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(3, 2, vec![2.0, 0.0, 2.0, 1.0, 0.0, 1.0]).unwrap());
        let y = tape.max_pool_set(x).unwrap();
        let w = tape.constant(Tensor::new(2, 1, vec![3.0, -2.0]).unwrap());
        let z = tape.matmul(y, w).unwrap();
        tape.backward(z).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[3.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
        let col_sums = [g.get(0, 0) + g.get(1, 0) + g.get(2, 0), g.get(0, 1) + g.get(1, 1) + g.get(2, 1)];
        assert_eq!(col_sums, [3.0, -2.0]);
    }

    #[test]
    fn segment_pool_zero_fill() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(2, 1, vec![1.0, 4.0]).unwrap());
        assert!(tape.segment_max_pool(x, &[0, 0, 2], false).is_err());
        let y = tape.segment_max_pool(x, &[0, 0, 2], true).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 4.0]);
    }

    #[test]
    fn backward_semantics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(2, 3, vec![1.0; 6]).unwrap());
        let unused = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0, 0.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 6]);
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let bias = tape.leaf(Tensor::zeros(1, 2));
        assert!(tape.bias_add(a, bias).is_err());
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 4, 3);
            let b = random(&mut rng, 3, 5);
            let bias = random(&mut rng, 1, 3);
            let same = random(&mut rng, 4, 3);
            assert_grad(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) }, &[a.clone(), b.clone()]);
            assert_grad(|t, v| { let y = t.bias_add(v[0], v[1])?; weighted_sum(t, y, seed) }, &[a.clone(), bias.clone()]);
            assert_grad(|t, v| { let y = t.relu(v[0]); weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.sigmoid(v[0]); weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.tanh(v[0]); weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.concat(&[v[0], v[1]])?; weighted_sum(t, y, seed) }, &[a.clone(), same.clone()]);
            assert_grad(|t, v| { let y = t.scale(v[0], -1.7); weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| Ok(t.sum(v[0])), &[a.clone()]);
            assert_grad(|t, v| t.mean_squared_norm(v[0]), &[a.clone()]);
            assert_grad(|t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, seed) }, &[a.clone(), same.clone()]);
            assert_grad(|t, v| { let y = t.sub(v[0], v[1])?; t.mean_squared_norm(y) }, &[a.clone(), same.clone()]);
            assert_grad(|t, v| { let y = t.normalize_rows(v[0])?; weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.slice_cols(v[0], 1, 3)?; weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.gather_rows(v[0], &[3, 0, 3, 1])?; weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.max_pool_set(v[0])?; weighted_sum(t, y, seed) }, &[a.clone()]);
            assert_grad(|t, v| { let y = t.segment_max_pool(v[0], &[0, 1, 1, 4], true)?; weighted_sum(t, y, seed) }, &[a.clone()]);
        }
    }

    #[test]
    fn deep_mlp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random(&mut rng, 6, 4);
        let params: Vec<Tensor> = [(4, 8), (8, 8), (8, 2)]
            .iter()
            .flat_map(|&(i, o)| [random(&mut rng, i, o), random(&mut rng, 1, o)])
            .collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        assert_grad(
            |t, v| {
                let mut h = v[0];
                for layer in 0..3 {
                    h = t.matmul(h, v[1 + 2 * layer])?;
                    h = t.bias_add(h, v[2 + 2 * layer])?;
                    h = if layer < 2 { t.relu(h) } else { t.tanh(h) };
                }
                t.mean_squared_norm(h)
            },
            &inputs,
        );
    }
}
