//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends a node holding its value and the ids of its
//! parents. Nodes are only ever appended, so parents always precede their
//! children and the backward sweep is a single reverse pass over the node
//! list.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// (n, d) + (1, d)
    AddRow(Var, Var),
    /// (1, d) -> (n, d)
    BroadcastRows(Var),
    Tanh(Var),
    Mish(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; exact zeros if `v` was not
    /// reached.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        detail: format!("{shapes:?}"),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

/// Row-wise softmax of `x * inv_t` over the trailing dimension.
pub(crate) fn softmax_rows(x: &Tensor, inv_t: f64) -> Tensor {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv_t));
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v * inv_t - m).exp();
            z += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_rows(x: &Tensor, inv_t: f64) -> Tensor {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv_t));
        let lse = m + row.iter().map(|&v| (v * inv_t - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v * inv_t - lse));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `c = op(a) · op(b)` for row-major matrices, with optional transposition
/// of either operand.
///
/// Each output element accumulates its products in a fixed order that does
/// not depend on how many rows the operands have, so a row's result is the
/// same whether it is evaluated alone or inside a larger batch.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let ci = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    for (cij, &bpj) in ci.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *cij += aip * bpj;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let ai = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let bj = &bd[j * k..(j + 1) * k];
                    c[i * n + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            for p in 0..ar {
                let ap = &ad[p * ac..(p + 1) * ac];
                let bp = &bd[p * n..(p + 1) * n];
                for (i, &api) in ap.iter().enumerate() {
                    for (cij, &bpj) in c[i * n..(i + 1) * n].iter_mut().zip(bp) {
                        *cij += api * bpj;
                    }
                }
            }
        }
        (true, true) => unreachable!("not needed by any primitive"),
    }
    Tensor::matrix(m, n, c)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let v = gemm(self.value(a), false, self.value(b), false);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `(1, d)` row to every row of an `(n, d)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sa.len() != 2 || sr != [1, sa[1]] {
            return Err(shape_err("add_row", &[sa, sr]));
        }
        let cols = sa[1];
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Repeats a `(1, d)` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let sr = self.shape(row);
        if sr.len() != 2 || sr[0] != 1 {
            return Err(shape_err("broadcast_rows", &[sr]));
        }
        let r = self.value(row).data().to_vec();
        let d = r.len();
        let data = r.iter().copied().cycle().take(n * d).collect();
        Ok(self.push(Tensor::matrix(n, d, data), Op::BroadcastRows(row)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `x · tanh(softplus(x))`.
    pub fn mish(&mut self, a: Var) -> Var {
        let v = self.value(a).map(mish);
        self.push(v, Op::Mish(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = x.map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// Sum over the trailing dimension: `(n, d) -> (n, 1)`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let sums: Vec<f64> = x
            .data()
            .chunks(cols.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let n = sums.len();
        self.push(Tensor::matrix(n, 1, sums), Op::RowSum(a))
    }

    /// Row-wise softmax of `a · inv_temperature`.
    pub fn softmax(&mut self, a: Var, inv_temperature: f64) -> Result<Var> {
        if !(inv_temperature > 0.0) {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("1/T = {inv_temperature}"),
            });
        }
        let v = softmax_rows(self.value(a), inv_temperature);
        Ok(self.push(v, Op::Softmax(a, inv_temperature)))
    }

    pub fn log_softmax(&mut self, a: Var, inv_temperature: f64) -> Result<Var> {
        if !(inv_temperature > 0.0) {
            return Err(Error::Domain {
                op: "log_softmax",
                detail: format!("1/T = {inv_temperature}"),
            });
        }
        let v = log_softmax_rows(self.value(a), inv_temperature);
        Ok(self.push(v, Op::LogSoftmax(a, inv_temperature)))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                let shapes: Vec<_> = parts.iter().map(|&q| self.shape(q).to_vec()).collect();
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{shapes:?}"),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, data),
            Op::Concat(parts.to_vec()),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("{s:?}[.., {start}..{end}]"),
            });
        }
        let x = self.value(a);
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        Ok(self.push(
            Tensor::matrix(rows, end - start, data),
            Op::Slice(a, start, end),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let v = zip_map(self.value(a), self.value(b), f64::min);
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    /// The tape is left untouched, so repeated calls give identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                accumulate(grads, *a, gemm(g, false, val(*b), true));
                accumulate(grads, *b, gemm(val(*a), true, g, false));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::BroadcastRows(row) => accumulate(grads, *row, column_sums(g)),
            Op::Tanh(a) => {
                accumulate(grads, *a, zip_map(g, &node.value, |x, y| x * (1.0 - y * y)));
            }
            Op::Mish(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, y| x * mish_grad(y))),
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, &node.value, |x, y| x * y)),
            Op::Log(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Square(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = g.item() / x.len() as f64;
                accumulate(grads, *a, Tensor::full(x.shape(), s));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let cols = x.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, cols))
                    .collect();
                accumulate(
                    grads,
                    *a,
                    Tensor::new(x.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Softmax(a, inv_t) => {
                let p = &node.value;
                let cols = p.cols();
                let mut out = Vec::with_capacity(p.len());
                for (pr, gr) in p.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    out.extend(pr.iter().zip(gr).map(|(&pi, &gi)| inv_t * pi * (gi - dot)));
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(p.shape().to_vec(), out).expect("shape"),
                );
            }
            Op::LogSoftmax(a, inv_t) => {
                let y = &node.value;
                let cols = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let gs: f64 = gr.iter().sum();
                    out.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yi, &gi)| inv_t * (gi - yi.exp() * gs)),
                    );
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(y.shape().to_vec(), out).expect("shape"),
                );
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                    }
                    accumulate(grads, p, Tensor::matrix(rows, c, data));
                    offset += c;
                }
            }
            Op::Slice(a, start, end) => {
                let x = val(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut full = vec![0.0; rows * cols];
                for r in 0..rows {
                    full[r * cols + start..r * cols + end].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *a, Tensor::matrix(rows, cols, full));
            }
            Op::Reshape(a) => {
                let s = val(*a).shape().to_vec();
                accumulate(grads, *a, g.clone().reshaped(s).expect("reshape back"));
            }
            Op::Clamp(a, lo, hi) => {
                let out = zip_map(
                    g,
                    val(*a),
                    |gi, x| if x > *lo && x < *hi { gi } else { 0.0 },
                );
                accumulate(grads, *a, out);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&gi, (&x, &y))| if x <= y { gi } else { 0.0 })
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&gi, (&x, &y))| if x <= y { 0.0 } else { gi })
                    .collect();
                accumulate(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), ga).expect("shape"),
                );
                accumulate(
                    grads,
                    *b,
                    Tensor::new(g.shape().to_vec(), gb).expect("shape"),
                );
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut s = vec![0.0; cols];
    for row in g.data().chunks(cols) {
        for (acc, x) in s.iter_mut().zip(row) {
            *acc += x;
        }
    }
    Tensor::matrix(1, cols, s)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}
