//! Tape-based reverse-mode differentiation over rank-2 values.
//!
//! Every value recorded on a [`Graph`] is a matrix (rank-1 inputs are read as a
//! single row). Forward ops push a node; [`Graph::backward`] walks the tape in
//! reverse and [`Graph::accumulate_param_grads`] adds leaf gradients into the
//! owning [`ParamStore`]. Accumulation is additive: callers zero gradients between
//! optimizer steps.

use std::collections::HashMap;

use super::{NumericsError, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, indices: Vec<usize> },
    Reshape(Var),
    Sqrt(Var),
    Log(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

// a: m x k, b: k x n
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a: m x k, b: n x k  ->  a * b^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a: k x m, b: k x n  ->  a^T * b
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// How the right-hand operand of a binary op is broadcast over the left.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Full,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Full => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }
}

fn broadcast_kind(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<Broadcast, NumericsError> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let kind = if (br, bc) == (ar, ac) {
        Broadcast::Full
    } else if (br, bc) == (1, 1) {
        Broadcast::Scalar
    } else if br == 1 && bc == ac {
        Broadcast::Row
    } else if bc == 1 && br == ar {
        Broadcast::Col
    } else {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    Ok(kind)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let value = if value.rank() == 2 {
            value
        } else {
            let (r, c) = value.dims2();
            value.reshaped(&[r, c]).expect("rank-2 view")
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is kept on the tape (readable via [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The current value of a stored parameter. Repeated calls within one graph
    /// return the same node so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.set_requires_grad(false);
        let v = self.push(value, Op::Param, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = transpose_data(self.value(x).data(), r, c);
        let needs = self.needs(x);
        self.push(mat(c, r, out), Op::Transpose(x), needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let kind = broadcast_kind(name, self.value(a), self.value(b))?;
        let (rows, cols) = self.shape(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                out[i] = f(av[i], bv[kind.index(r, c, cols)]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(mat(rows, cols, out), op, needs))
    }

    /// `a + b`, where `b` may also be a `1 x c` row, an `r x 1` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise `a * b` with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v * k).collect();
        let needs = self.needs(x);
        self.push(mat(r, c, out), Op::Scale(x, k), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::OutOfRange {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        if axis > 1 {
            return Err(NumericsError::InvalidAxis { op: "concat", axis, rank: 2 });
        }
        let (r0, c0) = self.shape(inputs[0]);
        for &v in &inputs[1..] {
            let (r, c) = self.shape(v);
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
        }
        let (rows, cols, data) = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
                rows += self.shape(v).0;
            }
            (rows, c0, data)
        } else {
            let cols: usize = inputs.iter().map(|&v| self.shape(v).1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row_slice(r));
                }
            }
            (r0, cols, data)
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            mat(rows, cols, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(x);
        if axis > 1 {
            return Err(NumericsError::InvalidAxis { op: "slice", axis, rank: 2 });
        }
        let extent = if axis == 0 { rows } else { cols };
        if len == 0 || start + len > extent {
            return Err(NumericsError::OutOfRange {
                op: "slice",
                detail: format!("[{start}, {}) of axis {axis} with size {extent}", start + len),
            });
        }
        let src = self.value(x).data();
        let (orows, ocols, data) = if axis == 0 {
            (len, cols, src[start * cols..(start + len) * cols].to_vec())
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
            (rows, len, data)
        };
        let needs = self.needs(x);
        Ok(self.push(mat(orows, ocols, data), Op::Slice { x, axis, start }, needs))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var, NumericsError> {
        self.slice(x, 0, r, 1)
    }

    /// Mean over `axis`: axis 0 gives a `1 x c` row, axis 1 an `r x 1` column.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(x);
        let src = self.value(x).data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= rows as f64);
                mat(1, cols, out)
            }
            1 => {
                let out = (0..rows)
                    .map(|r| src[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
                    .collect();
                mat(rows, 1, out)
            }
            _ => return Err(NumericsError::InvalidAxis { op: "mean", axis, rank: 2 }),
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Mean { x, axis }, needs))
    }

    /// Sum of every entry, as a `1 x 1` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Softmax over the last axis (per row).
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(
                &src[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let needs = self.needs(x);
        self.push(mat(rows, cols, out), Op::Softmax(x), needs)
    }

    /// Per-row layer normalization with learnable `gain` and `bias` (each `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(x);
        for v in [gain, bias] {
            let s = self.shape(v);
            if s != (1, cols) {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![rows, cols],
                    rhs: vec![s.0, s.1],
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mu) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            mat(rows, cols, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(x);
        self.push(mat(r, c, out), Op::Gelu(x), needs)
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(table);
        if indices.is_empty() {
            return Err(NumericsError::OutOfRange {
                op: "gather",
                detail: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::OutOfRange {
                op: "gather",
                detail: format!("index {bad} for table with {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            mat(indices.len(), cols, data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let t = self.value(x).reshaped(&[rows, cols])?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let needs = self.needs(x);
        self.push(mat(r, c, out), Op::Sqrt(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v.ln()).collect();
        let needs = self.needs(x);
        self.push(mat(r, c, out), Op::Log(x), needs)
    }

    /// Runs reverse accumulation from the scalar `loss`. Gradients of every node
    /// are kept until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar {
                shape: vec![shape.0, shape.1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let (rows, cols) = dims(&nodes[idx].value);
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(g) => {
                    for (a, d) in g.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                None => grads[v.0] = Some(delta),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = cols;
                if nodes[a.0].needs_grad {
                    acc(*a, matmul_nt(dy, val(*b), m, n, k));
                }
                if nodes[b.0].needs_grad {
                    acc(*b, matmul_tn(val(*a), dy, m, k, n));
                }
            }
            Op::Transpose(x) => acc(*x, transpose_data(dy, rows, cols)),
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let kind = broadcast_kind("backward", &nodes[a.0].value, &nodes[b.0].value)
                    .expect("validated in forward");
                let av = val(*a);
                let bv = val(*b);
                let mut da = vec![0.0; rows * cols];
                let mut db = vec![0.0; nodes[b.0].value.numel()];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let j = kind.index(r, c, cols);
                        let (ga, gb) = match &nodes[idx].op {
                            Op::Add(..) => (dy[i], dy[i]),
                            Op::Mul(..) => (dy[i] * bv[j], dy[i] * av[i]),
                            _ => (dy[i] / bv[j], -dy[i] * av[i] / (bv[j] * bv[j])),
                        };
                        da[i] = ga;
                        db[j] += gb;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(x, k) => acc(*x, dy.iter().map(|v| v * k).collect()),
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = nodes[v.0].value.numel();
                        acc(v, dy[offset..offset + n].to_vec());
                        offset += n;
                    }
                } else {
                    let mut col0 = 0;
                    for &v in inputs {
                        let (_, c) = dims(&nodes[v.0].value);
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&dy[r * cols + col0..r * cols + col0 + c]);
                        }
                        acc(v, d);
                        col0 += c;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (xr, xc) = dims(&nodes[x.0].value);
                let mut d = vec![0.0; xr * xc];
                if *axis == 0 {
                    d[start * xc..(start + rows) * xc].copy_from_slice(dy);
                } else {
                    for r in 0..xr {
                        d[r * xc + start..r * xc + start + cols]
                            .copy_from_slice(&dy[r * cols..(r + 1) * cols]);
                    }
                }
                acc(*x, d);
            }
            Op::Mean { x, axis } => {
                let (xr, xc) = dims(&nodes[x.0].value);
                let mut d = vec![0.0; xr * xc];
                for r in 0..xr {
                    for c in 0..xc {
                        d[r * xc + c] = if *axis == 0 {
                            dy[c] / xr as f64
                        } else {
                            dy[r] / xc as f64
                        };
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, vec![dy[0]; nodes[x.0].value.numel()]),
            Op::Softmax(x) => {
                let y = nodes[idx].value.data();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = y[s.clone()].iter().zip(&dy[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        d[i] = y[i] * (dy[i] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = val(*gain);
                if nodes[gain.0].needs_grad || nodes[bias.0].needs_grad {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += dy[r * cols + c] * xhat[r * cols + c];
                            db[c] += dy[r * cols + c];
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                if nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = dy[r * cols + c] * g[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * cols + c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for c in 0..cols {
                            let i = r * cols + c;
                            let dh = dy[i] * g[c];
                            dx[i] = rstd[r] * (dh - mean_dh - xhat[i] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, dy.iter().zip(xv).map(|(d, &v)| d * gelu_grad(v)).collect());
            }
            Op::Gather { table, indices } => {
                let (tr, tc) = dims(&nodes[table.0].value);
                let mut d = vec![0.0; tr * tc];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..tc {
                        d[i * tc + c] += dy[row * tc + c];
                    }
                }
                acc(*table, d);
            }
            Op::Reshape(x) => acc(*x, dy.to_vec()),
            Op::Sqrt(x) => {
                let y = nodes[idx].value.data();
                acc(*x, dy.iter().zip(y).map(|(d, s)| d * 0.5 / s).collect());
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, dy.iter().zip(xv).map(|(d, v)| d / v).collect());
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter-leaf gradients into the store. Frozen parameters are skipped.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.param_vars {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if let Some(g) = self.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// `backward` followed by `accumulate_param_grads`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }
}
