//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node to the [`Tape`]; node indices are a
//! topological order by construction, so [`Tape::backward`] is a single
//! reverse sweep. Leaf gradients accumulate across repeated backward calls
//! until [`Tape::zero_grad`].
//!
//! ```
//! use read_pvla::autodiff::Tape;
//! use read_pvla::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0), true);
//! let y = tape.leaf(Tensor::scalar(5.0), true);
//! let z = tape.mul(x, y).unwrap();
//! tape.backward(z).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 5.0);
//! assert_eq!(tape.grad(y).unwrap().item(), 2.0);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative in terms of input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act(Activation, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    RowNormalize(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every node recorded after `len`. Handles past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::dim(op, t.shape(), &[0, 0]));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_matrix("matmul", a)?;
        let (k2, n) = self.expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_matrix("transpose", a)?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.expect_matrix("add_row", x)?;
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.expect_matrix("softmax_rows", x)?;
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= total;
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-row normalization by population variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.expect_matrix("layer_norm", x)?;
        if self.value(gain).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(bias)));
        }
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        if n == 1 && eps == 0.0 {
            return Err(Error::Numeric(
                "layer_norm over a single feature with eps = 0 divides by zero".into(),
            ));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::Numeric(format!(
                    "layer_norm row {i} has zero variance and eps = 0"
                )));
            }
            let s = 1.0 / denom.sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Act(kind, x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.expect_matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[m, len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.expect_matrix("concat_cols", first)?;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.expect_matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            n += pn;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.expect_matrix("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(&[len, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.expect_matrix("concat_rows", first)?;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.expect_matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            m += pm;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over the row (sequence) axis: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.expect_matrix("mean_rows", x)?;
        let src = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let out = Tensor::new(&[1, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.expect_matrix("row_normalize", x)?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = src.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has zero or non-finite norm")));
            }
            norms.push(norm);
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowNormalize(x, norms), rg))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != targets.len() {
            return Err(Error::dim("bce_with_logits", z.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / n);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::BceWithLogits(logits, targets.to_vec()), rg))
    }

    /// Propagates adjoints from a scalar `loss` to every leaf that requires
    /// a gradient; results add onto whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::new(node.value.shape(), g)?);
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let out = node.value.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut adj[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    acc(*a, mm_nt(g, tb.data(), m, n, k));
                }
                if want(*b) {
                    acc(*b, mm_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let da = nodes[a.0].value.data();
                let db = nodes[b.0].value.data();
                if want(*a) {
                    acc(*a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                }
                if want(*b) {
                    acc(*b, g.iter().zip(da).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, bias) => {
                if want(*x) {
                    acc(*x, g.to_vec());
                }
                if want(*bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Affine(x, scale) => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gvals = nodes[gain.0].value.data();
                if want(*x) {
                    let mut d = vec![0.0; g.len()];
                    for i in 0..inv_std.len() {
                        let grow = &g[i * n..(i + 1) * n];
                        let hrow = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gvals).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[i * n + j] = inv_std[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    acc(*x, d);
                }
                if want(*gain) {
                    let mut dg = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, a), b) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += a * b;
                        }
                    }
                    acc(*gain, dg);
                }
                if want(*bias) {
                    let mut db = vec![0.0; n];
                    for grow in g.chunks(n) {
                        for (d, a) in db.iter_mut().zip(grow) {
                            *d += a;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Act(kind, x) => {
                let xin = nodes[x.0].value.data();
                let d = g
                    .iter()
                    .zip(xin)
                    .zip(out)
                    .map(|((gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let src = &nodes[x.0].value;
                let (m, n) = (src.rows(), src.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = nodes[p.0].value.cols();
                    if want(p) {
                        let mut d = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * n + offset..i * n + offset + pn]);
                        }
                        acc(p, d);
                    }
                    offset += pn;
                }
            }
            Op::SliceRows(x, start) => {
                let src = &nodes[x.0].value;
                let n = src.cols();
                let mut d = vec![0.0; src.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if want(p) {
                        acc(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::MeanRows(x) => {
                let src = &nodes[x.0].value;
                let m = src.rows();
                let mut d = Vec::with_capacity(src.numel());
                for _ in 0..m {
                    d.extend(g.iter().map(|v| v / m as f64));
                }
                acc(*x, d);
            }
            Op::RowNormalize(x, norms) => {
                let n = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let grow = &g[i * n..(i + 1) * n];
                    let yrow = &out[i * n..(i + 1) * n];
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = (grow[j] - yrow[j] * dot) / norm;
                    }
                }
                acc(*x, d);
            }
            Op::BceWithLogits(logits, targets) => {
                let z = nodes[logits.0].value.data();
                let n = targets.len() as f64;
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                    .collect();
                acc(*logits, d);
            }
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while perturbing coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative gradient error `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from reporting
/// round-off noise as a large relative error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Magnitude floor used by every gradient check in this crate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    /// Checks backward against central differences for a unary graph builder.
    fn check<F>(x: &Tensor, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&mut tape, xv);
        tape.backward(out).unwrap();
        let analytic = tape.grad(xv).unwrap().clone();
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let v = t.leaf(probe.clone(), false);
                let o = build(&mut t, v);
                Ok(t.value(o).item())
            },
            x,
            H,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = relative_error(*a, *n, GRAD_CHECK_FLOOR);
            assert!(err < TOL, "analytic {a} vs numeric {n} (rel {err})");
        }
    }

    /// Contracts an arbitrary output with fixed random weights so every
    /// entry contributes a distinct adjoint.
    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let p = tape.mul(v, w).unwrap();
        tape.sum(p).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.constant(Tensor::matrix(&[[5.0], [6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);

        let i2 = tape.constant(Tensor::eye(2));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));

        let s1 = tape.constant(Tensor::matrix(&[[2.0]]));
        let s2 = tape.constant(Tensor::matrix(&[[3.0]]));
        let s = tape.matmul(s1, s2).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[
            [1.0, 1.0],
            [0.0, 3f64.ln()],
            [1000.0, 1001.0],
        ]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(1, 0) - 0.25).abs() < 1e-15);
        assert!((v.at(1, 1) - 0.75).abs() < 1e-15);
        // shift-invariance oracle: softmax(x) = softmax(x - max)
        let e = std::f64::consts::E;
        assert!((v.at(2, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((v.at(2, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[[f64::NAN, 0.0]]));
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[[1.0, 3.0]]));
        let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let c = tape.constant(Tensor::matrix(&[[4.0, 4.0, 4.0]]));
        let g3 = tape.constant(Tensor::vector(vec![1.0; 3]));
        let b3 = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let r = tape.constant(rand_tensor(&[3, 5], 11));
        let g5 = tape.constant(Tensor::vector(vec![1.0; 5]));
        let b5 = tape.constant(Tensor::vector(vec![0.0; 5]));
        let y = tape.layer_norm(r, g5, b5, 1e-12).unwrap();
        let v = tape.value(y);
        for i in 0..3 {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_single_feature_without_eps_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[[2.0]]));
        let g = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        // closed form at x = 3
        let t = (GELU_C * (3.0 + GELU_A * 27.0)).tanh();
        let expected = 0.5 * 3.0 * (1.0 + t);
        assert_eq!(gelu(3.0), expected);
        assert!((gelu(3.0) - 2.9964).abs() < 5e-5);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // accumulation on a second call
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| Ok(x.item() * x.item()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
        for h in [1e-1, 1e-3, 1.0] {
            let g = finite_diff_grad(|x| Ok(4.0 * x.item() - 2.0), &Tensor::scalar(0.7), h)
                .unwrap();
            assert!((g.item() - 4.0).abs() < 1e-12);
        }
        let bad = finite_diff_grad(|_| Ok(f64::NAN), &Tensor::scalar(1.0), 1e-5);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_fidelity_of_every_primitive() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[4, 2], 2);
        let sq = rand_tensor(&[3, 4], 3);
        let bias = rand_tensor(&[4], 4);

        check(&a, |t, x| {
            let c = t.constant(b.clone());
            let y = t.matmul(x, c).unwrap();
            weighted_sum(t, y, 10)
        });
        check(&b, |t, x| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, x).unwrap();
            weighted_sum(t, y, 11)
        });
        check(&a, |t, x| {
            let y = t.transpose(x).unwrap();
            weighted_sum(t, y, 12)
        });
        check(&a, |t, x| {
            let c = t.constant(sq.clone());
            let y = t.add(x, c).unwrap();
            let z = t.mul(y, x).unwrap();
            let w = t.sub(z, c).unwrap();
            weighted_sum(t, w, 13)
        });
        check(&a, |t, x| {
            let c = t.constant(bias.clone());
            let y = t.add_row(x, c).unwrap();
            let z = t.mul(y, y).unwrap();
            weighted_sum(t, z, 14)
        });
        check(&bias, |t, x| {
            let c = t.constant(a.clone());
            let y = t.add_row(c, x).unwrap();
            let z = t.mul(y, y).unwrap();
            weighted_sum(t, z, 15)
        });
        check(&a, |t, x| {
            let y = t.affine(x, -1.7, 0.3).unwrap();
            let z = t.mul(y, y).unwrap();
            weighted_sum(t, z, 16)
        });
        check(&a, |t, x| {
            let y = t.softmax_rows(x).unwrap();
            weighted_sum(t, y, 17)
        });
        let (g, bb) = (rand_tensor(&[4], 5), rand_tensor(&[4], 6));
        check(&a, |t, x| {
            let gv = t.constant(g.clone());
            let bv = t.constant(bb.clone());
            let y = t.layer_norm(x, gv, bv, 1e-5).unwrap();
            weighted_sum(t, y, 18)
        });
        check(&g, |t, x| {
            let xv = t.constant(a.clone());
            let bv = t.constant(bb.clone());
            let y = t.layer_norm(xv, x, bv, 1e-5).unwrap();
            weighted_sum(t, y, 19)
        });
        check(&bb, |t, x| {
            let xv = t.constant(a.clone());
            let gv = t.constant(g.clone());
            let y = t.layer_norm(xv, gv, x, 1e-5).unwrap();
            weighted_sum(t, y, 20)
        });
        for (i, kind) in [Activation::Gelu, Activation::Tanh, Activation::Sigmoid, Activation::Relu]
            .into_iter()
            .enumerate()
        {
            check(&a, |t, x| {
                let y = t.activation(kind, x).unwrap();
                weighted_sum(t, y, 30 + i as u64)
            });
        }
        check(&a, |t, x| {
            let l = t.slice_cols(x, 1, 2).unwrap();
            let r = t.slice_cols(x, 0, 1).unwrap();
            let y = t.concat_cols(&[l, r, l]).unwrap();
            weighted_sum(t, y, 40)
        });
        check(&a, |t, x| {
            let top = t.slice_rows(x, 0, 1).unwrap();
            let rest = t.slice_rows(x, 1, 2).unwrap();
            let y = t.concat_rows(&[rest, top, top]).unwrap();
            weighted_sum(t, y, 41)
        });
        check(&a, |t, x| {
            let y = t.mean_rows(x).unwrap();
            weighted_sum(t, y, 42)
        });
        check(&a, |t, x| {
            let y = t.row_normalize(x).unwrap();
            weighted_sum(t, y, 43)
        });
        check(&a, |t, x| {
            let m = t.mean(x).unwrap();
            let s = t.mul(m, m).unwrap();
            t.sum(s).unwrap()
        });
        let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        check(&a, |t, x| t.bce_with_logits(x, &targets).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = rand_tensor(&[4, 6], 9).map(|v| 5.0 * v);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let shifted = tape.affine(xv, 1.0, 123.25).unwrap();
        let y = tape.softmax_rows(xv).unwrap();
        let ys = tape.softmax_rows(shifted).unwrap();
        let (y, ys) = (tape.value(y).clone(), tape.value(ys).clone());
        for i in 0..4 {
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&ys) < 1e-12);
    }

    #[test]
    fn determinism_is_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[3, 4], 21), true);
            let w = tape.leaf(rand_tensor(&[4, 4], 22), true);
            let y = tape.matmul(x, w).unwrap();
            let y = tape.gelu(y).unwrap();
            let y = tape.softmax_rows(y).unwrap();
            let l = weighted_sum(&mut tape, y, 23);
            tape.backward(l).unwrap();
            (tape.value(l).clone(), tape.grad(w).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.bitwise_eq(&l2));
        assert!(g1.bitwise_eq(&g2));
    }
}
