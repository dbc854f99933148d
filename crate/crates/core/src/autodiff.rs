//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in execution order, so the
//! tape is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse and deposits gradients on the leaves that asked for them. Input
//! buffers are never mutated by an operation.
//!
//! Broadcasting is limited to scalar-with-tensor (`add`, `sub`, `mul`) and
//! row-vector broadcasting over the last axis (`add_row`, `mul_row`).

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_rank2, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row planar rotations applied to column pairs `(2p, 2p+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationTable<F> {
    rows: usize,
    pairs: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RotationTable<F> {
    /// `angles` is row-major `[rows × pairs]`.
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != rows * pairs {
            return Err(Error::Shape {
                op: "rotation_table",
                detail: format!("expected {} angles, got {}", rows * pairs, angles.len()),
            });
        }
        Ok(Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| F::of(Float::cos(*a))).collect(),
            sin: angles.iter().map(|a| F::of(Float::sin(*a))).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn cos_sin(&self, row: usize, pair: usize) -> (F, F) {
        let i = row * self.pairs + pair;
        (self.cos[i], self.sin[i])
    }

    /// Rotates a row-major `[rows × cols]` buffer; `inverse` applies the transpose.
    pub fn apply(&self, x: &[F], cols: usize, inverse: bool) -> Vec<F> {
        let mut out = x.to_vec();
        for r in 0..self.rows {
            for p in 0..self.pairs {
                let (c, mut s) = self.cos_sin(r, p);
                if inverse {
                    s = -s;
                }
                let i = r * cols + 2 * p;
                let (x0, x1) = (x[i], x[i + 1]);
                out[i] = x0 * c - x1 * s;
                out[i + 1] = x0 * s + x1 * c;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        normed: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rotate {
        x: Var,
        table: Arc<RotationTable<F>>,
    },
    GatherRow {
        table: Var,
        row: usize,
    },
}

impl<F> Op<F> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Rotate { .. } => "rotate",
            Op::GatherRow { .. } => "gather_row",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recording of primitive applications in execution order.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation, evaluated as `x·σ(2z)` since
/// `(1 + tanh z)/2 = σ(2z)`; one `exp` is much cheaper than `tanh`.
pub fn gelu<F: Scalar>(x: F) -> F {
    x * gate(x)
}

fn gate<F: Scalar>(x: F) -> F {
    let z = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    F::one() / (F::one() + (-(z + z)).exp())
}

/// Exact derivative of [`gelu`].
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let s = gate(x);
    let two = F::of(2.0);
    s + two * x * s * (F::one() - s) * c * (F::one() + F::of(3.0) * k * x * x)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sequence of op tags in recording order.
    pub fn record(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, absent unless it requires grad and
    /// `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.tag() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        check_rank2(op, &self.nodes[v.0].value)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_nt", a)?;
        let (n, k2) = self.mat_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            F::zero(),
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else if vb.len() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.len() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(self.mismatch(op.tag(), a, b));
        };
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    fn row_broadcast(&mut self, a: Var, r: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let va = self.value(a);
        let vr = self.value(r);
        let (_, cols) = va.as_matrix();
        if vr.len() != cols {
            return Err(self.mismatch(op.tag(), a, r));
        }
        let rd = vr.data();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(cols) {
            data.extend(row.iter().zip(rd).map(|(&x, &r)| f(x, r)));
        }
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, &[a, r])
    }

    /// Adds a row vector to every row of `a` (last-axis broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x <= F::zero()) {
            return Err(Error::Domain {
                op: "log",
                value: bad.as_f64(),
            });
        }
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x < F::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                value: bad.as_f64(),
            });
        }
        let out = self.value(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mut mx = F::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut total = F::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalisation over the last axis with optional affine gain/bias
    /// (row vectors of the last-axis length).
    pub fn layernorm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::Param(format!("layernorm eps must be > 0, got {eps}")));
        }
        let v = self.value(x);
        let (rows, cols) = v.as_matrix();
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != cols {
                return Err(self.mismatch("layernorm", x, p));
            }
        }
        let src = v.data();
        let n = F::of(cols as f64);
        let mut normed = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(F::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                normed[r * cols + c] = (row[c] - mean) * rs;
            }
        }
        let mut out = normed.clone();
        if let Some(g) = gain {
            let gd = self.value(g).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o * gd[i % cols]);
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o + bd[i % cols]);
        }
        let out = Tensor::new(v.shape(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &inputs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / F::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {cols}", start + len),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            detail: "nothing to concatenate".into(),
        })?;
        let (rows, _) = self.mat_dims("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.mat_dims("concat_cols", p)?;
            if r != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Applies the per-row rotations of `table` to the leading column pairs of `x`.
    pub fn rotate(&mut self, x: Var, table: Arc<RotationTable<F>>) -> Result<Var> {
        let (rows, cols) = self.mat_dims("rotate", x)?;
        if table.rows != rows || 2 * table.pairs > cols {
            return Err(Error::Shape {
                op: "rotate",
                detail: format!(
                    "table {}×{} pairs does not fit input {rows}×{cols}",
                    table.rows, table.pairs
                ),
            });
        }
        let out = table.apply(self.value(x).data(), cols, false);
        let out = Tensor::new(&[rows, cols], out)?;
        self.push(out, Op::Rotate { x, table }, &[x])
    }

    /// Selects one row of a `[rows × d]` table as a `[1 × d]` tensor.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims("gather_row", table)?;
        if row >= rows {
            return Err(Error::Index { index: row, len: rows });
        }
        let src = &self.value(table).data()[row * cols..(row + 1) * cols];
        let out = Tensor::new(&[1, cols], src.to_vec())?;
        self.push(out, Op::GatherRow { table, row }, &[table])
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(e, d)| *e = *e + *d),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for n in &self.nodes {
            if let Some(gr) = &n.grad {
                if !gr.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Gradient buffer for an input, allocated on first touch.
        fn slot<'a, F: Scalar>(adj: &'a mut [Option<Vec<F>>], v: Var, len: usize) -> &'a mut Vec<F> {
            adj[v.0].get_or_insert_with(|| vec![F::zero(); len])
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let data_of = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix();
                let n = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let da = slot(adj, *a, m * k);
                    let bd = data_of(*b);
                    F::gemm(m, n, k, g, n as isize, 1, bd, 1, n as isize, F::one(), da);
                }
                if wants(*b) {
                    let db = slot(adj, *b, k * n);
                    let ad = data_of(*a);
                    F::gemm(k, m, n, ad, 1, k as isize, g, n as isize, 1, F::one(), db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix();
                let n = self.nodes[b.0].value.shape()[0];
                if wants(*a) {
                    let da = slot(adj, *a, m * k);
                    let bd = data_of(*b);
                    F::gemm(m, n, k, g, n as isize, 1, bd, k as isize, 1, F::one(), da);
                }
                if wants(*b) {
                    let db = slot(adj, *b, n * k);
                    let ad = data_of(*a);
                    F::gemm(n, m, k, g, 1, n as isize, ad, k as isize, 1, F::one(), db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                for (v, s) in [(*a, F::one()), (*b, sign)] {
                    if !wants(v) {
                        continue;
                    }
                    let n = len_of(v);
                    let d = slot(adj, v, n);
                    if n == g.len() {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + s * g);
                    } else {
                        d[0] = d[0] + s * g.iter().fold(F::zero(), |acc, &x| acc + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let n = len_of(v);
                    let od = data_of(other);
                    let d = slot(adj, v, n);
                    if n == g.len() {
                        if od.len() == 1 {
                            d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * od[0]);
                        } else {
                            d.iter_mut()
                                .zip(g.iter().zip(od))
                                .for_each(|(d, (&g, &o))| *d = *d + g * o);
                        }
                    } else {
                        let s = g.iter().zip(od).fold(F::zero(), |acc, (&g, &o)| acc + g * o);
                        d[0] = d[0] + s;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let d = slot(adj, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    let d = slot(adj, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let cols = len_of(*r);
                let ad = data_of(*a);
                let rd = data_of(*r);
                if wants(*a) {
                    let d = slot(adj, *a, g.len());
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(cols)) {
                        if is_mul {
                            for ((d, &g), &r) in drow.iter_mut().zip(grow).zip(rd) {
                                *d = *d + g * r;
                            }
                        } else {
                            drow.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                }
                if wants(*r) {
                    let d = slot(adj, *r, cols);
                    for (arow, grow) in ad.chunks(cols).zip(g.chunks(cols)) {
                        if is_mul {
                            for ((d, &g), &a) in d.iter_mut().zip(grow).zip(arow) {
                                *d = *d + g * a;
                            }
                        } else {
                            d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                }
            }
            Op::Gelu(a) | Op::Exp(a) | Op::Log(a) | Op::Sqrt(a) => {
                if !wants(*a) {
                    return;
                }
                let x = data_of(*a);
                let op = &node.op;
                let d = slot(adj, *a, g.len());
                let two = F::of(2.0);
                for i in 0..g.len() {
                    let local = match op {
                        Op::Gelu(_) => gelu_grad(x[i]),
                        Op::Exp(_) => out[i],
                        Op::Log(_) => F::one() / x[i],
                        _ => F::one() / (two * out[i]),
                    };
                    d[i] = d[i] + g[i] * local;
                }
            }
            Op::Softmax { x, axis } => {
                if !wants(*x) {
                    return;
                }
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("checked in forward");
                let d = slot(adj, *x, g.len());
                if inner == 1 {
                    for ((d, g), y) in d.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                        let dot = g.iter().zip(y).fold(F::zero(), |acc, (&g, &y)| acc + g * y);
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d = *d + y * (g - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot = (0..len).fold(F::zero(), |acc, l| acc + g[at(l)] * out[at(l)]);
                        for l in 0..len {
                            let j = at(l);
                            d[j] = d[j] + out[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let (rows, cols) = node.value.as_matrix();
                if let Some(b) = bias {
                    if wants(*b) {
                        let d = slot(adj, *b, cols);
                        g.iter().enumerate().for_each(|(i, &gv)| d[i % cols] = d[i % cols] + gv);
                    }
                }
                if let Some(gn) = gain {
                    if wants(*gn) {
                        let d = slot(adj, *gn, cols);
                        g.iter()
                            .zip(normed)
                            .enumerate()
                            .for_each(|(i, (&gv, &nv))| d[i % cols] = d[i % cols] + gv * nv);
                    }
                }
                if wants(*x) {
                    let gd = gain.map(|gn| data_of(gn));
                    let n = F::of(cols as f64);
                    let d = slot(adj, *x, g.len());
                    let mut dn = vec![F::zero(); cols];
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            dn[c] = match gd {
                                Some(gd) => g[base + c] * gd[c],
                                None => g[base + c],
                            };
                        }
                        let mean_dn = dn.iter().fold(F::zero(), |a, &b| a + b) / n;
                        let mean_dnx = dn
                            .iter()
                            .zip(&normed[base..base + cols])
                            .fold(F::zero(), |a, (&p, &q)| a + p * q)
                            / n;
                        for c in 0..cols {
                            d[base + c] = d[base + c] + rstd[r] * (dn[c] - mean_dn - normed[base + c] * mean_dnx);
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if !wants(*a) {
                    return;
                }
                let n = len_of(*a);
                let gv = if matches!(node.op, Op::Mean(_)) {
                    g[0] / F::of(n as f64)
                } else {
                    g[0]
                };
                let d = slot(adj, *a, n);
                d.iter_mut().for_each(|d| *d = *d + gv);
            }
            Op::SliceCols { x, start } => {
                if !wants(*x) {
                    return;
                }
                let (rows, cols) = self.nodes[x.0].value.as_matrix();
                let w = node.value.shape()[1];
                let d = slot(adj, *x, rows * cols);
                for r in 0..rows {
                    for c in 0..w {
                        let j = r * cols + start + c;
                        d[j] = d[j] + g[r * w + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let d = slot(adj, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] = d[r * w + c] + g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Rotate { x, table } => {
                if !wants(*x) {
                    return;
                }
                let cols = node.value.shape()[1];
                let back = table.apply(g, cols, true);
                let d = slot(adj, *x, g.len());
                d.iter_mut().zip(back).for_each(|(d, b)| *d = *d + b);
            }
            Op::GatherRow { table, row } => {
                if !wants(*table) {
                    return;
                }
                let n = len_of(*table);
                let cols = g.len();
                let d = slot(adj, *table, n);
                for c in 0..cols {
                    d[row * cols + c] = d[row * cols + c] + g[c];
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "softmax",
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
