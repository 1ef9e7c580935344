//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably and records every operation
//! as a node in an arena. Parameters enter the tape by reference, so building
//! a graph never copies weights. [`Tape::backward`] walks the arena in reverse
//! and returns a [`Gradients`] map that the caller folds back into the store.
//!
//! Broadcasting is limited to per-row bias addition (`add_row`) and the affine
//! part of `layer_norm`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::loss::{self, AlignmentVariant};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    LogSoftmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    GatherRows { x: Var, rows: Vec<Option<usize>> },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    DepthwiseConv { x: Var, w: Var, left: usize, out_start: usize },
    PairAdd(Var, Var),
    HeadMix { v: Var, q: Var, groups: usize, splits: usize, scale: f64 },
    LogAddExp(Var, Var),
    SpreadPenalty(Var),
    TransducerNll { lattice: Var, grad: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    grad_enabled: bool,
    check_finite: bool,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to an arbitrary node, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` with `-inf` absorbing.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Naive row-major matrix product; each output element sums over `k` in order,
/// so a row's result does not depend on how many rows are computed together.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: false,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        let mut t = Self::new(store);
        t.grad_enabled = false;
        t
    }

    /// Enables the post-op sweep for NaN and `+inf`. `-inf` is a legitimate
    /// log-probability and passes.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && data.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; gradients flow to it when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(tensor.into_data()),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?))
    }

    /// Brings a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.grad_enabled && t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("log_add_exp", a, b, log_add_exp, Op::LogAddExp(a, b))
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Max-subtracted log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} out of range for rank {}", shape.len())));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::invalid("log_softmax", "empty axis"));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let m = (0..n).map(|k| xv[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|k| (xv[base + k * inner] - m).exp()).sum();
                let lse = m + s.ln();
                for k in 0..n {
                    out[base + k * inner] = xv[base + k * inner] - lse;
                }
            }
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Row-wise softmax over the entries where `mask` is true; masked entries are 0.
    /// Every row must have at least one visible entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if mask.len() != r * c {
            return Err(shape_err("masked_softmax", self.shape(x), &[mask.len()]));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(mrow)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::invalid("masked_softmax", format!("row {i} has no visible entries")));
            }
            let mut s = 0.0;
            for j in 0..c {
                if mrow[j] {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        self.push("masked_softmax", shape, out, Op::MaskedSoftmax(x), &[x])
    }

    /// Normalises the last dimension to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, rstd }, &[x, gain, bias])
    }

    /// Gathers rows of a matrix; `None` yields a zero row that receives no gradient.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows requested"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows.len() * c];
        for (k, row) in rows.iter().enumerate() {
            if let Some(i) = *row {
                if i >= r {
                    return Err(Error::invalid("gather_rows", format!("row {i} out of range for {r} rows")));
                }
                out[k * c..(k + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        self.push("gather_rows", vec![rows.len(), c], out, Op::GatherRows { x, rows }, &[x])
    }

    /// Row lookup into an embedding table `[V x D]`; repeated ids accumulate gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, _) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    /// Picks scalars at flat indices; result has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(Error::invalid("gather", "index out of range"));
        }
        let out = idx.iter().map(|&i| xv[i]).collect();
        self.push("gather", vec![idx.len()], out, Op::Gather { x, idx }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x);
        let out = (0..r).flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push("slice_cols", vec![r, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = dims2(self.shape(parts[0])).0;
        let mut c = 0;
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p));
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            c += pc;
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = dims2(self.shape(p)).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.push("concat_cols", vec![r, c], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if len == 0 || start + len > r {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", vec![len, c], out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let c = dims2(self.shape(parts[0])).1;
        let mut out = Vec::new();
        for &p in parts {
            if dims2(self.shape(p)).1 != c {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let r = out.len() / c;
        self.push("concat_rows", vec![r, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    /// Depthwise 1-D convolution over the rows of `x [n x C]` with kernel
    /// `w [K x C]`. Output row `r` corresponds to input row `i = out_start + r`
    /// and equals `sum_k w[k] * x[i - left + k]`, skipping rows outside `x`.
    /// `left = K - 1` gives a causal convolution.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, left: usize, out_start: usize) -> Result<Var> {
        let (n, c) = dims2(self.shape(x));
        let (k, wc) = dims2(self.shape(w));
        if wc != c || left + 1 > k || out_start >= n {
            return Err(shape_err("depthwise_conv", self.shape(x), self.shape(w)));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let rows = n - out_start;
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let i = out_start + r;
            for kk in 0..k {
                let src = i as isize - left as isize + kk as isize;
                if src < 0 || src as usize >= n {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    out[r * c + ch] += wv[kk * c + ch] * xv[s * c + ch];
                }
            }
        }
        self.push(
            "depthwise_conv",
            vec![rows, c],
            out,
            Op::DepthwiseConv { x, w, left, out_start },
            &[x, w],
        )
    }

    /// Row `(i * p + j)` of the result is `a[i] + b[j]` for `a [m x n]`, `b [p x n]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        let (p, nb) = dims2(self.shape(b));
        if n != nb {
            return Err(shape_err("pair_add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * p * n);
        for i in 0..m {
            for j in 0..p {
                out.extend(av[i * n..(i + 1) * n].iter().zip(&bv[j * n..(j + 1) * n]).map(|(x, y)| x + y));
            }
        }
        self.push("pair_add", vec![m * p, n], out, Op::PairAdd(a, b), &[a, b])
    }

    /// Dot-product weighted context mixing used by the reduced n-gram networks.
    ///
    /// `v` holds `W` windows of `ctx` context embeddings (`[W*ctx x D]`), `q`
    /// holds `groups` sets of `ctx` positional vectors (`[groups*ctx x D]`).
    /// The embedding dimension is cut into `splits` equal segments. For window
    /// `w`, position `n` and segment `m`, the weight is
    /// `a = sum_h <v[w,n](m), q[h,n](m)>`, and the output segment is
    /// `scale * sum_n a * v[w,n](m)`. Result shape `[W x D]`.
    pub fn head_mix(&mut self, v: Var, q: Var, groups: usize, splits: usize, scale: f64) -> Result<Var> {
        let (vr, d) = dims2(self.shape(v));
        let (qr, qd) = dims2(self.shape(q));
        if qd != d || groups == 0 || qr % groups != 0 || splits == 0 || d % splits != 0 {
            return Err(shape_err("head_mix", self.shape(v), self.shape(q)));
        }
        let ctx = qr / groups;
        if vr % ctx != 0 {
            return Err(shape_err("head_mix", self.shape(v), self.shape(q)));
        }
        let windows = vr / ctx;
        let seg = d / splits;
        let (vv, qv) = (self.value(v), self.value(q));
        let mut out = vec![0.0; windows * d];
        for w in 0..windows {
            for n in 0..ctx {
                let vrow = &vv[(w * ctx + n) * d..(w * ctx + n + 1) * d];
                for m in 0..splits {
                    let range = m * seg..(m + 1) * seg;
                    let mut a = 0.0;
                    for h in 0..groups {
                        let qrow = &qv[(h * ctx + n) * d..(h * ctx + n + 1) * d];
                        a += vrow[range.clone()].iter().zip(&qrow[range.clone()]).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let orow = &mut out[w * d..(w + 1) * d];
                    for j in range {
                        orow[j] += a * vrow[j];
                    }
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= scale);
        self.push(
            "head_mix",
            vec![windows, d],
            out,
            Op::HeadMix { v, q, groups, splits, scale },
            &[v, q],
        )
    }

    /// `sum_v ||E_v - mean(E)||^2` over the rows of `e`.
    pub fn spread_penalty(&mut self, e: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(e));
        let value = crate::pn::spread_penalty_raw(self.value(e), r, c);
        self.push("spread_penalty", vec![1], vec![value], Op::SpreadPenalty(e), &[e])
    }

    /// Transducer negative log-likelihood of a log-probability lattice
    /// `[T' x (U+1) x (V+1)]`. Infeasible alignments return [`Error::InfiniteLoss`].
    pub fn transducer_nll(&mut self, lattice: Var, labels: &[usize], variant: AlignmentVariant) -> Result<Var> {
        let logits = loss::JointLogits::new(self.tensor(lattice))?;
        let out = loss::transducer_loss_with_grad(&logits, labels, variant)?;
        if !out.loss.is_finite() {
            return Err(Error::InfiniteLoss);
        }
        let grad = out.grad.map(Tensor::into_data).unwrap_or_default();
        self.push(
            "transducer_nll",
            vec![1],
            vec![out.loss],
            Op::TransducerNll { lattice, grad },
            &[lattice],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Vec<f64>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, &x)| *d += a_ip * x);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, x), y)| *d += x * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((d, x), y)| *d += x * y));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = self.value(*bias).len();
                acc(*bias, &mut |d| g.chunks(c).for_each(|row| add_into(d, row)));
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, v), &x)| {
                        if x > 0.0 {
                            *d += v
                        }
                    })
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).zip(out).for_each(|((d, v), y)| *d += v * y * (1.0 - y))
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).zip(out).for_each(|((d, v), y)| *d += v * (1.0 - y * y))
            }),
            Op::Silu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, v), &x)| {
                        let s = sigmoid(x);
                        *d += v * (s + x * s * (1.0 - s));
                    })
                });
            }
            Op::LogSoftmax { x, axis } => {
                let shape = &node.shape;
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let gs: f64 = (0..n).map(|k| g[base + k * inner]).sum();
                            for k in 0..n {
                                let p = out[base + k * inner].exp();
                                d[base + k * inner] += g[base + k * inner] - p * gs;
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let (r, c) = dims2(&node.shape);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let p = &out[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] += p[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (r, c) = dims2(&node.shape);
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let xhat: Vec<f64> = (0..r)
                    .flat_map(|i| {
                        let row = &xv[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        row.iter().map(move |v| (v - mean) * rstd[i])
                    })
                    .collect();
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |d| g.chunks(c).for_each(|row| add_into(d, row)));
            }
            Op::GatherRows { x, rows } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (k, row) in rows.iter().enumerate() {
                        if let Some(i) = *row {
                            add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                        }
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |d| {
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g[k];
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SliceCols { x, start } => {
                let (r, len) = dims2(&node.shape);
                let c = dims2(self.shape(*x)).1;
                acc(*x, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, c) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let pc = dims2(self.shape(p)).1;
                    acc(p, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * pc..(i + 1) * pc], &g[i * c + off..i * c + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.shape[1];
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(self.shape(*x));
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::DepthwiseConv { x, w, left, out_start } => {
                let (n, c) = dims2(self.shape(*x));
                let k = dims2(self.shape(*w)).0;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let rows = n - out_start;
                let taps = |r: usize, kk: usize| -> Option<usize> {
                    let src = (out_start + r) as isize - *left as isize + kk as isize;
                    (src >= 0 && (src as usize) < n).then_some(src as usize)
                };
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        for kk in 0..k {
                            if let Some(s) = taps(r, kk) {
                                for ch in 0..c {
                                    d[s * c + ch] += g[r * c + ch] * wv[kk * c + ch];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for r in 0..rows {
                        for kk in 0..k {
                            if let Some(s) = taps(r, kk) {
                                for ch in 0..c {
                                    d[kk * c + ch] += g[r * c + ch] * xv[s * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::PairAdd(a, b) => {
                let (m, n) = dims2(self.shape(*a));
                let p = dims2(self.shape(*b)).0;
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..p {
                            add_into(&mut d[i * n..(i + 1) * n], &g[(i * p + j) * n..(i * p + j + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..p {
                            add_into(&mut d[j * n..(j + 1) * n], &g[(i * p + j) * n..(i * p + j + 1) * n]);
                        }
                    }
                });
            }
            Op::HeadMix { v, q, groups, splits, scale } => {
                let (vr, d) = dims2(self.shape(*v));
                let ctx = dims2(self.shape(*q)).0 / groups;
                let windows = vr / ctx;
                let seg = d / splits;
                let (vv, qv) = (self.value(*v), self.value(*q));
                // qsum[n][j] = sum_h q[h,n,j]
                let mut qsum = vec![0.0; ctx * d];
                for h in 0..*groups {
                    add_into(&mut qsum, &qv[h * ctx * d..(h + 1) * ctx * d]);
                }
                // a[w,n,m] and c[w,n,m] = scale * <g[w](m), v[w,n](m)>
                let mut wts = vec![0.0; windows * ctx * splits];
                let mut cg = vec![0.0; windows * ctx * splits];
                for w in 0..windows {
                    for n in 0..ctx {
                        let vrow = &vv[(w * ctx + n) * d..(w * ctx + n + 1) * d];
                        let grow = &g[w * d..(w + 1) * d];
                        for m in 0..*splits {
                            let r = m * seg..(m + 1) * seg;
                            let mut a = 0.0;
                            for h in 0..*groups {
                                let qrow = &qv[(h * ctx + n) * d..(h * ctx + n + 1) * d];
                                a += vrow[r.clone()].iter().zip(&qrow[r.clone()]).map(|(x, y)| x * y).sum::<f64>();
                            }
                            wts[(w * ctx + n) * splits + m] = a;
                            cg[(w * ctx + n) * splits + m] =
                                scale * grow[r.clone()].iter().zip(&vrow[r]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                acc(*v, &mut |dv| {
                    for w in 0..windows {
                        for n in 0..ctx {
                            let row = (w * ctx + n) * d;
                            for j in 0..d {
                                let m = j / seg;
                                let k = (w * ctx + n) * splits + m;
                                dv[row + j] += scale * wts[k] * g[w * d + j] + cg[k] * qsum[n * d + j];
                            }
                        }
                    }
                });
                acc(*q, &mut |dq| {
                    for h in 0..*groups {
                        for w in 0..windows {
                            for n in 0..ctx {
                                let vrow = (w * ctx + n) * d;
                                for j in 0..d {
                                    let k = (w * ctx + n) * splits + j / seg;
                                    dq[(h * ctx + n) * d + j] += cg[k] * vv[vrow + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let wa = |x: f64, o: f64| if o == f64::NEG_INFINITY { 0.0 } else { (x - o).exp() };
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * wa(av[i], out[i]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * wa(bv[i], out[i]);
                    }
                });
            }
            Op::SpreadPenalty(e) => {
                let (r, c) = dims2(self.shape(*e));
                let ev = self.value(*e);
                let mut mean = vec![0.0; c];
                ev.chunks(c).for_each(|row| add_into(&mut mean, row));
                mean.iter_mut().for_each(|m| *m /= r as f64);
                acc(*e, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[0] * 2.0 * (ev[i * c + j] - mean[j]);
                        }
                    }
                });
            }
            Op::TransducerNll { lattice, grad } => {
                acc(*lattice, &mut |d| d.iter_mut().zip(grad).for_each(|(d, x)| *d += g[0] * x));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let s = store();
        let mut t = Tape::new(&s);
        let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.matmul(i, b).unwrap();
        assert_eq!(t.value(p), &[3.0, 4.0, 5.0, 6.0]);
        let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let c = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let p = t.matmul(a, c).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let s = store();
        let mut t = Tape::new(&s);
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(&[3], vec![0.0; 3]).unwrap();
        let y = t.log_softmax(x, 0).unwrap();
        for v in t.value(y) {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        let x = t.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = t.log_softmax(x, 0).unwrap();
        assert!(t.value(y)[0].abs() < 1e-12);
        assert!((t.value(y)[1] + 1000.0).abs() < 1e-9);
        assert!(t.log_softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let s = store();
        let mut t = Tape::new(&s);
        let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let x = t.constant(&[1, 2], vec![5.0, 5.0]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
        let x = t.constant(&[1, 2], vec![1.0, 3.0]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!((t.value(y)[0] + 1.0).abs() < 1e-5);
        assert!((t.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn embedding_accumulates_repeated_rows() {
        let mut s = store();
        let e = s.add("e", Tensor::new(vec![3, 2], (0..6).map(f64::from).collect()).unwrap()).unwrap();
        let mut t = Tape::new(&s);
        let ev = t.param(e);
        let rows = t.embedding(ev, &[2, 2]).unwrap();
        assert_eq!(t.value(rows), &[4.0, 5.0, 4.0, 5.0]);
        let l = t.sum(rows).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(e).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        match t.embedding(ev, &[3]) {
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 }) => {}
            _ => panic!("expected out of range"),
        }
    }

    #[test]
    fn backward_basic_rules() {
        let mut s = store();
        let x = s.add("x", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = s.add("y", Tensor::scalar(3.0)).unwrap();
        let t = {
            let mut t = Tape::new(&s);
            let xv = t.param(x);
            let l = t.sum(xv).unwrap();
            let g = t.backward(l).unwrap();
            assert_eq!(g.param(x).unwrap(), &[1.0; 4]);
            let yv = t.param(y);
            let sq = t.mul(yv, yv).unwrap();
            let g = t.backward(sq).unwrap();
            assert_eq!(g.param(y).unwrap(), &[6.0]);
            assert!(t.backward(xv).is_err());
            g.param(y).unwrap().to_vec()
        };
        s.get_mut(y).accumulate_grad(&t);
        s.get_mut(y).accumulate_grad(&t);
        assert_eq!(s.get(y).grad().unwrap(), &[12.0]);
    }

    #[test]
    fn check_finite_flags_nan() {
        let s = store();
        let mut t = Tape::new(&s);
        t.set_check_finite(true);
        let x = t.constant(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(t.scale(x, 2.0), Err(Error::NonFinite("scale"))));
    }
}
