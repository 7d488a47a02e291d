//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Operations append a node
//! holding the computed value and the op that produced it; a node's inputs
//! always precede it, so [`Tape::backward`] is a single reverse sweep over
//! the node list.
//!
//! Shapes are explicit and broadcasting is limited to the trailing-axis
//! affine ops (`add_row`, `mul_row`). Matrix ops work on 2-D tensors.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution window over an `[h, w, c]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(col, input_offset)` for every in-bounds tap of output cell
    /// `(oy, ox)`. Out-of-bounds taps read as zero and are skipped.
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let c = self.channels;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                if ix < 0 || ix >= self.width as isize {
                    continue;
                }
                let base = (iy as usize * self.width + ix as usize) * c;
                let col = (ky * self.kernel + kx) * c;
                for ch in 0..c {
                    f(col + ch, base + ch);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Im2Col(Var, ConvGeometry),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Take(..) => "take",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Im2Col(..) => "im2col",
        }
    }
}

/// Names of every recordable operation, as used in diagnostics.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "mul_row",
    "relu",
    "gelu",
    "masked_softmax",
    "log_softmax",
    "layer_norm",
    "normalize_rows",
    "gather_rows",
    "take",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "reshape",
    "sum",
    "im2col",
];

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<String>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(op, format!("expected a 2-D tensor, got shape {s:?}"))),
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Runs `f` on the gradient accumulator of `v`, creating it on first use.
/// Untracked vars are skipped.
fn with(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let t = &nodes[v.0].value;
    if !t.requires_grad {
        return;
    }
    f(adj[v.0].get_or_insert_with(|| vec![0.0; t.numel()]));
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

    /// Makes the backward rule of the named op return scaled (wrong)
    /// gradients. Used only to prove that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is never tracked.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked node, present after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("transpose", ta)?;
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.name(), ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(shape, out, Op::Scale(a, c), &[a])
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (tx, tr) = (self.value(x), self.value(r));
        let d = tx.last_dim();
        if tr.shape() != [d] {
            return Err(mismatch(op, tx.shape(), tr.shape()));
        }
        Ok(d)
    }

    /// Adds a `[d]` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, bias)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let b = tb.data();
        let out = tx.data().iter().enumerate().map(|(i, v)| v + b[i % d]).collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Multiplies every trailing-axis row of `x` element-wise by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, s)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let sv = ts.data();
        let out = tx.data().iter().enumerate().map(|(i, v)| v * sv[i % d]).collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(shape, out, Op::MulRow(x, s), &[x, s]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| gelu(v)).collect();
        let shape = tx.shape().to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    /// Softmax over the trailing axis restricted to positions where
    /// `keep[j]` is true. Dropped positions get exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if keep.len() != n {
            return Err(mismatch("masked_softmax", tx.shape(), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::AllMasked);
        }
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ((o, v), &k) in orow.iter_mut().zip(row).zip(keep) {
                if k {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(shape, out, Op::MaskedSoftmax(x), &[x]))
    }

    /// Log-softmax over the trailing axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = tx.shape().to_vec();
        self.push(shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Per-row normalization over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let d = self.row_check("layer_norm", x, gain)?;
        self.row_check("layer_norm", x, bias)?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every trailing-axis row to unit Euclidean norm. Rows with norm
    /// at or below `min_norm` are a domain error.
    pub fn normalize_rows(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > min_norm) {
                return Err(TensorError::ZeroNorm {
                    op: "normalize_rows",
                    norm,
                    min: min_norm,
                });
            }
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(shape, out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Selects rows of a `[n, d]` table; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = matrix_dims("gather_rows", tt)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(invalid("gather_rows", format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    /// Selects flat elements, producing a 1-D tensor.
    pub fn take(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid("take", format!("index {bad} out of range for {n} elements")));
        }
        let out = idx.iter().map(|&i| tx.data()[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Take(x, idx.to_vec()), &[x]))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let (_, d) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = matrix_dims("concat_rows", tp)?;
            if c != d {
                return Err(mismatch("concat_rows", self.shape(*first), tp.shape()));
            }
            rows += r;
            out.extend_from_slice(tp.data());
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let (m, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = matrix_dims("concat_cols", tp)?;
            if r != m {
                return Err(mismatch("concat_cols", self.shape(*first), tp.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = matrix_dims("slice_rows", tx)?;
        if start + len > m {
            return Err(invalid("slice_rows", format!("rows {start}..{} out of {m}", start + len)));
        }
        let out = tx.data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("slice_cols", tx)?;
        if start + len > n {
            return Err(invalid("slice_cols", format!("cols {start}..{} out of {n}", start + len)));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(mismatch("reshape", tx.shape(), shape));
        }
        let out = tx.data().to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(vec![1], vec![total], Op::Sum(x), &[x])
    }

    /// Unfolds convolution windows of an `[h, w, c]` input into a
    /// `[out_h * out_w, k * k * c]` patch matrix (zero padding).
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let tx = self.value(x);
        let expect = [geom.height, geom.width, geom.channels];
        if tx.shape() != expect {
            return Err(mismatch("im2col", tx.shape(), &expect));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.padding < geom.kernel {
            return Err(invalid("im2col", format!("degenerate geometry {geom:?}")));
        }
        let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let src = tx.data();
        let mut out = vec![0.0; oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                geom.for_each_tap(oy, ox, |col, off| row[col] = src[off]);
            }
        }
        Ok(self.push(vec![oh * ow, pl], out, Op::Im2Col(x, geom), &[x]))
    }

    /// Back-propagates from a scalar `loss`, adding ∂loss/∂node into the
    /// gradient of every tracked node. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = adj[i].take() else { continue };
            if self.fault.as_deref() == Some(self.nodes[i].op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i].value;
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                with(nodes, adj, *a, |da| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with(nodes, adj, *b, |db| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[r * n..(r + 1) * n];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                with(nodes, adj, *a, |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(nodes, adj, *a, |da| add_into(da, g));
                with(nodes, adj, *b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                with(nodes, adj, *a, |da| add_into(da, g));
                with(nodes, adj, *b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                with(nodes, adj, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                with(nodes, adj, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                with(nodes, adj, *a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            Op::AddRow(x, b) => {
                let d = val(*b).numel();
                with(nodes, adj, *x, |dx| add_into(dx, g));
                with(nodes, adj, *b, |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let d = ts.numel();
                with(nodes, adj, *x, |dx| {
                    for (k, (dv, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *dv += gv * ts.data()[k % d];
                    }
                });
                with(nodes, adj, *s, |ds| {
                    for (k, (gv, xv)) in g.iter().zip(tx.data()).enumerate() {
                        ds[k % d] += gv * xv;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = val(*x);
                with(nodes, adj, *x, |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                with(nodes, adj, *x, |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        *d += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = &nodes[i].value;
                let n = y.last_dim();
                with(nodes, adj, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &nodes[i].value;
                let n = y.last_dim();
                with(nodes, adj, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = val(*gain);
                let d = tg.numel();
                with(nodes, adj, *gain, |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dv, gv), hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *dv += gv * hv;
                        }
                    }
                });
                with(nodes, adj, *bias, |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                with(nodes, adj, *x, |dx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((drow, grow), hrow)) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * tg.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            drow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = &nodes[i].value;
                let d = y.last_dim();
                with(nodes, adj, *x, |dx| {
                    for (r, ((drow, grow), yrow)) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(y.data().chunks(d)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gv - yv * dot) / norms[r];
                        }
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let d = val(*table).shape()[1];
                with(nodes, adj, *table, |dt| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dt[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Take(x, idx) => {
                with(nodes, adj, *x, |dx| {
                    for (k, &src) in idx.iter().enumerate() {
                        dx[src] += g[k];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    with(nodes, adj, p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = (val(p).shape()[0], val(p).shape()[1]);
                    with(nodes, adj, p, |dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d = val(*x).shape()[1];
                with(nodes, adj, *x, |dx| add_into(&mut dx[start * d..start * d + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).shape()[1];
                let len = nodes[i].value.shape()[1];
                with(nodes, adj, *x, |dx| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::Reshape(x) => with(nodes, adj, *x, |dx| add_into(dx, g)),
            Op::Sum(x) => with(nodes, adj, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Im2Col(x, geom) => {
                let (ow, pl) = (geom.out_width(), geom.patch_len());
                let oh = geom.out_height();
                with(nodes, adj, *x, |dx| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let grow = &g[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                            geom.for_each_tap(oy, ox, |col, off| dx[off] += grow[col]);
                        }
                    }
                });
            }
        }
    }
}
