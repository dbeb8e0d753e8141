//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive appends one node; `backward` replays the list in reverse
//! and accumulates gradients into preallocated zero buffers. Node order is
//! already topological because operands must exist before an op can refer to
//! them, which keeps the replay deterministic.

use super::{Element, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const SQRT_GUARD: f64 = 1e-12;
const SIGMOID_CLAMP: f64 = 1e-12;

/// Fixed 8-lane strided sum. The reduction order is a pure function of the
/// length, so results stay bitwise reproducible, while the independent
/// accumulators break the serial dependence that stalls long softmax rows.
#[inline]
fn lane_sum<E: Element>(xs: &[E]) -> E {
    const LANES: usize = 8;
    if xs.len() < 2 * LANES {
        let mut s = E::ZERO;
        for &v in xs {
            s += v;
        }
        return s;
    }
    let mut acc = [E::ZERO; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for chunk in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a += v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Lane-parallel max; max is order-insensitive, this just breaks the
/// dependence chain.
#[inline]
fn lane_max<E: Element>(first: E, xs: &[E]) -> E {
    const LANES: usize = 8;
    if xs.len() < 2 * LANES {
        let mut m = first;
        for &v in xs {
            m = m.maximum(v);
        }
        return m;
    }
    let mut acc = [first; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for chunk in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a = a.maximum(v);
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = a.maximum(v);
    }
    let m01 = acc[0].maximum(acc[1]);
    let m23 = acc[2].maximum(acc[3]);
    let m45 = acc[4].maximum(acc[5]);
    let m67 = acc[6].maximum(acc[7]);
    m01.maximum(m23).maximum(m45.maximum(m67))
}

/// Lane-parallel dot product with the same fixed order as [`lane_sum`].
#[inline]
fn lane_dot<E: Element>(xs: &[E], ys: &[E]) -> E {
    const LANES: usize = 8;
    if xs.len() < 2 * LANES {
        let mut s = E::ZERO;
        for (&x, &y) in xs.iter().zip(ys) {
            s += x * y;
        }
        return s;
    }
    let mut acc = [E::ZERO; LANES];
    let mut xc = xs.chunks_exact(LANES);
    let mut yc = ys.chunks_exact(LANES);
    for (chunk_x, chunk_y) in (&mut xc).zip(&mut yc) {
        for ((a, &x), &y) in acc.iter_mut().zip(chunk_x).zip(chunk_y) {
            *a += x * y;
        }
    }
    for ((a, &x), &y) in acc.iter_mut().zip(xc.remainder()).zip(yc.remainder()) {
        *a += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

enum Op<E: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddBias { x: usize, bias: usize },
    Sqrt(usize),
    Sigmoid(usize),
    Gelu(usize),
    Clamp { x: usize, lo: E, hi: E },
    MatMul { a: usize, b: usize },
    /// `a @ b^T`; avoids materialized transposes in attention scores.
    MatMulNt { a: usize, b: usize },
    Softmax { x: usize, axis: usize },
    /// Softmax over the last axis of a square matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero, so gradients from
    /// future frames vanish bitwise rather than approximately.
    CausalSoftmax { x: usize },
    /// Per-row scaling of `[n, d]` by a `[n, 1]` column of weights.
    RowScale { x: usize, w: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Dropout { x: usize, keep: Vec<E> },
    Embedding { table: usize, ids: Vec<u32> },
    CrossEntropy { logits: usize, targets: Vec<u32> },
    SumAll(usize),
}

struct Node<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<E: Element> Tape<E> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// `training` enables dropout; `seed` fixes its mask stream.
    pub fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Drops all recorded nodes and gradients; the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<E>, requires_grad: bool) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes are internally consistent")
    }

    /// Gradient accumulated by the latest `backward`, if the node needed one.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => (1, 1),
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn zip_shapes(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, bool, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let a_scalar = self.nodes[a.0].data.len() == 1;
        let b_scalar = self.nodes[b.0].data.len() == 1;
        if sa == sb {
            Ok((sa.clone(), false, false))
        } else if b_scalar {
            Ok((sa.clone(), false, true))
        } else if a_scalar {
            Ok((sb.clone(), true, false))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn zip_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        make: impl FnOnce(usize, usize) -> Op<E>,
    ) -> Result<Var> {
        let (shape, a_scalar, b_scalar) = self.zip_shapes(op, a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        // three branch-free loops so each one vectorizes
        let out: Vec<E> = if a_scalar && !b_scalar {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        } else if b_scalar && !a_scalar {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, make(a.0, b.0), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(data, shape, Op::Scale(a.0, c), req)
    }

    /// Adds a length-`cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        let blen = self.nodes[bias.0].data.len();
        if blen != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = Vec::with_capacity(rows * cols);
        for row in xd.chunks_exact(cols) {
            out.extend(row.iter().zip(bd).map(|(&v, &b)| v + b));
        }
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(out, shape, Op::AddBias { x: x.0, bias: bias.0 }, req))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, Op::Sqrt(x.0), req)
    }

    /// Logistic function with outputs clamped to `[1e-12, 1 - 1e-12]` so a
    /// later square root never sees an exact zero.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = E::from_f64(SIGMOID_CLAMP);
        let hi = E::from_f64(1.0 - SIGMOID_CLAMP);
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let s = E::ONE / (E::ONE + (-v).exp());
                s.maximum(lo).minimum(hi)
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, Op::Sigmoid(x.0), req)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| gelu_fwd(v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, Op::Gelu(x.0), req)
    }

    pub fn clamp(&mut self, x: Var, lo: E, hi: E) -> Var {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.maximum(lo).minimum(hi))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, Op::Clamp { x: x.0, lo, hi }, req)
    }

    // ── matrix products ─────────────────────────────────────────────

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var, nt: bool) -> Result<(usize, usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if nt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok((m, k, n))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        // beta = 0 means gemm writes every output element; skip the memset
        let mut out = Vec::with_capacity(m * n);
        unsafe {
            E::gemm(
                m,
                k,
                n,
                E::ONE,
                self.nodes[a.0].data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].data.as_ptr(),
                n as isize,
                1,
                E::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a: a.0, b: b.0 }, req))
    }

    /// `a[m,k] @ b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul_nt", a, b, true)?;
        let mut out = Vec::with_capacity(m * n);
        unsafe {
            E::gemm(
                m,
                k,
                n,
                E::ONE,
                self.nodes[a.0].data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].data.as_ptr(),
                1,
                k as isize,
                E::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNt { a: a.0, b: b.0 }, req))
    }

    // ── softmax family ──────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        if inner == 1 {
            // last-axis softmax over contiguous rows: the hot path. The exp
            // pass carries no reduction so it vectorizes; the serial sum
            // afterwards keeps the left-to-right accumulation order.
            let mut out = Vec::with_capacity(xd.len());
            for row in xd.chunks_exact(axis_len) {
                let max = lane_max(row[0], &row[1..]);
                out.extend(row.iter().map(|&v| (v - max).exp()));
                let start = out.len() - axis_len;
                let orow = &mut out[start..];
                let inv = E::ONE / lane_sum(orow);
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
            let req = self.requires(x);
            return Ok(self.push(out, shape, Op::Softmax { x: x.0, axis }, req));
        }
        let mut out = vec![E::ZERO; xd.len()];
        {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * axis_len * inner + j * inner + i;
                    let mut max = xd[idx(0)];
                    for j in 1..axis_len {
                        max = max.maximum(xd[idx(j)]);
                    }
                    let mut sum = E::ZERO;
                    for j in 0..axis_len {
                        let e = (xd[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        sum += e;
                    }
                    for j in 0..axis_len {
                        out[idx(j)] = out[idx(j)] / sum;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, shape, Op::Softmax { x: x.0, axis }, req))
    }

    /// Row-wise softmax of a square score matrix where row `i` is normalized
    /// over columns `0..=i` and later columns are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(TensorError::InvalidShape {
                op: "causal_softmax",
                shape,
                reason: "expected a square [frames, frames] matrix".into(),
            });
        }
        let n = shape[0];
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; n * n];
        for i in 0..n {
            let row = &xd[i * n..(i + 1) * n];
            let orow = &mut out[i * n..i * n + i + 1];
            let max = lane_max(row[0], &row[1..=i]);
            for (o, &v) in orow.iter_mut().zip(&row[..=i]) {
                *o = (v - max).exp();
            }
            let inv = E::ONE / lane_sum(orow);
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, shape, Op::CausalSoftmax { x: x.0 }, req))
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Scales row `i` of `x[n, d]` by `w[i]`, where `w` has shape `[n, 1]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 2 || ws[0] != rows || ws[1] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: ws.clone(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = Vec::with_capacity(rows * cols);
        for (row, &wr) in xd.chunks_exact(cols).zip(wd) {
            out.extend(row.iter().map(|&v| v * wr));
        }
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(out, shape, Op::RowScale { x: x.0, w: w.0 }, req))
    }

    /// Concatenates along the last axis; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let (rows, _) = self.rows_cols(parts[0]);
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total_cols += c;
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.rows_cols(p);
                let d = &self.nodes[p.0].data;
                out.extend_from_slice(&d[r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, vec![rows, total_cols], Op::ConcatCols(ids), req))
    }

    /// Copies columns `start..start + len` out of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > cols || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: self.nodes[x.0].shape.clone(),
                reason: format!("column range {start}..{} out of bounds", start + len),
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * len);
        for row in xd.chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let req = self.requires(x);
        Ok(self.push(out, vec![rows, len], Op::SliceCols { x: x.0, start }, req))
    }

    /// Stacks along the first axis; all inputs share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows needs at least one input");
        let (_, cols) = self.rows_cols(parts[0]);
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, vec![total_rows, cols], Op::ConcatRows(ids), req))
    }

    /// Per-row layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[gamma.0].data.len() != cols || self.nodes[beta.0].data.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let eps = E::from_f64(LN_EPS);
        let inv_cols = E::from_f64(1.0 / cols as f64);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xd.chunks_exact(cols) {
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_cols;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_cols;
            let inv_std = E::ONE / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(gd.iter().zip(bd))
                    .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b),
            );
        }
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            req,
        ))
    }

    /// Inverted dropout. Identity when `p == 0` or the tape is in
    /// evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability { op: "dropout", p });
        }
        if !self.training || p == 0.0 {
            let data = self.nodes[x.0].data.clone();
            let shape = self.nodes[x.0].shape.clone();
            let req = self.requires(x);
            return Ok(self.push(
                data,
                shape,
                Op::Dropout {
                    x: x.0,
                    keep: Vec::new(),
                },
                req,
            ));
        }
        let n = self.nodes[x.0].data.len();
        let inv_keep = E::from_f64(1.0 / (1.0 - p));
        let threshold = p as f32;
        let keep: Vec<E> = (0..n)
            .map(|_| {
                if self.rng.random::<f32>() < threshold {
                    E::ZERO
                } else {
                    inv_keep
                }
            })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        Ok(self.push(data, shape, Op::Dropout { x: x.0, keep }, req))
    }

    /// Row lookups into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = &self.nodes[table.0].shape;
        if ts.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: ts.clone(),
                reason: "table must be [vocab, dim]".into(),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    id: id as usize,
                    vocab,
                });
            }
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let r = id as usize;
            out.extend_from_slice(&td[r * dim..(r + 1) * dim]);
        }
        let req = self.requires(table);
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n, vocab]`; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let ld = &self.nodes[logits.0].data;
        let mut total = E::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    id: t as usize,
                    vocab: cols,
                });
            }
            let row = &ld[r * cols..(r + 1) * cols];
            let mut max = row[0];
            for &v in &row[1..] {
                max = max.maximum(v);
            }
            let mut sum = E::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            total += sum.ln() + max - row[t as usize];
        }
        let mean = total * E::from_f64(1.0 / rows as f64);
        let req = self.requires(logits);
        Ok(self.push(
            vec![mean],
            vec![1],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            req,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        let req = self.requires(x);
        self.push(vec![s], vec![1], Op::SumAll(x.0), req)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all `requires_grad`
    /// ancestors accumulate into per-node buffers readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.step_backward(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Hands a gradient contribution to `node`. The first contribution moves
    /// the buffer in; later ones add elementwise. A scalar operand that was
    /// broadcast across a tensor receives the left-to-right sum.
    fn contribute(&mut self, node: usize, data: Vec<E>) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let expected = self.nodes[node].data.len();
        let reduced = if expected == 1 && data.len() > 1 {
            let mut s = E::ZERO;
            for &c in &data {
                s += c;
            }
            vec![s]
        } else {
            data
        };
        match &mut self.grads[node] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(reduced) {
                    *b += c;
                }
            }
            slot => *slot = Some(reduced),
        }
    }

    /// Copying variant for contributions that are a plain passthrough of the
    /// upstream gradient.
    fn contribute_copy(&mut self, node: usize, data: &[E]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let expected = self.nodes[node].data.len();
        if expected == 1 && data.len() > 1 {
            let mut s = E::ZERO;
            for &c in data {
                s += c;
            }
            match &mut self.grads[node] {
                Some(buf) => buf[0] += s,
                slot => *slot = Some(vec![s]),
            }
            return;
        }
        match &mut self.grads[node] {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(data) {
                    *b += c;
                }
            }
            slot => *slot = Some(data.to_vec()),
        }
    }

    /// Dispatches one node's contribution to its inputs' gradients.
    fn step_backward(&mut self, node: usize, grad: &[E]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.contribute_copy(a, grad);
                self.contribute_copy(b, grad);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.contribute_copy(a, grad);
                if self.nodes[b].requires_grad {
                    let neg: Vec<E> = grad.iter().map(|&g| -g).collect();
                    self.contribute(b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let an = self.nodes[a].data.len();
                let bn = self.nodes[b].data.len();
                if self.nodes[a].requires_grad {
                    let bd = &self.nodes[b].data;
                    let da: Vec<E> = if bn == 1 {
                        let s = bd[0];
                        grad.iter().map(|&g| g * s).collect()
                    } else {
                        grad.iter().zip(bd).map(|(&g, &v)| g * v).collect()
                    };
                    self.contribute(a, da);
                }
                if self.nodes[b].requires_grad {
                    let ad = &self.nodes[a].data;
                    let db: Vec<E> = if an == 1 {
                        let s = ad[0];
                        grad.iter().map(|&g| g * s).collect()
                    } else {
                        grad.iter().zip(ad).map(|(&g, &v)| g * v).collect()
                    };
                    self.contribute(b, db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.nodes[a].requires_grad {
                    let da: Vec<E> = grad.iter().map(|&g| g * c).collect();
                    self.contribute(a, da);
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.contribute_copy(x, grad);
                if self.nodes[bias].requires_grad {
                    let cols = self.nodes[bias].data.len();
                    let mut db = vec![E::ZERO; cols];
                    for row in grad.chunks_exact(cols) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.contribute(bias, db);
                }
            }
            Op::Sqrt(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let guard = E::from_f64(SQRT_GUARD);
                    let half = E::from_f64(0.5);
                    let xd = &self.nodes[x].data;
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| g * half / v.maximum(guard).sqrt())
                        .collect();
                    self.contribute(x, dx);
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let yd = &self.nodes[node].data;
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * y * (E::ONE - y))
                        .collect();
                    self.contribute(x, dx);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let xd = &self.nodes[x].data;
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.contribute(x, dx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                if self.nodes[x].requires_grad {
                    let xd = &self.nodes[x].data;
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v >= lo && v <= hi { g } else { E::ZERO })
                        .collect();
                    self.contribute(x, dx);
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = &self.nodes[a].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA += dC @ B^T
                    let b_ptr = self.nodes[b].data.as_ptr();
                    self.gemm_into_grad(a, |da, beta| unsafe {
                        E::gemm(
                            m, n, k, E::ONE,
                            grad.as_ptr(), n as isize, 1,
                            b_ptr, 1, n as isize,
                            beta, da, k as isize, 1,
                        );
                    });
                }
                if self.nodes[b].requires_grad {
                    // dB += A^T @ dC
                    let a_ptr = self.nodes[a].data.as_ptr();
                    self.gemm_into_grad(b, |db, beta| unsafe {
                        E::gemm(
                            k, m, n, E::ONE,
                            a_ptr, 1, k as isize,
                            grad.as_ptr(), n as isize, 1,
                            beta, db, n as isize, 1,
                        );
                    });
                }
            }
            Op::MatMulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = &self.nodes[a].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    // dA += dC @ B
                    let b_ptr = self.nodes[b].data.as_ptr();
                    self.gemm_into_grad(a, |da, beta| unsafe {
                        E::gemm(
                            m, n, k, E::ONE,
                            grad.as_ptr(), n as isize, 1,
                            b_ptr, k as isize, 1,
                            beta, da, k as isize, 1,
                        );
                    });
                }
                if self.nodes[b].requires_grad {
                    // dB += dC^T @ A
                    let a_ptr = self.nodes[a].data.as_ptr();
                    self.gemm_into_grad(b, |db, beta| unsafe {
                        E::gemm(
                            n, m, k, E::ONE,
                            grad.as_ptr(), 1, n as isize,
                            a_ptr, k as isize, 1,
                            beta, db, k as isize, 1,
                        );
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if !self.nodes[x].requires_grad {
                    return;
                }
                let shape = &self.nodes[node].shape;
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let yd = &self.nodes[node].data;
                if inner == 1 {
                    let mut dx = Vec::with_capacity(yd.len());
                    for (yrow, grow) in yd
                        .chunks_exact(axis_len)
                        .zip(grad.chunks_exact(axis_len))
                    {
                        let dot = lane_dot(yrow, grow);
                        dx.extend(yrow.iter().zip(grow).map(|(&y, &g)| y * (g - dot)));
                    }
                    self.contribute(x, dx);
                    return;
                }
                let mut dx = vec![E::ZERO; yd.len()];
                {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * axis_len * inner + j * inner + i;
                            let mut dot = E::ZERO;
                            for j in 0..axis_len {
                                dot += grad[idx(j)] * yd[idx(j)];
                            }
                            for j in 0..axis_len {
                                dx[idx(j)] = yd[idx(j)] * (grad[idx(j)] - dot);
                            }
                        }
                    }
                }
                self.contribute(x, dx);
            }
            Op::CausalSoftmax { x } => {
                let x = *x;
                if !self.nodes[x].requires_grad {
                    return;
                }
                let n = self.nodes[node].shape[0];
                let yd = &self.nodes[node].data;
                let mut dx = vec![E::ZERO; n * n];
                for i in 0..n {
                    let yrow = &yd[i * n..i * n + i + 1];
                    let grow = &grad[i * n..i * n + i + 1];
                    let drow = &mut dx[i * n..i * n + i + 1];
                    let dot = lane_dot(yrow, grow);
                    for ((d, &y), &g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (g - dot);
                    }
                    // columns beyond i stay exactly zero
                }
                self.contribute(x, dx);
            }
            Op::RowScale { x, w } => {
                let (x, w) = (*x, *w);
                let (rows, cols) = {
                    let s = &self.nodes[x].shape;
                    (s[0], s[1])
                };
                if self.nodes[x].requires_grad {
                    let wd = &self.nodes[w].data;
                    let mut dx = Vec::with_capacity(rows * cols);
                    for (r, grow) in grad.chunks_exact(cols).enumerate() {
                        let wr = wd[r];
                        dx.extend(grow.iter().map(|&g| g * wr));
                    }
                    self.contribute(x, dx);
                }
                if self.nodes[w].requires_grad {
                    let xd = &self.nodes[x].data;
                    let mut dw = Vec::with_capacity(rows);
                    for (grow, xrow) in grad.chunks_exact(cols).zip(xd.chunks_exact(cols)) {
                        let mut s = E::ZERO;
                        for (&g, &v) in grow.iter().zip(xrow) {
                            s += g * v;
                        }
                        dw.push(s);
                    }
                    self.contribute(w, dw);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = self.nodes[node].shape[0];
                let total_cols = self.nodes[node].shape[1];
                let mut offset = 0;
                for p in parts {
                    let c = *self.nodes[p].shape.last().unwrap();
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total_cols + offset;
                            dp.extend_from_slice(&grad[base..base + c]);
                        }
                        self.contribute(p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                if !self.nodes[x].requires_grad {
                    return;
                }
                let cols = self.nodes[x].shape[1];
                let len = self.nodes[node].shape[1];
                let rows = self.nodes[node].shape[0];
                // scatter straight into the source gradient
                if self.grads[x].is_none() {
                    self.grads[x] = Some(vec![E::ZERO; self.nodes[x].data.len()]);
                }
                let dx = self.grads[x].as_mut().unwrap();
                for r in 0..rows {
                    let dst = &mut dx[r * cols + start..r * cols + start + len];
                    for (d, &g) in dst.iter_mut().zip(&grad[r * len..(r + 1) * len]) {
                        *d += g;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = *self.nodes[node].shape.last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let r = if self.nodes[p].shape.len() == 2 {
                        self.nodes[p].shape[0]
                    } else {
                        1
                    };
                    if self.nodes[p].requires_grad {
                        let dp = grad[offset * cols..(offset + r) * cols].to_vec();
                        self.contribute(p, dp);
                    }
                    offset += r;
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (rows, cols) = {
                    let s = &self.nodes[x].shape;
                    if s.len() == 2 {
                        (s[0], s[1])
                    } else {
                        (1, s[0])
                    }
                };
                let eps = E::from_f64(LN_EPS);
                let inv_cols = E::from_f64(1.0 / cols as f64);
                let cols_e = E::from_f64(cols as f64);
                let xd = &self.nodes[x].data;
                let gd = &self.nodes[gamma].data;
                let mut dx = Vec::with_capacity(rows * cols);
                let mut dgamma = vec![E::ZERO; cols];
                let mut dbeta = vec![E::ZERO; cols];
                for (row, g_row) in xd.chunks_exact(cols).zip(grad.chunks_exact(cols)) {
                    let mut mean = E::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_cols;
                    let mut var = E::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_cols;
                    let inv_std = E::ONE / (var + eps).sqrt();
                    let mut dxhat_sum = E::ZERO;
                    let mut dxhat_xhat_sum = E::ZERO;
                    for (((&v, &g), &gm), (dg, db)) in row
                        .iter()
                        .zip(g_row)
                        .zip(gd)
                        .zip(dgamma.iter_mut().zip(dbeta.iter_mut()))
                    {
                        let xhat = (v - mean) * inv_std;
                        let dxhat = g * gm;
                        *dg += g * xhat;
                        *db += g;
                        dxhat_sum += dxhat;
                        dxhat_xhat_sum += dxhat * xhat;
                    }
                    dx.extend(row.iter().zip(g_row).zip(gd).map(|((&v, &g), &gm)| {
                        let xhat = (v - mean) * inv_std;
                        let dxhat = g * gm;
                        inv_std * inv_cols * (cols_e * dxhat - dxhat_sum - xhat * dxhat_xhat_sum)
                    }));
                }
                self.contribute(x, dx);
                self.contribute(gamma, dgamma);
                self.contribute(beta, dbeta);
            }
            Op::Dropout { x, keep } => {
                let x = *x;
                if !self.nodes[x].requires_grad {
                    return;
                }
                if keep.is_empty() {
                    self.contribute_copy(x, grad);
                } else {
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(keep.iter())
                        .map(|(&g, &k)| g * k)
                        .collect();
                    self.contribute(x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if !self.nodes[table].requires_grad {
                    return;
                }
                let dim = self.nodes[table].shape[1];
                let ids = ids.clone();
                // scatter-add straight into the table gradient
                let table_len = self.nodes[table].data.len();
                if self.grads[table].is_none() {
                    self.grads[table] = Some(vec![E::ZERO; table_len]);
                }
                let dt = self.grads[table].as_mut().unwrap();
                for (r, &id) in ids.iter().enumerate() {
                    let base = id as usize * dim;
                    for (d, &g) in dt[base..base + dim].iter_mut().zip(&grad[r * dim..(r + 1) * dim]) {
                        *d += g;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                if !self.nodes[logits].requires_grad {
                    return;
                }
                let targets = targets.clone();
                let (rows, cols) = {
                    let s = &self.nodes[logits].shape;
                    (s[0], s[1])
                };
                let ld = &self.nodes[logits].data;
                let scale = grad[0] * E::from_f64(1.0 / rows as f64);
                let mut dl = Vec::with_capacity(rows * cols);
                for (row, &t) in ld.chunks_exact(cols).zip(&targets) {
                    let mut max = row[0];
                    for &v in &row[1..] {
                        max = max.maximum(v);
                    }
                    let base = dl.len();
                    dl.extend(row.iter().map(|&v| (v - max).exp()));
                    let drow = &mut dl[base..];
                    let mut sum = E::ZERO;
                    for &d in drow.iter() {
                        sum += d;
                    }
                    let inv = scale / sum;
                    for d in drow.iter_mut() {
                        *d *= inv;
                    }
                    drow[t as usize] -= scale;
                }
                self.contribute(logits, dl);
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].data.len();
                    let dx = vec![grad[0]; n];
                    self.contribute(x, dx);
                }
            }
        }
    }

    /// Runs a gemm contribution into `node`'s gradient: beta 1 into an
    /// existing buffer, beta 0 into a fresh one (every element written).
    fn gemm_into_grad(&mut self, node: usize, f: impl FnOnce(*mut E, E)) {
        let n = self.nodes[node].data.len();
        match &mut self.grads[node] {
            Some(buf) => f(buf.as_mut_ptr(), E::ONE),
            slot => {
                let mut v: Vec<E> = Vec::with_capacity(n);
                f(v.as_mut_ptr(), E::ZERO);
                unsafe { v.set_len(n) };
                *slot = Some(v);
            }
        }
    }

}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::ONE + inner.tanh())
}

fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::ONE - t * t;
    let dinner = c * (E::ONE + three * a * x * x);
    half * (E::ONE + t) + half * x * sech2 * dinner
}
