//! Reverse-mode differentiation by operation recording.
//!
//! Every primitive pushes one node holding its output value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the nodes once,
//! newest first. Nodes whose inputs carry no gradient are stored as constants.

use std::cell::{Ref, RefCell};

use super::array::{Array, Real};
use super::kernels::gemm;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear tap: source row and weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub row: usize,
    pub w: T,
}

/// A sample point for [`Tape::grid_sample`], in sample-index coordinates of
/// the source grid: `(y, x) = (0, 0)` is the centre of cell (0, 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub view: usize,
    pub y: f64,
    pub x: f64,
}

pub(crate) enum Op<T> {
    Constant,
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, inv_t: T },
    LogSoftmax { x: Var, inv_t: T },
    CrossEntropy { p: Array<T>, q: Var, eps: T },
    SoftNll { p: Array<T>, logq: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, scale: Vec<T> },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Slice { x: Var, outer: usize, full: usize, start: usize, len: usize },
    GridSample { src: Var, taps: Vec<[Tap<T>; 4]>, channels: usize },
    SplitHeads { x: Var, b: usize, n: usize, h: usize, d: usize },
    MergeHeads { x: Var, b: usize, n: usize, h: usize, d: usize },
    Sum(Var),
    Mean(Var),
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
    Gather { x: Var, indices: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub value: Array<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records operations; see the module docs.
pub struct Tape<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (if n == 0 { 0 } else { total / n }, n)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if needs_grad { op } else { Op::Constant };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records a tracked input; its gradient is reported by `backward`.
    pub fn leaf(&self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&self, value: Array<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `a · b` with `b` 2-D (shared across leading axes of `a`), or both
    /// 3-D with a common batch extent.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// General product `op(a) · op(b)`; `ta`/`tb` transpose the last two axes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let needs = self.ng(&[a, b]);
        let (value, op) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::invalid(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
            }
            let (bk, bn) = if tb { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
            if sb.len() == 2 && !(ta && sa.len() > 2) {
                // shared right operand; leading axes of `a` fold into rows
                let (am, ak) = if ta { (sa[1], sa[0]) } else { rows_of(sa) };
                if ak != bk {
                    return Err(Error::invalid(format!("matmul inner extents differ: {sa:?} vs {sb:?} (ta={ta}, tb={tb})")));
                }
                let mut out_shape = if ta { vec![am] } else { sa[..sa.len() - 1].to_vec() };
                out_shape.push(bn);
                let mut out = vec![T::zero(); am * bn];
                gemm(av.data(), bv.data(), am, ak, bn, ta, tb, &mut out, false);
                (
                    Array::new(&out_shape, out)?,
                    Op::MatMul { a, b, ta, tb, batch: 1, m: am, k: ak, n: bn },
                )
            } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
                let batch = sa[0];
                let (am, ak) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                if ak != bk {
                    return Err(Error::invalid(format!("matmul inner extents differ: {sa:?} vs {sb:?} (ta={ta}, tb={tb})")));
                }
                let mut out = vec![T::zero(); batch * am * bn];
                let (sza, szb, szo) = (am * ak, ak * bn, am * bn);
                for i in 0..batch {
                    gemm(
                        &av.data()[i * sza..(i + 1) * sza],
                        &bv.data()[i * szb..(i + 1) * szb],
                        am,
                        ak,
                        bn,
                        ta,
                        tb,
                        &mut out[i * szo..(i + 1) * szo],
                        false,
                    );
                }
                (
                    Array::new(&[batch, am, bn], out)?,
                    Op::MatMul { a, b, ta, tb, batch, m: am, k: ak, n: bn },
                )
            } else {
                return Err(Error::invalid(format!("unsupported matmul shapes {sa:?} and {sb:?}")));
            }
        };
        Ok(self.push(value, op, needs))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        let needs = self.ng(&[a, b]);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(Error::invalid(format!("{name}: shapes {:?} and {:?} differ", av.shape(), bv.shape())));
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(av.shape(), data)?
        };
        Ok(self.push(value, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn trailing(&self, x: Var, b: Var, mul: bool) -> Result<Var> {
        let needs = self.ng(&[x, b]);
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let (sx, sb) = (xv.shape(), bv.shape());
            if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
                return Err(Error::invalid(format!("{sb:?} is not a trailing shape of {sx:?}")));
            }
            let blen = bv.len().max(1);
            let mut data = xv.data().to_vec();
            for chunk in data.chunks_mut(blen) {
                for (v, &w) in chunk.iter_mut().zip(bv.data()) {
                    if mul {
                        *v *= w;
                    } else {
                        *v += w;
                    }
                }
            }
            Array::new(sx, data)?
        };
        let op = if mul { Op::MulTrailing(x, b) } else { Op::AddTrailing(x, b) };
        Ok(self.push(value, op, needs))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_trailing(&self, x: Var, b: Var) -> Result<Var> {
        self.trailing(x, b, false)
    }

    /// `x ⊙ b` where `b`'s shape equals the trailing axes of `x`.
    pub fn mul_trailing(&self, x: Var, b: Var) -> Result<Var> {
        self.trailing(x, b, true)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let needs = self.ng(&[x]);
        let value = self.nodes.borrow()[x.0].value.map(f);
        self.push(value, op, needs)
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_fwd, Op::Gelu(x))
    }

    /// Row softmax over the last axis of `x / temperature`.
    pub fn softmax_rows(&self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature:?}")));
        }
        let inv_t = T::one() / temperature;
        let needs = self.ng(&[x]);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if !xv.is_finite() {
                return Err(Error::invalid("softmax input is not finite"));
            }
            let (_, n) = rows_of(xv.shape());
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                softmax_in_place(row, inv_t);
            }
            Array::new(xv.shape(), data)?
        };
        Ok(self.push(value, Op::Softmax { x, inv_t }, needs))
    }

    /// Row log-softmax over the last axis of `x / temperature`.
    pub fn log_softmax_rows(&self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature:?}")));
        }
        let inv_t = T::one() / temperature;
        let needs = self.ng(&[x]);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if !xv.is_finite() {
                return Err(Error::invalid("log-softmax input is not finite"));
            }
            let (_, n) = rows_of(xv.shape());
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) * inv_t;
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = *v * inv_t - mx;
                    s += v.exp();
                }
                let ls = s.ln();
                for v in row.iter_mut() {
                    *v -= ls;
                }
            }
            Array::new(xv.shape(), data)?
        };
        Ok(self.push(value, Op::LogSoftmax { x, inv_t }, needs))
    }

    /// Mean over rows of `-Σ_j p_ij log max(q_ij, eps)`. `p` is a constant target.
    pub fn cross_entropy_rows(&self, p: &Array<T>, q: Var, eps: T) -> Result<Var> {
        let needs = self.ng(&[q]);
        let value = {
            let nodes = self.nodes.borrow();
            let qv = &nodes[q.0].value;
            if qv.shape() != p.shape() {
                return Err(Error::invalid(format!("cross entropy shapes {:?} and {:?} differ", p.shape(), qv.shape())));
            }
            let (rows, n) = rows_of(qv.shape());
            let mut total = T::zero();
            for r in 0..rows {
                let mut s = T::zero();
                for j in 0..n {
                    let pv = p.data()[r * n + j];
                    let qv = qv.data()[r * n + j].max(eps);
                    s += pv * qv.ln();
                }
                total -= s;
            }
            Array::scalar(total / T::c(rows.max(1) as f64))
        };
        Ok(self.push(value, Op::CrossEntropy { p: p.clone(), q, eps }, needs))
    }

    /// Mean over rows of `-Σ_j p_ij logq_ij` for log-probabilities `logq`.
    pub fn soft_nll_rows(&self, p: &Array<T>, logq: Var) -> Result<Var> {
        let needs = self.ng(&[logq]);
        let value = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logq.0].value;
            if lv.shape() != p.shape() {
                return Err(Error::invalid(format!("soft nll shapes {:?} and {:?} differ", p.shape(), lv.shape())));
            }
            let (rows, n) = rows_of(lv.shape());
            let mut total = T::zero();
            for r in 0..rows {
                let mut s = T::zero();
                for j in 0..n {
                    s += p.data()[r * n + j] * lv.data()[r * n + j];
                }
                total -= s;
            }
            Array::scalar(total / T::c(rows.max(1) as f64))
        };
        Ok(self.push(value, Op::SoftNll { p: p.clone(), logq }, needs))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let needs = self.ng(&[x, gamma, beta]);
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let (rows, n) = rows_of(xv.shape());
            if g.len() != n || b.len() != n {
                return Err(Error::invalid(format!("layer norm affine size {} / {} vs features {n}", g.len(), b.len())));
            }
            let nf = T::c(n as f64);
            let mut xhat = vec![T::zero(); rows * n];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                let row = &xv.data()[r * n..(r + 1) * n];
                let mut mean = T::zero();
                for &v in row {
                    mean += v;
                }
                mean /= nf;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var /= nf;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Array::new(xv.shape(), out)?, xhat, rstd)
        };
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    /// Batch normalization over every leading row of `x` (features on the last
    /// axis), using the batch's own statistics. Returns the output together
    /// with the per-feature batch mean and unbiased variance.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let needs = self.ng(&[x, gamma, beta]);
        let (value, xhat, rstd, mean, uvar) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let (rows, n) = rows_of(xv.shape());
            if g.len() != n || b.len() != n {
                return Err(Error::invalid("batch norm affine size mismatch"));
            }
            if rows < 2 {
                return Err(Error::invalid("batch norm needs at least two rows"));
            }
            let rf = T::c(rows as f64);
            let d = xv.data();
            let mut mean = vec![T::zero(); n];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= rf;
            }
            let mut var = vec![T::zero(); n];
            for r in 0..rows {
                for ((s, &v), &m) in var.iter_mut().zip(&d[r * n..(r + 1) * n]).zip(&mean) {
                    let dv = v - m;
                    *s += dv * dv;
                }
            }
            let uvar: Vec<T> = var.iter().map(|&s| s / T::c((rows - 1) as f64)).collect();
            let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s / rf + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); rows * n];
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                for j in 0..n {
                    let h = (d[r * n + j] - mean[j]) * rstd[j];
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Array::new(xv.shape(), out)?, xhat, rstd, mean, uvar)
        };
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, xhat, rstd }, needs);
        Ok((v, mean, uvar))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let needs = self.ng(&[x, gamma, beta]);
        let scale: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let (rows, n) = rows_of(xv.shape());
            if g.len() != n || b.len() != n || mean.len() != n || var.len() != n {
                return Err(Error::invalid("batch norm statistics size mismatch"));
            }
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                for j in 0..n {
                    out[r * n + j] = (xv.data()[r * n + j] - mean[j]) * scale[j] * g.data()[j] + b.data()[j];
                }
            }
            Array::new(xv.shape(), out)?
        };
        Ok(self.push(value, Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), scale }, needs))
    }

    /// Swaps the last two axes (2-D or batched 3-D).
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let needs = self.ng(&[x]);
        let (value, batch, rows, cols) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            let (batch, rows, cols) = match s.len() {
                2 => (1, s[0], s[1]),
                3 => (s[0], s[1], s[2]),
                _ => return Err(Error::invalid(format!("transpose needs rank 2 or 3, got {s:?}"))),
            };
            let mut out = vec![T::zero(); xv.len()];
            let sz = rows * cols;
            for bi in 0..batch {
                super::array::transpose_into(&xv.data()[bi * sz..(bi + 1) * sz], rows, cols, &mut out[bi * sz..(bi + 1) * sz]);
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            (Array::new(&shape, out)?, batch, rows, cols)
        };
        Ok(self.push(value, Op::Transpose { x, batch, rows, cols }, needs))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let needs = self.ng(&[x]);
        let value = self.nodes.borrow()[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let needs = self.ng(parts);
        let (value, outer, chunks) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::invalid("concat axis out of range"));
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut total_axis = 0;
            let mut chunks = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                    return Err(Error::invalid(format!("concat shapes {first:?} and {s:?} disagree off axis {axis}")));
                }
                total_axis += s[axis];
                chunks.push(s[axis] * inner);
            }
            let mut out = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for (p, &c) in parts.iter().zip(&chunks) {
                    out.extend_from_slice(&nodes[p.0].value.data()[o * c..(o + 1) * c]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total_axis;
            (Array::new(&shape, out)?, outer, chunks)
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), outer, chunks }, needs))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let needs = self.ng(&[x]);
        let (value, outer, full, inner) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::invalid(format!("slice {start}+{len} out of range on axis {axis} of {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let full = s[axis] * inner;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full + start * inner;
                out.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            (Array::new(&shape, out)?, outer, full, inner)
        };
        Ok(self.push(
            value,
            Op::Slice { x, outer, full, start: start * inner, len: len * inner },
            needs,
        ))
    }

    /// Bilinear sampling with border clamping from `src` of shape
    /// `[views, height, width, channels]`. Returns `[groups, points_per_group, channels]`.
    /// Differentiable in `src` only; the coordinates are constants.
    pub fn grid_sample(&self, src: Var, points: &[SamplePoint], groups: usize) -> Result<Var> {
        let needs = self.ng(&[src]);
        let (value, taps, channels) = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[src.0].value;
            let s = sv.shape();
            if s.len() != 4 {
                return Err(Error::invalid(format!("grid_sample source must be [V,H,W,C], got {s:?}")));
            }
            if groups == 0 || points.len() % groups != 0 {
                return Err(Error::invalid("grid_sample points do not split into groups"));
            }
            let (views, h, w, c) = (s[0], s[1], s[2], s[3]);
            let mut taps = Vec::with_capacity(points.len());
            for p in points {
                if p.view >= views {
                    return Err(Error::invalid(format!("sample view {} out of range ({views})", p.view)));
                }
                if !p.y.is_finite() || !p.x.is_finite() {
                    return Err(Error::invalid("non-finite sample coordinate"));
                }
                let (y0, y1, wy) = bilinear_axis(p.y, h);
                let (x0, x1, wx) = bilinear_axis(p.x, w);
                let base = p.view * h * w;
                taps.push([
                    Tap { row: base + y0 * w + x0, w: T::c((1.0 - wy) * (1.0 - wx)) },
                    Tap { row: base + y0 * w + x1, w: T::c((1.0 - wy) * wx) },
                    Tap { row: base + y1 * w + x0, w: T::c(wy * (1.0 - wx)) },
                    Tap { row: base + y1 * w + x1, w: T::c(wy * wx) },
                ]);
            }
            let mut out = vec![T::zero(); points.len() * c];
            for (i, t) in taps.iter().enumerate() {
                let o = &mut out[i * c..(i + 1) * c];
                for tap in t {
                    let srow = &sv.data()[tap.row * c..(tap.row + 1) * c];
                    for (x, &v) in o.iter_mut().zip(srow) {
                        *x += tap.w * v;
                    }
                }
            }
            (Array::new(&[groups, points.len() / groups, c], out)?, taps, c)
        };
        Ok(self.push(value, Op::GridSample { src, taps, channels }, needs))
    }

    /// `[b, n, h*d] -> [b*h, n, d]`, head `i` taking channels `i*d..(i+1)*d`.
    pub fn split_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let needs = self.ng(&[x]);
        let (value, b, n, d) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
                return Err(Error::invalid(format!("cannot split {s:?} into {heads} heads")));
            }
            let (b, n, c) = (s[0], s[1], s[2]);
            let d = c / heads;
            let mut out = vec![T::zero(); xv.len()];
            for bi in 0..b {
                for ni in 0..n {
                    let src = &xv.data()[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                    for hi in 0..heads {
                        let dst = ((bi * heads + hi) * n + ni) * d;
                        out[dst..dst + d].copy_from_slice(&src[hi * d..(hi + 1) * d]);
                    }
                }
            }
            (Array::new(&[b * heads, n, d], out)?, b, n, d)
        };
        Ok(self.push(value, Op::SplitHeads { x, b, n, h: heads, d }, needs))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let needs = self.ng(&[x]);
        let (value, b, n, d) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
                return Err(Error::invalid(format!("cannot merge {s:?} from {heads} heads")));
            }
            let (bh, n, d) = (s[0], s[1], s[2]);
            let b = bh / heads;
            let c = heads * d;
            let mut out = vec![T::zero(); xv.len()];
            for bi in 0..b {
                for hi in 0..heads {
                    for ni in 0..n {
                        let src = ((bi * heads + hi) * n + ni) * d;
                        let dst = (bi * n + ni) * c + hi * d;
                        out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                    }
                }
            }
            (Array::new(&[b, n, c], out)?, b, n, d)
        };
        Ok(self.push(value, Op::MergeHeads { x, b, n, h: heads, d }, needs))
    }

    pub fn sum(&self, x: Var) -> Var {
        let needs = self.ng(&[x]);
        let value = Array::scalar(self.nodes.borrow()[x.0].value.sum());
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let needs = self.ng(&[x]);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Array::scalar(xv.sum() / T::c(xv.len().max(1) as f64))
        };
        self.push(value, Op::Mean(x), needs)
    }

    /// Scales each row (last axis) to unit L2 norm; norms below `eps` are clamped.
    pub fn l2_normalize_rows(&self, x: Var, eps: T) -> Var {
        let needs = self.ng(&[x]);
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (rows, n) = rows_of(xv.shape());
            let mut out = xv.data().to_vec();
            let mut norms = vec![T::zero(); rows];
            for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
                let mut s = T::zero();
                for &v in row.iter() {
                    s += v * v;
                }
                let nr = s.sqrt().max(eps);
                norms[r] = nr;
                for v in row.iter_mut() {
                    *v /= nr;
                }
            }
            (Array::new(xv.shape(), out).expect("same shape"), norms)
        };
        self.push(value, Op::L2Normalize { x, norms, eps }, needs)
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let needs = self.ng(&[x]);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.is_empty() {
                return Err(Error::invalid("gather on a scalar"));
            }
            let inner: usize = s[1..].iter().product();
            let mut out = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= s[0] {
                    return Err(Error::invalid(format!("gather index {i} out of range {}", s[0])));
                }
                out.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = s.to_vec();
            shape[0] = indices.len();
            Array::new(&shape, out)?
        };
        Ok(self.push(value, Op::Gather { x, indices: indices.to_vec() }, needs))
    }
}

/// Index pair and upper weight for bilinear interpolation at continuous
/// sample index `s` along an axis of extent `n`, clamped to the border.
pub(crate) fn bilinear_axis(s: f64, n: usize) -> (usize, usize, f64) {
    let hi = (n - 1) as f64;
    let s = s.clamp(0.0, hi);
    let i0 = s.floor() as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], inv_t: T) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) * inv_t;
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v * inv_t - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let a = T::c(GELU_A);
    T::c(0.5) * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let a = T::c(GELU_A);
    let t = (k * (x + a * x * x * x)).tanh();
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x)
}
