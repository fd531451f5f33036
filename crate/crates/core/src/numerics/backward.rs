use super::array::{Array, Real};
use super::kernels::gemm;
use super::tape::{gelu_grad, Op, Tape, Var};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Array<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Array::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn get_or_zeros(&self, v: Var) -> Array<T> {
        self.get(v).unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    /// Runs the reverse sweep from scalar `loss`. Nodes are visited once each,
    /// newest first; constants and untracked inputs get nothing.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 || nodes[loss.0].value.rank() > 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let ng = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| nodes[v.0].value.data();

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                    let (ta, tb, m, k, n) = (*ta, *tb, *m, *k, *n);
                    let (sza, szb, szo) = (m * k, k * n, m * n);
                    if ng(*a) {
                        let la = len(*a);
                        let ga = acc(&mut grads[a.0], la);
                        for bi in 0..*batch {
                            let gc = &g[bi * szo..(bi + 1) * szo];
                            let bv = &val(*b)[bi * szb..(bi + 1) * szb];
                            let dst = &mut ga[bi * sza..(bi + 1) * sza];
                            if ta {
                                gemm(bv, gc, k, n, m, tb, true, dst, true);
                            } else {
                                gemm(gc, bv, m, n, k, false, !tb, dst, true);
                            }
                        }
                    }
                    if ng(*b) {
                        let lb = len(*b);
                        let gb = acc(&mut grads[b.0], lb);
                        for bi in 0..*batch {
                            let gc = &g[bi * szo..(bi + 1) * szo];
                            let av = &val(*a)[bi * sza..(bi + 1) * sza];
                            let dst = &mut gb[bi * szb..(bi + 1) * szb];
                            if tb {
                                gemm(gc, av, n, m, k, true, ta, dst, true);
                            } else {
                                gemm(av, gc, k, m, n, !ta, false, dst, true);
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if ng(*a) {
                        for (d, &s) in acc(&mut grads[a.0], g.len()).iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if ng(*b) {
                        for (d, &s) in acc(&mut grads[b.0], g.len()).iter_mut().zip(&g) {
                            if neg {
                                *d -= s;
                            } else {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        let bv = val(*b);
                        for ((d, &s), &y) in acc(&mut grads[a.0], g.len()).iter_mut().zip(&g).zip(bv) {
                            *d += s * y;
                        }
                    }
                    if ng(*b) {
                        let av = val(*a);
                        for ((d, &s), &y) in acc(&mut grads[b.0], g.len()).iter_mut().zip(&g).zip(av) {
                            *d += s * y;
                        }
                    }
                }
                Op::AddTrailing(x, b) | Op::MulTrailing(x, b) => {
                    let mul = matches!(node.op, Op::MulTrailing(..));
                    let lb = len(*b).max(1);
                    if ng(*x) {
                        let gx = acc(&mut grads[x.0], g.len());
                        if mul {
                            let bv = val(*b);
                            for (gc, dc) in g.chunks(lb).zip(gx.chunks_mut(lb)) {
                                for ((d, &s), &w) in dc.iter_mut().zip(gc).zip(bv) {
                                    *d += s * w;
                                }
                            }
                        } else {
                            for (d, &s) in gx.iter_mut().zip(&g) {
                                *d += s;
                            }
                        }
                    }
                    if ng(*b) {
                        let xv = val(*x);
                        let gb = acc(&mut grads[b.0], lb);
                        for (ci, gc) in g.chunks(lb).enumerate() {
                            if mul {
                                let xc = &xv[ci * lb..(ci + 1) * lb];
                                for ((d, &s), &xx) in gb.iter_mut().zip(gc).zip(xc) {
                                    *d += s * xx;
                                }
                            } else {
                                for (d, &s) in gb.iter_mut().zip(gc) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if ng(*x) {
                        for (d, &s) in acc(&mut grads[x.0], g.len()).iter_mut().zip(&g) {
                            *d += s * *c;
                        }
                    }
                }
                Op::Relu(x) => {
                    if ng(*x) {
                        for ((d, &s), &y) in acc(&mut grads[x.0], g.len()).iter_mut().zip(&g).zip(out) {
                            if y > T::zero() {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if ng(*x) {
                        let xv = val(*x);
                        for ((d, &s), &xx) in acc(&mut grads[x.0], g.len()).iter_mut().zip(&g).zip(xv) {
                            *d += s * gelu_grad(xx);
                        }
                    }
                }
                Op::Softmax { x, inv_t } => {
                    if ng(*x) {
                        let n = node.value.last_dim().max(1);
                        let gx = acc(&mut grads[x.0], g.len());
                        for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                            let mut dot = T::zero();
                            for (&s, &y) in gr.iter().zip(yr) {
                                dot += s * y;
                            }
                            for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (s - dot) * *inv_t;
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, inv_t } => {
                    if ng(*x) {
                        let n = node.value.last_dim().max(1);
                        let gx = acc(&mut grads[x.0], g.len());
                        for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                            let mut total = T::zero();
                            for &s in gr {
                                total += s;
                            }
                            for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += (s - y.exp() * total) * *inv_t;
                            }
                        }
                    }
                }
                Op::CrossEntropy { p, q, eps } => {
                    if ng(*q) {
                        let qv = val(*q);
                        let n = p.last_dim().max(1);
                        let rows = (p.len() / n).max(1);
                        let scale = g[0] / T::c(rows as f64);
                        for ((d, &pv), &qq) in acc(&mut grads[q.0], qv.len()).iter_mut().zip(p.data()).zip(qv) {
                            if qq > *eps {
                                *d -= scale * pv / qq;
                            }
                        }
                    }
                }
                Op::SoftNll { p, logq } => {
                    if ng(*logq) {
                        let n = p.last_dim().max(1);
                        let rows = (p.len() / n).max(1);
                        let scale = g[0] / T::c(rows as f64);
                        for (d, &pv) in acc(&mut grads[logq.0], p.len()).iter_mut().zip(p.data()) {
                            *d -= scale * pv;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = node.value.last_dim().max(1);
                    let nf = T::c(n as f64);
                    let gv = val(*gamma);
                    if ng(*gamma) {
                        let gg = acc(&mut grads[gamma.0], n);
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((d, &s), &h) in gg.iter_mut().zip(gr).zip(hr) {
                                *d += s * h;
                            }
                        }
                    }
                    if ng(*beta) {
                        let gb = acc(&mut grads[beta.0], n);
                        for gr in g.chunks(n) {
                            for (d, &s) in gb.iter_mut().zip(gr) {
                                *d += s;
                            }
                        }
                    }
                    if ng(*x) {
                        let gx = acc(&mut grads[x.0], g.len());
                        let mut dh = vec![T::zero(); n];
                        for (r, ((gr, hr), dr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..n {
                                dh[j] = gr[j] * gv[j];
                                m1 += dh[j];
                                m2 += dh[j] * hr[j];
                            }
                            m1 /= nf;
                            m2 /= nf;
                            for j in 0..n {
                                dr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, rstd } => {
                    let n = node.value.last_dim().max(1);
                    let rows = g.len() / n;
                    let rf = T::c(rows as f64);
                    let gv = val(*gamma);
                    let mut sum_dy = vec![T::zero(); n];
                    let mut sum_dyh = vec![T::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            sum_dy[j] += gr[j];
                            sum_dyh[j] += gr[j] * hr[j];
                        }
                    }
                    if ng(*gamma) {
                        for (d, &s) in acc(&mut grads[gamma.0], n).iter_mut().zip(&sum_dyh) {
                            *d += s;
                        }
                    }
                    if ng(*beta) {
                        for (d, &s) in acc(&mut grads[beta.0], n).iter_mut().zip(&sum_dy) {
                            *d += s;
                        }
                    }
                    if ng(*x) {
                        let gx = acc(&mut grads[x.0], g.len());
                        for ((gr, hr), dr) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)) {
                            for j in 0..n {
                                let m1 = sum_dy[j] / rf;
                                let m2 = sum_dyh[j] / rf;
                                dr[j] += gv[j] * rstd[j] * (gr[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::BatchNormEval { x, gamma, beta, mean, scale } => {
                    let n = node.value.last_dim().max(1);
                    let gv = val(*gamma);
                    if ng(*gamma) {
                        let xv = val(*x);
                        let gg = acc(&mut grads[gamma.0], n);
                        for (gr, xr) in g.chunks(n).zip(xv.chunks(n)) {
                            for j in 0..n {
                                gg[j] += gr[j] * (xr[j] - mean[j]) * scale[j];
                            }
                        }
                    }
                    if ng(*beta) {
                        let gb = acc(&mut grads[beta.0], n);
                        for gr in g.chunks(n) {
                            for (d, &s) in gb.iter_mut().zip(gr) {
                                *d += s;
                            }
                        }
                    }
                    if ng(*x) {
                        let gx = acc(&mut grads[x.0], g.len());
                        for (gr, dr) in g.chunks(n).zip(gx.chunks_mut(n)) {
                            for j in 0..n {
                                dr[j] += gr[j] * scale[j] * gv[j];
                            }
                        }
                    }
                }
                Op::Transpose { x, batch, rows, cols } => {
                    if ng(*x) {
                        let gx = acc(&mut grads[x.0], g.len());
                        let sz = rows * cols;
                        for bi in 0..*batch {
                            let gs = &g[bi * sz..(bi + 1) * sz];
                            let dst = &mut gx[bi * sz..(bi + 1) * sz];
                            // gradient arrives as cols×rows
                            for c in 0..*cols {
                                for r in 0..*rows {
                                    dst[r * cols + c] += gs[c * rows + r];
                                }
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if ng(*x) {
                        for (d, &s) in acc(&mut grads[x.0], g.len()).iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Concat { parts, outer, chunks } => {
                    let total: usize = chunks.iter().sum();
                    let mut off = 0;
                    for (p, &c) in parts.iter().zip(chunks) {
                        if ng(*p) {
                            let lp = len(*p);
                            let gp = acc(&mut grads[p.0], lp);
                            for o in 0..*outer {
                                let src = &g[o * total + off..o * total + off + c];
                                for (d, &s) in gp[o * c..(o + 1) * c].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::Slice { x, outer, full, start, len: sl } => {
                    if ng(*x) {
                        let lx = len(*x);
                        let gx = acc(&mut grads[x.0], lx);
                        for o in 0..*outer {
                            let dst = &mut gx[o * full + start..o * full + start + sl];
                            for (d, &s) in dst.iter_mut().zip(&g[o * sl..(o + 1) * sl]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::GridSample { src, taps, channels } => {
                    if ng(*src) {
                        let c = *channels;
                        let ls = len(*src);
                        let gs = acc(&mut grads[src.0], ls);
                        for (pi, t) in taps.iter().enumerate() {
                            let gr = &g[pi * c..(pi + 1) * c];
                            for tap in t {
                                let dst = &mut gs[tap.row * c..(tap.row + 1) * c];
                                for (d, &s) in dst.iter_mut().zip(gr) {
                                    *d += tap.w * s;
                                }
                            }
                        }
                    }
                }
                Op::SplitHeads { x, b, n, h, d } => {
                    if ng(*x) {
                        let (b, n, h, d) = (*b, *n, *h, *d);
                        let c = h * d;
                        let gx = acc(&mut grads[x.0], g.len());
                        for bi in 0..b {
                            for ni in 0..n {
                                for hi in 0..h {
                                    let src = ((bi * h + hi) * n + ni) * d;
                                    let dst = (bi * n + ni) * c + hi * d;
                                    for j in 0..d {
                                        gx[dst + j] += g[src + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads { x, b, n, h, d } => {
                    if ng(*x) {
                        let (b, n, h, d) = (*b, *n, *h, *d);
                        let c = h * d;
                        let gx = acc(&mut grads[x.0], g.len());
                        for bi in 0..b {
                            for hi in 0..h {
                                for ni in 0..n {
                                    let dst = ((bi * h + hi) * n + ni) * d;
                                    let src = (bi * n + ni) * c + hi * d;
                                    for j in 0..d {
                                        gx[dst + j] += g[src + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    if ng(*x) {
                        let lx = len(*x);
                        let s = if matches!(node.op, Op::Mean(_)) {
                            g[0] / T::c(lx.max(1) as f64)
                        } else {
                            g[0]
                        };
                        for d in acc(&mut grads[x.0], lx).iter_mut() {
                            *d += s;
                        }
                    }
                }
                Op::L2Normalize { x, norms, eps } => {
                    if ng(*x) {
                        let n = node.value.last_dim().max(1);
                        let gx = acc(&mut grads[x.0], g.len());
                        for (r, ((gr, yr), dr)) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                            if norms[r] <= *eps {
                                for (d, &s) in dr.iter_mut().zip(gr) {
                                    *d += s / norms[r];
                                }
                                continue;
                            }
                            let mut dot = T::zero();
                            for (&s, &y) in gr.iter().zip(yr) {
                                dot += s * y;
                            }
                            for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += (s - y * dot) / norms[r];
                            }
                        }
                    }
                }
                Op::Gather { x, indices } => {
                    if ng(*x) {
                        let lx = len(*x);
                        let inner = if indices.is_empty() { 0 } else { g.len() / indices.len() };
                        let gx = acc(&mut grads[x.0], lx);
                        for (k, &i) in indices.iter().enumerate() {
                            for (d, &s) in gx[i * inner..(i + 1) * inner].iter_mut().zip(&g[k * inner..(k + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
