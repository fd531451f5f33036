//! Dense kernels. Every output element is accumulated in a fixed order
//! (ascending inner index), so results do not depend on blocking.

use super::array::{transpose_into, Real};

/// `out[m×n] (+)= op(a) · op(b)` with `op(a)` of shape m×k.
///
/// `ta`: `a` is stored k×m. `tb`: `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let tmp;
    let b = if tb {
        let mut t = vec![T::zero(); k * n];
        transpose_into(b, n, k, &mut t);
        tmp = t;
        &tmp[..]
    } else {
        b
    };
    if ta {
        gemm_tn(a, b, m, k, n, out);
    } else {
        gemm_nn(a, b, m, k, n, out);
    }
}

fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut i = 0;
    while i + 4 <= m {
        let rows = &mut out[i * n..(i + 4) * n];
        let (c0, rest) = rows.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
        i += 1;
    }
}

fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let arow = &a[p * m..(p + 1) * m];
        let mut i = 0;
        while i + 4 <= m {
            let rows = &mut out[i * n..(i + 4) * n];
            let (c0, rest) = rows.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (a0, a1, a2, a3) = (arow[i], arow[i + 1], arow[i + 2], arow[i + 3]);
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
            i += 4;
        }
        while i < m {
            let av = arow[i];
            let crow = &mut out[i * n..(i + 1) * n];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x += av * bv;
            }
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (4, 5, 3), (7, 9, 13), (9, 3, 5), (16, 8, 4)] {
            for ta in [false, true] {
                for tb in [false, true] {
                    let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut out = vec![0.0; m * n];
                    gemm(&a, &b, m, k, n, ta, tb, &mut out, false);
                    let want = naive(&a, &b, m, k, n, ta, tb);
                    for (x, y) in out.iter().zip(&want) {
                        assert!((x - y).abs() <= 1e-12, "{m}x{k}x{n} ta={ta} tb={tb}");
                    }
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_to_existing() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [10.0, 20.0];
        gemm(&a, &b, 2, 2, 1, false, false, &mut out, true);
        assert_eq!(out, [13.0, 27.0]);
    }
}
