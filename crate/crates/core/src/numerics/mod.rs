//! Dense arrays with reverse-mode differentiation, sized to what the model,
//! heads and losses use. Generic over `f32` (training) and `f64` (checks).

mod array;
mod backward;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use array::{Array, DType, Real};
pub use backward::Gradients;
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{SamplePoint, Tape, Var};

use crate::error::Result;

/// Clamp applied to probabilities inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Eager `a · b`.
pub fn matmul<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    let t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let out = t.matmul(va, vb)?;
    let v = t.value(out).clone();
    Ok(v)
}

/// Eager row softmax of `x / temperature`.
pub fn softmax_rows<T: Real>(x: &Array<T>, temperature: T) -> Result<Array<T>> {
    let t = Tape::new();
    let v = t.constant(x.clone());
    let out = t.softmax_rows(v, temperature)?;
    let r = t.value(out).clone();
    Ok(r)
}

/// Eager mean-over-rows cross entropy `-Σ p log q`, with `q` clamped at [`LOG_EPS`].
pub fn cross_entropy_rows<T: Real>(p: &Array<T>, q: &Array<T>) -> Result<T> {
    let t = Tape::new();
    let v = t.constant(q.clone());
    let out = t.cross_entropy_rows(p, v, T::c(LOG_EPS))?;
    let r = t.value(out).item();
    Ok(r)
}

/// Mean over rows of the Shannon entropy of a row-stochastic matrix.
pub fn mean_row_entropy<T: Real>(p: &Array<T>) -> f64 {
    let n = p.last_dim().max(1);
    let rows = (p.len() / n).max(1);
    let mut total = 0.0;
    for row in p.data().chunks(n) {
        for &v in row {
            let v = v.f64();
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    total / rows as f64
}

#[cfg(test)]
mod tests;
