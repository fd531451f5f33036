//! Central finite-difference gradient checking at 64-bit precision.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of a gradient check over all inputs.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over inputs of `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    /// Inputs whose gradients are both below [`ZERO_GRAD`] (structural zeros,
    /// e.g. a bias feeding batch norm) contribute the absolute difference.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Input index with the largest relative error.
    pub worst_input: usize,
    /// Analytic gradient norm of that input.
    pub worst_norm: f64,
}

/// Gradient norm below which an input counts as having no gradient; central
/// differences carry roundoff of roughly this size.
pub const ZERO_GRAD: f64 = 1e-8;

/// Compares `backward` against central differences with step `h` for a
/// scalar function of `inputs`. `f` must build its graph on the tape it is
/// given, consuming the recorded input variables.
pub fn check<F>(inputs: &[Array<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Array<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.leaf(a.clone())).collect();
        let o = f(&t, &vs)?;
        let v = t.value(o).item();
        Ok(v)
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = (0, 0.0);
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut num = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            num[j] = (up - down) / (2.0 * h);
        }
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for (x, y) in a.data().iter().zip(&num) {
            diff2 += (x - y) * (x - y);
            an2 += x * x;
            nu2 += y * y;
            max_abs = max_abs.max((x - y).abs());
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel = if denom > ZERO_GRAD { diff2.sqrt() / denom } else { diff2.sqrt() };
        if rel > max_rel {
            max_rel = rel;
            worst = (i, an2.sqrt());
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_input: worst.0,
        worst_norm: worst.1,
    })
}
