use super::array::{Array, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and step count, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn zeros_like(params: &[Array<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. `weight_decay[i]` applies to
/// parameter `i` (zero exempts it). A non-finite gradient aborts before any
/// parameter is touched.
pub fn adamw_step<T: Real>(
    params: &mut [Array<T>],
    grads: &[Array<T>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != weight_decay.len() {
        return Err(Error::invalid("adamw: parameter, gradient and state counts differ"));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::invalid(format!("adamw: gradient {i} has shape {:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - cfg.beta1), T::c(1.0 - cfg.beta2));
    let step_size = T::c(lr / bc1);
    let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
    let eps = T::c(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = T::c(1.0 - lr * weight_decay[i]);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &g), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pv *= decay;
            *mv = b1 * *mv + one_b1 * g;
            *vv = b2 * *vv + one_b2 * g * g;
            let denom = vv.sqrt() * inv_sqrt_bc2 + eps;
            *pv -= step_size * *mv / denom;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Array<f64> {
        Array::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![scalar(0.7)];
        let mut st = AdamWState::zeros_like(&p);
        adamw_step(&mut p, &[scalar(0.0)], &mut st, &AdamWConfig::default(), 0.1, &[0.0]).unwrap();
        assert_eq!(p[0].item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamWState::zeros_like(&p);
        adamw_step(&mut p, &[scalar(1.0)], &mut st, &AdamWConfig::default(), 0.1, &[0.0]).unwrap();
        // mhat = 1, vhat = 1: p = 1 - 0.1 / (1 + 1e-8)
        assert!((p[0].item() - 0.9).abs() <= 1e-6);
    }

    #[test]
    fn decay_only() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamWState::zeros_like(&p);
        adamw_step(&mut p, &[scalar(0.0)], &mut st, &AdamWConfig::default(), 0.1, &[0.1]).unwrap();
        assert!((p[0].item() - 0.99).abs() <= 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamWState::zeros_like(&p);
        let err = adamw_step(&mut p, &[scalar(f64::NAN)], &mut st, &AdamWConfig::default(), 0.1, &[0.0]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Array::new(&[2], vec![3.0, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d: &[f64] = g[0].data();
        let after = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((after - 1.0).abs() < 1e-5);
    }
}
