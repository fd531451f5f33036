//! Projection, prediction and image-level heads.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Array, Bound, ParamId, ParamSet, Real, Tape, Var};
use crate::vit::{trunc_normal, Linear};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsConfig {
    pub prototypes: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    /// Student-only prediction heads; `false` gives the symmetric variant.
    pub asymmetric: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            prototypes: 1024,
            hidden: 256,
            bottleneck: 64,
            asymmetric: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Pixel,
    Channel,
}

/// Batch statistics observed during a training pass, applied to running
/// buffers once the step succeeds.
#[derive(Clone, Debug)]
pub struct BnStat<T> {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Everything a forward pass through the model needs besides its inputs.
pub struct Pass<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub bound: &'a Bound,
    pub buffers: &'a ParamSet<T>,
    /// Batch statistics (`true`) or running statistics (`false`) in batch norm.
    pub train: bool,
    stats: RefCell<Vec<BnStat<T>>>,
}

impl<'a, T: Real> Pass<'a, T> {
    pub fn new(tape: &'a Tape<T>, bound: &'a Bound, buffers: &'a ParamSet<T>, train: bool) -> Self {
        Self {
            tape,
            bound,
            buffers,
            train,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn take_stats(&self) -> Vec<BnStat<T>> {
        self.stats.take()
    }
}

/// `running = (1 - m)·running + m·batch` for every recorded statistic.
pub fn apply_bn_stats<T: Real>(buffers: &mut ParamSet<T>, stats: &[BnStat<T>]) {
    let m = T::c(BN_MOMENTUM);
    let keep = T::one() - m;
    for s in stats {
        for (r, &b) in buffers.get_mut(s.mean_id).data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(s.var_id).data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch norm over all leading rows; running statistics live in a buffer set.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.weight"), Array::ones(&[dim])),
            beta: params.add(format!("{name}.bias"), Array::zeros(&[dim])),
            mean: buffers.add(format!("{name}.running_mean"), Array::zeros(&[dim])),
            var: buffers.add(format!("{name}.running_var"), Array::ones(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, pass: &Pass<T>, x: Var) -> Result<Var> {
        let (g, b) = (pass.bound.var(self.gamma), pass.bound.var(self.beta));
        let eps = T::c(BN_EPS);
        if pass.train {
            let (y, mean, var) = pass.tape.batch_norm_train(x, g, b, eps)?;
            pass.stats.borrow_mut().push(BnStat {
                mean_id: self.mean,
                var_id: self.var,
                mean,
                var,
            });
            Ok(y)
        } else {
            let mean = pass.buffers.get(self.mean).data();
            let var = pass.buffers.get(self.var).data();
            pass.tape.batch_norm_eval(x, g, b, mean, var, eps)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Predictor {
    linear: Linear,
    bn: BatchNorm,
}

#[derive(Clone, Copy, Debug)]
struct ImageHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    prototypes: Linear,
}

/// Rescales every column (one prototype) to unit length, so initial logits
/// are cosines of the normalized bottleneck.
fn unit_columns<T: Real>(mut w: Array<T>) -> Array<T> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    for c in 0..cols {
        let norm = (0..rows).map(|r| w.data()[r * cols + c].f64().powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..rows {
                let v = &mut w.data_mut()[r * cols + c];
                *v = T::c(v.f64() / norm);
            }
        }
    }
    w
}

/// Outputs of the image-level head.
pub struct ImageHeadOutput {
    /// L2-normalized bottleneck, `[B, bottleneck]`.
    pub bottleneck: Var,
    /// `[B, K]`.
    pub logits: Var,
}

/// All heads attached to the encoder. Pixel and channel heads hold disjoint
/// parameters.
#[derive(Clone, Debug)]
pub struct Heads {
    cfg: HeadsConfig,
    proj_pixel: BatchNorm,
    proj_channel: BatchNorm,
    pred_pixel: Option<Predictor>,
    pred_channel: Option<Predictor>,
    image: ImageHead,
}

impl Heads {
    pub fn new<T: Real, R: Rng>(
        cfg: HeadsConfig,
        dim: usize,
        params: &mut ParamSet<T>,
        buffers: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.prototypes == 0 || cfg.hidden == 0 || cfg.bottleneck == 0 {
            return Err(Error::config("head sizes must be positive"));
        }
        let proj_pixel = BatchNorm::new(params, buffers, "heads.pixel.proj.bn", dim);
        let proj_channel = BatchNorm::new(params, buffers, "heads.channel.proj.bn", dim);
        let mut predictor = |name: &str| Predictor {
            linear: Linear::new(params, rng, &format!("heads.{name}.pred.linear"), dim, dim, false),
            bn: BatchNorm::new(params, buffers, &format!("heads.{name}.pred.bn"), dim),
        };
        let (pred_pixel, pred_channel) = if cfg.asymmetric {
            (Some(predictor("pixel")), Some(predictor("channel")))
        } else {
            (None, None)
        };
        let image = ImageHead {
            fc1: Linear::new(params, rng, "heads.image.fc1", dim, cfg.hidden, true),
            fc2: Linear::new(params, rng, "heads.image.fc2", cfg.hidden, cfg.hidden, true),
            fc3: Linear::new(params, rng, "heads.image.fc3", cfg.hidden, cfg.bottleneck, true),
            prototypes: Linear {
                w: params.add("heads.image.prototypes.weight", unit_columns(trunc_normal(rng, &[cfg.bottleneck, cfg.prototypes], 0.02))),
                b: None,
            },
        };
        Ok(Self {
            cfg,
            proj_pixel,
            proj_channel,
            pred_pixel,
            pred_channel,
            image,
        })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.cfg
    }

    /// Batch norm then ReLU over token rows of `x` (`[..., C]`).
    pub fn project<T: Real>(&self, pass: &Pass<T>, x: Var, which: Branch) -> Result<Var> {
        let bn = match which {
            Branch::Pixel => &self.proj_pixel,
            Branch::Channel => &self.proj_channel,
        };
        Ok(pass.tape.relu(bn.forward(pass, x)?))
    }

    /// Pointwise linear, batch norm, ReLU. Identity in the symmetric variant.
    pub fn predict<T: Real>(&self, pass: &Pass<T>, x: Var, which: Branch) -> Result<Var> {
        let pred = match which {
            Branch::Pixel => &self.pred_pixel,
            Branch::Channel => &self.pred_channel,
        };
        match pred {
            None => Ok(x),
            Some(p) => {
                let h = p.linear.forward(pass.tape, pass.bound, x)?;
                Ok(pass.tape.relu(p.bn.forward(pass, h)?))
            }
        }
    }

    /// MLP with GELU, L2-normalized bottleneck, prototype logits.
    pub fn image_head<T: Real>(&self, pass: &Pass<T>, token: Var) -> Result<ImageHeadOutput> {
        let (t, b) = (pass.tape, pass.bound);
        let h = t.gelu(self.image.fc1.forward(t, b, token)?);
        let h = t.gelu(self.image.fc2.forward(t, b, h)?);
        let z = self.image.fc3.forward(t, b, h)?;
        let bottleneck = t.l2_normalize_rows(z, T::c(L2_EPS));
        let logits = self.image.prototypes.forward(t, b, bottleneck)?;
        Ok(ImageHeadOutput { bottleneck, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(asym: bool, dim: usize) -> (Heads, ParamSet<f64>, ParamSet<f64>) {
        let (mut p, mut b) = (ParamSet::new(), ParamSet::new());
        let cfg = HeadsConfig {
            prototypes: 5,
            hidden: 6,
            bottleneck: 3,
            asymmetric: asym,
        };
        let h = Heads::new(cfg, dim, &mut p, &mut b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (h, p, b)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn eval_projection_with_identity_stats_is_relu() {
        let (h, p, b) = setup(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[7, 4]);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, false);
        let y = h.project(&pass, tape.constant(x.clone()), Branch::Pixel).unwrap();
        let want = x.map(|v| v.max(0.0) / (1.0 + BN_EPS).sqrt());
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
        let neg = tape.constant(Array::full(&[3, 4], -1.0));
        let y = h.project(&pass, neg, Branch::Channel).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_projection_normalizes_batch() {
        let (h, p, b) = setup(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[50, 4]).map(|v| 3.0 * v + 1.0);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, true);
        let gamma = bound.var(p.id("heads.pixel.proj.bn.weight").unwrap());
        let beta = bound.var(p.id("heads.pixel.proj.bn.bias").unwrap());
        let (pre, _, _) = tape.batch_norm_train(tape.constant(x.clone()), gamma, beta, BN_EPS).unwrap();
        let pre = tape.value(pre).clone();
        for c in 0..4 {
            let col: Vec<f64> = (0..50).map(|r| pre.at(&[r, c])).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }
        let y = h.project(&pass, tape.constant(x), Branch::Pixel).unwrap();
        let relu = pre.map(|v| v.max(0.0));
        assert!(tape.value(y).max_abs_diff(&relu) < 1e-12);
        assert_eq!(pass.take_stats().len(), 1);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (h, p, mut b) = setup(true, 2);
        let x = Array::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]]).unwrap();
        let tape = Tape::new();
        let bound = Bound::new(&tape, &p, false);
        let stats = {
            let pass = Pass::new(&tape, &bound, &b, true);
            h.project(&pass, tape.constant(x), Branch::Channel).unwrap();
            pass.take_stats()
        };
        apply_bn_stats(&mut b, &stats);
        let mean = b.by_name("heads.channel.proj.bn.running_mean").unwrap();
        let var = b.by_name("heads.channel.proj.bn.running_var").unwrap();
        assert!((mean.data()[0] - 0.2).abs() < 1e-12 && (mean.data()[1] - 0.4).abs() < 1e-12);
        // unbiased variances 2 and 8
        assert!((var.data()[0] - 1.1).abs() < 1e-12 && (var.data()[1] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn predictor_identity_and_zero() {
        let (h, mut p, b) = setup(true, 3);
        let id = p.id("heads.pixel.pred.linear.weight").unwrap();
        *p.get_mut(id) = Array::eye(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 3]);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, false);
        let y = h.predict(&pass, tape.constant(x.clone()), Branch::Pixel).unwrap();
        assert!(tape.value(y).max_abs_diff(&x.map(|v| v.max(0.0) / (1.0 + BN_EPS).sqrt())) < 1e-12);
        *p.get_mut(id) = Array::zeros(&[3, 3]);
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, false);
        let y = h.predict(&pass, tape.constant(x.clone()), Branch::Pixel).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let (sym, p, b) = setup(false, 3);
        assert!(p.id("heads.pixel.pred.linear.weight").is_none());
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, true);
        let xv = tape.constant(x);
        assert_eq!(sym.predict(&pass, xv, Branch::Channel).unwrap(), xv);
    }

    #[test]
    fn image_head_bottleneck_and_zero_input() {
        let (h, p, b) = setup(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &p, false);
        let pass = Pass::new(&tape, &bound, &b, true);
        let out = h.image_head(&pass, tape.constant(random(&mut rng, &[3, 4]))).unwrap();
        assert_eq!(tape.shape(out.logits), vec![3, 5]);
        for row in tape.value(out.bottleneck).data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let out = h.image_head(&pass, tape.constant(Array::zeros(&[2, 4]))).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradients() {
        let (h, mut p, b) = setup(true, 4);
        // at init scale the bottleneck norm is ~1e-4 and normalizing it is too
        // ill-conditioned for central differences
        for a in p.arrays_mut().iter_mut().filter(|a| a.rank() == 2) {
            *a = a.map(|v| v * 25.0);
        }
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let x = random(&mut rng, &[6, 4]);
            let w = random(&mut rng, &[6, 4]);
            let wl = random(&mut rng, &[6, 5]);
            let mut inputs = vec![x];
            inputs.extend(p.arrays().iter().cloned());
            let r = gradcheck::check(&inputs, 1e-5, |tape, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let pass = Pass::new(tape, &bound, &b, true);
                let y = h.project(&pass, v[0], Branch::Pixel)?;
                let y = h.predict(&pass, y, Branch::Pixel)?;
                let img = h.image_head(&pass, v[0])?;
                let a = tape.sum(tape.mul(y, tape.constant(w.clone()))?);
                let c = tape.sum(tape.mul(img.logits, tape.constant(wl.clone()))?);
                tape.add(a, c)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }
}
