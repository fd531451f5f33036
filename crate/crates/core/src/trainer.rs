//! Student/teacher training loop, schedules and checkpoints.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{make_views, mix64, ViewBatch};
use crate::config::TrainConfig;
use crate::container::{Container, Tensor, TensorData, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::heads::{apply_bn_stats, Pass};
use crate::losses::{total_loss, Center, LossReport};
use crate::model::{Model, ModelState};
use crate::numerics::{adamw_step, clip_global_norm, AdamWConfig, AdamWState, Array, Bound, ParamSet, Real, Tape};

pub const LAMBDA_START: f64 = 0.996;

/// Teacher EMA coefficient: `1 - (1 - start)·(1 + cos(π·step/total))/2`.
pub fn lambda_at(start: f64, step: u64, total: u64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::invalid(format!("momentum schedule: step {step} outside 0..={total}")));
    }
    let c = (PI * step as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - start) * (1.0 + c) / 2.0)
}

pub fn lambda_schedule(step: u64, total: u64) -> Result<f64> {
    lambda_at(LAMBDA_START, step, total)
}

/// Linear warmup from 0 to `peak` over the first `round(warmup_frac·total)`
/// steps, then cosine decay reaching `floor` at `total`.
pub fn lr_schedule(step: u64, total: u64, peak: f64, floor: f64, warmup_frac: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::invalid(format!("lr schedule: step {step} outside 0..={total}")));
    }
    let warm = ((warmup_frac * total as f64).round() as u64).min(total);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(peak);
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    Ok(floor + (peak - floor) * (1.0 + (PI * t).cos()) / 2.0)
}

/// `θ_2 ← λ·θ_2 + (1 - λ)·θ_1` over every teacher parameter; batch-norm
/// running statistics are copied from the student.
pub fn momentum_update<T: Real>(teacher: &mut ModelState<T>, student: &ModelState<T>, lambda: f64) -> Result<()> {
    teacher.params.check_compatible(&student.params)?;
    let (l, k) = (T::c(lambda), T::c(1.0 - lambda));
    for (t, s) in teacher.params.arrays_mut().iter_mut().zip(student.params.arrays()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = l * *tv + k * sv;
        }
    }
    teacher.buffers.assign_from(&student.buffers)
}

/// Per-parameter decay: matrices and embeddings decay, vectors (biases, norm
/// scales) do not.
fn decay_mask<T: Real>(params: &ParamSet<T>, wd: f64) -> Vec<f64> {
    params.arrays().iter().map(|a| if a.rank() >= 2 { wd } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub student: ModelState<T>,
    pub teacher: ModelState<T>,
    pub opt: AdamWState<T>,
    pub center: Center<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub lambda: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    /// Largest gradient magnitude that reached a teacher parameter.
    pub teacher_grad_max: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "step={} epoch={} lr={} lambda={} loss_image={} loss_pixel={} loss_channel={} loss_total={}",
            self.step, self.epoch, self.lr, self.lambda, self.loss.image, self.loss.pixel, self.loss.channel, self.loss.total
        )
    }
}

pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: TrainState<T>,
    n_images: usize,
    decay: Vec<f64>,
}

fn stack<'a, T: Real>(images: impl Iterator<Item = &'a Array<f32>>) -> Result<Array<T>> {
    let mut data = Vec::new();
    let mut inner: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &inner {
            None => inner = Some(img.shape().to_vec()),
            Some(s) if s != img.shape() => return Err(Error::invalid("views in a stack differ in size")),
            _ => {}
        }
        data.extend(img.data().iter().map(|&v| T::c(v as f64)));
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend(inner.unwrap_or_default());
    Array::new(&shape, data)
}

impl<T: Real> Trainer<T> {
    /// Fresh student from `cfg.seed`; the teacher starts as an exact copy.
    pub fn new(cfg: TrainConfig, n_images: usize) -> Result<Self> {
        cfg.validate()?;
        if n_images == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        let (model, student) = Model::new::<T>(&cfg.model, cfg.seed)?;
        let state = TrainState {
            teacher: student.clone(),
            opt: AdamWState::zeros_like(student.params.arrays()),
            center: Center::zeros(cfg.model.heads.prototypes),
            student,
            step: 0,
        };
        let decay = decay_mask(&state.student.params, cfg.weight_decay);
        Ok(Self {
            cfg,
            model,
            state,
            n_images,
            decay,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.n_images.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Dataset indices of the batch at `step`: a seeded permutation per epoch,
    /// cut into consecutive batches (the last one may be short).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.n_images).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(self.cfg.seed ^ mix64(epoch))));
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(self.n_images)].to_vec()
    }

    /// Augmented views for `step`; depends only on the seed, the step and
    /// the images, never on what ran before.
    pub fn views_for_step(&self, images: &[Array<f32>], step: u64) -> Result<Vec<ViewBatch>> {
        if images.len() != self.n_images {
            return Err(Error::invalid(format!("trainer was built for {} images, got {}", self.n_images, images.len())));
        }
        let root = mix64(self.cfg.seed.wrapping_add(0x9e37_79b9) ^ mix64(step / self.steps_per_epoch()));
        self.batch_indices(step)
            .into_iter()
            .map(|i| make_views(&images[i], &self.cfg.augment, root, i as u64))
            .collect()
    }

    /// Runs the next scheduled step on `images` (the whole training set).
    pub fn step(&mut self, images: &[Array<f32>]) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::invalid("training schedule already finished"));
        }
        let views = self.views_for_step(images, self.state.step)?;
        self.train_step(&views)
    }

    /// One optimisation step. State changes only if the whole step succeeds;
    /// a non-finite loss or gradient is returned as an error.
    pub fn train_step(&mut self, batch: &[ViewBatch]) -> Result<StepReport> {
        let total = self.total_steps();
        let step = self.state.step;
        let lr = lr_schedule(step, total, self.cfg.peak_lr(), self.cfg.min_lr, self.cfg.warmup_frac)?;
        let lambda = lambda_at(self.cfg.momentum_start, step, total)?;
        let branches = self.cfg.loss.branches();
        branches.require_any()?;

        let globals: Array<T> = stack(batch.iter().flat_map(|v| v.globals().iter().map(|g| &g.pixels)))?;
        let has_local = batch.first().is_some_and(|v| !v.locals().is_empty());
        let locals: Option<Array<T>> = has_local
            .then(|| stack(batch.iter().flat_map(|v| v.locals().iter().map(|g| &g.pixels))))
            .transpose()?;
        let geoms: Vec<_> = batch.iter().map(|v| v.views.iter().map(|x| x.geometry).collect()).collect();

        let tape = Tape::new();
        let s_bound = Bound::new(&tape, &self.state.student.params, true);
        // the teacher is recorded as trainable too, so the gradient it receives
        // can be checked to be exactly zero
        let t_bound = Bound::new(&tape, &self.state.teacher.params, true);
        let t_pass = Pass::new(&tape, &t_bound, &self.state.teacher.buffers, false);
        let teacher = self.model.teacher_forward(&t_pass, &globals, branches)?;
        let mut center = self.state.center.clone();
        if step == 0 {
            // start the center at the first teacher batch mean so the initial
            // targets are not dominated by the output shared by all images
            if let Some(logits) = &teacher.logits {
                center.update(logits, 0.0);
            }
        }
        let s_pass = Pass::new(&tape, &s_bound, &self.state.student.buffers, true);
        let (sg, sl) = self.model.student_forward(&s_pass, &globals, locals.as_ref(), branches)?;
        let (loss, report) = total_loss(&tape, &sg, sl.as_ref(), &teacher, &geoms, &center, &self.cfg.loss)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let mut g = s_bound.collect(&grads);
        let teacher_grad_max = t_bound
            .vars()
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|a| a.data().iter().map(|x| x.f64().abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let stats = s_pass.take_stats();

        let grad_norm = clip_global_norm(&mut g, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {step}")));
        }
        adamw_step(
            self.state.student.params.arrays_mut(),
            &g,
            &mut self.state.opt,
            &AdamWConfig::default(),
            lr,
            &self.decay,
        )?;
        apply_bn_stats(&mut self.state.student.buffers, &stats);
        if let Some(logits) = &teacher.logits {
            center.update(logits, self.cfg.loss.center_momentum);
        }
        self.state.center = center;
        momentum_update(&mut self.state.teacher, &self.state.student, lambda)?;
        self.state.step += 1;
        Ok(StepReport {
            step,
            epoch: step / self.steps_per_epoch(),
            lr,
            lambda,
            loss: report,
            grad_norm,
            teacher_grad_max,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, self.cfg.digest());
        c.push("step", Tensor::u64s(vec![self.state.step]));
        c.push("config", Tensor::bytes(self.cfg.to_text().into_bytes()));
        let s = &self.state;
        for (prefix, set) in [
            ("student.params", &s.student.params),
            ("student.buffers", &s.student.buffers),
            ("teacher.params", &s.teacher.params),
            ("teacher.buffers", &s.teacher.buffers),
        ] {
            for (name, a) in set.iter() {
                c.push(format!("{prefix}.{name}"), Tensor::from_array(a));
            }
        }
        for (i, (name, _)) in s.student.params.iter().enumerate() {
            c.push(format!("optim.m.{name}"), Tensor::from_array(&s.opt.m[i]));
            c.push(format!("optim.v.{name}"), Tensor::from_array(&s.opt.v[i]));
        }
        c.push("optim.step", Tensor::u64s(vec![s.opt.step]));
        c.push("center", Tensor::from_array(&s.center.values));
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Rebuilds a trainer for `cfg` and restores every array from `c`. Missing
    /// entries and shape or precision mismatches name the offending array.
    pub fn from_container(cfg: TrainConfig, n_images: usize, c: &Container) -> Result<Self> {
        let mut tr = Self::new(cfg, n_images)?;
        tr.state.step = read_u64(c, "step")?;
        tr.state.opt.step = read_u64(c, "optim.step")?;
        let s = &mut tr.state;
        for (prefix, set) in [
            ("student.params", &mut s.student.params),
            ("student.buffers", &mut s.student.buffers),
            ("teacher.params", &mut s.teacher.params),
            ("teacher.buffers", &mut s.teacher.buffers),
        ] {
            let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
            for (i, name) in names.iter().enumerate() {
                set.arrays_mut()[i] = read_array(c, &format!("{prefix}.{name}"), set.arrays()[i].shape())?;
            }
        }
        let names: Vec<String> = s.student.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let shape = s.student.params.arrays()[i].shape().to_vec();
            s.opt.m[i] = read_array(c, &format!("optim.m.{name}"), &shape)?;
            s.opt.v[i] = read_array(c, &format!("optim.v.{name}"), &shape)?;
        }
        s.center.values = read_array(c, "center", s.center.values.shape())?;
        Ok(tr)
    }

    pub fn load_checkpoint(path: &Path, cfg: TrainConfig, n_images: usize) -> Result<Self> {
        Self::from_container(cfg, n_images, &Container::read(path, CHECKPOINT_MAGIC)?)
    }
}

/// The configuration a checkpoint was written with.
pub fn checkpoint_config(c: &Container) -> Result<TrainConfig> {
    let t = c.get("config").ok_or_else(|| missing("config"))?;
    let TensorData::U8(bytes) = &t.data else {
        return Err(Error::Checkpoint {
            field: "config".into(),
            msg: "expected bytes".into(),
        });
    };
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint {
        field: "config".into(),
        msg: "not UTF-8".into(),
    })?;
    let cfg = TrainConfig::from_text(text).map_err(|e| Error::Checkpoint {
        field: "config".into(),
        msg: e.to_string(),
    })?;
    if cfg.digest() != c.digest {
        return Err(Error::Checkpoint {
            field: "digest".into(),
            msg: "header digest does not match the stored configuration".into(),
        });
    }
    Ok(cfg)
}

fn missing(field: &str) -> Error {
    Error::Checkpoint {
        field: field.into(),
        msg: "entry missing".into(),
    }
}

fn read_u64(c: &Container, name: &str) -> Result<u64> {
    match c.get(name).map(|t| &t.data) {
        Some(TensorData::U64(v)) if v.len() == 1 => Ok(v[0]),
        Some(_) => Err(Error::Checkpoint {
            field: name.into(),
            msg: "expected a single u64".into(),
        }),
        None => Err(missing(name)),
    }
}

fn read_array<T: Real>(c: &Container, name: &str, shape: &[usize]) -> Result<Array<T>> {
    let t = c.get(name).ok_or_else(|| missing(name))?;
    if t.shape != shape {
        return Err(Error::Checkpoint {
            field: name.into(),
            msg: format!("shape {:?} does not match the model's {:?}", t.shape, shape),
        });
    }
    t.to_array(false).ok_or_else(|| Error::Checkpoint {
        field: name.into(),
        msg: "stored precision differs from the run's".into(),
    })
}
