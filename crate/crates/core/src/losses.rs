//! Image-level, pixel-relation and channel-relation losses over the
//! multi-crop pair schedule.

use crate::augmentation::CropGeometry;
use crate::error::{Error, Result};
use crate::model::Branches;
use crate::numerics::{Array, Real, SamplePoint, Tape, Var, LOG_EPS};
use crate::relation::{channel_relation, overlap_rect, pixel_relation, OverlapRect};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Relation heads `M`.
    pub relation_heads: usize,
    pub t_p: f64,
    pub t_c: f64,
    /// Overlap lattice side for global-global pairs.
    pub gg_grid: usize,
    /// Overlap lattice side for local-global pairs.
    pub lg_grid: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub enable_image: bool,
    pub enable_pixel: bool,
    pub enable_channel: bool,
    pub weight_image: f64,
    pub weight_pixel: f64,
    pub weight_channel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            relation_heads: 6,
            t_p: 0.5,
            t_c: 0.1,
            gg_grid: 7,
            lg_grid: 4,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            enable_image: true,
            enable_pixel: true,
            enable_channel: true,
            weight_image: 1.0,
            weight_pixel: 1.0,
            weight_channel: 1.0,
        }
    }
}

impl LossConfig {
    pub fn branches(&self) -> Branches {
        Branches {
            image: self.enable_image,
            pixel: self.enable_pixel,
            channel: self.enable_channel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branches().require_any()?;
        for (name, t) in [
            ("t_p", self.t_p),
            ("t_c", self.t_c),
            ("student_temp", self.student_temp),
            ("teacher_temp", self.teacher_temp),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {t}")));
            }
        }
        if self.relation_heads == 0 || self.gg_grid == 0 || self.lg_grid == 0 {
            return Err(Error::config("relation heads and overlap grids must be positive"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::config("center momentum must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    GlobalGlobal,
    LocalGlobal,
}

/// One scheduled (student view, teacher view) pair. View indices are per
/// image: 0 and 1 are the global views, `2 + i` is local view `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub student: usize,
    pub teacher: usize,
    pub kind: PairKind,
}

/// Pairs used for every image. Teachers are always global views; local
/// views are never paired with each other.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSchedule {
    pub pairs: Vec<Pair>,
}

impl PairSchedule {
    pub fn new(n_local: usize) -> Self {
        let mut pairs = vec![
            Pair { student: 0, teacher: 1, kind: PairKind::GlobalGlobal },
            Pair { student: 1, teacher: 0, kind: PairKind::GlobalGlobal },
        ];
        for l in 0..n_local {
            for t in 0..2 {
                pairs.push(Pair { student: 2 + l, teacher: t, kind: PairKind::LocalGlobal });
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub image: f64,
    pub pixel: f64,
    pub channel: f64,
    pub total: f64,
    /// Per image and scheduled pair: whether the pixel loss had an overlap.
    pub pixel_mask: Vec<bool>,
}

/// Student-side outputs for a stack of same-size views.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutputs {
    /// `[V, K]`.
    pub logits: Option<Var>,
    /// Projected and predicted tokens, `[V, g, g, C]`.
    pub pixel: Option<Var>,
    /// `[V, g·g, C]`.
    pub channel: Option<Var>,
}

/// Teacher outputs for the global views, detached.
#[derive(Clone, Debug)]
pub struct TeacherOutputs<T> {
    pub logits: Option<Array<T>>,
    pub pixel: Option<Array<T>>,
    pub channel: Option<Array<T>>,
}

/// Running mean of teacher logits subtracted before sharpening.
#[derive(Clone, Debug, PartialEq)]
pub struct Center<T> {
    pub values: Array<T>,
}

impl<T: Real> Center<T> {
    pub fn zeros(k: usize) -> Self {
        Self { values: Array::zeros(&[k]) }
    }

    /// `center = m·center + (1 - m)·mean_rows(logits)`.
    pub fn update(&mut self, logits: &Array<T>, momentum: f64) {
        let k = self.values.len();
        let rows = logits.len() / k;
        let mut mean = vec![0.0f64; k];
        for row in logits.data().chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.f64();
            }
        }
        for (c, m) in self.values.data_mut().iter_mut().zip(mean) {
            *c = T::c(momentum * c.f64() + (1.0 - momentum) * m / rows as f64);
        }
    }
}

fn gather_rows<T: Real>(a: &Array<T>, idx: &[usize]) -> Array<T> {
    let inner = a.len() / a.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        data.extend_from_slice(&a.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[0] = idx.len();
    Array::new(&shape, data).expect("gather shape")
}

/// Teacher pixel relations at temperature `t_p` for the given lattices.
fn teacher_pixel<T: Real>(feat: &Array<T>, points: &[SamplePoint], groups: usize, heads: usize, t_p: f64) -> Result<Array<T>> {
    let tape = Tape::new();
    let src = tape.constant(feat.clone());
    let s = tape.grid_sample(src, points, groups)?;
    let a = pixel_relation(&tape, s, heads, t_p)?;
    let v = tape.value(a).clone();
    Ok(v)
}

/// Mean pixel-relation cross-entropy over a group of pairs sharing one
/// lattice size. `pairs` holds (student view, teacher view, overlap), where
/// the overlap's first geometry belongs to the student view.
pub fn pixel_group_loss<T: Real>(
    tape: &Tape<T>,
    student: Var,
    teacher: &Array<T>,
    pairs: &[(usize, usize, &OverlapRect)],
    cfg: &LossConfig,
) -> Result<Var> {
    let ss = tape.shape(student);
    let ts = teacher.shape();
    if ss.len() != 4 || ts.len() != 4 || ss[3] != ts[3] {
        return Err(Error::invalid(format!("pixel loss feature shapes {ss:?} and {ts:?}")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("pixel loss over no pairs"));
    }
    let mut sp = Vec::new();
    let mut tp = Vec::new();
    for &(s, t, ov) in pairs {
        sp.extend(ov.sample_points(0, ss[1], ss[2], s));
        tp.extend(ov.sample_points(1, ts[1], ts[2], t));
    }
    let target = teacher_pixel(teacher, &tp, pairs.len(), cfg.relation_heads, cfg.t_p)?;
    let x = tape.grid_sample(student, &sp, pairs.len())?;
    let q = pixel_relation(tape, x, cfg.relation_heads, 1.0)?;
    tape.cross_entropy_rows(&target, q, T::c(LOG_EPS))
}

/// Mean channel-relation cross-entropy over (student view, teacher view) pairs.
/// `student` is `[Vs, N, C]`, `teacher` is `[Vt, N', C]`.
pub fn channel_group_loss<T: Real>(
    tape: &Tape<T>,
    student: Var,
    teacher: &Array<T>,
    pairs: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    let target = {
        let t = Tape::new();
        let x = t.constant(teacher.clone());
        let a = channel_relation(&t, x, cfg.t_c)?;
        let v = t.value(a).clone();
        v
    };
    let (si, ti): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let q = channel_relation(tape, student, 1.0)?;
    let q = tape.gather(q, &si)?;
    tape.cross_entropy_rows(&gather_rows(&target, &ti), q, T::c(LOG_EPS))
}

/// Teacher targets for the image loss: `softmax((logits - center) / teacher_temp)`.
pub fn image_targets<T: Real>(logits: &Array<T>, center: &Center<T>, cfg: &LossConfig) -> Result<Array<T>> {
    let k = center.values.len();
    if logits.last_dim() != k {
        return Err(Error::invalid(format!("{} logits against a center of {k}", logits.last_dim())));
    }
    let mut centered = logits.clone();
    for row in centered.data_mut().chunks_mut(k) {
        for (v, &c) in row.iter_mut().zip(center.values.data()) {
            *v -= c;
        }
    }
    crate::numerics::softmax_rows(&centered, T::c(cfg.teacher_temp))
}

/// Mean image-level cross-entropy over (student view, teacher view) pairs.
pub fn image_group_loss<T: Real>(
    tape: &Tape<T>,
    student_logits: Var,
    targets: &Array<T>,
    pairs: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    let (si, ti): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let logq = tape.log_softmax_rows(student_logits, T::c(cfg.student_temp))?;
    let logq = tape.gather(logq, &si)?;
    tape.soft_nll_rows(&gather_rows(targets, &ti), logq)
}

/// Combines per-group means into a pair-weighted mean over `total` pairs.
fn weighted_mean<T: Real>(tape: &Tape<T>, groups: &[(Var, usize)], total: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, n) in groups {
        let s = tape.scale(v, T::c(n as f64 / total as f64));
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Array::scalar(T::zero()))))
}

/// `L = w_I·L_I + w_p·L_p + w_c·L_c` over the batch, skipping disabled terms.
///
/// `geoms[b]` lists image `b`'s view geometries in schedule order. Student
/// view `v` of image `b` sits at row `b·2 + v` of the global stack or
/// `b·n_local + (v - 2)` of the local stack; teacher rows follow the global layout.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    student_global: &ViewOutputs,
    student_local: Option<&ViewOutputs>,
    teacher: &TeacherOutputs<T>,
    geoms: &[Vec<CropGeometry>],
    center: &Center<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    let b = geoms.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let n_local = geoms[0].len().saturating_sub(2);
    if geoms.iter().any(|g| g.len() != 2 + n_local) {
        return Err(Error::invalid("every image needs the same number of views"));
    }
    if n_local > 0 && student_local.is_none() {
        return Err(Error::invalid("local views scheduled but no local outputs given"));
    }
    let schedule = PairSchedule::new(n_local);
    let total_pairs = b * schedule.len();
    let row = |img: usize, view: usize| if view < 2 { img * 2 + view } else { img * n_local + view - 2 };
    let split = |kind: PairKind| -> Vec<(usize, usize)> {
        (0..b)
            .flat_map(|i| {
                schedule
                    .pairs
                    .iter()
                    .filter(move |p| p.kind == kind)
                    .map(move |p| (row(i, p.student), row(i, p.teacher)))
            })
            .collect()
    };
    let gg = split(PairKind::GlobalGlobal);
    let lg = split(PairKind::LocalGlobal);
    let missing = |what: &str| Error::invalid(format!("{what} outputs missing for an enabled loss"));
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut report = LossReport {
        image: 0.0,
        pixel: 0.0,
        channel: 0.0,
        total: 0.0,
        pixel_mask: Vec::new(),
    };

    let mut image_loss = None;
    if cfg.enable_image {
        let tl = teacher.logits.as_ref().ok_or_else(|| missing("teacher image"))?;
        let targets = image_targets(tl, center, cfg)?;
        let mut groups = vec![(image_group_loss(tape, student_global.logits.ok_or_else(|| missing("image"))?, &targets, &gg, cfg)?, gg.len())];
        if let Some(sl) = student_local.filter(|_| !lg.is_empty()) {
            groups.push((image_group_loss(tape, sl.logits.ok_or_else(|| missing("image"))?, &targets, &lg, cfg)?, lg.len()));
        }
        let l = weighted_mean(tape, &groups, total_pairs)?;
        report.image = tape.value(l).item().f64();
        image_loss = Some(l);
    }

    let mut pixel_loss = None;
    if cfg.enable_pixel {
        let tp = teacher.pixel.as_ref().ok_or_else(|| missing("teacher pixel"))?;
        let mut groups = Vec::new();
        let mut mask = vec![false; total_pairs];
        for (kind, side) in [(PairKind::GlobalGlobal, cfg.gg_grid), (PairKind::LocalGlobal, cfg.lg_grid)] {
            let mut present = Vec::new();
            for i in 0..b {
                for (k, p) in schedule.pairs.iter().enumerate().filter(|(_, p)| p.kind == kind) {
                    if let Some(ov) = overlap_rect(&geoms[i][p.student], &geoms[i][p.teacher], (side, side)) {
                        mask[i * schedule.len() + k] = true;
                        present.push((row(i, p.student), row(i, p.teacher), ov));
                    }
                }
            }
            if present.is_empty() {
                continue;
            }
            let outs = if kind == PairKind::GlobalGlobal { Some(student_global) } else { student_local };
            let sv = outs.and_then(|o| o.pixel).ok_or_else(|| missing("pixel"))?;
            let refs: Vec<_> = present.iter().map(|(s, t, ov)| (*s, *t, ov)).collect();
            groups.push((pixel_group_loss(tape, sv, tp, &refs, cfg)?, present.len()));
        }
        let l = weighted_mean(tape, &groups, total_pairs)?;
        report.pixel = tape.value(l).item().f64();
        report.pixel_mask = mask;
        pixel_loss = Some(l);
    }

    let mut channel_loss = None;
    if cfg.enable_channel {
        let tc = teacher.channel.as_ref().ok_or_else(|| missing("teacher channel"))?;
        let mut groups = vec![(channel_group_loss(tape, student_global.channel.ok_or_else(|| missing("channel"))?, tc, &gg, cfg)?, gg.len())];
        if let Some(sl) = student_local.filter(|_| !lg.is_empty()) {
            groups.push((channel_group_loss(tape, sl.channel.ok_or_else(|| missing("channel"))?, tc, &lg, cfg)?, lg.len()));
        }
        let l = weighted_mean(tape, &groups, total_pairs)?;
        report.channel = tape.value(l).item().f64();
        channel_loss = Some(l);
    }

    for (l, w) in [(image_loss, cfg.weight_image), (pixel_loss, cfg.weight_pixel), (channel_loss, cfg.weight_channel)] {
        if let Some(l) = l {
            terms.push((l, w));
        }
    }
    let mut total = None;
    for (l, w) in terms {
        let l = if w == 1.0 { l } else { tape.scale(l, T::c(w)) };
        total = Some(match total {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let total = total.expect("at least one enabled term");
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value:?}")));
    }
    report.total = value.f64();
    Ok((total, report))
}

/// Single-pair pixel loss on head outputs (`[g, g, C]` token-major grids):
/// zero when the overlap is absent.
pub fn pixel_loss<T: Real>(
    student: &Array<T>,
    teacher: &Array<T>,
    ov: Option<&OverlapRect>,
    cfg: &LossConfig,
) -> Result<T> {
    let Some(ov) = ov else { return Ok(T::zero()) };
    let tape = Tape::new();
    let s = student.shape().to_vec();
    let sv = tape.constant(student.clone().reshaped(&[1, s[0], s[1], s[2]])?);
    let t = teacher.shape().to_vec();
    let tv = teacher.clone().reshaped(&[1, t[0], t[1], t[2]])?;
    let l = pixel_group_loss(&tape, sv, &tv, &[(0, 0, ov)], cfg)?;
    let v = tape.value(l).item();
    Ok(v)
}

/// Single-pair channel loss on head outputs (`N × C` token-major).
pub fn channel_loss<T: Real>(student: &Array<T>, teacher: &Array<T>, cfg: &LossConfig) -> Result<T> {
    let tape = Tape::new();
    let s = student.shape().to_vec();
    let t = teacher.shape().to_vec();
    if s.len() != 2 || t.len() != 2 || s[1] != t[1] {
        return Err(Error::invalid(format!("channel loss shapes {s:?} and {t:?}")));
    }
    let sv = tape.constant(student.clone().reshaped(&[1, s[0], s[1]])?);
    let tv = teacher.clone().reshaped(&[1, t[0], t[1]])?;
    let l = channel_group_loss(&tape, sv, &tv, &[(0, 0)], cfg)?;
    let v = tape.value(l).item();
    Ok(v)
}

/// Image loss of row-aligned student and teacher logits (`[n, K]`); the
/// center is updated from the teacher batch afterwards.
pub fn image_loss<T: Real>(student: &Array<T>, teacher: &Array<T>, center: &mut Center<T>, cfg: &LossConfig) -> Result<T> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(Error::invalid("image loss expects matching [n, K] logits"));
    }
    let tape = Tape::new();
    let targets = image_targets(teacher, center, cfg)?;
    let sv = tape.constant(student.clone());
    let pairs: Vec<_> = (0..student.shape()[0]).map(|i| (i, i)).collect();
    let l = image_group_loss(&tape, sv, &targets, &pairs, cfg)?;
    center.update(teacher, cfg.center_momentum);
    let v = tape.value(l).item();
    Ok(v)
}
