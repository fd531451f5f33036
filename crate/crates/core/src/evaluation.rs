//! Cross-view relation differences, linear probing, heatmaps and the
//! ablation harness.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{render_crop, sample_crop, view_rng, AugmentConfig, CropGeometry, CropKind};
use crate::config::TrainConfig;
use crate::data_io::{write_rgb_png, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Array, Bound, ParamSet, Real, Tape};
use crate::relation::{channel_self_relation, overlap_rect, pixel_self_relation, sample_overlap};
use crate::trainer::{lr_schedule, Trainer};

/// Views tried per pair before giving up on finding an overlap.
const MAX_RESAMPLES: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDiffReport {
    pub pixel: f64,
    pub channel: f64,
    pub pairs: usize,
    pub config_digest: String,
}

impl RelationDiffReport {
    pub fn to_text(&self) -> String {
        format!(
            "pixel_difference = {}\nchannel_difference = {}\npairs = {}\nconfig_digest = {}\n",
            self.pixel, self.channel, self.pairs, self.config_digest
        )
    }
}

fn mean_abs_diff<T: Real>(a: &Array<T>, b: &Array<T>) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum();
    s / a.len() as f64
}

/// Differences between the temperature-1 relations of two views' backbone
/// features for each of two given feature grids and geometries. Pixel
/// relations use `heads` heads on the shared region sampled at `grid × grid`.
pub fn view_pair_difference<T: Real>(
    a: &crate::vit::FeatureGrid<T>,
    b: &crate::vit::FeatureGrid<T>,
    ov: &crate::relation::OverlapRect,
    heads: usize,
) -> Result<(f64, f64)> {
    let pa = pixel_self_relation(&sample_overlap(a, ov, 0)?, heads, 1.0)?;
    let pb = pixel_self_relation(&sample_overlap(b, ov, 1)?, heads, 1.0)?;
    let pixel = pa.iter().zip(&pb).map(|(x, y)| mean_abs_diff(&x.values, &y.values)).sum::<f64>() / pa.len() as f64;
    let flat = |f: &crate::vit::FeatureGrid<T>| {
        let (h, w) = f.grid_size();
        f.patch_features.clone().reshaped(&[f.channels(), h * w])
    };
    let ca = channel_self_relation(&flat(a)?, 1.0)?;
    let cb = channel_self_relation(&flat(b)?, 1.0)?;
    Ok((pixel, mean_abs_diff(&ca.values, &cb.values)))
}

/// Mean cross-view relation differences over `n_pairs` images (cycling through
/// `images`). Each pair is two global views from `augment`, drawn from the
/// per-image stream of `seed` and redrawn until their overlap is large enough.
#[allow(clippy::too_many_arguments)]
pub fn relation_difference<T: Real>(
    model: &Model,
    params: &ParamSet<T>,
    images: &[Array<f32>],
    n_pairs: usize,
    seed: u64,
    augment: &AugmentConfig,
    heads: usize,
    grid: usize,
    config_digest: &str,
) -> Result<RelationDiffReport> {
    if images.is_empty() || n_pairs == 0 {
        return Err(Error::invalid("relation difference needs at least one image and one pair"));
    }
    let (mut pixel, mut channel) = (0.0, 0.0);
    for i in 0..n_pairs {
        let img = &images[i % images.len()];
        let mut found = None;
        for attempt in 0..MAX_RESAMPLES {
            let (va, ga) = sample_crop(img, CropKind::Global, augment, &mut view_rng(seed, i as u64, 2 * attempt))?;
            let (vb, gb) = sample_crop(img, CropKind::Global, augment, &mut view_rng(seed, i as u64, 2 * attempt + 1))?;
            if let Some(ov) = overlap_rect(&ga, &gb, (grid, grid)) {
                found = Some((va, vb, ov));
                break;
            }
        }
        let (va, vb, ov) = found.ok_or_else(|| Error::invalid(format!("pair {i}: no overlapping global views after {MAX_RESAMPLES} draws")))?;
        let fa = model.vit.encode(params, &va.cast())?;
        let fb = model.vit.encode(params, &vb.cast())?;
        let (p, c) = view_pair_difference(&fa, &fb, &ov, heads)?;
        pixel += p;
        channel += c;
    }
    Ok(RelationDiffReport {
        pixel: pixel / n_pairs as f64,
        channel: channel / n_pairs as f64,
        pairs: n_pairs,
        config_digest: config_digest.to_string(),
    })
}

/// Frozen image-token features, one row per image.
pub fn image_features<T: Real>(model: &Model, params: &ParamSet<T>, images: &[Array<f32>]) -> Result<Array<T>> {
    const CHUNK: usize = 64;
    let c = model.embed_dim();
    let mut data = Vec::with_capacity(images.len() * c);
    for chunk in images.chunks(CHUNK) {
        let mut px = Vec::new();
        for img in chunk {
            if img.shape() != chunk[0].shape() {
                return Err(Error::invalid("images in a feature batch differ in size"));
            }
            px.extend(img.data().iter().map(|&v| T::c(v as f64)));
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let (_, tokens) = model.backbone(params, &Array::new(&shape, px)?)?;
        data.extend_from_slice(tokens.data());
    }
    Array::new(&[images.len(), c], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Whole images are resized to this side before encoding; `None` keeps
    /// their native size.
    pub input_size: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch: 64,
            seed: 0,
            input_size: None,
        }
    }
}

impl ProbeConfig {
    /// The `eval.*` settings, encoding images at the global crop size the
    /// encoder was trained on.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            epochs: cfg.eval.probe_epochs,
            lr: cfg.eval.probe_lr,
            batch: cfg.eval.probe_batch,
            seed: cfg.eval.seed,
            input_size: Some(cfg.augment.global_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub classes: usize,
}

fn argmax_accuracy<T: Real>(logits: &Array<T>, labels: &[usize]) -> f64 {
    let k = logits.last_dim();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Softmax regression on fixed features. Features are standardised with the
/// training split's per-dimension mean and deviation; the weights start at
/// zero and train with AdamW under a cosine schedule without warmup.
pub fn fit_linear_probe(
    train_x: &Array<f64>,
    train_y: &[usize],
    val_x: &Array<f64>,
    val_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (n, d) = match *train_x.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::invalid("probe features must be [n, d]")),
    };
    if n != train_y.len() || val_x.shape().first() != Some(&val_y.len()) || val_x.last_dim() != d {
        return Err(Error::invalid(format!(
            "probe inputs disagree: {n} training rows for {} labels, {:?} validation rows for {} labels",
            train_y.len(),
            val_x.shape(),
            val_y.len()
        )));
    }
    if n == 0 || val_y.is_empty() {
        return Err(Error::invalid("probe needs training and validation examples"));
    }
    let k = train_y.iter().chain(val_y).max().unwrap() + 1;

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for row in train_x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
        }
    }
    for row in train_x.data().chunks(d) {
        for j in 0..d {
            sd[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    let norm = |x: &Array<f64>| x.data().chunks(d).flat_map(|row| (0..d).map(|j| (row[j] - mean[j]) / sd[j]).collect::<Vec<_>>()).collect::<Vec<_>>();
    let xs = norm(train_x);
    let vs = Array::new(&[val_y.len(), d], norm(val_x))?;

    let mut params = vec![Array::<f64>::zeros(&[d, k]), Array::zeros(&[k])];
    let mut opt = AdamWState::zeros_like(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = n.div_ceil(cfg.batch);
    let total = (cfg.epochs * batches) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let mut xb = Vec::with_capacity(idx.len() * d);
            let mut yb = vec![0.0; idx.len() * k];
            for (r, &i) in idx.iter().enumerate() {
                xb.extend_from_slice(&xs[i * d..(i + 1) * d]);
                yb[r * k + train_y[i]] = 1.0;
            }
            let tape = Tape::new();
            let bound = Bound::from_vars(params.iter().map(|p| tape.leaf(p.clone())).collect());
            let x = tape.constant(Array::new(&[idx.len(), d], xb)?);
            let logits = tape.add_trailing(tape.matmul(x, bound.vars()[0])?, bound.vars()[1])?;
            let logq = tape.log_softmax_rows(logits, 1.0)?;
            let loss = tape.soft_nll_rows(&Array::new(&[idx.len(), k], yb)?, logq)?;
            let grads = bound.collect(&tape.backward(loss)?);
            let lr = lr_schedule(step, total, cfg.lr, 0.0, 0.0)?;
            adamw_step(&mut params, &grads, &mut opt, &AdamWConfig::default(), lr, &[0.0, 0.0])?;
            step += 1;
        }
    }
    let predict = |x: &Array<f64>| -> Result<Array<f64>> {
        let tape = Tape::new();
        let l = tape.add_trailing(tape.matmul(tape.constant(x.clone()), tape.constant(params[0].clone()))?, tape.constant(params[1].clone()))?;
        let v = tape.value(l).clone();
        Ok(v)
    };
    Ok(ProbeReport {
        accuracy: argmax_accuracy(&predict(&vs)?, val_y),
        train_accuracy: argmax_accuracy(&predict(&Array::new(&[n, d], xs.clone())?)?, train_y),
        classes: k,
    })
}

/// Linear probe on the frozen image token of `params`' encoder.
pub fn linear_probe<T: Real>(model: &Model, params: &ParamSet<T>, train: &Dataset, val: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (ty, vy) = (train.labels()?, val.labels()?);
    let resize = |images: &[Array<f32>]| -> Vec<Array<f32>> {
        match cfg.input_size {
            Some(side) => {
                let g = CropGeometry::identity(side, CropKind::Global);
                images.iter().map(|im| render_crop(im, &g)).collect()
            }
            None => images.to_vec(),
        }
    };
    let tx = image_features(model, params, &resize(&train.images))?.cast::<f64>();
    let vx = image_features(model, params, &resize(&val.images))?.cast::<f64>();
    fit_linear_probe(&tx, &ty, &vx, &vy, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapQuery {
    /// Row `i` of the single-head pixel relation, drawn over the feature grid.
    Pixel(usize),
    /// The whole channel relation matrix.
    Channel,
}

/// Side of one heatmap cell in output pixels.
pub const HEATMAP_CELL: usize = 16;

/// Fixed "hot" colour map on `[0, 1]`: black → red → yellow → white,
/// `(r, g, b) = clamp(3v, 3v - 1, 3v - 2)`.
pub fn hot_colour(v: f64) -> [u8; 3] {
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)]
}

/// Renders `values` (`rows × cols`) with cells of `cell` pixels. Values are
/// mapped linearly so the minimum is 0 and the maximum 1 (all-equal input
/// renders as 0). Returns packed RGB bytes.
pub fn render_heatmap(values: &[f64], rows: usize, cols: usize, cell: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (w, h) = (cols * cell, rows * cell);
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * cols + x / cell];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&hot_colour(t));
        }
    }
    out
}

/// The relation values a heatmap of `image` shows, with their grid shape.
pub fn heatmap_values<T: Real>(model: &Model, params: &ParamSet<T>, image: &Array<f32>, query: HeatmapQuery) -> Result<(Vec<f64>, usize, usize)> {
    let feat = model.vit.encode(params, &image.cast())?;
    let (h, w) = feat.grid_size();
    let c = feat.channels();
    let flat = feat.patch_features.clone().reshaped(&[c, h * w])?;
    match query {
        HeatmapQuery::Pixel(i) => {
            if i >= h * w {
                return Err(Error::invalid(format!("pixel query {i} outside the {h}×{w} grid")));
            }
            let a = pixel_self_relation(&flat, 1, 1.0)?;
            let row = a[0].values.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.f64()).collect();
            Ok((row, h, w))
        }
        HeatmapQuery::Channel => {
            let a = channel_self_relation(&flat, 1.0)?;
            Ok((a.values.data().iter().map(|v| v.f64()).collect(), c, c))
        }
    }
}

/// Writes the heatmap of `query` for `image` as an 8-bit RGB PNG.
pub fn export_relation_heatmap<T: Real>(model: &Model, params: &ParamSet<T>, image: &Array<f32>, query: HeatmapQuery, path: &Path) -> Result<()> {
    let (values, rows, cols) = heatmap_values(model, params, image, query)?;
    let cell = match query {
        HeatmapQuery::Pixel(_) => HEATMAP_CELL,
        HeatmapQuery::Channel => (HEATMAP_CELL / 4).max(1),
    };
    write_rgb_png(path, cols * cell, rows * cell, &render_heatmap(&values, rows, cols, cell))
}

/// One ablation axis: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Short names accepted on the command line.
pub fn canonical_axis_key(key: &str) -> Option<&'static str> {
    Some(match key {
        "M" | "relation.heads" => "relation.heads",
        "t_p" | "relation.t_p" => "relation.t_p",
        "t_c" | "relation.t_c" => "relation.t_c",
        "temps" | "relation.temps" => "relation.temps",
        "asymmetric" | "heads.asymmetric" => "heads.asymmetric",
        "enable_image" | "losses.enable_image" => "losses.enable_image",
        "enable_pixel" | "losses.enable_pixel" => "losses.enable_pixel",
        "enable_channel" | "losses.enable_channel" => "losses.enable_channel",
        "losses" => "losses",
        _ => return None,
    })
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("axis `{spec}` must look like key=v1,v2")))?;
        let key = canonical_axis_key(k.trim()).ok_or_else(|| {
            Error::config(format!(
                "unknown ablation axis `{}`; axes are M, t_p, t_c, temps, asymmetric, losses, enable_image, enable_pixel, enable_channel",
                k.trim()
            ))
        })?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(format!("axis `{key}` has no values")));
        }
        Ok(Self { key: key.to_string(), values })
    }

    /// Applies one of this axis's values to `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig, value: &str) -> Result<()> {
        match self.key.as_str() {
            "relation.heads" => {
                let m: usize = value.parse().map_err(|_| Error::config(format!("M value `{value}` is not an integer")))?;
                if ![1, 3, 6, 12, 16].contains(&m) {
                    return Err(Error::config(format!("M value {m} is not one of 1, 3, 6, 12, 16")));
                }
                cfg.set("relation.heads", value)
            }
            "relation.temps" => {
                let (tp, tc) = value
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("temperature cell `{value}` must look like t_p:t_c")))?;
                cfg.set("relation.t_p", tp)?;
                cfg.set("relation.t_c", tc)
            }
            // loss sets: any of I, p, c joined by '+'
            "losses" => {
                let parts: Vec<&str> = value.split('+').collect();
                if parts.iter().any(|p| !["I", "p", "c"].contains(p)) {
                    return Err(Error::config(format!("loss set `{value}` must combine I, p and c with '+'")));
                }
                cfg.loss.enable_image = parts.contains(&"I");
                cfg.loss.enable_pixel = parts.contains(&"p");
                cfg.loss.enable_channel = parts.contains(&"c");
                Ok(())
            }
            key => cfg.set(key, value),
        }
    }
}

/// Grid cells: each axis varied alone from the base configuration, duplicates
/// (by digest) dropped, in axis order. No axes gives the base cell alone.
pub fn ablation_cells(base: &TrainConfig, axes: &[Axis]) -> Result<Vec<(String, TrainConfig)>> {
    let mut cells: Vec<(String, TrainConfig)> = Vec::new();
    if axes.is_empty() {
        cells.push(("default".into(), base.clone()));
    }
    for axis in axes {
        for v in &axis.values {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.validate()?;
            if cells.iter().all(|(_, c)| c.digest() != cfg.digest()) {
                cells.push((format!("{}={}", axis.key, v), cfg));
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub digest: String,
    pub pixel: Vec<f64>,
    pub channel: Vec<f64>,
    pub probe: Vec<f64>,
}

fn mean_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// Header plus one tab-separated row per cell: label, config digest, then
/// mean and sample deviation over seeds of the pixel difference, channel
/// difference and probe accuracy.
pub fn ablation_table(rows: &[CellResult]) -> String {
    let mut out = String::from("cell\tdigest\tpixel_diff_mean\tpixel_diff_sd\tchannel_diff_mean\tchannel_diff_sd\tprobe_acc_mean\tprobe_acc_sd\n");
    for r in rows {
        let (pm, ps) = mean_spread(&r.pixel);
        let (cm, cs) = mean_spread(&r.channel);
        let (am, as_) = mean_spread(&r.probe);
        out.push_str(&format!("{}\t{}\t{pm}\t{ps}\t{cm}\t{cs}\t{am}\t{as_}\n", r.label, r.digest));
    }
    out
}

/// Trains `cfg` on `train_images`, reporting each step to `on_step`.
pub fn train_run<T: Real>(
    cfg: &TrainConfig,
    train_images: &[Array<f32>],
    mut on_step: impl FnMut(&Trainer<T>, &crate::trainer::StepReport) -> Result<()>,
) -> Result<Trainer<T>> {
    let mut tr = Trainer::<T>::new(cfg.clone(), train_images.len())?;
    while !tr.is_done() {
        let r = tr.step(train_images)?;
        on_step(&tr, &r)?;
    }
    Ok(tr)
}

/// Relation difference and probe accuracy of a trained teacher encoder.
pub fn evaluate_run<T: Real>(tr: &Trainer<T>, probe_train: &Dataset, val: &Dataset) -> Result<(RelationDiffReport, ProbeReport)> {
    let cfg = &tr.cfg;
    let aug = cfg.augment.clone();
    let params = &tr.state.teacher.params;
    let rel = relation_difference(
        &tr.model,
        params,
        &val.images,
        cfg.eval.relation_pairs,
        cfg.eval.seed,
        &aug,
        cfg.loss.relation_heads,
        cfg.loss.gg_grid,
        &cfg.digest_hex(),
    )?;
    let probe = linear_probe(&tr.model, params, probe_train, val, &ProbeConfig::from_train(cfg))?;
    Ok((rel, probe))
}

/// Trains and evaluates every cell for every seed. `on_cell` sees each
/// finished trainer (to save checkpoints) with its cell index and seed.
pub fn ablation_suite<T: Real>(
    base: &TrainConfig,
    axes: &[Axis],
    seeds: &[u64],
    ssl_train: &[Array<f32>],
    probe_train: &Dataset,
    val: &Dataset,
    mut on_cell: impl FnMut(usize, u64, &Trainer<T>) -> Result<()>,
) -> Result<Vec<CellResult>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let cells = ablation_cells(base, axes)?;
    let mut rows = Vec::new();
    for (ci, (label, cfg)) in cells.into_iter().enumerate() {
        let mut row = CellResult {
            label,
            digest: cfg.digest_hex(),
            pixel: Vec::new(),
            channel: Vec::new(),
            probe: Vec::new(),
        };
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let tr = train_run::<T>(&c, ssl_train, |_, _| Ok(()))?;
            let (rel, probe) = evaluate_run(&tr, probe_train, val)?;
            row.pixel.push(rel.pixel);
            row.channel.push(rel.channel);
            row.probe.push(probe.accuracy);
            on_cell(ci, seed, &tr)?;
        }
        rows.push(row);
    }
    Ok(rows)
}
