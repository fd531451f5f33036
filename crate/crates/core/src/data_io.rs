//! Image loading, dataset manifests and the synthetic shapes generator.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::augmentation::view_rng;
use crate::container::{Container, Tensor, ARRAY_MAGIC};
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const MANIFEST_FILE: &str = "manifest.txt";

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn decode_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a PNG or an `SRLA` array container as `3 × H × W` RGB in `[0, 1]`.
/// Grayscale input is replicated to three channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Array<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(path, &bytes)
    } else if bytes.starts_with(&ARRAY_MAGIC) {
        decode_raw(path, &bytes)
    } else {
        Err(decode_err(path, "unrecognised file signature (expected PNG or SRLA)"))
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Array<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| decode_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    let deep = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    if deep {
        let rgb = img.to_rgb16();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f32 / 65535.0;
            }
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Array::new(&[3, h, w], data)
}

fn decode_raw(path: &Path, bytes: &[u8]) -> Result<Array<f32>> {
    let c = Container::from_bytes(bytes, ARRAY_MAGIC).map_err(|e| decode_err(path, e.to_string()))?;
    let (name, t) = c.entries.first().ok_or_else(|| decode_err(path, "container holds no arrays"))?;
    let a: Array<f32> = t
        .to_array(true)
        .ok_or_else(|| decode_err(path, format!("array `{name}` is not floating point")))?;
    let a = match *a.shape() {
        [3, _, _] => a,
        [1, h, w] | [h, w] => {
            let mut d = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                d.extend_from_slice(a.data());
            }
            Array::new(&[3, h, w], d)?
        }
        _ => return Err(decode_err(path, format!("array `{name}` has shape {:?}, expected [3, H, W]", a.shape()))),
    };
    if a.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(decode_err(path, format!("array `{name}` has values outside [0, 1]")));
    }
    Ok(a)
}

/// Writes a `3 × H × W` image in `[0, 1]` as 8-bit RGB PNG (values rounded).
pub fn save_png(path: &Path, img: &Array<f32>) -> Result<()> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::invalid(format!("expected a 3×H×W image, got {:?}", img.shape())));
    };
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push(quantize(img.data()[c * plane + i]));
        }
    }
    write_rgb_png(path, w, h, &buf)
}

pub(crate) fn write_rgb_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| decode_err(path, e.to_string()))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a single image as an `SRLA` container.
pub fn save_raw(path: &Path, img: &Array<f32>) -> Result<()> {
    let mut c = Container::new(ARRAY_MAGIC, [0; 32]);
    c.push("image", Tensor::from_array(img));
    c.write(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: Option<usize>,
    pub split: Split,
}

/// Images under a root directory. Entries under `val/` form the validation
/// split; everything else is training data.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses `root/manifest.txt`: one `relative/path [label]` per line, `#` comments.
    pub fn load(root: &Path) -> Result<Self> {
        let file = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let rel = PathBuf::from(parts.next().unwrap());
            let label = parts
                .next()
                .map(|s| s.parse::<usize>())
                .transpose()
                .map_err(|_| decode_err(&file, format!("line {}: label is not a non-negative integer", lineno + 1)))?;
            if parts.next().is_some() {
                return Err(decode_err(&file, format!("line {}: expected `path [label]`", lineno + 1)));
            }
            if !root.join(&rel).is_file() {
                return Err(decode_err(&file, format!("line {}: {} does not exist", lineno + 1, rel.display())));
            }
            let split = if rel.starts_with("val") { Split::Val } else { Split::Train };
            entries.push(ManifestEntry { path: rel, label, split });
        }
        let m = Self {
            root: root.to_path_buf(),
            entries,
        };
        m.validate().map_err(|e| decode_err(&file, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&e.path.to_string_lossy());
            if let Some(l) = e.label {
                text.push_str(&format!(" {l}"));
            }
            text.push('\n');
        }
        let file = self.root.join(MANIFEST_FILE);
        std::fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    /// Labels, when present, must cover `0..K` without gaps.
    pub fn validate(&self) -> Result<()> {
        let labels: Vec<usize> = self.entries.iter().filter_map(|e| e.label).collect();
        if let Some(&max) = labels.iter().max() {
            let mut seen = vec![false; max + 1];
            for &l in &labels {
                seen[l] = true;
            }
            if let Some(gap) = seen.iter().position(|s| !s) {
                return Err(Error::invalid(format!("labels are not contiguous: {gap} is missing below {max}")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Decoded images of one split, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Array<f32>>,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in manifest.split(split) {
            images.push(load_image(&manifest.root.join(&e.path))?);
            labels.push(e.label);
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Labels as plain indices; errors if any image is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::invalid(format!("image {i} has no label"))))
            .collect()
    }

    /// The first `per_class` images of every class, order preserved.
    pub fn take_per_class(&self, per_class: usize) -> Self {
        let mut counts = std::collections::HashMap::new();
        let mut out = Self {
            images: Vec::new(),
            labels: Vec::new(),
        };
        for (img, &l) in self.images.iter().zip(&self.labels) {
            let n = counts.entry(l).or_insert(0usize);
            if *n < per_class {
                *n += 1;
                out.images.push(img.clone());
                out.labels.push(l);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Star,
    Crescent,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::Star,
        ShapeKind::Crescent,
    ];

    /// Membership test in the shape's unit frame (shape fits the unit disc).
    fn contains(self, x: f64, y: f64) -> bool {
        let r2 = x * x + y * y;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => x.abs().max(y.abs()) <= 0.7,
            ShapeKind::Triangle => {
                let s = 3f64.sqrt();
                y >= -0.5 && s * x + y <= 1.0 && -s * x + y <= 1.0
            }
            ShapeKind::Cross => (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95),
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Bar => x.abs() <= 0.95 && y.abs() <= 0.3,
            ShapeKind::Star => {
                let phi = y.atan2(x);
                let lobe = (1.0 + (5.0 * phi).cos()) / 2.0;
                r2.sqrt() <= 0.4 + 0.6 * lobe * lobe
            }
            ShapeKind::Crescent => r2 <= 1.0 && (x - 0.5) * (x - 0.5) + y * y > 0.64,
        }
    }
}

/// One class: the kind of its dominant shape, the hue range its shapes are
/// drawn from, and the dominant shape's radius as a fraction of the image side.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDef {
    pub kind: ShapeKind,
    pub hue: (f64, f64),
    pub scale: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapesSpec {
    pub image_size: usize,
    pub classes: Vec<ClassDef>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        Self::with_classes(8, 256, 64, 0)
    }
}

impl SyntheticShapesSpec {
    /// The first `n` shape kinds. Class `i` draws its hue from
    /// `[i/8, i/8 + 0.25)`, so neighbouring colour families overlap and colour
    /// alone only partly identifies the class.
    pub fn with_classes(n: usize, train_per_class: usize, val_per_class: usize, seed: u64) -> Self {
        Self {
            image_size: 64,
            classes: ShapeKind::ALL
                .iter()
                .take(n)
                .enumerate()
                .map(|(i, &kind)| ClassDef {
                    kind,
                    hue: (i as f64 / 8.0, i as f64 / 8.0 + 0.25),
                    scale: (0.22, 0.32),
                })
                .collect(),
            train_per_class,
            val_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synthetic dataset needs at least one class"));
        }
        if self.image_size < 8 {
            return Err(Error::config("synthetic image size must be at least 8"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let (lo, hi) = c.scale;
            if !(lo > 0.0 && lo <= hi && hi < 0.5) {
                return Err(Error::config(format!("class {i}: scale range ({lo}, {hi}) must lie in (0, 0.5)")));
            }
            if !(c.hue.0 <= c.hue.1) {
                return Err(Error::config(format!("class {i}: empty hue range")));
            }
        }
        Ok(())
    }

    fn file_name(&self, split: Split, class: usize, index: usize) -> PathBuf {
        PathBuf::from(split.as_str()).join(format!("c{class:02}_{index:05}.png"))
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

const SUPERSAMPLE: usize = 4;

impl Placed {
    /// Fraction of pixel `(px, py)` the shape covers, from a 4×4 subgrid.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let (dx, dy) = (px as f64 + 0.5 - self.cx, py as f64 + 0.5 - self.cy);
        if dx * dx + dy * dy > (self.radius + 1.0).powi(2) {
            return 0.0;
        }
        let mut hit = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - self.cx;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - self.cy;
                let u = (self.cos * x + self.sin * y) / self.radius;
                let v = (-self.sin * x + self.cos * y) / self.radius;
                hit += self.kind.contains(u, v) as usize;
            }
        }
        hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// Renders image `index` of `class`. Pixel values are multiples of 1/255 so a
/// PNG round trip is exact.
pub fn render_synthetic(spec: &SyntheticShapesSpec, split: Split, class: usize, index: usize) -> Array<f32> {
    let s = spec.image_size;
    let id = ((split == Split::Val) as u64) << 48 | (class as u64) << 32 | index as u64;
    let mut rng = view_rng(spec.seed, id, 0);
    let def = &spec.classes[class];

    // background: tinted base plus two gratings and fine noise
    let base = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.5), rng.gen_range(0.2..0.6));
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(2.0..8.0) * 2.0 * PI / s as f64;
            (theta.cos() * freq, theta.sin() * freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.03..0.1))
        })
        .collect();

    let mut shapes = Vec::new();
    let radius = rng.gen_range(def.scale.0..=def.scale.1) * s as f64;
    shapes.push((def.kind, radius, rng.gen_range(def.hue.0..=def.hue.1)));
    let extra = rng.gen_range(0..=2);
    for _ in 0..extra {
        let others: Vec<ShapeKind> = ShapeKind::ALL.iter().copied().filter(|&k| k != def.kind).collect();
        let kind = others[rng.gen_range(0..others.len())];
        shapes.push((kind, rng.gen_range(0.08..0.13) * s as f64, rng.gen::<f64>()));
    }
    let placed: Vec<Placed> = shapes
        .into_iter()
        .map(|(kind, radius, hue)| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            Placed {
                kind,
                cx: rng.gen_range(radius..s as f64 - radius),
                cy: rng.gen_range(radius..s as f64 - radius),
                radius,
                cos: angle.cos(),
                sin: angle.sin(),
                color: hsv_to_rgb(hue, rng.gen_range(0.5..1.0), rng.gen_range(0.6..1.0)),
            }
        })
        .collect();

    let plane = s * s;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = gratings.iter().map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin()).sum::<f64>()
                + rng.gen_range(-0.03..0.03);
            let mut px = base.map(|b| b + tex);
            for shape in &placed {
                let a = shape.coverage(x, y);
                if a > 0.0 {
                    for c in 0..3 {
                        px[c] = (1.0 - a) * px[c] + a * shape.color[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + y * s + x] = quantize(px[c] as f32) as f32 / 255.0;
            }
        }
    }
    Array::new(&[3, s, s], data).expect("image shape")
}

/// Writes the dataset as PNGs plus a manifest under `root`, train then val,
/// classes interleaved.
pub fn generate_synthetic(spec: &SyntheticShapesSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Val, spec.val_per_class)] {
        let dir = root.join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..per_class {
            for class in 0..spec.classes.len() {
                let rel = spec.file_name(split, class, index);
                save_png(&root.join(&rel), &render_synthetic(spec, split, class, index))?;
                entries.push(ManifestEntry {
                    path: rel,
                    label: Some(class),
                    split,
                });
            }
        }
    }
    let m = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    m.save()?;
    Ok(m)
}

/// The same images as [`generate_synthetic`] without touching the disk.
pub fn synthetic_in_memory(spec: &SyntheticShapesSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Val => spec.val_per_class,
    };
    let mut out = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for index in 0..per_class {
        for class in 0..spec.classes.len() {
            out.images.push(render_synthetic(spec, split, class, index));
            out.labels.push(Some(class));
        }
    }
    Ok(out)
}

/// Training and validation splits for a run. Synthetic data is generated
/// under `root` when that directory has no manifest yet, or kept in memory
/// when no root is given.
pub fn load_datasets(cfg: &crate::config::DataConfig) -> Result<(Dataset, Dataset)> {
    if cfg.synthetic {
        let spec = SyntheticShapesSpec::with_classes(cfg.classes, cfg.train_per_class, cfg.val_per_class, cfg.synthetic_seed);
        if cfg.classes > ShapeKind::ALL.len() {
            return Err(Error::config(format!("at most {} synthetic classes are available", ShapeKind::ALL.len())));
        }
        return match &cfg.root {
            Some(root) => {
                let manifest = if root.join(MANIFEST_FILE).is_file() {
                    DatasetManifest::load(root)?
                } else {
                    generate_synthetic(&spec, root)?
                };
                Ok((Dataset::load(&manifest, Split::Train)?, Dataset::load(&manifest, Split::Val)?))
            }
            None => Ok((synthetic_in_memory(&spec, Split::Train)?, synthetic_in_memory(&spec, Split::Val)?)),
        };
    }
    let root = cfg.root.as_ref().ok_or_else(|| Error::config("data.root is not set"))?;
    if !root.join(MANIFEST_FILE).is_file() {
        return Err(Error::Io {
            path: root.join(MANIFEST_FILE),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        });
    }
    let manifest = DatasetManifest::load(root)?;
    Ok((Dataset::load(&manifest, Split::Train)?, Dataset::load(&manifest, Split::Val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_fit_the_unit_disc() {
        for kind in ShapeKind::ALL {
            let mut inside = 0;
            for i in 0..200 {
                for j in 0..200 {
                    let (x, y) = (i as f64 / 50.0 - 2.0, j as f64 / 50.0 - 2.0);
                    if kind.contains(x, y) {
                        assert!(x * x + y * y <= 1.0 + 1e-9, "{kind:?} leaks at ({x}, {y})");
                        inside += 1;
                    }
                }
            }
            assert!(inside > 1000, "{kind:?} is nearly empty");
        }
    }

    #[test]
    fn render_is_deterministic_and_quantized() {
        let spec = SyntheticShapesSpec::with_classes(3, 2, 1, 5);
        let a = render_synthetic(&spec, Split::Train, 2, 1);
        assert_eq!(a, render_synthetic(&spec, Split::Train, 2, 1));
        assert_ne!(a, render_synthetic(&spec, Split::Val, 2, 1));
        for &v in a.data() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn zero_classes_is_a_config_error() {
        let spec = SyntheticShapesSpec::with_classes(0, 1, 1, 0);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
