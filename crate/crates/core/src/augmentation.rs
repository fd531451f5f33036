//! Multi-crop view generation with exact geometry records.
//!
//! Coordinates: `(x, y)` are normalized original-image coordinates in
//! `[0, 1]²`; `(u, v)` are normalized view coordinates. A view covers its
//! rect left to right unless flipped, in which case `u = 0` is the rect's
//! right edge.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CropKind {
    Global,
    Local,
}

impl CropKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CropKind::Global => "global",
            CropKind::Local => "local",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    /// `(x0, y0, x1, y1)`.
    pub rect: [f64; 4],
    pub hflip: bool,
    pub out_size: usize,
    pub kind: CropKind,
}

impl CropGeometry {
    pub fn identity(out_size: usize, kind: CropKind) -> Self {
        Self {
            rect: [0.0, 0.0, 1.0, 1.0],
            hflip: false,
            out_size,
            kind,
        }
    }

    pub fn area(&self) -> f64 {
        (self.rect[2] - self.rect[0]) * (self.rect[3] - self.rect[1])
    }

    pub fn to_original(&self, u: f64, v: f64) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.rect;
        let u = if self.hflip { 1.0 - u } else { u };
        (x0 + u * (x1 - x0), y0 + v * (y1 - y0))
    }

    pub fn to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.rect;
        let u = (x - x0) / (x1 - x0);
        let u = if self.hflip { 1.0 - u } else { u };
        (u, (y - y0) / (y1 - y0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    pub aspect: (f64, f64),
    pub flip: bool,
    pub color_jitter: bool,
    pub grayscale: bool,
    pub blur: bool,
    /// Smallest source side accepted; the encoder's patch size.
    pub min_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.35, 1.0),
            local_scale: (0.05, 0.35),
            global_size: 64,
            local_size: 32,
            n_local: 4,
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip: true,
            color_jitter: true,
            grayscale: true,
            blur: true,
            min_side: 8,
        }
    }
}

impl AugmentConfig {
    /// No randomness beyond crop placement.
    pub fn without_photometrics(mut self) -> Self {
        self.color_jitter = false;
        self.grayscale = false;
        self.blur = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!("{name} crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
            }
        }
        let (a, b) = self.aspect;
        if !(a > 0.0 && a <= 1.0 && b >= 1.0) {
            return Err(Error::config(format!("aspect range ({a}, {b}) must contain 1")));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::config("crop sizes must be positive"));
        }
        Ok(())
    }

    fn scale(&self, kind: CropKind) -> (f64, f64) {
        match kind {
            CropKind::Global => self.global_scale,
            CropKind::Local => self.local_scale,
        }
    }

    fn size(&self, kind: CropKind) -> usize {
        match kind {
            CropKind::Global => self.global_size,
            CropKind::Local => self.local_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `3 × out × out`, values in `[0, 1]`.
    pub pixels: Array<f32>,
    pub geometry: CropGeometry,
}

/// Views of one image: the two global views first, then the local ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<View>,
}

impl ViewBatch {
    pub fn globals(&self) -> &[View] {
        &self.views[..2]
    }

    pub fn locals(&self) -> &[View] {
        &self.views[2..]
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for one view: `mix64(mix64(mix64(root) ^ image) ^ view)`.
pub fn view_rng(root: u64, image: u64, view: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(mix64(root) ^ image) ^ view))
}

/// Draws a source rect: area fraction uniform over the kind's range, then an
/// aspect ratio uniform over the part of the configured range that keeps the
/// rect inside the image, then a uniform position.
pub fn sample_rect<R: Rng>(
    width: usize,
    height: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> [f64; 4] {
    let s = if scale.0 < scale.1 { rng.gen_range(scale.0..=scale.1) } else { scale.0 };
    // pixel aspect r = (w·W) / (h·H); normalized sides w = sqrt(s·r·H/W), h = s / w
    let k = height as f64 / width as f64;
    let lo = aspect.0.max(s / k);
    let hi = aspect.1.min(1.0 / (s * k));
    let (w, h) = if lo <= hi {
        let r = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let w = (s * r * k).sqrt().min(1.0);
        (w, (s / w).min(1.0))
    } else {
        // image too elongated for the aspect range: widest feasible rect
        let w = (s * aspect.1 * k).sqrt().min(1.0);
        (w, (s / w).min(1.0))
    };
    let x0 = if w < 1.0 { rng.gen_range(0.0..=1.0 - w) } else { 0.0 };
    let y0 = if h < 1.0 { rng.gen_range(0.0..=1.0 - h) } else { 0.0 };
    [x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)]
}

fn check_image(image: &Array<f32>, min_side: usize) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("image must be 3 × H × W, got {s:?}")));
    }
    if s[1] < min_side.max(1) || s[2] < min_side.max(1) {
        return Err(Error::invalid(format!(
            "image {}×{} smaller than the patch size {min_side}",
            s[1], s[2]
        )));
    }
    Ok((s[1], s[2]))
}

/// Bilinear resample of `image` over `geom` at output pixel centres, border clamped.
pub fn render_crop(image: &Array<f32>, geom: &CropGeometry) -> Array<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = geom.out_size;
    let src = image.data();
    let axis = |c: f64, len: usize| {
        let p = (c * len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..n)
        .map(|j| axis(geom.to_original((j as f64 + 0.5) / n as f64, 0.0).0, w))
        .collect();
    let ys: Vec<_> = (0..n)
        .map(|i| axis(geom.to_original(0.0, (i as f64 + 0.5) / n as f64).1, h))
        .collect();
    let mut out = vec![0f32; 3 * n * n];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, wx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(c * n + i) * n + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Array::new(&[3, n, n], out).expect("crop shape")
}

/// One random crop of `image` (`3 × H × W`) with photometric noise applied
/// after the geometry is fixed.
pub fn sample_crop<R: Rng>(
    image: &Array<f32>,
    kind: CropKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array<f32>, CropGeometry)> {
    let (h, w) = check_image(image, cfg.min_side)?;
    let rect = sample_rect(w, h, cfg.scale(kind), cfg.aspect, rng);
    let hflip = cfg.flip && rng.gen_bool(0.5);
    let geom = CropGeometry {
        rect,
        hflip,
        out_size: cfg.size(kind),
        kind,
    };
    let mut pixels = render_crop(image, &geom);
    photometric(&mut pixels, cfg, rng);
    Ok((pixels, geom))
}

/// Two global views followed by `cfg.n_local` local ones, view `i` drawn from
/// `view_rng(root, image_index, i)`.
pub fn make_views(image: &Array<f32>, cfg: &AugmentConfig, root: u64, image_index: u64) -> Result<ViewBatch> {
    let views = (0..2 + cfg.n_local)
        .map(|i| {
            let kind = if i < 2 { CropKind::Global } else { CropKind::Local };
            let mut rng = view_rng(root, image_index, i as u64);
            let (pixels, geometry) = sample_crop(image, kind, cfg, &mut rng)?;
            Ok(View { pixels, geometry })
        })
        .collect::<Result<_>>()?;
    Ok(ViewBatch { views })
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(px: &[f32], plane: usize, i: usize) -> f32 {
    LUMA[0] * px[i] + LUMA[1] * px[plane + i] + LUMA[2] * px[2 * plane + i]
}

fn photometric<R: Rng>(img: &mut Array<f32>, cfg: &AugmentConfig, rng: &mut R) {
    // draws happen unconditionally so toggles never shift later random streams
    let jitter = rng.gen_bool(0.8);
    let factors: [f32; 3] = [
        rng.gen_range(0.6..1.4),
        rng.gen_range(0.6..1.4),
        rng.gen_range(0.8..1.2),
    ];
    let gray = rng.gen_bool(0.2);
    let blur = rng.gen_bool(0.5);
    let sigma: f64 = rng.gen_range(0.1..1.0);
    if cfg.color_jitter && jitter {
        color_jitter(img, factors[0], factors[1], factors[2]);
    }
    if cfg.grayscale && gray {
        grayscale(img);
    }
    if cfg.blur && blur {
        gaussian_blur(img, sigma);
    }
}

/// Brightness, contrast and saturation factors, clamped to `[0, 1]`.
pub fn color_jitter(img: &mut Array<f32>, brightness: f32, contrast: f32, saturation: f32) {
    let plane = img.shape()[1] * img.shape()[2];
    let px = img.data_mut();
    for v in px.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = (0..plane).map(|i| luma(px, plane, i)).sum::<f32>() / plane as f32;
    for v in px.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..plane {
        let g = luma(px, plane, i);
        for c in 0..3 {
            let v = &mut px[c * plane + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

pub fn grayscale(img: &mut Array<f32>) {
    let plane = img.shape()[1] * img.shape()[2];
    let px = img.data_mut();
    for i in 0..plane {
        let g = luma(px, plane, i);
        for c in 0..3 {
            px[c * plane + i] = g;
        }
    }
}

/// Separable Gaussian with border clamping.
pub fn gaussian_blur(img: &mut Array<f32>, sigma: f64) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let px = img.data_mut();
    let mut tmp = vec![0f32; h * w];
    for c in 0..3 {
        let plane = &mut px[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}
