//! Pixel and channel self-relation matrices and overlap-aligned sampling.

use crate::augmentation::CropGeometry;
use crate::error::{Error, Result};
use crate::numerics::{Array, Real, SamplePoint, Tape, Var};
use crate::vit::FeatureGrid;

/// Overlaps smaller than this fraction of the original image are dropped.
pub const MIN_OVERLAP_AREA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationKind {
    Pixel,
    Channel,
}

/// Square row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix<T> {
    pub values: Array<T>,
    pub kind: RelationKind,
    pub head: usize,
}

/// Shared region of two crops and the lattice sampled inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapRect {
    /// Intersection in original-image coordinates, `(x0, y0, x1, y1)`.
    pub rect: [f64; 4],
    /// The same region in each view's normalized coordinates, flip resolved
    /// so that `u0 < u1`.
    pub view_rects: [[f64; 4]; 2],
    /// `(H_s, W_s)`.
    pub grid: (usize, usize),
    geoms: [CropGeometry; 2],
}

/// Intersection of two crops of the same image, or `None` when it covers
/// less than [`MIN_OVERLAP_AREA`] of the image.
pub fn overlap_rect(g1: &CropGeometry, g2: &CropGeometry, grid: (usize, usize)) -> Option<OverlapRect> {
    let (a, b) = (g1.rect, g2.rect);
    let rect = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    let (w, h) = (rect[2] - rect[0], rect[3] - rect[1]);
    if w <= 0.0 || h <= 0.0 || w * h < MIN_OVERLAP_AREA || grid.0 == 0 || grid.1 == 0 {
        return None;
    }
    let to_view = |g: &CropGeometry| {
        let (u0, v0) = g.to_view(rect[0], rect[1]);
        let (u1, v1) = g.to_view(rect[2], rect[3]);
        [u0.min(u1), v0, u0.max(u1), v1]
    };
    Some(OverlapRect {
        rect,
        view_rects: [to_view(g1), to_view(g2)],
        grid,
        geoms: [*g1, *g2],
    })
}

impl OverlapRect {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self, which: usize) -> &CropGeometry {
        &self.geoms[which]
    }

    /// Cell centres of the lattice in original-image coordinates, row-major.
    pub fn original_points(&self) -> Vec<(f64, f64)> {
        let [x0, y0, x1, y1] = self.rect;
        let (hs, ws) = self.grid;
        (0..hs)
            .flat_map(|i| {
                (0..ws).map(move |j| {
                    (
                        x0 + (j as f64 + 0.5) / ws as f64 * (x1 - x0),
                        y0 + (i as f64 + 0.5) / hs as f64 * (y1 - y0),
                    )
                })
            })
            .collect()
    }

    /// The lattice in sample-index coordinates of view `which`, whose feature
    /// grid is `h × w` and sits at index `view` of a stacked batch.
    pub fn sample_points(&self, which: usize, h: usize, w: usize, view: usize) -> Vec<SamplePoint> {
        let g = &self.geoms[which];
        self.original_points()
            .into_iter()
            .map(|(x, y)| {
                let (u, v) = g.to_view(x, y);
                SamplePoint {
                    view,
                    y: v * h as f64 - 0.5,
                    x: u * w as f64 - 0.5,
                }
            })
            .collect()
    }
}

/// Bilinear samples of `feat` over the overlap lattice of view `which`, `C × H_s·W_s`.
pub fn sample_overlap<T: Real>(feat: &FeatureGrid<T>, ov: &OverlapRect, which: usize) -> Result<Array<T>> {
    const TOL: f64 = 1e-9;
    if which > 1 {
        return Err(Error::invalid(format!("overlap view index {which} must be 0 or 1")));
    }
    let r = ov.view_rects[which];
    if r.iter().any(|&v| !(-TOL..=1.0 + TOL).contains(&v)) {
        return Err(Error::invalid(format!("overlap rect {r:?} lies outside the feature grid")));
    }
    let (h, w) = feat.grid_size();
    let c = feat.channels();
    let tape = Tape::new();
    let src = tape.constant(feat.tokens().reshaped(&[1, h, w, c])?);
    let out = tape.grid_sample(src, &ov.sample_points(which, h, w, 0), 1)?;
    let v = tape.value(out).clone().reshaped(&[ov.len(), c])?;
    Ok(v.t())
}

/// Per-head pixel relations of token-major `x` (`[P, N, C]`): Gram matrices of
/// each contiguous `C/M` channel block scaled by `1/sqrt(C/M)`, softmaxed at
/// temperature `t`. Returns `[P·M, N, N]`, head-minor.
pub fn pixel_relation<T: Real>(tape: &Tape<T>, x: Var, heads: usize, t: f64) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(Error::invalid(format!("pixel relation input must be [P, N, C], got {s:?}")));
    }
    if heads == 0 || s[2] % heads != 0 {
        return Err(Error::config(format!("{} channels do not split into {heads} relation heads", s[2])));
    }
    let d = s[2] / heads;
    let xh = tape.split_heads(x, heads)?;
    let gram = tape.matmul_t(xh, xh, false, true)?;
    let gram = tape.scale(gram, T::c(1.0 / (d as f64).sqrt()));
    tape.softmax_rows(gram, T::c(t))
}

/// Channel relations of token-major `x` (`[P, N, C]`): `XᵀX / N` softmaxed at
/// temperature `t`. Returns `[P, C, C]`.
pub fn channel_relation<T: Real>(tape: &Tape<T>, x: Var, t: f64) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::invalid(format!("channel relation input must be [P, N, C], got {s:?}")));
    }
    let gram = tape.matmul_t(x, x, true, false)?;
    let gram = tape.scale(gram, T::c(1.0 / s[1] as f64));
    tape.softmax_rows(gram, T::c(t))
}

/// Eager pixel relations of channel-major samples (`C × N`), one per head.
pub fn pixel_self_relation<T: Real>(samples: &Array<T>, heads: usize, t: f64) -> Result<Vec<RelationMatrix<T>>> {
    let s = samples.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("samples must be C × N, got {s:?}")));
    }
    let (c, n) = (s[0], s[1]);
    let tape = Tape::new();
    let x = tape.constant(samples.t().reshaped(&[1, n, c])?);
    let a = pixel_relation(&tape, x, heads, t)?;
    let a = tape.value(a);
    Ok(a.data()
        .chunks(n * n)
        .enumerate()
        .map(|(head, m)| RelationMatrix {
            values: Array::new(&[n, n], m.to_vec()).expect("square"),
            kind: RelationKind::Pixel,
            head,
        })
        .collect())
}

/// Eager channel relation of channel-major features (`C × N`).
pub fn channel_self_relation<T: Real>(feat: &Array<T>, t: f64) -> Result<RelationMatrix<T>> {
    let s = feat.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("features must be C × N, got {s:?}")));
    }
    let (c, n) = (s[0], s[1]);
    let tape = Tape::new();
    let x = tape.constant(feat.t().reshaped(&[1, n, c])?);
    let a = channel_relation(&tape, x, t)?;
    let values = tape.value(a).clone().reshaped(&[c, c])?;
    Ok(RelationMatrix {
        values,
        kind: RelationKind::Channel,
        head: 0,
    })
}
