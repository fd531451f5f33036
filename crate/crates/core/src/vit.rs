//! Tiny vision transformer: patch stem, pre-norm blocks, final layer norm.
//!
//! Tokens are kept token-major (`[views, tokens, channels]`); the dense
//! feature grid is exposed channel-major through [`FeatureGrid`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augmentation::CropGeometry;
use crate::error::{Error, Result};
use crate::numerics::{Array, Bound, ParamId, ParamSet, Real, SamplePoint, Tape, Var};

pub const LN_EPS: f64 = 1e-5;
/// Fixed pixel standardisation applied before the patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub use_positional_embedding: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            attention_heads: 4,
            mlp_ratio: 4,
            use_positional_embedding: true,
        }
    }
}

impl VitConfig {
    /// Side of the stored (reference) token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self, relation_heads: usize) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            )));
        }
        if relation_heads == 0 || self.embed_dim % relation_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by relation heads {relation_heads}",
                self.embed_dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Dense features of one view plus its image-level token.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    /// `C × H_f × W_f`.
    pub patch_features: Array<T>,
    pub image_token: Array<T>,
    pub source_geometry: Option<CropGeometry>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn channels(&self) -> usize {
        self.patch_features.shape()[0]
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.patch_features.shape()[1], self.patch_features.shape()[2])
    }

    /// Token-major copy, `H_f·W_f × C`.
    pub fn tokens(&self) -> Array<T> {
        let s = self.patch_features.shape();
        let c = s[0];
        let n = s[1] * s[2];
        self.patch_features.clone().reshaped(&[c, n]).expect("grid shape").t()
    }
}

/// Truncated normal at ±2σ, the usual ViT initialisation.
pub(crate) fn trunc_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::c(v);
            }
        })
        .collect();
    Array::new(shape, data).expect("shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], 0.02));
        let b = bias.then(|| params.add(format!("{name}.bias"), Array::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        match self.b {
            Some(b) => tape.add_trailing(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.weight"), Array::ones(&[dim])),
            beta: params.add(format!("{name}.bias"), Array::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), T::c(LN_EPS))
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter layout of the encoder. Holds ids only; values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
    patch: Linear,
    cls: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Outputs of a batched forward pass.
pub struct VitOutput {
    /// `[views, C]`.
    pub image_token: Var,
    /// `[views, g, g, C]`.
    pub patch_tokens: Var,
    pub grid: usize,
    /// Attention probabilities per block, `[views·heads, tokens, tokens]`.
    pub attention: Vec<Var>,
}

impl Vit {
    /// Registers encoder parameters (prefix `vit.`) and returns the layout.
    pub fn new<T: Real, R: Rng>(cfg: VitConfig, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        cfg.validate(1)?;
        let c = cfg.embed_dim;
        let p = cfg.patch_size;
        let g = cfg.grid();
        let patch = Linear::new(params, rng, "vit.patch_embed", 3 * p * p, c, true);
        let cls = params.add("vit.cls_token", trunc_normal(rng, &[1, c], 0.02));
        let pos = cfg
            .use_positional_embedding
            .then(|| params.add("vit.pos_embed", trunc_normal(rng, &[1 + g * g, c], 0.02)));
        let hidden = c * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let pre = format!("vit.blocks.{i}");
                Block {
                    norm1: LayerNorm::new(params, &format!("{pre}.norm1"), c),
                    qkv: Linear::new(params, rng, &format!("{pre}.attn.qkv"), c, 3 * c, true),
                    proj: Linear::new(params, rng, &format!("{pre}.attn.proj"), c, c, true),
                    norm2: LayerNorm::new(params, &format!("{pre}.norm2"), c),
                    fc1: Linear::new(params, rng, &format!("{pre}.mlp.fc1"), c, hidden, true),
                    fc2: Linear::new(params, rng, &format!("{pre}.mlp.fc2"), hidden, c, true),
                }
            })
            .collect();
        let norm = LayerNorm::new(params, "vit.norm", c);
        Ok(Self {
            cfg,
            patch,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Standardises pixels, projects non-overlapping patches, prepends the image-level token and
    /// adds (interpolated) positional embeddings. `images` is `[views, 3, S, S]`.
    /// Returns `[views, 1 + g², C]`.
    pub fn patch_embed<T: Real>(&self, tape: &Tape<T>, bound: &Bound, images: &Array<T>) -> Result<(Var, usize)> {
        let s = images.shape();
        let p = self.cfg.patch_size;
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[2] % p != 0 || s[2] < p {
            return Err(Error::invalid(format!(
                "images must be [views, 3, S, S] with S a multiple of {p}, got {s:?}"
            )));
        }
        let (views, side) = (s[0], s[2]);
        let g = side / p;
        let patches = tape.constant(patchify(images, p)?.map(|v| (v - T::c(PIXEL_MEAN)) / T::c(PIXEL_STD)));
        let x = self.patch.forward(tape, bound, patches)?;
        let c = self.cfg.embed_dim;
        let cls = tape.reshape(bound.var(self.cls), &[1, 1, c])?;
        let cls = tape.gather(cls, &vec![0; views])?;
        let mut tokens = tape.concat(&[cls, x], 1)?;
        if let Some(pos) = self.pos {
            let pos = self.positional(tape, bound.var(pos), g)?;
            tokens = tape.add_trailing(tokens, pos)?;
        }
        Ok((tokens, g))
    }

    /// Positional table for a `g × g` grid: the stored grid, bilinearly
    /// resampled at cell centres when `g` differs.
    fn positional<T: Real>(&self, tape: &Tape<T>, pos: Var, g: usize) -> Result<Var> {
        let g0 = self.cfg.grid();
        if g == g0 {
            return Ok(pos);
        }
        let c = self.cfg.embed_dim;
        let cls_pos = tape.slice(pos, 0, 0, 1)?;
        let grid_pos = tape.slice(pos, 0, 1, g0 * g0)?;
        let grid_pos = tape.reshape(grid_pos, &[1, g0, g0, c])?;
        let ratio = g0 as f64 / g as f64;
        let pts: Vec<SamplePoint> = (0..g)
            .flat_map(|i| {
                (0..g).map(move |j| SamplePoint {
                    view: 0,
                    y: (i as f64 + 0.5) * ratio - 0.5,
                    x: (j as f64 + 0.5) * ratio - 0.5,
                })
            })
            .collect();
        let resized = tape.grid_sample(grid_pos, &pts, 1)?;
        let resized = tape.reshape(resized, &[g * g, c])?;
        tape.concat(&[cls_pos, resized], 0)
    }

    fn attention<T: Real>(&self, tape: &Tape<T>, bound: &Bound, blk: &Block, x: Var) -> Result<(Var, Var)> {
        let c = self.cfg.embed_dim;
        let h = self.cfg.attention_heads;
        let d = c / h;
        let qkv = blk.qkv.forward(tape, bound, x)?;
        let q = tape.split_heads(tape.slice(qkv, 2, 0, c)?, h)?;
        let k = tape.split_heads(tape.slice(qkv, 2, c, c)?, h)?;
        let v = tape.split_heads(tape.slice(qkv, 2, 2 * c, c)?, h)?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let scores = tape.scale(scores, T::c(1.0 / (d as f64).sqrt()));
        let attn = tape.softmax_rows(scores, T::one())?;
        let o = tape.matmul(attn, v)?;
        let o = tape.merge_heads(o, h)?;
        Ok((blk.proj.forward(tape, bound, o)?, attn))
    }

    /// Full forward pass over a batch of same-size views.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, images: &Array<T>) -> Result<VitOutput> {
        let (mut x, g) = self.patch_embed(tape, bound, images)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.norm1.forward(tape, bound, x)?;
            let (a, attn) = self.attention(tape, bound, blk, h)?;
            attention.push(attn);
            x = tape.add(x, a)?;
            let h = blk.norm2.forward(tape, bound, x)?;
            let h = blk.fc1.forward(tape, bound, h)?;
            let h = tape.gelu(h);
            let h = blk.fc2.forward(tape, bound, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm.forward(tape, bound, x)?;
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        let views = images.shape()[0];
        let c = self.cfg.embed_dim;
        let image_token = tape.reshape(tape.slice(x, 1, 0, 1)?, &[views, c])?;
        let patch_tokens = tape.reshape(tape.slice(x, 1, 1, g * g)?, &[views, g, g, c])?;
        Ok(VitOutput {
            image_token,
            patch_tokens,
            grid: g,
            attention,
        })
    }

    /// Untracked single-image encode. `image` is `3 × S × S`.
    pub fn encode<T: Real>(&self, params: &ParamSet<T>, image: &Array<T>) -> Result<FeatureGrid<T>> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("image must be 3 × S × S, got {s:?}")));
        }
        let batch = image.clone().reshaped(&[1, s[0], s[1], s[2]])?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, params, false);
        let out = self.forward(&tape, &bound, &batch)?;
        let tokens = tape.value(out.patch_tokens).clone();
        let g = out.grid;
        let c = self.cfg.embed_dim;
        let cm = tokens.reshaped(&[g * g, c])?.t().reshaped(&[c, g, g])?;
        let image_token = tape.value(out.image_token).clone().reshaped(&[c])?;
        Ok(FeatureGrid {
            patch_features: cm,
            image_token,
            source_geometry: None,
        })
    }
}

/// `[views, 3, S, S] -> [views, (S/p)², 3·p·p]`, patch vectors ordered (channel, row, col).
pub fn patchify<T: Real>(images: &Array<T>, p: usize) -> Result<Array<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::invalid(format!("cannot patchify {s:?} with patch {p}")));
    }
    let (v, ch, hh, ww) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (hh / p, ww / p);
    let dim = ch * p * p;
    let mut out = vec![T::zero(); v * gh * gw * dim];
    let src = images.data();
    for vi in 0..v {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((vi * gh + gy) * gw + gx) * dim;
                for c in 0..ch {
                    for py in 0..p {
                        let row = ((vi * ch + c) * hh + gy * p + py) * ww + gx * p;
                        let dst = base + (c * p + py) * p;
                        out[dst..dst + p].copy_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Array::new(&[v, gh * gw, dim], out)
}
