//! Encoder plus heads, and the forward passes used for training and analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{Branch, Heads, HeadsConfig, Pass};
use crate::losses::{TeacherOutputs, ViewOutputs};
use crate::numerics::{Array, ParamSet, Real, Var};
use crate::vit::{Vit, VitConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub heads: HeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            heads: HeadsConfig::default(),
        }
    }
}

/// Trainable parameters and non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
}

impl<T: Real> ModelState<T> {
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub vit: Vit,
    pub heads: Heads,
}

impl Model {
    /// Builds the layout and a freshly initialised state from `seed`.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ModelState<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let vit = Vit::new(cfg.vit.clone(), &mut params, &mut rng)?;
        let heads = Heads::new(cfg.heads.clone(), cfg.vit.embed_dim, &mut params, &mut buffers, &mut rng)?;
        Ok((Self { vit, heads }, ModelState { params, buffers }))
    }

    pub fn embed_dim(&self) -> usize {
        self.vit.config().embed_dim
    }

    /// Student forward over stacked global and (optional) local views. Head
    /// batch norms see the tokens of all views at once.
    pub fn student_forward<T: Real>(
        &self,
        pass: &Pass<T>,
        globals: &Array<T>,
        locals: Option<&Array<T>>,
        branches: Branches,
    ) -> Result<(ViewOutputs, Option<ViewOutputs>)> {
        let tape = pass.tape;
        let c = self.embed_dim();
        let mut outs = vec![self.vit.forward(tape, pass.bound, globals)?];
        if let Some(x) = locals {
            outs.push(self.vit.forward(tape, pass.bound, x)?);
        }
        let sizes: Vec<(usize, usize)> = outs.iter().map(|o| (tape.shape(o.image_token)[0], o.grid)).collect();
        let tokens = outs
            .iter()
            .zip(&sizes)
            .map(|(o, &(v, g))| tape.reshape(o.patch_tokens, &[v * g * g, c]))
            .collect::<Result<Vec<_>>>()?;
        let flat = tape.concat(&tokens, 0)?;
        let images = tape.concat(&outs.iter().map(|o| o.image_token).collect::<Vec<_>>(), 0)?;
        let run = |which: Branch| -> Result<Var> {
            let h = self.heads.project(pass, flat, which)?;
            self.heads.predict(pass, h, which)
        };
        let pixel = branches.pixel.then(|| run(Branch::Pixel)).transpose()?;
        let channel = branches.channel.then(|| run(Branch::Channel)).transpose()?;
        let logits = branches
            .image
            .then(|| self.heads.image_head(pass, images).map(|o| o.logits))
            .transpose()?;

        let mut parts = Vec::with_capacity(sizes.len());
        let (mut tok_off, mut img_off) = (0, 0);
        for &(v, g) in &sizes {
            let n = v * g * g;
            let cut = |x: Option<Var>, shape: &[usize]| -> Result<Option<Var>> {
                x.map(|x| tape.reshape(tape.slice(x, 0, tok_off, n)?, shape)).transpose()
            };
            parts.push(ViewOutputs {
                logits: logits.map(|x| tape.slice(x, 0, img_off, v)).transpose()?,
                pixel: cut(pixel, &[v, g, g, c])?,
                channel: cut(channel, &[v, g * g, c])?,
            });
            tok_off += n;
            img_off += v;
        }
        let local = if parts.len() > 1 { parts.pop() } else { None };
        Ok((parts.pop().expect("global views"), local))
    }

    /// Teacher forward over global views: projection heads only (no
    /// prediction), values detached from any tape.
    pub fn teacher_forward<T: Real>(&self, pass: &Pass<T>, globals: &Array<T>, branches: Branches) -> Result<TeacherOutputs<T>> {
        let tape = pass.tape;
        let c = self.embed_dim();
        let o = self.vit.forward(tape, pass.bound, globals)?;
        let v = globals.shape()[0];
        let flat = tape.reshape(o.patch_tokens, &[v * o.grid * o.grid, c])?;
        let value = |x: Var, shape: &[usize]| -> Result<Array<T>> { tape.value(x).clone().reshaped(shape) };
        let pixel = if branches.pixel {
            let h = self.heads.project(pass, flat, Branch::Pixel)?;
            Some(value(h, &[v, o.grid, o.grid, c])?)
        } else {
            None
        };
        let channel = if branches.channel {
            let h = self.heads.project(pass, flat, Branch::Channel)?;
            Some(value(h, &[v, o.grid * o.grid, c])?)
        } else {
            None
        };
        let logits = if branches.image {
            Some(tape.value(self.heads.image_head(pass, o.image_token)?.logits).clone())
        } else {
            None
        };
        Ok(TeacherOutputs { logits, pixel, channel })
    }

    /// Final-layer patch tokens of single views, token-major `[V, g, g, C]`,
    /// and image tokens `[V, C]`, without any head.
    pub fn backbone<T: Real>(&self, params: &ParamSet<T>, images: &Array<T>) -> Result<(Array<T>, Array<T>)> {
        let tape = crate::numerics::Tape::new();
        let bound = crate::numerics::Bound::new(&tape, params, false);
        let o = self.vit.forward(&tape, &bound, images)?;
        let p = tape.value(o.patch_tokens).clone();
        let i = tape.value(o.image_token).clone();
        Ok((p, i))
    }
}

/// Which head branches a pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub image: bool,
    pub pixel: bool,
    pub channel: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        image: true,
        pixel: true,
        channel: true,
    };

    pub fn any(&self) -> bool {
        self.image || self.pixel || self.channel
    }

    pub fn require_any(&self) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::config("every loss component is disabled"))
        }
    }
}
