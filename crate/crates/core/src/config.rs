//! Run configuration and its flat `key = value` text form.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::augmentation::AugmentConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory with a manifest; when `synthetic` is set the
    /// generator writes there first (or keeps images in memory if unset).
    pub root: Option<PathBuf>,
    pub synthetic: bool,
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub synthetic_seed: u64,
    /// Train the encoder on the first `n` training images of each class (0 = all).
    pub train_subset_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: true,
            classes: 8,
            train_per_class: 256,
            val_per_class: 64,
            synthetic_seed: 0,
            train_subset_per_class: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub relation_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 50,
            probe_lr: 1e-3,
            probe_batch: 64,
            relation_pairs: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate per 256 images; the actual peak scales with batch size.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Teacher EMA coefficient at step 0; rises to 1 by the last step.
    pub momentum_start: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            epochs: 20,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_frac: 0.05,
            weight_decay: 0.04,
            clip_norm: 3.0,
            momentum_start: 0.996,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, a, l, d, e) = (&self.model, &self.augment, &self.loss, &self.data, &self.eval);
        let b = |x: bool| x.to_string();
        vec![
            ("vit.image_size", m.vit.image_size.to_string()),
            ("vit.patch_size", m.vit.patch_size.to_string()),
            ("vit.embed_dim", m.vit.embed_dim.to_string()),
            ("vit.depth", m.vit.depth.to_string()),
            ("vit.attention_heads", m.vit.attention_heads.to_string()),
            ("vit.mlp_ratio", m.vit.mlp_ratio.to_string()),
            ("vit.positional_embedding", b(m.vit.use_positional_embedding)),
            ("heads.prototypes", m.heads.prototypes.to_string()),
            ("heads.hidden", m.heads.hidden.to_string()),
            ("heads.bottleneck", m.heads.bottleneck.to_string()),
            ("heads.asymmetric", b(m.heads.asymmetric)),
            ("augment.global_scale_min", a.global_scale.0.to_string()),
            ("augment.global_scale_max", a.global_scale.1.to_string()),
            ("augment.local_scale_min", a.local_scale.0.to_string()),
            ("augment.local_scale_max", a.local_scale.1.to_string()),
            ("augment.global_size", a.global_size.to_string()),
            ("augment.local_size", a.local_size.to_string()),
            ("augment.n_local", a.n_local.to_string()),
            ("augment.aspect_min", a.aspect.0.to_string()),
            ("augment.aspect_max", a.aspect.1.to_string()),
            ("augment.flip", b(a.flip)),
            ("augment.color_jitter", b(a.color_jitter)),
            ("augment.grayscale", b(a.grayscale)),
            ("augment.blur", b(a.blur)),
            ("relation.heads", l.relation_heads.to_string()),
            ("relation.t_p", l.t_p.to_string()),
            ("relation.t_c", l.t_c.to_string()),
            ("relation.gg_grid", l.gg_grid.to_string()),
            ("relation.lg_grid", l.lg_grid.to_string()),
            ("losses.enable_image", b(l.enable_image)),
            ("losses.enable_pixel", b(l.enable_pixel)),
            ("losses.enable_channel", b(l.enable_channel)),
            ("losses.weight_image", l.weight_image.to_string()),
            ("losses.weight_pixel", l.weight_pixel.to_string()),
            ("losses.weight_channel", l.weight_channel.to_string()),
            ("losses.student_temp", l.student_temp.to_string()),
            ("losses.teacher_temp", l.teacher_temp.to_string()),
            ("losses.center_momentum", l.center_momentum.to_string()),
            ("trainer.epochs", self.epochs.to_string()),
            ("trainer.batch_size", self.batch_size.to_string()),
            ("trainer.base_lr", self.base_lr.to_string()),
            ("trainer.min_lr", self.min_lr.to_string()),
            ("trainer.warmup_frac", self.warmup_frac.to_string()),
            ("trainer.weight_decay", self.weight_decay.to_string()),
            ("trainer.clip_norm", self.clip_norm.to_string()),
            ("trainer.momentum_start", self.momentum_start.to_string()),
            ("trainer.seed", self.seed.to_string()),
            (
                "trainer.precision",
                match self.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                },
            ),
            ("trainer.checkpoint_every", self.checkpoint_every.to_string()),
            ("data.root", d.root.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default()),
            ("data.synthetic", b(d.synthetic)),
            ("data.classes", d.classes.to_string()),
            ("data.train_per_class", d.train_per_class.to_string()),
            ("data.val_per_class", d.val_per_class.to_string()),
            ("data.synthetic_seed", d.synthetic_seed.to_string()),
            ("data.train_subset_per_class", d.train_subset_per_class.to_string()),
            ("eval.probe_epochs", e.probe_epochs.to_string()),
            ("eval.probe_lr", e.probe_lr.to_string()),
            ("eval.probe_batch", e.probe_batch.to_string()),
            ("eval.relation_pairs", e.relation_pairs.to_string()),
            ("eval.seed", e.seed.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key. Unknown keys fail with the closest valid key named.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, a, l, d, e) = (&mut self.model, &mut self.augment, &mut self.loss, &mut self.data, &mut self.eval);
        match key {
            "vit.image_size" => m.vit.image_size = parse_num(key, v)?,
            "vit.patch_size" => {
                m.vit.patch_size = parse_num(key, v)?;
                // images smaller than one patch cannot be encoded
                a.min_side = m.vit.patch_size;
            }
            "vit.embed_dim" => m.vit.embed_dim = parse_num(key, v)?,
            "vit.depth" => m.vit.depth = parse_num(key, v)?,
            "vit.attention_heads" => m.vit.attention_heads = parse_num(key, v)?,
            "vit.mlp_ratio" => m.vit.mlp_ratio = parse_num(key, v)?,
            "vit.positional_embedding" => m.vit.use_positional_embedding = parse_bool(key, v)?,
            "heads.prototypes" => m.heads.prototypes = parse_num(key, v)?,
            "heads.hidden" => m.heads.hidden = parse_num(key, v)?,
            "heads.bottleneck" => m.heads.bottleneck = parse_num(key, v)?,
            "heads.asymmetric" => m.heads.asymmetric = parse_bool(key, v)?,
            "augment.global_scale_min" => a.global_scale.0 = parse_num(key, v)?,
            "augment.global_scale_max" => a.global_scale.1 = parse_num(key, v)?,
            "augment.local_scale_min" => a.local_scale.0 = parse_num(key, v)?,
            "augment.local_scale_max" => a.local_scale.1 = parse_num(key, v)?,
            "augment.global_size" => a.global_size = parse_num(key, v)?,
            "augment.local_size" => a.local_size = parse_num(key, v)?,
            "augment.n_local" => a.n_local = parse_num(key, v)?,
            "augment.aspect_min" => a.aspect.0 = parse_num(key, v)?,
            "augment.aspect_max" => a.aspect.1 = parse_num(key, v)?,
            "augment.flip" => a.flip = parse_bool(key, v)?,
            "augment.color_jitter" => a.color_jitter = parse_bool(key, v)?,
            "augment.grayscale" => a.grayscale = parse_bool(key, v)?,
            "augment.blur" => a.blur = parse_bool(key, v)?,
            "relation.heads" => l.relation_heads = parse_num(key, v)?,
            "relation.t_p" => l.t_p = parse_num(key, v)?,
            "relation.t_c" => l.t_c = parse_num(key, v)?,
            "relation.gg_grid" => l.gg_grid = parse_num(key, v)?,
            "relation.lg_grid" => l.lg_grid = parse_num(key, v)?,
            "losses.enable_image" => l.enable_image = parse_bool(key, v)?,
            "losses.enable_pixel" => l.enable_pixel = parse_bool(key, v)?,
            "losses.enable_channel" => l.enable_channel = parse_bool(key, v)?,
            "losses.weight_image" => l.weight_image = parse_num(key, v)?,
            "losses.weight_pixel" => l.weight_pixel = parse_num(key, v)?,
            "losses.weight_channel" => l.weight_channel = parse_num(key, v)?,
            "losses.student_temp" => l.student_temp = parse_num(key, v)?,
            "losses.teacher_temp" => l.teacher_temp = parse_num(key, v)?,
            "losses.center_momentum" => l.center_momentum = parse_num(key, v)?,
            "trainer.epochs" => self.epochs = parse_num(key, v)?,
            "trainer.batch_size" => self.batch_size = parse_num(key, v)?,
            "trainer.base_lr" => self.base_lr = parse_num(key, v)?,
            "trainer.min_lr" => self.min_lr = parse_num(key, v)?,
            "trainer.warmup_frac" => self.warmup_frac = parse_num(key, v)?,
            "trainer.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "trainer.clip_norm" => self.clip_norm = parse_num(key, v)?,
            "trainer.momentum_start" => self.momentum_start = parse_num(key, v)?,
            "trainer.seed" => self.seed = parse_num(key, v)?,
            "trainer.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::config(format!("{key}: expected f32 or f64, got `{v}`"))),
                }
            }
            "trainer.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "data.root" => d.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic" => d.synthetic = parse_bool(key, v)?,
            "data.classes" => d.classes = parse_num(key, v)?,
            "data.train_per_class" => d.train_per_class = parse_num(key, v)?,
            "data.val_per_class" => d.val_per_class = parse_num(key, v)?,
            "data.synthetic_seed" => d.synthetic_seed = parse_num(key, v)?,
            "data.train_subset_per_class" => d.train_subset_per_class = parse_num(key, v)?,
            "eval.probe_epochs" => e.probe_epochs = parse_num(key, v)?,
            "eval.probe_lr" => e.probe_lr = parse_num(key, v)?,
            "eval.probe_batch" => e.probe_batch = parse_num(key, v)?,
            "eval.relation_pairs" => e.relation_pairs = parse_num(key, v)?,
            "eval.seed" => e.seed = parse_num(key, v)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Canonical text: every key, one per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Peak learning rate after linear batch scaling.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        let vit: &VitConfig = &self.model.vit;
        vit.validate(self.loss.relation_heads)?;
        let heads: &HeadsConfig = &self.model.heads;
        if heads.prototypes == 0 || heads.hidden == 0 || heads.bottleneck == 0 {
            return Err(Error::config("head sizes must be positive"));
        }
        self.augment.validate()?;
        if self.augment.min_side != vit.patch_size {
            return Err(Error::config("augment.min_side must equal the patch size"));
        }
        for (name, s) in [("global", self.augment.global_size), ("local", self.augment.local_size)] {
            if s % vit.patch_size != 0 {
                return Err(Error::config(format!("{name} crop size {s} is not a multiple of the patch size")));
            }
        }
        self.loss.validate()?;
        self.loss.branches().require_any()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("trainer.epochs and trainer.batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("trainer.warmup_frac must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.momentum_start) {
            return Err(Error::config("trainer.momentum_start must lie in [0, 1]"));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config("weight decay must be non-negative and the clip norm positive"));
        }
        if self.data.root.is_none() && !self.data.synthetic {
            return Err(Error::config("data.root is required unless data.synthetic is set"));
        }
        if self.data.synthetic && self.data.classes == 0 {
            return Err(Error::config("data.classes must be positive"));
        }
        if self.eval.probe_epochs == 0 || self.eval.probe_batch == 0 {
            return Err(Error::config("probe epochs and batch size must be positive"));
        }
        Ok(())
    }
}

fn unknown_key(key: &str) -> Error {
    let nearest = TrainConfig::keys()
        .into_iter()
        .min_by_key(|k| strsim::levenshtein(k, key))
        .unwrap_or_default();
    Error::config(format!("unknown key `{key}`; did you mean `{nearest}`?"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = TrainConfig::default();
        for (k, v) in TrainConfig::default().entries() {
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, TrainConfig::default());
        cfg.set("relation.t_p", "0.25").unwrap();
        cfg.set("data.root", "/tmp/x").unwrap();
        cfg.set("trainer.precision", "f64").unwrap();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = TrainConfig::default().set("relation.tp", "0.5").unwrap_err().to_string();
        assert!(err.contains("relation.tp") && err.contains("relation.t_p"), "{err}");
    }

    #[test]
    fn defaults_and_digest() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.loss.t_p, cfg.loss.t_c, cfg.loss.relation_heads), (0.5, 0.1, 6));
        cfg.validate().unwrap();
        let mut other = cfg.clone();
        other.set("losses.enable_pixel", "false").unwrap();
        assert_ne!(cfg.digest(), other.digest());
        assert_eq!(cfg.digest(), TrainConfig::default().digest());
    }
}
