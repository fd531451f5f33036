#![allow(dead_code)]

pub mod pipeline;

use selfrel::config::TrainConfig;
use selfrel::data_io::{synthetic_in_memory, Dataset, Split, SyntheticShapesSpec};

/// A model small enough to train a few steps in well under a second.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "vit.image_size = 16
         vit.patch_size = 4
         vit.embed_dim = 12
         vit.depth = 1
         vit.attention_heads = 2
         vit.mlp_ratio = 2
         heads.prototypes = 16
         heads.hidden = 16
         heads.bottleneck = 8
         augment.global_size = 16
         augment.local_size = 8
         augment.n_local = 2
         relation.gg_grid = 3
         relation.lg_grid = 2
         trainer.batch_size = 4
         trainer.epochs = 3
         eval.probe_epochs = 5
         eval.relation_pairs = 4",
    )
    .unwrap();
    cfg
}

pub fn tiny_data(per_class: usize) -> (Dataset, Dataset) {
    let mut spec = SyntheticShapesSpec::with_classes(4, per_class, 4, 0);
    spec.image_size = 24;
    (
        synthetic_in_memory(&spec, Split::Train).unwrap(),
        synthetic_in_memory(&spec, Split::Val).unwrap(),
    )
}
