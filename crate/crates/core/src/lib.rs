//! Self-supervised training of a tiny vision transformer with pixel-level and
//! channel-level feature self-relation objectives.

pub mod augmentation;
pub mod config;
pub mod container;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
