//! Segmentation and counting of bacterial colonies on agar plates: a small
//! CPU tensor engine, a U-Net, a training harness, a synthetic dish
//! generator and instance-level evaluation.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dishgen;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod mask;
pub mod netpbm;
pub mod optim;
pub mod seeds;
pub mod tensor;
pub mod train;
pub mod unet;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use mask::{Class, ColonyKind, LabelMask};
pub use netpbm::RgbImage;
pub use tensor::{Mode, Tensor};
pub use unet::{build_unet, UNetConfig, UNetModel};
