//! Unconditional GAN training with generator-guided discriminator
//! regularization: a U-Net discriminator whose decoder regresses the
//! generator's intermediate feature maps under a cosine-distance loss,
//! plus evaluation metrics and feature-analysis tooling.

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
