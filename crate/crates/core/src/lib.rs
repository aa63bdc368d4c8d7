//! Language-free text-to-image GAN training on a joint feature hypersphere.
//!
//! Pseudo text features are generated from image features (fixed or learned
//! perturbations) and condition a StyleSpace-modulated generator trained
//! against a projection discriminator with contrastive regularizers.

pub mod archive;
pub mod error;
pub mod eval;
pub mod features;
pub mod gan;
pub mod losses;
pub mod nn;
pub mod pseudo;
pub mod raster;
pub mod reference;
pub mod toyset;
pub mod training;

pub use error::{Error, Result};
