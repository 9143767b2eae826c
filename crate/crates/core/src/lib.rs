//! Unsupervised bidirectional diffeomorphic registration of 2-D images.
//!
//! A small fully convolutional network is optimized from scratch for each
//! image pair. It predicts stationary velocity fields at every level of a
//! Gaussian pyramid; the fields are exponentiated by scaling and squaring
//! and composed coarse to fine into forward and backward deformations.

pub mod engine;
pub mod error;
pub mod fcn;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pyramid;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use engine::{register, RegistrationConfig, RegistrationResult};
pub use error::{Error, Result};
pub use image_io::{Image2D, Mask2D};
pub use losses::LossMode;
pub use warp::{DeformationField, VelocityField};
