//! Signed, gradient-corrected attention saliency for Vision
//! Transformers: attention rollout with positive / complete / absolute
//! gradient correction, loss-guided attention direction, and the
//! attention-transfer, pixel-rewrite, and perturbation-AUC experiment
//! drivers.

pub mod error;
pub mod experiments;
pub mod guidance;
pub mod image_io;
pub mod loss;
pub mod manifest;
pub mod plant;
pub mod render;
pub mod rollout;
pub mod tape;
pub mod tensor;
pub mod vit;
pub mod weights_io;

pub use error::{Error, Result};
