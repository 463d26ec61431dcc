//! Masked-image pre-training and layout detection for document pages, at desk scale.

pub mod classify;
pub mod coco;
pub mod detect;
pub mod dvae;
mod error;
pub mod imaging;
pub mod metrics;
pub mod mim;
pub mod synthdoc;
pub mod vit;

pub use error::{CoreError, Result};
