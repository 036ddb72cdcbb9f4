//! Detect-then-classify pipeline for renal cell carcinoma whole-slide images.
//!
//! Slides are annotated with a handful of positive/negative points. A binary
//! detector is trained from those points plus unlabeled sliding-window patches
//! with a MixMatch-style objective, then fine-tuned on an extension set of
//! fully unlabeled slides. Detector outputs label patches for a four-class
//! (normal + three subtypes) classifier trained with a hybrid loss, whose patch
//! votes are aggregated into a slide-level diagnosis.

pub mod error;
pub mod prob;
pub mod slide_io;
pub mod patching;
pub mod ssl;
pub mod nn;
pub mod detector;
pub mod subtyping;
pub mod metrics;
#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};

/// Version string embedded in every output artifact.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: serde::Serialize + ?Sized>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("config values serialize to JSON");
    hex::encode(Sha256::digest(&json))
}
