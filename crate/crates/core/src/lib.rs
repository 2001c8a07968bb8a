//! MR brain-image intensity normalization, patch-based cross-contrast
//! synthesis and image-quality evaluation.
//!
//! Inputs are expected to be bias-corrected, brain-masked and co-registered
//! already; nothing here resamples or registers.

pub mod density;
pub mod error;
pub mod manifest;
pub mod nifti;
pub mod metrics;
pub mod normalize;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod ravel;
pub mod rng;
mod serial;
pub mod synth;
pub mod tissue;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use volume::{apply_mask, masked_stats, Contrast, Mask, MaskedStats, Volume};
