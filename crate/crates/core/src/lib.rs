//! Slide-level domain adaptation for attention-based multiple instance
//! learning.
//!
//! Bags of patch embeddings from a source domain are carried toward a target
//! domain by a learned residual affine map. The map is trained against an
//! entropic (optionally KL-relaxed) optimal transport plan between per-slide
//! k-means prototypes, while keeping each slide's Gram matrix and the source
//! model's patch attention stable.

pub mod adapt;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod numerics;
pub mod ot;
pub mod proto;

pub use error::{FormatError, HasdError, Result};
pub use numerics::{Matrix, Rng};
