//! Hidden-unit discovery and masked prediction of speech frames.
//!
//! The crate covers the whole loop: MFCC front end, k-means / product
//! quantization teachers, span masking, a small transformer trained to
//! predict the teacher's units at masked frames, target-quality metrics,
//! and the orchestration that re-clusters learned representations.

pub mod clustering;
pub mod error;
pub mod features;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
pub use features::{FeatureKind, FeatureSequence, Waveform};
