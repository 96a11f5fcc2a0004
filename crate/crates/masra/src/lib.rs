//! Desk-scale video temporal grounding.
//!
//! The crate trains and evaluates a span-prediction model over synthetic
//! clip/query features. The backbone couples a codebook-based cross-modal
//! interaction block with a temporal-context branch; training adds two
//! text-prior alignment losses (event-semantic and clip-relational) that
//! are never consulted at inference time.

pub mod dai;
pub mod error;
pub mod esta;
pub mod grounding;
pub mod harness;
pub mod lrca;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
