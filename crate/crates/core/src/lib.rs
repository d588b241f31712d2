//! Hierarchical semantic codec.
//!
//! Images are inverted into a set of core-semantic style codes plus a
//! middle-level feature map of a small style generator. Both are compressed
//! into one container: the codes through a factorized entropy model, the
//! feature through a channel-sliced Gaussian context model conditioned on the
//! decoded codes. Decoded representations can be edited or mixed before
//! synthesis.

pub mod editing;
pub mod entropy_analysis;
pub mod entropy_models;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod range_coder;
pub mod training;

pub use error::{HscError, Result};
