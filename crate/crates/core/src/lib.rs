//! Image super-resolution with individualized sparse attention.
//!
//! Every query token attends to its own candidate set, initialized from a
//! dense local window plus strided global samples, pruned to the highest
//! scoring entries and widened with two-hop neighbours as depth grows.

pub mod attention;
pub mod candidates;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod sf_ffn;
pub mod viz;

pub use candidates::{CandidateSet, GridGeom};
pub use error::{Error, Result};
pub use numerics::Tensor;
