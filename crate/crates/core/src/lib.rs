//! Grounding engine over detector proposal graphs: multi-branch cross-attention
//! fusion, a transformer-decoder object reasoner with soft proposal selection,
//! and a box refinement head, trained with a minimal reverse-mode tape.

pub mod error;
pub mod geometry;
pub mod graph;
mod io_util;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
