//! Recurrent refinement of grid-based video object detections.
//!
//! A stacked GRU reads per-frame detector outputs (pseudo-labels in a
//! YOLO-style `S×S×(5B+C)` grid) and emits a refined tensor at each step.
//! Training combines a detection loss on the annotated final frame with
//! similarity, category and temporal-consistency terms.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod rnn;
pub mod synthdata;
pub mod trainer;

pub use dataset::{Dataset, Sequence};
pub use error::{Error, Result};
pub use grid::ModelConfig;
pub use rnn::GruNetwork;
