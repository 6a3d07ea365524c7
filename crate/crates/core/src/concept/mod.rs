//! Concept-word detector: spatially attending tracing LSTMs over reduced
//! feature grids, a sigmoid confidence per candidate word, and top-K selection.

mod detector;
mod select;

pub use detector::{concept_loss, ConceptDetector, DetectorConfig, Reducer, Rollout, TraceState};
pub use select::{detect, top_k, write_detections, ConceptSet, Detection, WordScore};
