//! Figure mining and hierarchical alignment toolkit.
//!
//! The library is organized around three granularities of scientific-figure
//! data: multi-panel figures (M), panels (P), and sub-panel regions (R).
//! Modules:
//!
//! - [`geometry`]: pure bounding-box arithmetic (IoU, NMS, clipping, ...).
//! - [`corpus`]: the hierarchical record model and line-delimited manifest.
//! - [`caption`]: deterministic caption splitting, identifier grammar, and
//!   marker-keyword detection.
//! - [`lvlm`]: client for an OpenAI-compatible vision-language endpoint with
//!   a byte-deterministic mock mode for tests and offline runs.
//! - [`panels`]: multi-view panel decomposition and caption routing.
//! - [`regions`]: marker- and caption-driven region mining with distance
//!   gating and provenance-aware fusion.
//! - [`postprocess`]: box cleanup (clip, degeneracy filter, NMS, similarity
//!   merge) and the trigram text-similarity measure.
//! - [`train`]: a desk-scale dual encoder with hand-derived gradients,
//!   hierarchical contrastive losses, and an alternating M/P/R schedule.
//! - [`eval`]: cross-modal retrieval metrics (recall@k) and split building.
//! - [`synth`]: synthetic hierarchical corpora with known latent structure.

pub mod caption;
pub mod corpus;
pub mod eval;
pub mod geometry;
pub mod lvlm;
pub mod panels;
pub mod postprocess;
pub mod regions;
pub mod synth;
pub mod train;

pub use corpus::{CorpusManifest, FigureRecord, PanelRecord, Provenance, RegionRecord};
pub use geometry::{BBox, ScoredBox, Unit};
