//! Shape of the `expected_counts.json` file bundled with the mock corpus.
//!
//! The fixture generator writes this file from hand-checked expectations and
//! the replay tests read it back, so the struct is the contract between the
//! two: if the pipeline's behavior on the bundled corpus drifts, the replay
//! comparison fails loudly instead of silently accepting new counts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-figure outcome after panel parsing, mining, and cleanup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureExpectation {
    /// Panels surviving consolidation (photographic or not).
    pub panels: usize,
    /// Panels the photographic filter keeps.
    pub photographic: usize,
    /// Region records surviving postprocess cleanup.
    pub regions: usize,
}

/// Corpus-wide stage counters, summed over all figures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatTotals {
    pub ambiguous_fragments: usize,
    pub rerouted_fragments: usize,
    pub orphan_anchors: usize,
    pub describe_failures: usize,
    pub gated_out: usize,
    pub inflated_markers: usize,
    pub fuse_nms_suppressed: usize,
    pub dropped_textless: usize,
    pub caption_call_failures: usize,
    pub merged_away: usize,
    /// Figures whose surviving panels share an identifier.
    pub duplicate_identifier_figures: usize,
}

impl StatTotals {
    pub fn add(&mut self, other: &StatTotals) {
        self.ambiguous_fragments += other.ambiguous_fragments;
        self.rerouted_fragments += other.rerouted_fragments;
        self.orphan_anchors += other.orphan_anchors;
        self.describe_failures += other.describe_failures;
        self.gated_out += other.gated_out;
        self.inflated_markers += other.inflated_markers;
        self.fuse_nms_suppressed += other.fuse_nms_suppressed;
        self.dropped_textless += other.dropped_textless;
        self.caption_call_failures += other.caption_call_failures;
        self.merged_away += other.merged_away;
        self.duplicate_identifier_figures += other.duplicate_identifier_figures;
    }
}

/// Everything the replay tests pin about the bundled corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub figures: usize,
    pub panels: usize,
    pub photographic_panels: usize,
    pub regions: usize,
    pub per_figure: BTreeMap<String, FigureExpectation>,
    pub stats: StatTotals,
}
