//! Five-step bounding-box cleanup applied to mined regions before corpus
//! emission: pixel conversion, clipping, degeneracy filtering, class-
//! agnostic NMS, and similarity-driven merging of near-duplicate boxes.
//!
//! The whole step list runs to a fixpoint: a merge can produce a hull that
//! the NMS or aspect filter would act on, so passes repeat until the region
//! list stops changing. That construction makes `cleanup` idempotent by
//! definition, which downstream determinism tests rely on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Provenance, RegionRecord};
use crate::geometry::{self, ScoredBox, Unit};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanupConfig {
    /// Boxes smaller than this fraction of the panel area are degenerate.
    pub min_area_fraction: f64,
    /// Keep boxes whose width/height ratio lies inside (lo, hi).
    pub aspect_ratio_range: (f64, f64),
    pub nms_iou: f64,
    pub text_sim_threshold: f64,
}

impl Default for CleanupConfig {
    fn default() -> Self {
        CleanupConfig {
            min_area_fraction: 1e-4,
            aspect_ratio_range: (0.05, 20.0),
            nms_iou: 0.7,
            text_sim_threshold: 0.9,
        }
    }
}

impl CleanupConfig {
    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.aspect_ratio_range;
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction < 1.0) {
            return Err(format!("min_area_fraction must lie in (0,1), got {}", self.min_area_fraction));
        }
        if !(lo < hi) {
            return Err(format!("aspect_ratio_range lo must be < hi, got ({lo}, {hi})"));
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("text_sim_threshold", self.text_sim_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} must lie in (0,1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-step removal counts, accumulated over fixpoint passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleanupStats {
    pub input: usize,
    /// Removed because clipping to the panel left no area.
    pub clipped_away: usize,
    pub degenerate: usize,
    pub nms_suppressed: usize,
    /// Boxes absorbed into a merged hull.
    pub merged_away: usize,
    pub output: usize,
    pub passes: usize,
}

impl CleanupStats {
    pub fn accumulate(&mut self, other: &CleanupStats) {
        self.input += other.input;
        self.clipped_away += other.clipped_away;
        self.degenerate += other.degenerate;
        self.nms_suppressed += other.nms_suppressed;
        self.merged_away += other.merged_away;
        self.output += other.output;
        self.passes = self.passes.max(other.passes);
    }
}

// ---------------------------------------------------------------------------
// Text similarity
// ---------------------------------------------------------------------------

/// FNV-1a 64-bit, hand-rolled so hashes are stable across platforms and
/// releases (std's hasher is seeded per process).
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sparse hashed character-trigram counts of a case-folded string. Keys are
/// 64-bit trigram hashes; collisions are negligible at this key width, so
/// disjoint trigram sets map to orthogonal vectors.
pub fn trigram_counts(text: &str) -> BTreeMap<u64, f64> {
    let lowered: Vec<char> = text.to_lowercase().chars().collect();
    let mut counts = BTreeMap::new();
    for window in lowered.windows(3) {
        let tri: String = window.iter().collect();
        *counts.entry(fnv1a(tri.as_bytes())).or_insert(0.0) += 1.0;
    }
    counts
}

/// Cosine similarity over L2-normalized hashed trigram count vectors.
/// Symmetric, deterministic, dependency-free; the interface point where a
/// learned sentence scorer could be substituted. Strings too short to form
/// a trigram compare by equality.
pub fn text_similarity(a: &str, b: &str) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ca, cb) = (trigram_counts(a), trigram_counts(b));
    if ca.is_empty() || cb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).min(1.0)
}

// ---------------------------------------------------------------------------
// Cleanup
// ---------------------------------------------------------------------------

/// Concatenation of a region's texts, used as the similarity payload.
fn canonical_text(region: &RegionRecord) -> String {
    region.texts().join(" ")
}

fn merge_text(a: &Option<String>, b: &Option<String>) -> Option<String> {
    match (a, b) {
        (Some(x), Some(y)) if x == y => Some(x.clone()),
        (Some(x), Some(y)) => Some(format!("{x} {y}")),
        (Some(x), None) | (None, Some(x)) => Some(x.clone()),
        (None, None) => None,
    }
}

fn one_pass(
    regions: Vec<RegionRecord>,
    panel_w: f64,
    panel_h: f64,
    cfg: &CleanupConfig,
    stats: &mut CleanupStats,
) -> Vec<RegionRecord> {
    // Step 1: absolute pixel conversion + clip to the panel frame.
    let mut current: Vec<RegionRecord> = Vec::with_capacity(regions.len());
    for mut r in regions {
        if r.bbox.unit == Unit::Normalized {
            match r.bbox.to_pixels(panel_w, panel_h) {
                Ok(b) => r.bbox = b,
                Err(_) => {
                    stats.clipped_away += 1;
                    continue;
                }
            }
        }
        match geometry::clip_to_frame(&r.bbox, panel_w, panel_h) {
            Some(b) => {
                r.bbox = b;
                current.push(r);
            }
            None => stats.clipped_away += 1,
        }
    }

    // Step 2: degenerate filter (tiny area or extreme aspect ratio).
    let panel_area = panel_w * panel_h;
    let (lo, hi) = cfg.aspect_ratio_range;
    current.retain(|r| {
        let aspect = r.bbox.width() / r.bbox.height();
        let keep = r.bbox.area() >= cfg.min_area_fraction * panel_area && aspect >= lo && aspect <= hi;
        if !keep {
            stats.degenerate += 1;
        }
        keep
    });

    // Step 3: class-agnostic NMS. Boxes carry no scores at this point, so a
    // constant score makes the tie-break order by area descending, then
    // input order.
    let scored: Vec<ScoredBox> = current
        .iter()
        .map(|r| ScoredBox { bbox: r.bbox, score: 0.0, tag: r.region_id.clone() })
        .collect();
    let (kept_idx, _) = geometry::nms_with_assignments(&scored, cfg.nms_iou);
    stats.nms_suppressed += current.len() - kept_idx.len();
    let mut survivors: Vec<RegionRecord> = kept_idx.into_iter().map(|i| current[i].clone()).collect();

    // Step 4: merge overlapping near-duplicates (IoU > 0, text similarity
    // above threshold), greedily on the NMS-ordered list, to a fixpoint.
    'merge: loop {
        for i in 0..survivors.len() {
            for j in (i + 1)..survivors.len() {
                let overlap = geometry::iou(&survivors[i].bbox, &survivors[j].bbox)
                    .expect("cleanup boxes share the pixel unit");
                if overlap <= 0.0 {
                    continue;
                }
                let sim = text_similarity(&canonical_text(&survivors[i]), &canonical_text(&survivors[j]));
                if sim <= cfg.text_sim_threshold {
                    continue;
                }
                let absorbed = survivors.remove(j);
                let target = &mut survivors[i];
                target.bbox = geometry::merge_union(&[target.bbox, absorbed.bbox])
                    .expect("merge of two valid boxes");
                target.grounded_subcaption = merge_text(&target.grounded_subcaption, &absorbed.grounded_subcaption);
                target.lvlm_caption = merge_text(&target.lvlm_caption, &absorbed.lvlm_caption);
                target.provenance = Provenance::Fused;
                stats.merged_away += 1;
                continue 'merge;
            }
        }
        break;
    }
    survivors
}

/// Run the cleanup step list to a fixpoint and report per-step removals.
/// Region boxes may arrive normalized or in panel pixels; output boxes are
/// always panel pixels and pass a further clip unchanged.
pub fn cleanup(
    regions: &[RegionRecord],
    panel_w: f64,
    panel_h: f64,
    cfg: &CleanupConfig,
) -> (Vec<RegionRecord>, CleanupStats) {
    cfg.validate().expect("cleanup config validated");
    assert!(panel_w >= 1.0 && panel_h >= 1.0, "panel dimensions must be at least 1 pixel");
    let mut stats = CleanupStats { input: regions.len(), ..CleanupStats::default() };
    let mut current = regions.to_vec();
    loop {
        stats.passes += 1;
        let next = one_pass(current.clone(), panel_w, panel_h, cfg, &mut stats);
        if next == current {
            stats.output = next.len();
            return (next, stats);
        }
        current = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn region(id: &str, bbox: BBox, sub: Option<&str>, lvlm: Option<&str>) -> RegionRecord {
        RegionRecord {
            region_id: id.into(),
            parent_panel: "p".into(),
            bbox,
            provenance: Provenance::Caption,
            grounded_subcaption: sub.map(|s| s.to_string()),
            lvlm_caption: lvlm.map(|s| s.to_string()),
        }
    }

    fn px(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::pixel(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn similarity_identical_is_one() {
        assert_eq!(text_similarity("necrotic core", "necrotic core"), 1.0);
        assert_eq!(text_similarity("ab", "ab"), 1.0);
    }

    #[test]
    fn similarity_disjoint_is_zero() {
        assert_eq!(text_similarity("aaaa", "bbbb"), 0.0);
        assert_eq!(text_similarity("", "anything"), 0.0);
    }

    #[test]
    fn similarity_pinned_regression_value() {
        // Computed once by an independent trigram-cosine script over
        // lowercased character trigrams; pinned as a regression constant.
        let v = text_similarity("tumor region", "tumour region");
        assert!((v - 0.762_770_071_396_473_9).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn similarity_is_symmetric() {
        let (a, b) = ("arrow marks vessel", "arrowhead marks the vessel");
        assert_eq!(text_similarity(a, b), text_similarity(b, a));
    }

    #[test]
    fn tiny_box_removed_as_degenerate() {
        let regions = vec![
            region("keep", px(100.0, 100.0, 400.0, 400.0), Some("a lesion"), None),
            region("tiny", px(0.0, 0.0, 1.0, 1.0), Some("speck"), None),
        ];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].region_id, "keep");
        assert_eq!(stats.degenerate, 1);
    }

    #[test]
    fn extreme_aspect_removed() {
        let regions = vec![region("sliver", px(0.0, 0.0, 500.0, 2.0), Some("x"), None)];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert!(out.is_empty());
        assert_eq!(stats.degenerate, 1);
    }

    #[test]
    fn overlapping_identical_texts_merge_to_hull() {
        // IoU((0,0,200,200),(100,100,300,300)) = 1/7; identical texts → sim 1.
        let regions = vec![
            region("a", px(0.0, 0.0, 200.0, 200.0), Some("necrotic core"), None),
            region("b", px(100.0, 100.0, 300.0, 300.0), Some("necrotic core"), None),
        ];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, px(0.0, 0.0, 300.0, 300.0));
        assert_eq!(out[0].provenance, Provenance::Fused);
        assert_eq!(out[0].grounded_subcaption.as_deref(), Some("necrotic core"));
        assert_eq!(stats.merged_away, 1);
    }

    #[test]
    fn disjoint_boxes_kept_regardless_of_text() {
        let regions = vec![
            region("a", px(0.0, 0.0, 100.0, 100.0), Some("same text"), None),
            region("b", px(500.0, 500.0, 600.0, 600.0), Some("same text"), None),
        ];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(out.len(), 2);
        assert_eq!(stats.merged_away, 0);
    }

    #[test]
    fn overlapping_dissimilar_texts_not_merged() {
        let regions = vec![
            region("a", px(0.0, 0.0, 200.0, 200.0), Some("necrotic core"), None),
            region("b", px(100.0, 100.0, 300.0, 300.0), Some("vessel lumen"), None),
        ];
        let (out, _) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn heavy_overlap_suppressed_by_nms_area_order() {
        // IoU > 0.7 with different texts: NMS keeps the larger box.
        let regions = vec![
            region("small", px(10.0, 10.0, 100.0, 100.0), Some("first"), None),
            region("large", px(8.0, 8.0, 104.0, 104.0), Some("second"), None),
        ];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].region_id, "large");
        assert_eq!(stats.nms_suppressed, 1);
    }

    #[test]
    fn normalized_boxes_converted_and_clipped() {
        let norm = BBox::normalized(0.1, 0.1, 0.5, 0.5).unwrap();
        let regions = vec![region("n", norm, Some("x"), None)];
        let (out, _) = cleanup(&regions, 200.0, 100.0, &CleanupConfig::default());
        assert_eq!(out[0].bbox, px(20.0, 10.0, 100.0, 50.0));

        let overflow = region("o", px(150.0, 50.0, 400.0, 120.0), Some("y"), None);
        let (out, _) = cleanup(&[overflow], 200.0, 100.0, &CleanupConfig::default());
        assert_eq!(out[0].bbox, px(150.0, 50.0, 200.0, 100.0));
    }

    #[test]
    fn cleanup_is_idempotent_on_a_crafted_merge_cascade() {
        // Two mergeable pairs whose hulls overlap each other; a single pass
        // of NMS+merge would leave work for a second pass.
        let regions = vec![
            region("a", px(0.0, 0.0, 120.0, 100.0), Some("stained area"), None),
            region("b", px(60.0, 0.0, 180.0, 100.0), Some("stained area"), None),
            region("c", px(120.0, 0.0, 260.0, 100.0), Some("stained area x"), None),
        ];
        let (once, _) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        let (twice, stats2) = cleanup(&once, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(once, twice);
        assert_eq!(stats2.merged_away + stats2.nms_suppressed + stats2.degenerate, 0);
    }

    #[test]
    fn output_boxes_pass_clip_unchanged() {
        let regions = vec![
            region("a", px(0.0, 0.0, 900.0, 50.0), Some("wide band"), None),
            region("b", px(100.0, 100.0, 1500.0, 1500.0), Some("big"), None),
        ];
        let (out, _) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        for r in &out {
            assert_eq!(geometry::clip_to_frame(&r.bbox, 1000.0, 1000.0), Some(r.bbox));
        }
    }

    #[test]
    fn stats_counts_are_consistent() {
        let regions = vec![
            region("a", px(0.0, 0.0, 200.0, 200.0), Some("necrotic core"), None),
            region("b", px(100.0, 100.0, 300.0, 300.0), Some("necrotic core"), None),
            region("tiny", px(0.0, 0.0, 1.0, 1.0), Some("speck"), None),
            region("out", px(2000.0, 2000.0, 2100.0, 2100.0), Some("gone"), None),
        ];
        let (out, stats) = cleanup(&regions, 1000.0, 1000.0, &CleanupConfig::default());
        assert_eq!(stats.input, 4);
        assert_eq!(stats.output, out.len());
        assert_eq!(stats.clipped_away, 1);
        assert_eq!(stats.degenerate, 1);
        assert_eq!(stats.merged_away, 1);
        assert_eq!(stats.output, 1);
    }
}
