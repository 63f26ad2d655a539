//! Region mining inside photographic panels.
//!
//! Two proposal pathways feed one fusion step. Marker boxes come from a
//! detector call that frames author-drawn cues (arrows, asterisks, dashed
//! boxes) and optionally the target they point at. Caption boxes come from a
//! grounding call that localizes objects the panel's caption fragments
//! mention. A caption box only survives if its center lies within a
//! normalized distance tau of some marker center: text without a drawn cue
//! nearby is treated as too weak a signal. Markers that sponsored no caption
//! box are kept as regions themselves after inflation to a minimum size.
//! Kept boxes from both pathways then pass through non-maximum suppression,
//! with caption boxes outranking inflated markers, and each survivor is given
//! up to two texts: the grounded caption fragment and a generated local
//! description.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::{self, DEFAULT_MARKER_KEYWORDS};
use crate::corpus::{FigureRecord, PanelRecord, Provenance, RegionRecord};
use crate::geometry::{self, BBox, ScoredBox, Unit};
use crate::lvlm::{ImageRef, LvlmClient, LvlmError, LvlmRequest, Payload, TemplateId};

/// A detected marker glyph in normalized panel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerBox {
    /// Tight box around the drawn marker itself; drives proximity gating.
    pub glyph: BBox,
    /// Box of the region the marker highlights, when the detector infers it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<BBox>,
    /// Lexicon keyword, or "other" for kinds outside the lexicon.
    pub marker_kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub semantic_role: Option<String>,
}

/// A grounded caption object in normalized panel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBox {
    pub bbox: BBox,
    /// Index into the panel's fragment list.
    pub fragment_index: usize,
    pub fragment_text: String,
    pub phrase: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfig {
    /// Normalized center-distance gate between caption boxes and markers.
    pub tau: f64,
    /// Minimum region size for lone markers, as a fraction of the panel side.
    pub inflate_fraction: f64,
    /// Suppression threshold over the fused box set.
    pub nms_iou: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { tau: 0.10, inflate_fraction: 0.10, nms_iou: 0.7 }
    }
}

/// Caption-pathway boxes outrank inflated markers during fusion: a grounded
/// phrase anchored near a marker is higher-precision than blind inflation.
const CAPTION_SCORE: f64 = 1.0;
const MARKER_SCORE: f64 = 0.5;

fn normalize_kind(raw: &str) -> String {
    let lower = raw.trim().to_ascii_lowercase();
    let singular = lower.strip_suffix("es").unwrap_or_else(|| {
        lower.strip_suffix('s').unwrap_or(&lower)
    });
    for entry in DEFAULT_MARKER_KEYWORDS {
        if lower == entry || singular == entry {
            return entry.to_string();
        }
    }
    "other".to_string()
}

fn raw_to_bbox(raw: [f64; 4]) -> Option<BBox> {
    BBox::normalized(raw[0], raw[1], raw[2], raw[3]).ok()
}

/// Figure-normalized crop box for a panel whose bbox is in figure pixels.
fn panel_crop(figure: &FigureRecord, panel: &PanelRecord) -> BBox {
    panel
        .bbox
        .to_normalized(f64::from(figure.width_px), f64::from(figure.height_px))
        .expect("panel bbox normalizes against its figure")
}

fn panel_context(panel: &PanelRecord) -> String {
    if panel.fragments.is_empty() {
        String::new()
    } else {
        panel.fragments.join(" ")
    }
}

/// One detector call per panel. A response that never becomes schema-valid
/// yields an empty list: the panel simply contributes no marker regions.
pub fn detect_markers(
    client: &LvlmClient,
    figure: &FigureRecord,
    image_path: &Path,
    panel: &PanelRecord,
) -> Result<Vec<MarkerBox>, LvlmError> {
    let request = LvlmRequest::new(
        TemplateId::MarkerDetect,
        ImageRef::crop(image_path, panel_crop(figure, panel)),
    )
    .slot("caption_context", panel_context(panel))
    .slot("article_title", figure.article_title.clone().unwrap_or_default());
    let response = client.request(&request)?;
    let Some(Payload::MarkerDetect { markers }) = response.payload else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for entry in markers {
        let Some(glyph) = raw_to_bbox(entry.glyph_box) else { continue };
        let target = entry.target_box.and_then(raw_to_bbox);
        out.push(MarkerBox {
            glyph,
            target,
            marker_kind: normalize_kind(&entry.kind),
            semantic_role: entry.role,
        });
    }
    Ok(out)
}

/// One grounding call per panel with a non-empty caption. Objects the model
/// marks as not visible are dropped, as are objects that do not point back at
/// one of the panel's fragments.
pub fn propose_caption_boxes(
    client: &LvlmClient,
    figure: &FigureRecord,
    image_path: &Path,
    panel: &PanelRecord,
) -> Result<Vec<CaptionBox>, LvlmError> {
    assert!(
        !panel.fragments.is_empty(),
        "caption grounding requires a panel with caption fragments"
    );
    let fragments_json = serde_json::to_string(
        &panel
            .fragments
            .iter()
            .enumerate()
            .map(|(i, text)| serde_json::json!({"fragment_index": i, "text": text}))
            .collect::<Vec<_>>(),
    )
    .expect("fragment list serializes");
    let request = LvlmRequest::new(
        TemplateId::CaptionGround,
        ImageRef::crop(image_path, panel_crop(figure, panel)),
    )
    .slot("caption_context", fragments_json)
    .slot("article_title", figure.article_title.clone().unwrap_or_default());
    let response = client.request(&request)?;
    let Some(Payload::CaptionGround { objects }) = response.payload else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for entry in objects {
        if !entry.visible {
            continue;
        }
        let Some(fragment_index) = entry.fragment_index else { continue };
        let Some(fragment_text) = panel.fragments.get(fragment_index) else { continue };
        let Some(bbox) = raw_to_bbox(entry.bbox) else { continue };
        out.push(CaptionBox {
            bbox,
            fragment_index,
            fragment_text: fragment_text.clone(),
            phrase: entry.phrase,
        });
    }
    Ok(out)
}

/// A fused region before text attachment, in panel pixel coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionDraft {
    pub bbox: BBox,
    pub provenance: Provenance,
    /// Present on caption-pathway drafts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fragment_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fragment_text: Option<String>,
    /// Present on marker-pathway drafts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub marker_kind: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FuseStats {
    pub caption_boxes_in: usize,
    pub markers_in: usize,
    /// Caption boxes discarded by the proximity gate.
    pub gated_out: usize,
    /// Markers that sponsored no caption box and were inflated into regions.
    pub inflated_markers: usize,
    pub nms_suppressed: usize,
}

#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub drafts: Vec<RegionDraft>,
    pub stats: FuseStats,
}

/// Gate, inflate, and suppress the two proposal pathways into region drafts.
///
/// Gating happens in normalized coordinates against marker glyph centers (the
/// glyph is the physically drawn cue; targets can be speculative). Inflation
/// and suppression happen in panel pixels.
pub fn fuse(
    markers: &[MarkerBox],
    caption_boxes: &[CaptionBox],
    cfg: &RegionConfig,
    panel_w: f64,
    panel_h: f64,
) -> FuseOutcome {
    assert!(cfg.tau > 0.0, "proximity gate tau must be positive");
    let mut stats = FuseStats {
        caption_boxes_in: caption_boxes.len(),
        markers_in: markers.len(),
        ..FuseStats::default()
    };

    // (1) Proximity gate: a caption box needs a marker center within tau.
    // With no markers at all, every caption box is gated out.
    let mut kept_captions: Vec<&CaptionBox> = Vec::new();
    let mut marker_covered = vec![false; markers.len()];
    for cb in caption_boxes {
        let mut sponsored = false;
        for (mi, marker) in markers.iter().enumerate() {
            let dist = geometry::center_distance(&cb.bbox, &marker.glyph)
                .expect("normalized boxes have a center distance");
            if dist <= cfg.tau {
                sponsored = true;
                marker_covered[mi] = true;
            }
        }
        if sponsored {
            kept_captions.push(cb);
        } else {
            stats.gated_out += 1;
        }
    }

    // (2) Lone markers become regions themselves: the highlighted target box
    // when the detector gave one, else the glyph, inflated to a minimum size.
    let mut scored: Vec<ScoredBox> = Vec::new();
    let mut draft_info: Vec<RegionDraft> = Vec::new();
    for cb in &kept_captions {
        let px = cb
            .bbox
            .to_pixels(panel_w, panel_h)
            .expect("normalized caption box converts to panel pixels");
        scored.push(
            ScoredBox::new(px.clone(), CAPTION_SCORE, format!("c{}", cb.fragment_index))
                .expect("caption score is valid"),
        );
        draft_info.push(RegionDraft {
            bbox: px,
            provenance: Provenance::Caption,
            fragment_index: Some(cb.fragment_index),
            fragment_text: Some(cb.fragment_text.clone()),
            marker_kind: None,
        });
    }
    for (mi, marker) in markers.iter().enumerate() {
        if marker_covered[mi] {
            continue;
        }
        stats.inflated_markers += 1;
        let base = marker.target.as_ref().unwrap_or(&marker.glyph);
        let px = base
            .to_pixels(panel_w, panel_h)
            .expect("normalized marker box converts to panel pixels");
        let inflated = geometry::inflate(&px, cfg.inflate_fraction, panel_w, panel_h);
        scored.push(
            ScoredBox::new(inflated.clone(), MARKER_SCORE, format!("m{mi}"))
                .expect("marker score is valid"),
        );
        draft_info.push(RegionDraft {
            bbox: inflated,
            provenance: Provenance::Marker,
            fragment_index: None,
            fragment_text: None,
            marker_kind: Some(marker.marker_kind.clone()),
        });
    }

    // (3) Cross-pathway suppression. A caption survivor that absorbed another
    // caption box grounding the same fragment is a merged duplicate.
    let (kept, suppressed_by) = geometry::nms_with_assignments(&scored, cfg.nms_iou);
    stats.nms_suppressed = scored.len() - kept.len();
    let mut drafts = Vec::with_capacity(kept.len());
    for &survivor_idx in &kept {
        let mut draft = draft_info[survivor_idx].clone();
        if draft.provenance == Provenance::Caption {
            let absorbed_same_fragment = suppressed_by.iter().enumerate().any(|(i, s)| {
                *s == Some(survivor_idx)
                    && draft_info[i].provenance == Provenance::Caption
                    && draft_info[i].fragment_index == draft.fragment_index
            });
            if absorbed_same_fragment {
                draft.provenance = Provenance::Fused;
            }
        }
        drafts.push(draft);
    }

    let violations = check_gating(&drafts, markers, cfg.tau, panel_w, panel_h);
    assert!(
        violations.is_empty(),
        "proximity gate soundness violated: {violations:?}"
    );
    FuseOutcome { drafts, stats }
}

/// Post-hoc soundness check: every caption-pathway survivor must still have a
/// marker glyph center within tau. Returns violating draft indices.
pub fn check_gating(
    drafts: &[RegionDraft],
    markers: &[MarkerBox],
    tau: f64,
    panel_w: f64,
    panel_h: f64,
) -> Vec<usize> {
    let mut violations = Vec::new();
    for (i, draft) in drafts.iter().enumerate() {
        if draft.provenance == Provenance::Marker {
            continue;
        }
        let norm = draft
            .bbox
            .to_normalized(panel_w, panel_h)
            .expect("panel-pixel draft normalizes");
        let sponsored = markers.iter().any(|m| {
            geometry::center_distance(&norm, &m.glyph)
                .map(|d| d <= tau)
                .unwrap_or(false)
        });
        if !sponsored {
            violations.push(i);
        }
    }
    violations
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttachStats {
    /// Regions dropped because both text pathways came up empty.
    pub dropped_textless: usize,
    /// Region-caption calls that never became valid.
    pub caption_call_failures: usize,
}

/// Attach up to two texts to each draft and emit final records.
///
/// Caption-pathway drafts inherit their grounded fragment. Marker-pathway
/// drafts get a fragment only when exactly one panel fragment mentions the
/// marker's keyword; two mentions are ambiguous and attach nothing. Every
/// draft also gets one generated local description via the endpoint. Drafts
/// with neither text are dropped and counted, honoring the record invariant.
pub fn attach_texts(
    client: &LvlmClient,
    figure: &FigureRecord,
    image_path: &Path,
    panel: &PanelRecord,
    drafts: Vec<RegionDraft>,
) -> Result<(Vec<RegionRecord>, AttachStats), LvlmError> {
    let mut stats = AttachStats::default();
    let panel_w = panel.bbox.width();
    let panel_h = panel.bbox.height();
    let mut records = Vec::new();
    for draft in drafts {
        let grounded_subcaption = match draft.provenance {
            Provenance::Caption | Provenance::Fused => draft.fragment_text.clone(),
            Provenance::Marker => {
                let kind = draft.marker_kind.as_deref().unwrap_or("other");
                let mentions: Vec<&String> = panel
                    .fragments
                    .iter()
                    .filter(|f| {
                        caption::detect_marker_keywords(f, &DEFAULT_MARKER_KEYWORDS)
                            .iter()
                            .any(|k| k == kind)
                    })
                    .collect();
                if mentions.len() == 1 { Some(mentions[0].clone()) } else { None }
            }
        };

        // Compose panel-pixel region into a figure-normalized crop.
        let figure_px = BBox::new(
            panel.bbox.x_min + draft.bbox.x_min,
            panel.bbox.y_min + draft.bbox.y_min,
            panel.bbox.x_min + draft.bbox.x_max,
            panel.bbox.y_min + draft.bbox.y_max,
            Unit::Pixel,
        )
        .expect("region inside panel stays a valid box in figure pixels");
        let crop = figure_px
            .to_normalized(f64::from(figure.width_px), f64::from(figure.height_px))
            .expect("figure-pixel region normalizes");
        let context = grounded_subcaption
            .clone()
            .unwrap_or_else(|| panel_context(panel));
        let request = LvlmRequest::new(TemplateId::RegionCaption, ImageRef::crop(image_path, crop))
            .slot("context", context);
        let lvlm_caption = match client.request(&request) {
            Ok(response) if response.valid => match response.payload {
                Some(Payload::RegionCaption { caption }) if !caption.is_empty() => Some(caption),
                _ => None,
            },
            Ok(_) => {
                stats.caption_call_failures += 1;
                None
            }
            Err(LvlmError::Transport { .. }) => {
                stats.caption_call_failures += 1;
                None
            }
            Err(other) => return Err(other),
        };

        if grounded_subcaption.is_none() && lvlm_caption.is_none() {
            stats.dropped_textless += 1;
            continue;
        }
        // Clip defensively against the panel frame; fusion already put the
        // box inside it.
        let bbox = geometry::clip_to_frame(&draft.bbox, panel_w, panel_h)
            .expect("fused region overlaps its own panel");
        records.push(RegionRecord {
            region_id: format!("{}/r{}", panel.panel_id, records.len()),
            parent_panel: panel.panel_id.clone(),
            bbox,
            provenance: draft.provenance,
            grounded_subcaption,
            lvlm_caption,
        });
    }
    Ok((records, stats))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MineStats {
    pub fuse: FuseStats,
    pub attach: AttachStats,
    /// Schema-level entry rejections across the two proposal calls.
    pub rejected_entries: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MineOutcome {
    pub regions: Vec<RegionRecord>,
    pub markers: Vec<MarkerBox>,
    pub caption_boxes: Vec<CaptionBox>,
    pub stats: MineStats,
}

/// Full region-mining stage for one panel: detect, ground, fuse, attach.
/// Non-photographic panels are never mined and yield an empty outcome.
pub fn mine_regions(
    client: &LvlmClient,
    figure: &FigureRecord,
    image_path: &Path,
    panel: &PanelRecord,
    cfg: &RegionConfig,
) -> Result<MineOutcome, LvlmError> {
    if !panel.is_photographic {
        return Ok(MineOutcome::default());
    }
    let markers = detect_markers(client, figure, image_path, panel)?;
    let caption_boxes = if panel.fragments.is_empty() {
        Vec::new()
    } else {
        propose_caption_boxes(client, figure, image_path, panel)?
    };
    let fused = fuse(&markers, &caption_boxes, cfg, panel.bbox.width(), panel.bbox.height());
    let (regions, attach) = attach_texts(client, figure, image_path, panel, fused.drafts)?;
    Ok(MineOutcome {
        regions,
        markers,
        caption_boxes,
        stats: MineStats { fuse: fused.stats, attach, rejected_entries: 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lvlm::Responder;
    use std::collections::HashMap;
    use std::path::PathBuf;

    fn fixture(dir: &Path) -> (FigureRecord, PanelRecord, PathBuf) {
        let path = dir.join("fig.png");
        std::fs::write(&path, b"fake-figure-bytes").expect("write image");
        let figure = FigureRecord {
            figure_id: "fig".to_string(),
            image_path: "fig.png".to_string(),
            caption: "Figure 1. (A) Arrows indicate necrosis. Scale bar 50um.".to_string(),
            article_title: Some("A study".to_string()),
            width_px: 400,
            height_px: 200,
            license_tag: "CC-BY".to_string(),
        };
        let panel = PanelRecord {
            panel_id: "fig/p0".to_string(),
            parent_figure: "fig".to_string(),
            identifier: Some("A".to_string()),
            bbox: BBox::pixel(0.0, 0.0, 200.0, 200.0).expect("panel box"),
            fragments: vec![
                "Arrows indicate necrosis.".to_string(),
                "Scale bar 50um.".to_string(),
            ],
            generated_description: None,
            is_photographic: true,
        };
        (figure, panel, path)
    }

    struct TemplateRouter {
        by_template: HashMap<&'static str, String>,
    }

    impl TemplateRouter {
        fn new(entries: &[(TemplateId, &str)]) -> Self {
            TemplateRouter {
                by_template: entries
                    .iter()
                    .map(|(t, s)| (t.name(), s.to_string()))
                    .collect(),
            }
        }
    }

    impl Responder for TemplateRouter {
        fn respond(&self, req: &LvlmRequest, _p: &str, _h: &str) -> Result<String, LvlmError> {
            Ok(self
                .by_template
                .get(req.template.name())
                .cloned()
                .unwrap_or_else(|| "garbage".to_string()))
        }
    }

    fn nbox(c: [f64; 4]) -> BBox {
        BBox::normalized(c[0], c[1], c[2], c[3]).expect("valid normalized box")
    }

    fn marker_at(glyph: [f64; 4]) -> MarkerBox {
        MarkerBox {
            glyph: nbox(glyph),
            target: None,
            marker_kind: "arrow".to_string(),
            semantic_role: None,
        }
    }

    fn caption_box(bbox: [f64; 4], fragment_index: usize) -> CaptionBox {
        CaptionBox {
            bbox: nbox(bbox),
            fragment_index,
            fragment_text: format!("fragment {fragment_index}"),
            phrase: "thing".to_string(),
        }
    }

    #[test]
    fn detect_markers_maps_kinds_to_lexicon() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[(
            TemplateId::MarkerDetect,
            r#"{"markers": [
                {"kind": "Arrows", "glyph_box": [0.1, 0.1, 0.15, 0.15], "role": "necrosis"},
                {"kind": "dashed box", "glyph_box": [0.2, 0.2, 0.4, 0.4], "target_box": [0.2, 0.2, 0.45, 0.45]},
                {"kind": "squiggle", "glyph_box": [0.6, 0.6, 0.7, 0.7]}
            ]}"#,
        )])));
        let markers = detect_markers(&client, &figure, &path, &panel).expect("detect");
        assert_eq!(markers.len(), 3);
        assert_eq!(markers[0].marker_kind, "arrow", "plural maps to lexicon singular");
        assert_eq!(markers[0].semantic_role.as_deref(), Some("necrosis"));
        assert_eq!(markers[1].marker_kind, "dashed box");
        assert!(markers[1].target.is_some());
        assert_eq!(markers[2].marker_kind, "other", "unknown kinds collapse to other");
    }

    #[test]
    fn invalid_marker_response_yields_empty_list() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[])));
        let markers = detect_markers(&client, &figure, &path, &panel).expect("detect");
        assert!(markers.is_empty());
    }

    #[test]
    fn caption_boxes_keep_visible_linked_entries_only() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[(
            TemplateId::CaptionGround,
            r#"{"objects": [
                {"phrase": "necrosis", "fragment_index": 0, "box": [0.1, 0.1, 0.3, 0.3], "visible": true},
                {"phrase": "off-image structure", "fragment_index": 0, "box": [0.4, 0.4, 0.6, 0.6], "visible": false},
                {"phrase": "dangling", "fragment_index": 9, "box": [0.5, 0.5, 0.7, 0.7], "visible": true}
            ]}"#,
        )])));
        let boxes = propose_caption_boxes(&client, &figure, &path, &panel).expect("ground");
        assert_eq!(boxes.len(), 1, "invisible and out-of-range fragment entries drop");
        assert_eq!(boxes[0].fragment_index, 0);
        assert_eq!(boxes[0].fragment_text, "Arrows indicate necrosis.");
        assert_eq!(boxes[0].phrase, "necrosis");
    }

    #[test]
    fn gate_keeps_near_boxes_and_discards_far_ones() {
        let cfg = RegionConfig::default();
        // Marker center (0.53, 0.54); near box center (0.5, 0.5) is 0.05
        // away, far box center (0.8, 0.9) is 0.45 away.
        let markers = vec![marker_at([0.50, 0.50, 0.56, 0.58])];
        let near = caption_box([0.45, 0.45, 0.55, 0.55], 0);
        let far = caption_box([0.75, 0.85, 0.85, 0.95], 1);
        let out = fuse(&markers, &[near, far], &cfg, 100.0, 100.0);
        assert_eq!(out.stats.gated_out, 1, "far box is gated out");
        assert_eq!(out.stats.inflated_markers, 0, "sponsoring marker is covered");
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(out.drafts[0].provenance, Provenance::Caption);
        let b = &out.drafts[0].bbox;
        for (got, want) in [(b.x_min, 45.0), (b.y_min, 45.0), (b.x_max, 55.0), (b.y_max, 55.0)] {
            assert!(
                (got - want).abs() < 1e-9,
                "caption box converts to panel pixels: expected {want}, got {got}"
            );
        }
    }

    #[test]
    fn no_markers_means_no_caption_regions() {
        let cfg = RegionConfig::default();
        let out = fuse(&[], &[caption_box([0.1, 0.1, 0.3, 0.3], 0)], &cfg, 100.0, 100.0);
        assert!(out.drafts.is_empty(), "without markers every caption box is gated out");
        assert_eq!(out.stats.gated_out, 1);
    }

    #[test]
    fn nothing_in_nothing_out() {
        let out = fuse(&[], &[], &RegionConfig::default(), 100.0, 100.0);
        assert!(out.drafts.is_empty());
    }

    #[test]
    fn lone_marker_inflates_to_minimum_size() {
        let cfg = RegionConfig::default();
        // 2x2 pixel glyph centered at (50, 50) on a 100x100 panel inflates to
        // the 10x10 minimum.
        let markers = vec![marker_at([0.49, 0.49, 0.51, 0.51])];
        let out = fuse(&markers, &[], &cfg, 100.0, 100.0);
        assert_eq!(out.stats.inflated_markers, 1);
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(out.drafts[0].provenance, Provenance::Marker);
        assert_eq!(out.drafts[0].marker_kind.as_deref(), Some("arrow"));
        let b = &out.drafts[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (45.0, 45.0, 55.0, 55.0));
    }

    #[test]
    fn lone_marker_prefers_target_box_over_glyph() {
        let cfg = RegionConfig::default();
        let mut marker = marker_at([0.01, 0.01, 0.03, 0.03]);
        marker.target = Some(nbox([0.2, 0.2, 0.6, 0.6]));
        let out = fuse(&[marker], &[], &cfg, 100.0, 100.0);
        assert_eq!(out.drafts.len(), 1);
        let b = &out.drafts[0].bbox;
        assert_eq!(
            (b.x_min, b.y_min, b.x_max, b.y_max),
            (20.0, 20.0, 60.0, 60.0),
            "target box is already above minimum size, so inflation is identity"
        );
    }

    #[test]
    fn same_fragment_duplicate_absorption_marks_fused() {
        let cfg = RegionConfig::default();
        let markers = vec![marker_at([0.48, 0.48, 0.52, 0.52])];
        let boxes = vec![
            caption_box([0.40, 0.40, 0.60, 0.60], 0),
            caption_box([0.41, 0.40, 0.61, 0.60], 0),
        ];
        let out = fuse(&markers, &boxes, &cfg, 100.0, 100.0);
        assert_eq!(out.drafts.len(), 1, "duplicates collapse to one survivor");
        assert_eq!(out.stats.nms_suppressed, 1);
        assert_eq!(out.drafts[0].provenance, Provenance::Fused);
    }

    #[test]
    fn different_fragment_absorption_stays_caption() {
        let cfg = RegionConfig::default();
        let markers = vec![marker_at([0.48, 0.48, 0.52, 0.52])];
        let boxes = vec![
            caption_box([0.40, 0.40, 0.60, 0.60], 0),
            caption_box([0.41, 0.40, 0.61, 0.60], 1),
        ];
        let out = fuse(&markers, &boxes, &cfg, 100.0, 100.0);
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(
            out.drafts[0].provenance,
            Provenance::Caption,
            "absorbing a different fragment's box is plain suppression, not fusion"
        );
    }

    #[test]
    fn covered_marker_does_not_inflate_but_lone_one_does() {
        let cfg = RegionConfig::default();
        let markers = vec![
            marker_at([0.48, 0.48, 0.52, 0.52]),
            marker_at([0.05, 0.05, 0.09, 0.09]),
        ];
        let boxes = vec![caption_box([0.45, 0.45, 0.55, 0.55], 0)];
        let out = fuse(&markers, &boxes, &cfg, 200.0, 200.0);
        assert_eq!(out.stats.inflated_markers, 1, "only the distant marker inflates");
        assert_eq!(out.drafts.len(), 2);
        let provenances: Vec<Provenance> = out.drafts.iter().map(|d| d.provenance).collect();
        assert!(provenances.contains(&Provenance::Caption));
        assert!(provenances.contains(&Provenance::Marker));
    }

    #[test]
    fn fusion_output_is_pairwise_below_nms_threshold() {
        let cfg = RegionConfig::default();
        let markers = vec![
            marker_at([0.18, 0.18, 0.22, 0.22]),
            marker_at([0.28, 0.28, 0.32, 0.32]),
            marker_at([0.75, 0.75, 0.80, 0.80]),
        ];
        let boxes = vec![
            caption_box([0.10, 0.10, 0.30, 0.30], 0),
            caption_box([0.12, 0.12, 0.32, 0.32], 0),
            caption_box([0.20, 0.20, 0.40, 0.40], 1),
        ];
        let out = fuse(&markers, &boxes, &cfg, 300.0, 300.0);
        for i in 0..out.drafts.len() {
            for j in (i + 1)..out.drafts.len() {
                let v = geometry::iou(&out.drafts[i].bbox, &out.drafts[j].bbox).expect("iou");
                assert!(
                    v < cfg.nms_iou,
                    "surviving drafts {i} and {j} overlap at IoU {v} >= {}",
                    cfg.nms_iou
                );
            }
        }
    }

    #[test]
    fn attach_caption_region_gets_both_texts() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[(
            TemplateId::RegionCaption,
            r#"{"caption": "dense basophilic fragments"}"#,
        )])));
        let drafts = vec![RegionDraft {
            bbox: BBox::pixel(10.0, 10.0, 60.0, 60.0).expect("box"),
            provenance: Provenance::Caption,
            fragment_index: Some(0),
            fragment_text: Some("Arrows indicate necrosis.".to_string()),
            marker_kind: None,
        }];
        let (records, stats) =
            attach_texts(&client, &figure, &path, &panel, drafts).expect("attach");
        assert_eq!(records.len(), 1);
        assert_eq!(stats.dropped_textless, 0);
        let r = &records[0];
        assert_eq!(r.region_id, "fig/p0/r0");
        assert_eq!(r.grounded_subcaption.as_deref(), Some("Arrows indicate necrosis."));
        assert_eq!(r.lvlm_caption.as_deref(), Some("dense basophilic fragments"));
    }

    #[test]
    fn marker_region_takes_unique_keyword_fragment() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[(
            TemplateId::RegionCaption,
            r#"{"caption": "pale eosinophilic area"}"#,
        )])));
        let drafts = vec![RegionDraft {
            bbox: BBox::pixel(10.0, 10.0, 60.0, 60.0).expect("box"),
            provenance: Provenance::Marker,
            fragment_index: None,
            fragment_text: None,
            marker_kind: Some("arrow".to_string()),
        }];
        let (records, _) = attach_texts(&client, &figure, &path, &panel, drafts).expect("attach");
        assert_eq!(
            records[0].grounded_subcaption.as_deref(),
            Some("Arrows indicate necrosis."),
            "exactly one fragment mentions arrows, so it becomes the subcaption"
        );
    }

    #[test]
    fn ambiguous_keyword_mentions_attach_no_subcaption() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, mut panel, path) = fixture(dir.path());
        panel.fragments = vec![
            "Arrow marks the core.".to_string(),
            "Another arrow marks the margin.".to_string(),
        ];
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[(
            TemplateId::RegionCaption,
            r#"{"caption": "a local detail"}"#,
        )])));
        let drafts = vec![RegionDraft {
            bbox: BBox::pixel(10.0, 10.0, 60.0, 60.0).expect("box"),
            provenance: Provenance::Marker,
            fragment_index: None,
            fragment_text: None,
            marker_kind: Some("arrow".to_string()),
        }];
        let (records, _) = attach_texts(&client, &figure, &path, &panel, drafts).expect("attach");
        assert!(records[0].grounded_subcaption.is_none(), "two mentions are ambiguous");
        assert_eq!(records[0].lvlm_caption.as_deref(), Some("a local detail"));
    }

    #[test]
    fn textless_region_is_dropped_and_counted() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, mut panel, path) = fixture(dir.path());
        panel.fragments = vec!["No marker words here.".to_string()];
        // Region-caption calls fail; marker keyword matches nothing.
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[])));
        let drafts = vec![RegionDraft {
            bbox: BBox::pixel(10.0, 10.0, 60.0, 60.0).expect("box"),
            provenance: Provenance::Marker,
            fragment_index: None,
            fragment_text: None,
            marker_kind: Some("arrow".to_string()),
        }];
        let (records, stats) =
            attach_texts(&client, &figure, &path, &panel, drafts).expect("attach");
        assert!(records.is_empty());
        assert_eq!(stats.dropped_textless, 1);
        assert_eq!(stats.caption_call_failures, 1);
    }

    #[test]
    fn region_ids_are_contiguous_after_drops() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[])));
        let good = |i: f64| RegionDraft {
            bbox: BBox::pixel(10.0 * i, 10.0, 10.0 * i + 8.0, 18.0).expect("box"),
            provenance: Provenance::Caption,
            fragment_index: Some(0),
            fragment_text: Some("Arrows indicate necrosis.".to_string()),
            marker_kind: None,
        };
        let textless = RegionDraft {
            bbox: BBox::pixel(120.0, 120.0, 140.0, 140.0).expect("box"),
            provenance: Provenance::Marker,
            fragment_index: None,
            fragment_text: None,
            marker_kind: Some("other".to_string()),
        };
        let drafts = vec![good(1.0), textless, good(5.0)];
        let (records, stats) =
            attach_texts(&client, &figure, &path, &panel, drafts).expect("attach");
        assert_eq!(stats.dropped_textless, 1);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].region_id, "fig/p0/r0");
        assert_eq!(records[1].region_id, "fig/p0/r1", "ids stay dense after a drop");
    }

    #[test]
    fn mine_regions_end_to_end_and_skips_non_photographic() {
        let dir = tempfile::tempdir().expect("tempdir");
        let (figure, panel, path) = fixture(dir.path());
        let client = LvlmClient::new(Box::new(TemplateRouter::new(&[
            (
                TemplateId::MarkerDetect,
                r#"{"markers": [{"kind": "arrow", "glyph_box": [0.50, 0.50, 0.56, 0.58]}]}"#,
            ),
            (
                TemplateId::CaptionGround,
                r#"{"objects": [{"phrase": "necrosis", "fragment_index": 0, "box": [0.45, 0.45, 0.55, 0.55], "visible": true}]}"#,
            ),
            (TemplateId::RegionCaption, r#"{"caption": "a necrotic focus"}"#),
        ])));
        let cfg = RegionConfig::default();
        let out = mine_regions(&client, &figure, &path, &panel, &cfg).expect("mine");
        assert_eq!(out.regions.len(), 1);
        assert_eq!(out.regions[0].provenance, Provenance::Caption);
        assert_eq!(out.regions[0].parent_panel, "fig/p0");
        assert!(out.regions[0].bbox.x_max <= panel.bbox.width());

        let mut np = panel.clone();
        np.is_photographic = false;
        let skipped = mine_regions(&client, &figure, &path, &np, &cfg).expect("mine");
        assert!(skipped.regions.is_empty(), "non-photographic panels are never mined");
        assert!(skipped.markers.is_empty());
    }

    #[test]
    fn check_gating_flags_a_planted_violation() {
        let markers = vec![marker_at([0.05, 0.05, 0.09, 0.09])];
        let drafts = vec![RegionDraft {
            bbox: BBox::pixel(80.0, 80.0, 95.0, 95.0).expect("box"),
            provenance: Provenance::Caption,
            fragment_index: Some(0),
            fragment_text: Some("x".to_string()),
            marker_kind: None,
        }];
        let violations = check_gating(&drafts, &markers, 0.10, 100.0, 100.0);
        assert_eq!(violations, vec![0], "far caption survivor is a soundness violation");
    }
}
