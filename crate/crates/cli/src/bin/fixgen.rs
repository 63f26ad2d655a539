//! Regenerates the bundled mock corpus under `fixtures/`.
//!
//! The generator renders twenty synthetic figures, answers every endpoint
//! request from a planted truth table, and records those answers as mock
//! fixtures while running the real mining stages. Each figure's outcome is
//! asserted against hand-computed expectations before anything is frozen to
//! disk, and a final end-to-end replay through the stage driver proves the
//! recorded fixture set is complete.
//!
//! Scenario coverage, one figure per behavior under test:
//!
//! - f01/f07: single-panel figures (f07 with a failing describe call)
//! - f02/f05/f19: caption boxes kept by a nearby marker glyph
//! - f03: identifier range `(A-C)` plus anchor inheritance across `;`
//! - f04: non-photographic panel and an orphan caption anchor
//! - f06: lowercase identifiers, marker with no caption mention
//! - f08: marker detector failure gates every caption box out
//! - f09: one caption box kept, one gated out, one invisible
//! - f10: inflated marker suppressed by an overlapping caption box
//! - f11/f12/f13: contrastive fragments re-routed / refused / failed
//! - f14: two same-text marker regions merged by cleanup
//! - f15: 2x2 grid plus a malformed decompose entry
//! - f16: duplicate panel identifiers
//! - f17: textless region dropped (empty generated caption)
//! - f18: region-caption call fails, grounded text carries the region
//! - f20: every decompose view invalid, figure yields no panels

use anyhow::{ensure, Context, Result};
use clap::Parser;
use figmine_cli::fixtures::{ExpectedCounts, FigureExpectation, StatTotals};
use figmine_cli::stages::{self, figure_rng};
use figmine_cli::RunConfig;
use figmine_core::corpus::{self, CorpusManifest, FigureRecord, PanelRecord, RegionRecord};
use figmine_core::eval::build_eval_split;
use figmine_core::lvlm::{
    ImageRef, LvlmClient, LvlmError, LvlmRequest, RecordingResponder, Responder, TemplateId,
};
use figmine_core::panels::{self, ConsolidateConfig};
use figmine_core::postprocess::{self, CleanupConfig};
use figmine_core::regions::{self, RegionConfig};
use image::{Rgb, RgbImage};
use serde_json::json;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

const PIPELINE_SEED: u64 = 11;
const TRAIN_SEED: u64 = 17;
const HOLDOUT_FRACTION: f64 = 0.2;
const N_VIEWS: usize = 3;
const WIDTH: u32 = 400;
const HEIGHT: u32 = 300;
const ARTICLE_TITLE: &str = "Atlas of rendered tissue micrographs";
const LICENSE: &str = "CC-BY-4.0";

/// A reply that never parses as JSON, used to plant endpoint failures.
const GARBAGE: &str = "I cannot express this result in the requested format.";

const PALETTE: [[u8; 3]; 12] = [
    [186, 202, 224],
    [224, 196, 186],
    [196, 224, 186],
    [224, 218, 186],
    [202, 186, 224],
    [186, 224, 214],
    [224, 186, 203],
    [214, 224, 186],
    [186, 214, 224],
    [224, 205, 186],
    [196, 186, 224],
    [186, 224, 196],
];

#[derive(Clone, Copy)]
enum Describe {
    Text(&'static str),
    Invalid,
}

#[derive(Clone, Copy)]
enum RegionReply {
    Text(&'static str),
    Empty,
    Invalid,
}

#[derive(Clone)]
enum Segment {
    /// The figure plants no ambiguity; a segmentation call is a bug.
    Unused,
    /// Absolute fragment index -> panel identifiers it belongs to.
    Answer(Vec<(usize, Vec<&'static str>)>),
    Invalid,
}

struct MarkerTruth {
    kind: &'static str,
    /// Panel-normalized glyph box (the drawn cue).
    glyph: [f64; 4],
    /// Panel-normalized box the cue points at, when the detector reports one.
    target: Option<[f64; 4]>,
    role: Option<&'static str>,
}

struct GroundTruth {
    phrase: &'static str,
    /// Substring located in the panel's fragment list to pick the index.
    needle: &'static str,
    /// Panel-normalized box.
    bbox: [f64; 4],
    visible: bool,
}

struct PanelTruth {
    identifier: Option<&'static str>,
    /// Figure-normalized bounds.
    bbox: [f64; 4],
    /// Description returned at decomposition time (photographic filter input).
    decompose_desc: &'static str,
    describe: Describe,
    marker_detect_invalid: bool,
    markers: Vec<MarkerTruth>,
    grounded: Vec<GroundTruth>,
    region_reply: RegionReply,
    fill: [u8; 3],
}

struct FigTruth {
    id: &'static str,
    caption: &'static str,
    multi: bool,
    /// Every decompose view answers garbage.
    decompose_invalid: bool,
    /// Malformed entries appended to the full-view decompose answer.
    broken_entries: usize,
    segment: Segment,
    panels: Vec<PanelTruth>,
    expect: FigureExpectation,
    expect_stats: StatTotals,
}

fn panel(
    identifier: Option<&'static str>,
    bbox: [f64; 4],
    decompose_desc: &'static str,
    describe: &'static str,
) -> PanelTruth {
    PanelTruth {
        identifier,
        bbox,
        decompose_desc,
        describe: Describe::Text(describe),
        marker_detect_invalid: false,
        markers: Vec::new(),
        grounded: Vec::new(),
        region_reply: RegionReply::Text("Close view of the highlighted structure."),
        fill: [0, 0, 0],
    }
}

fn fig(id: &'static str, caption: &'static str, multi: bool, panels: Vec<PanelTruth>) -> FigTruth {
    let photographic = panels
        .iter()
        .filter(|p| {
            panels::default_photographic_predicate(Some(p.decompose_desc))
        })
        .count();
    FigTruth {
        id,
        caption,
        multi,
        decompose_invalid: false,
        broken_entries: 0,
        segment: Segment::Unused,
        expect: FigureExpectation {
            panels: panels.len(),
            photographic,
            regions: 0,
        },
        expect_stats: StatTotals::default(),
        panels,
    }
}

fn marker(kind: &'static str, glyph: [f64; 4]) -> MarkerTruth {
    MarkerTruth { kind, glyph, target: None, role: None }
}

fn grounded(phrase: &'static str, needle: &'static str, bbox: [f64; 4]) -> GroundTruth {
    GroundTruth { phrase, needle, bbox, visible: true }
}

fn truth() -> Vec<FigTruth> {
    let mut figs = Vec::new();

    // f01: single photographic panel, nothing mined.
    figs.push(fig(
        "f01",
        "Cryo-EM density map of the ribosome complex.",
        false,
        vec![panel(
            None,
            [0.0, 0.0, 1.0, 1.0],
            "Electron micrograph of a ribosome particle.",
            "Single ribosome particle at high magnification.",
        )],
    ));

    // f02: one kept caption box per panel, each sponsored by a marker.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Histology section with necrotic tissue.",
            "Necrotic cortex with pyknotic nuclei.",
        );
        let mut m = marker("arrow", [0.40, 0.40, 0.46, 0.46]);
        m.target = Some([0.30, 0.30, 0.60, 0.60]);
        m.role = Some("points_at");
        a.markers.push(m);
        a.grounded.push(grounded("necrotic foci", "necrotic", [0.32, 0.32, 0.58, 0.58]));
        a.region_reply = RegionReply::Text("Necrotic focus with fragmented nuclei.");

        let mut b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Micrograph of a vessel wall.",
            "Cross-section of an arteriole.",
        );
        b.markers.push(marker("asterisk", [0.47, 0.22, 0.53, 0.28]));
        b.grounded.push(grounded("vessel lumen", "lumen", [0.40, 0.15, 0.60, 0.35]));
        b.region_reply = RegionReply::Text("Open vessel lumen bounded by endothelium.");

        let mut f = fig(
            "f02",
            "(A) Arrows indicate necrotic foci. (B) Asterisk marks the vessel lumen.",
            true,
            vec![a, b],
        );
        f.expect.regions = 2;
        figs.push(f);
    }

    // f03: range anchor (A-C) inherited across ';', lone marker on B.
    {
        let a = panel(
            Some("A"),
            [0.0, 0.0, 1.0 / 3.0, 1.0],
            "H&E stained section, low power.",
            "Low-power overview of the biopsy.",
        );
        let mut b = panel(
            Some("B"),
            [1.0 / 3.0, 0.0, 2.0 / 3.0, 1.0],
            "H&E stained section, mid power.",
            "Mid-power field with dividing cells.",
        );
        b.markers.push(marker("arrow", [0.44, 0.44, 0.50, 0.50]));
        b.region_reply = RegionReply::Text("Mitotic figure in metaphase.");
        let c = panel(
            Some("C"),
            [2.0 / 3.0, 0.0, 1.0, 1.0],
            "H&E stained section, high power.",
            "High-power detail of the same region.",
        );
        let mut f = fig(
            "f03",
            "(A\u{2013}C) Sections stained with H&E; arrows highlight mitotic figures.",
            true,
            vec![a, b, c],
        );
        f.expect.regions = 1;
        f.expect_stats.inflated_markers = 1;
        figs.push(f);
    }

    // f04: non-photographic quantification panel plus an orphan anchor (C).
    {
        let a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Fluorescence micrograph of stained nuclei.",
            "DAPI-positive nuclei across the field.",
        );
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Bar chart of cell counts per field.",
            "Counting summary per condition.",
        );
        let mut f = fig(
            "f04",
            "(A) DAPI staining of nuclei. (B) Quantification of positive cells. (C) Merged channels omitted.",
            true,
            vec![a, b],
        );
        f.expect_stats.orphan_anchors = 1;
        figs.push(f);
    }

    // f05: roman numeral identifiers, caption box kept on panel II.
    {
        let one = panel(
            Some("I"),
            [0.0, 0.0, 0.5, 1.0],
            "Phase micrograph of untreated culture.",
            "Confluent untreated monolayer.",
        );
        let mut two = panel(
            Some("II"),
            [0.5, 0.0, 1.0, 1.0],
            "Phase micrograph of treated culture.",
            "Treated monolayer with rounded cells.",
        );
        two.markers.push(marker("asterisk", [0.47, 0.22, 0.53, 0.28]));
        two.grounded.push(grounded("apoptotic cells", "apoptotic", [0.40, 0.15, 0.60, 0.35]));
        two.region_reply = RegionReply::Text("Rounded apoptotic cells with blebbing.");
        let mut f = fig(
            "f05",
            "(I) Control culture. (II) Treated culture; asterisks denote apoptotic cells.",
            true,
            vec![one, two],
        );
        f.expect.regions = 1;
        figs.push(f);
    }

    // f06: lowercase identifiers; circle marker whose keyword is never
    // mentioned, so the region survives on its generated caption alone.
    {
        let a = panel(
            Some("a"),
            [0.0, 0.0, 0.5, 1.0],
            "Skin biopsy, epidermal layer.",
            "Intact stratified epidermis.",
        );
        let mut b = panel(
            Some("b"),
            [0.5, 0.0, 1.0, 1.0],
            "Skin biopsy, dermal layer.",
            "Dermis with perivascular infiltrate.",
        );
        b.markers.push(marker("circle", [0.35, 0.35, 0.65, 0.65]));
        b.region_reply = RegionReply::Text("Dense inflammatory infiltrate beneath the epidermis.");
        let mut f = fig(
            "f06",
            "(a) Epidermis with intact stratum corneum. (b) Dermis with a circled inflammatory infiltrate.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        f.expect_stats.inflated_markers = 1;
        figs.push(f);
    }

    // f07: single panel whose describe call never parses.
    {
        let mut p = panel(
            None,
            [0.0, 0.0, 1.0, 1.0],
            "Transmission electron micrograph of mitochondria.",
            "unused",
        );
        p.describe = Describe::Invalid;
        let mut f = fig(
            "f07",
            "Transmission electron micrograph of mitochondrial cristae.",
            false,
            vec![p],
        );
        f.expect_stats.describe_failures = 1;
        figs.push(f);
    }

    // f08: marker detection fails, so the grounded box has no sponsor.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Electron micrograph of a synapse.",
            "Synaptic cleft with vesicles.",
        );
        a.marker_detect_invalid = true;
        a.grounded.push(grounded("synaptic densities", "synaptic", [0.30, 0.30, 0.60, 0.60]));
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Electron micrograph, wider field.",
            "Overview of the axon terminal.",
        );
        let mut f = fig(
            "f08",
            "(A) Arrowheads point to synaptic densities. (B) Overview of the synapse region.",
            true,
            vec![a, b],
        );
        f.expect_stats.gated_out = 1;
        figs.push(f);
    }

    // f09: two grounded boxes, one kept and one too far from any glyph,
    // plus an invisible object dropped before gating.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Brain section with an ischemic lesion.",
            "Infarcted cortex with pale staining.",
        );
        a.markers.push(marker("arrow", [0.27, 0.27, 0.33, 0.33]));
        a.grounded.push(grounded("lesion edge", "lesion", [0.22, 0.21, 0.42, 0.41]));
        a.grounded.push(grounded("infarct core", "infarct", [0.70, 0.70, 0.90, 0.90]));
        a.grounded.push(GroundTruth {
            phrase: "hemorrhage site",
            needle: "asterisk",
            bbox: [0.60, 0.10, 0.80, 0.30],
            visible: false,
        });
        a.region_reply = RegionReply::Text("Edge of the ischemic lesion.");
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Brain section from a sham animal.",
            "Uniformly stained sham cortex.",
        );
        let mut f = fig(
            "f09",
            "(A) Arrows mark the lesion edge; an asterisk sits in the infarct core. (B) Sham control.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        f.expect_stats.gated_out = 1;
        figs.push(f);
    }

    // f10: lone marker's inflated target overlaps the kept caption box
    // beyond the suppression threshold, so the caption box wins.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Fluorescence image of a dividing cell.",
            "Metaphase plate in a dividing cell.",
        );
        a.markers.push(marker("arrow", [0.42, 0.42, 0.48, 0.48]));
        let mut far = marker("arrow", [0.82, 0.12, 0.88, 0.18]);
        far.target = Some([0.20, 0.20, 0.72, 0.72]);
        a.markers.push(far);
        a.grounded.push(grounded("stained nucleus", "stained", [0.20, 0.20, 0.70, 0.70]));
        a.region_reply = RegionReply::Text("Condensed chromosomes at the plate.");
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Fluorescence image, control field.",
            "Interphase nuclei only.",
        );
        let mut f = fig(
            "f10",
            "(A) Arrows converge on the stained nucleus. (B) Control field.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        f.expect_stats.inflated_markers = 1;
        f.expect_stats.fuse_nms_suppressed = 1;
        figs.push(f);
    }

    // f11: contrastive fragment re-routed to panel A only.
    {
        let a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Confocal image with GFP signal.",
            "Strong cytoplasmic GFP signal.",
        );
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Phase contrast of the same field.",
            "Phase contrast reference.",
        );
        let mut f = fig(
            "f11",
            "(A) GFP signal in A but not B. (B) Phase contrast.",
            true,
            vec![a, b],
        );
        f.segment = Segment::Answer(vec![(0, vec!["A"])]);
        f.expect_stats.ambiguous_fragments = 1;
        f.expect_stats.rerouted_fragments = 1;
        figs.push(f);
    }

    // f12: segmentation answer names an unknown panel; routing is kept.
    {
        let a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Immunostained section, primary antibody.",
            "Strong membranous staining.",
        );
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Immunostained section, control.",
            "No staining above background.",
        );
        let mut f = fig(
            "f12",
            "(A) Strong staining, whereas (B) shows none. (B) Secondary antibody control only.",
            true,
            vec![a, b],
        );
        f.segment = Segment::Answer(vec![(0, vec!["Z"])]);
        f.expect_stats.ambiguous_fragments = 1;
        figs.push(f);
    }

    // f13: segmentation call never parses; routing is kept.
    {
        let a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Micrograph of the tumor margin.",
            "Invasive front of the tumor.",
        );
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Micrograph of healthy margin.",
            "Well-ordered healthy mucosa.",
        );
        let mut f = fig(
            "f13",
            "(A) Tumor margin in A, in contrast to B. (B) Healthy margin.",
            true,
            vec![a, b],
        );
        f.segment = Segment::Invalid;
        f.expect_stats.ambiguous_fragments = 1;
        figs.push(f);
    }

    // f14: two lone markers with identical texts fuse into one region
    // during cleanup.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Kidney section, cortical zone.",
            "Cortex with scattered necrosis.",
        );
        let mut m1 = marker("arrow", [0.28, 0.28, 0.32, 0.32]);
        m1.target = Some([0.25, 0.25, 0.55, 0.55]);
        a.markers.push(m1);
        let mut m2 = marker("arrow", [0.43, 0.43, 0.47, 0.47]);
        m2.target = Some([0.35, 0.35, 0.65, 0.65]);
        a.markers.push(m2);
        a.region_reply = RegionReply::Text("Cluster of necrotic tubules.");
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Kidney section, medullary zone.",
            "Unremarkable medulla.",
        );
        let mut f = fig(
            "f14",
            "(A) Arrows flag necrotic foci in the cortex. (B) Medulla overview.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        f.expect_stats.inflated_markers = 2;
        f.expect_stats.merged_away = 1;
        figs.push(f);
    }

    // f15: 2x2 grid (inset from the border so crop views can confirm
    // panels) plus one malformed decompose entry on the full view.
    {
        let a = panel(
            Some("A"),
            [0.05, 0.05, 0.45, 0.45],
            "Nissl stain of the cortex.",
            "Layered cortical cytoarchitecture.",
        );
        let b = panel(
            Some("B"),
            [0.55, 0.05, 0.95, 0.45],
            "Nissl stain of the striatum.",
            "Striatal neuropil with patches.",
        );
        let c = panel(
            Some("C"),
            [0.05, 0.55, 0.45, 0.95],
            "Nissl stain of the thalamus.",
            "Thalamic nuclei at low power.",
        );
        let d = panel(
            Some("D"),
            [0.55, 0.55, 0.95, 0.95],
            "Nissl stain of the hippocampus.",
            "Hippocampal pyramidal layer.",
        );
        let mut f = fig(
            "f15",
            "(A) Cortex. (B) Striatum. (C) Thalamus. (D) Hippocampus.",
            true,
            vec![a, b, c, d],
        );
        f.broken_entries = 1;
        figs.push(f);
    }

    // f16: two surviving panels share identifier A.
    {
        let a1 = panel(
            Some("A"),
            [0.0, 0.0, 0.32, 1.0],
            "Micrograph of the left hemisphere.",
            "Left hemisphere section.",
        );
        let a2 = panel(
            Some("A"),
            [0.34, 0.0, 0.66, 1.0],
            "Micrograph of the right hemisphere.",
            "Right hemisphere section.",
        );
        let b = panel(
            Some("B"),
            [0.68, 0.0, 1.0, 1.0],
            "Micrograph of the cerebellum.",
            "Cerebellar folia.",
        );
        let mut f = fig(
            "f16",
            "(A) Paired cortical hemispheres. (B) Cerebellar vermis.",
            true,
            vec![a1, a2, b],
        );
        f.expect_stats.duplicate_identifier_figures = 1;
        figs.push(f);
    }

    // f17: lone marker whose region ends up with no text at all.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Bright-field image of an organoid.",
            "Budding intestinal organoid.",
        );
        a.markers.push(marker("circle", [0.40, 0.40, 0.60, 0.60]));
        a.region_reply = RegionReply::Empty;
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Bright-field image, empty well.",
            "Reference well without organoids.",
        );
        let mut f = fig(
            "f17",
            "(A) Overview of the organoid. (B) Bright-field reference.",
            true,
            vec![a, b],
        );
        f.expect_stats.inflated_markers = 1;
        f.expect_stats.dropped_textless = 1;
        figs.push(f);
    }

    // f18: region-caption call fails; the grounded fragment carries it.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Ultrasound still of a renal cyst.",
            "Anechoic cyst with sharp walls.",
        );
        a.markers.push(marker("asterisk", [0.47, 0.47, 0.53, 0.53]));
        a.region_reply = RegionReply::Invalid;
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Ultrasound still of normal parenchyma.",
            "Homogeneous parenchymal echo.",
        );
        let mut f = fig(
            "f18",
            "(A) An asterisk marks the cyst lumen. (B) Surrounding parenchyma.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        f.expect_stats.inflated_markers = 1;
        f.expect_stats.caption_call_failures = 1;
        figs.push(f);
    }

    // f19: inset marker with a target box; the caption box is kept by the
    // glyph, so the target never becomes its own region.
    {
        let mut a = panel(
            Some("A"),
            [0.0, 0.0, 0.5, 1.0],
            "Micrograph with a magnified inset.",
            "Overview with an inset detail.",
        );
        let mut m = marker("inset", [0.05, 0.05, 0.20, 0.20]);
        m.target = Some([0.55, 0.55, 0.90, 0.90]);
        m.role = Some("magnifies");
        a.markers.push(m);
        a.grounded.push(grounded("boxed area", "boxed", [0.06, 0.06, 0.19, 0.19]));
        a.region_reply = RegionReply::Text("Magnified view of the boxed area.");
        let b = panel(
            Some("B"),
            [0.5, 0.0, 1.0, 1.0],
            "Micrograph of the wide field.",
            "Uncropped surrounding tissue.",
        );
        let mut f = fig(
            "f19",
            "(A) Inset shows the boxed area at higher magnification. (B) Wide field.",
            true,
            vec![a, b],
        );
        f.expect.regions = 1;
        figs.push(f);
    }

    // f20: every decompose view fails; the figure survives with no panels.
    {
        let mut f = fig(
            "f20",
            "Whole-mount zebrafish embryo overview.",
            false,
            vec![panel(
                None,
                [0.0, 0.0, 1.0, 1.0],
                "Whole-mount embryo image.",
                "unused",
            )],
        );
        f.decompose_invalid = true;
        f.expect = FigureExpectation::default();
        figs.push(f);
    }

    for (fi, f) in figs.iter_mut().enumerate() {
        for (pi, p) in f.panels.iter_mut().enumerate() {
            p.fill = PALETTE[(fi + 3 * pi) % PALETTE.len()];
        }
    }
    figs
}

// ---------------------------------------------------------------------------
// Oracle: answers endpoint requests from the truth table
// ---------------------------------------------------------------------------

struct Oracle {
    figures: Vec<FigTruth>,
}

impl Oracle {
    fn fig(&self, image: &ImageRef) -> &FigTruth {
        let stem = image
            .path()
            .file_stem()
            .and_then(|s| s.to_str())
            .expect("fixture image paths are utf-8");
        self.figures
            .iter()
            .find(|f| f.id == stem)
            .unwrap_or_else(|| panic!("oracle has no figure for image {stem}"))
    }

    /// The planted panel whose box contains the crop center. Works both for
    /// panel crops (center of the panel itself) and for region crops.
    fn panel<'a>(&self, f: &'a FigTruth, image: &ImageRef) -> &'a PanelTruth {
        let ImageRef::Crop { bbox, .. } = image else {
            panic!("{}: expected a cropped request", f.id);
        };
        let cx = (bbox.x_min + bbox.x_max) / 2.0;
        let cy = (bbox.y_min + bbox.y_max) / 2.0;
        f.panels
            .iter()
            .find(|p| cx >= p.bbox[0] && cx <= p.bbox[2] && cy >= p.bbox[1] && cy <= p.bbox[3])
            .unwrap_or_else(|| panic!("{}: crop center ({cx:.3},{cy:.3}) hits no panel", f.id))
    }

    fn decompose(&self, f: &FigTruth, image: &ImageRef) -> String {
        if f.decompose_invalid {
            return GARBAGE.to_string();
        }
        let (view, full) = match image {
            ImageRef::File { .. } => ([0.0, 0.0, 1.0, 1.0], true),
            ImageRef::Crop { bbox, .. } => ([bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max], false),
        };
        if !f.multi {
            let panels = if full {
                vec![panel_entry(&f.panels[0], &view)]
            } else {
                Vec::new()
            };
            return fenced(json!({"is_multi_panel": false, "panels": panels}));
        }
        let mut entries: Vec<serde_json::Value> = f
            .panels
            .iter()
            .filter(|p| contained(p.bbox, view))
            .map(|p| panel_entry(p, &view))
            .collect();
        if full {
            for _ in 0..f.broken_entries {
                entries.push(json!({"id": "x", "bbox": [0.5, 0.9]}));
            }
        }
        fenced(json!({"is_multi_panel": true, "panels": entries}))
    }

    fn segment(&self, f: &FigTruth) -> String {
        match &f.segment {
            Segment::Unused => panic!("{}: unexpected caption_segment call", f.id),
            Segment::Invalid => GARBAGE.to_string(),
            Segment::Answer(list) => {
                let assignments: Vec<_> = list
                    .iter()
                    .map(|(i, ps)| json!({"fragment_index": i, "panels": ps}))
                    .collect();
                json!({"assignments": assignments}).to_string()
            }
        }
    }

    fn ground(&self, f: &FigTruth, p: &PanelTruth, request: &LvlmRequest) -> String {
        let slot = request
            .slots
            .get("caption_context")
            .unwrap_or_else(|| panic!("{}: caption_ground without fragment list", f.id));
        let fragments: Vec<serde_json::Value> =
            serde_json::from_str(slot).expect("caption_context slot is the fragment list");
        let objects: Vec<_> = p
            .grounded
            .iter()
            .map(|g| {
                let index = fragments.iter().find_map(|e| {
                    let text = e.get("text")?.as_str()?;
                    if text.contains(g.needle) {
                        e.get("fragment_index")?.as_u64()
                    } else {
                        None
                    }
                });
                json!({
                    "phrase": g.phrase,
                    "fragment_index": index,
                    "box": g.bbox,
                    "visible": g.visible,
                })
            })
            .collect();
        json!({"objects": objects}).to_string()
    }
}

impl Responder for Oracle {
    fn respond(&self, request: &LvlmRequest, _prompt: &str, _hash: &str) -> Result<String, LvlmError> {
        let f = self.fig(&request.image);
        let reply = match request.template {
            TemplateId::PanelDecompose => self.decompose(f, &request.image),
            TemplateId::CaptionSegment => self.segment(f),
            TemplateId::PanelDescribe => {
                let p = self.panel(f, &request.image);
                match p.describe {
                    Describe::Invalid => GARBAGE.to_string(),
                    Describe::Text(t) => json!({"description": t}).to_string(),
                }
            }
            TemplateId::MarkerDetect => {
                let p = self.panel(f, &request.image);
                if p.marker_detect_invalid {
                    GARBAGE.to_string()
                } else {
                    let markers: Vec<_> = p
                        .markers
                        .iter()
                        .map(|m| {
                            let mut e = json!({"kind": m.kind, "glyph_box": m.glyph});
                            if let Some(t) = m.target {
                                e["target_box"] = json!(t);
                            }
                            if let Some(r) = m.role {
                                e["role"] = json!(r);
                            }
                            e
                        })
                        .collect();
                    json!({"markers": markers}).to_string()
                }
            }
            TemplateId::CaptionGround => {
                let p = self.panel(f, &request.image);
                self.ground(f, p, request)
            }
            TemplateId::RegionCaption => {
                let p = self.panel(f, &request.image);
                match p.region_reply {
                    RegionReply::Invalid => GARBAGE.to_string(),
                    RegionReply::Empty => json!({"caption": ""}).to_string(),
                    RegionReply::Text(t) => json!({"caption": t}).to_string(),
                }
            }
        };
        Ok(reply)
    }
}

fn contained(panel: [f64; 4], view: [f64; 4]) -> bool {
    const EPS: f64 = 1e-9;
    panel[0] >= view[0] - EPS
        && panel[1] >= view[1] - EPS
        && panel[2] <= view[2] + EPS
        && panel[3] <= view[3] + EPS
}

/// Map a figure-normalized panel box into view-local coordinates.
fn panel_entry(p: &PanelTruth, view: &[f64; 4]) -> serde_json::Value {
    let vw = view[2] - view[0];
    let vh = view[3] - view[1];
    let b = [
        ((p.bbox[0] - view[0]) / vw).clamp(0.0, 1.0),
        ((p.bbox[1] - view[1]) / vh).clamp(0.0, 1.0),
        ((p.bbox[2] - view[0]) / vw).clamp(0.0, 1.0),
        ((p.bbox[3] - view[1]) / vh).clamp(0.0, 1.0),
    ];
    json!({"id": p.identifier, "bbox": b, "description": p.decompose_desc})
}

fn fenced(v: serde_json::Value) -> String {
    format!("```json\n{v}\n```")
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn render(f: &FigTruth, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([242, 242, 242]));
    for p in &f.panels {
        let (x0, y0, x1, y1) = px_rect(p.bbox);
        for y in y0..y1 {
            for x in x0..x1 {
                // Diagonal shading keeps pooled features off-constant.
                let shade = ((x + y) % 31) as i16 - 15;
                let c = [
                    (p.fill[0] as i16 + shade).clamp(0, 255) as u8,
                    (p.fill[1] as i16 + shade).clamp(0, 255) as u8,
                    (p.fill[2] as i16 + shade).clamp(0, 255) as u8,
                ];
                img.put_pixel(x, y, Rgb(c));
            }
        }
        for g in &p.grounded {
            outline(&mut img, compose(p.bbox, g.bbox), Rgb([40, 40, 110]));
        }
        for m in &p.markers {
            if let Some(t) = m.target {
                outline(&mut img, compose(p.bbox, t), Rgb([90, 90, 90]));
            }
            let (gx0, gy0, gx1, gy1) = px_rect(compose(p.bbox, m.glyph));
            for y in gy0..gy1 {
                for x in gx0..gx1 {
                    img.put_pixel(x, y, Rgb([140, 30, 30]));
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Panel-normalized box -> figure-normalized box.
fn compose(panel: [f64; 4], inner: [f64; 4]) -> [f64; 4] {
    let w = panel[2] - panel[0];
    let h = panel[3] - panel[1];
    [
        panel[0] + inner[0] * w,
        panel[1] + inner[1] * h,
        panel[0] + inner[2] * w,
        panel[1] + inner[3] * h,
    ]
}

fn px_rect(b: [f64; 4]) -> (u32, u32, u32, u32) {
    let w = f64::from(WIDTH);
    let h = f64::from(HEIGHT);
    let x0 = (b[0] * w).floor().clamp(0.0, w - 1.0) as u32;
    let y0 = (b[1] * h).floor().clamp(0.0, h - 1.0) as u32;
    let x1 = (b[2] * w).ceil().clamp(1.0, w) as u32;
    let y1 = (b[3] * h).ceil().clamp(1.0, h) as u32;
    (x0, y0, x1.max(x0 + 1), y1.max(y0 + 1))
}

fn outline(img: &mut RgbImage, b: [f64; 4], color: Rgb<u8>) {
    let (x0, y0, x1, y1) = px_rect(b);
    for x in x0..x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1 - 1, color);
    }
    for y in y0..y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1 - 1, y, color);
    }
}

// ---------------------------------------------------------------------------
// Generation and verification
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "figmine-fixgen",
    about = "Regenerate the bundled mock corpus fixtures"
)]
struct Args {
    /// Output directory for the fixture set.
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
    /// Scratch directory for the end-to-end verification run.
    #[arg(long, default_value = "target/fixgen-verify")]
    verify_dir: PathBuf,
}

fn figure_record(f: &FigTruth) -> FigureRecord {
    FigureRecord {
        figure_id: f.id.to_string(),
        image_path: format!("images/{}.png", f.id),
        caption: f.caption.to_string(),
        article_title: Some(ARTICLE_TITLE.to_string()),
        width_px: WIDTH,
        height_px: HEIGHT,
        license_tag: LICENSE.to_string(),
    }
}

fn main() -> Result<()> {
    let args = Args::parse();
    let out = &args.out;
    let figs = truth();

    std::fs::create_dir_all(out.join("images"))?;
    let lvlm_dir = out.join("lvlm");
    if lvlm_dir.exists() {
        std::fs::remove_dir_all(&lvlm_dir)?;
    }

    let mut jsonl = Vec::new();
    let mut records = Vec::new();
    for f in &figs {
        let record = figure_record(f);
        render(f, &out.join(&record.image_path))?;
        writeln!(jsonl, "{}", serde_json::to_string(&record)?)?;
        records.push(record);
    }
    std::fs::write(out.join("figures.jsonl"), jsonl)?;

    // Mine every figure through the real stage functions while the recorder
    // captures each endpoint exchange.
    let oracle = Oracle { figures: truth() };
    let recorder = RecordingResponder::new(oracle, &lvlm_dir)
        .context("creating the fixture recorder")?;
    let client = LvlmClient::new(Box::new(recorder));
    let consolidate_cfg = ConsolidateConfig::default();
    let region_cfg = RegionConfig::default();
    let cleanup_cfg = CleanupConfig::default();

    let mut manifest_panels: Vec<PanelRecord> = Vec::new();
    let mut manifest_regions: Vec<RegionRecord> = Vec::new();
    let mut per_figure = BTreeMap::new();
    let mut totals = StatTotals::default();

    for (f, record) in figs.iter().zip(&records) {
        let image = out.join(&record.image_path);
        let mut rng = figure_rng(PIPELINE_SEED, &record.figure_id);
        let batch =
            panels::propose_panels(&client, record, &image, N_VIEWS, &mut rng)?;
        ensure!(
            batch.rejected_entries == f.broken_entries,
            "{}: expected {} rejected decompose entries, got {}",
            f.id,
            f.broken_entries,
            batch.rejected_entries
        );
        let expected_views = if f.decompose_invalid { 0 } else { N_VIEWS };
        ensure!(
            batch.valid_views == expected_views,
            "{}: expected {} valid views, got {}",
            f.id,
            expected_views,
            batch.valid_views
        );

        let mut outcome = panels::consolidate(record, &batch.proposals, &consolidate_cfg);
        panels::filter_photographic(&mut outcome.panels, panels::default_photographic_predicate);
        let assoc = panels::associate_text(&client, record, &image, &mut outcome.panels)?;

        let mut actual = StatTotals {
            ambiguous_fragments: assoc.ambiguous_fragments,
            rerouted_fragments: assoc.rerouted_fragments,
            orphan_anchors: assoc.orphans.len(),
            describe_failures: assoc.describe_failures,
            duplicate_identifier_figures: usize::from(!outcome.duplicate_identifiers.is_empty()),
            ..StatTotals::default()
        };

        let mut region_count = 0usize;
        for panel in &outcome.panels {
            let mined = regions::mine_regions(&client, record, &image, &panel.record, &region_cfg)?;
            actual.gated_out += mined.stats.fuse.gated_out;
            actual.inflated_markers += mined.stats.fuse.inflated_markers;
            actual.fuse_nms_suppressed += mined.stats.fuse.nms_suppressed;
            actual.dropped_textless += mined.stats.attach.dropped_textless;
            actual.caption_call_failures += mined.stats.attach.caption_call_failures;
            let (clean, cstats) = postprocess::cleanup(
                &mined.regions,
                panel.record.bbox.width(),
                panel.record.bbox.height(),
                &cleanup_cfg,
            );
            actual.merged_away += cstats.merged_away;
            region_count += clean.len();
            manifest_regions.extend(clean);
        }

        let expectation = FigureExpectation {
            panels: outcome.panels.len(),
            photographic: outcome.panels.iter().filter(|p| p.record.is_photographic).count(),
            regions: region_count,
        };
        ensure!(
            expectation == f.expect,
            "{}: outcome {:?} does not match expectation {:?}",
            f.id,
            expectation,
            f.expect
        );
        ensure!(
            actual == f.expect_stats,
            "{}: stage stats {:#?} do not match expectation {:#?}",
            f.id,
            actual,
            f.expect_stats
        );

        let mut truth_ids: Vec<_> = f.panels.iter().map(|p| p.identifier.map(str::to_string)).collect();
        let mut got_ids: Vec<_> = outcome.panels.iter().map(|p| p.record.identifier.clone()).collect();
        if f.decompose_invalid {
            truth_ids.clear();
        }
        truth_ids.sort();
        got_ids.sort();
        ensure!(
            truth_ids == got_ids,
            "{}: surviving identifiers {:?} differ from planted {:?}",
            f.id,
            got_ids,
            truth_ids
        );

        totals.add(&actual);
        per_figure.insert(record.figure_id.clone(), expectation);
        manifest_panels.extend(outcome.panels.into_iter().map(|p| p.record));
    }

    let manifest = CorpusManifest::new(records.clone(), manifest_panels, manifest_regions);
    let violations = corpus::validate_hierarchy(&manifest);
    ensure!(violations.is_empty(), "hierarchy violations in generated corpus: {violations:?}");

    let expected = ExpectedCounts {
        figures: manifest.stats.figures,
        panels: manifest.stats.panels,
        photographic_panels: manifest.panels.iter().filter(|p| p.is_photographic).count(),
        regions: manifest.stats.regions,
        per_figure,
        stats: totals,
    };

    // A usable split needs every level populated on the training side and a
    // non-empty panel and region gallery on the held-out side.
    let split_seed = (1..500)
        .find(|&seed| {
            build_eval_split(&manifest, HOLDOUT_FRACTION, seed).is_ok_and(|(train, eval)| {
                eval.panels.iter().any(|p| p.is_photographic)
                    && !eval.regions.is_empty()
                    && train.panels.iter().filter(|p| p.is_photographic).count() >= 4
                    && train.regions.len() >= 4
            })
        })
        .context("no split seed in 1..500 balances the holdout")?;

    write_config(out, split_seed)?;
    std::fs::write(
        out.join("expected_counts.json"),
        serde_json::to_string_pretty(&expected)? + "\n",
    )?;

    verify(out, &args.verify_dir, &manifest, &expected)?;

    println!(
        "fixtures: {} figures, {} panels, {} regions, split seed {}",
        expected.figures, expected.panels, expected.regions, split_seed
    );
    println!("written to {}", out.display());
    Ok(())
}

fn write_config(out: &Path, split_seed: u64) -> Result<()> {
    let text = format!(
        r#"# Bundled mock corpus: rendered figures with recorded endpoint
# responses. Paths are relative to this directory; run the pipeline from
# here or rebase them when loading.

[paths]
figures = "figures.jsonl"
images_dir = "."
work_dir = "work"

[lvlm]
mode = "mock"
mock_dir = "lvlm"
strict_mock = true

[seeds]
pipeline = {PIPELINE_SEED}
train = {TRAIN_SEED}
split = {split_seed}

[train]
d = 16
hidden = 32
g = 2
cycle = "1:1:1"
steps = 60
batch_m = 4
batch_p = 4
batch_r = 4
warmup_steps = 10

[eval]
holdout_fraction = {HOLDOUT_FRACTION}
ks = [1, 5, 10]
"#
    );
    std::fs::write(out.join("config.toml"), text)?;
    std::fs::write(out.join(".gitignore"), "work/\n")?;
    Ok(())
}

fn ensure_same<T: PartialEq + std::fmt::Debug>(got: &[T], want: &[T], what: &str) -> Result<()> {
    ensure!(
        got.len() == want.len(),
        "replay produced {} {what}s, generator produced {}",
        got.len(),
        want.len()
    );
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        ensure!(
            g == w,
            "{what} {i} differs between replay and generator:\nreplay:    {g:#?}\ngenerator: {w:#?}"
        );
    }
    Ok(())
}

/// Replay the recorded fixtures through the stage driver end to end and
/// require the same manifest the generator assembled.
fn verify(
    out: &Path,
    verify_dir: &Path,
    manifest: &CorpusManifest,
    expected: &ExpectedCounts,
) -> Result<()> {
    let mut cfg: RunConfig = figmine_cli::load_config(&out.join("config.toml"))
        .map_err(|e| anyhow::anyhow!("{e}"))
        .context("round-tripping the written fixture config")?;
    let base = out
        .canonicalize()
        .with_context(|| format!("canonicalizing {}", out.display()))?;
    cfg.paths.figures = base.join("figures.jsonl");
    cfg.paths.images_dir = base.clone();
    cfg.paths.work_dir = verify_dir.to_path_buf();
    cfg.lvlm.mock_dir = Some(base.join("lvlm"));

    if verify_dir.exists() {
        std::fs::remove_dir_all(verify_dir)?;
    }
    stages::run_all(&cfg, true, false, None).map_err(|e| anyhow::anyhow!("replay run: {e}"))?;

    let replayed = corpus::read_manifest(&verify_dir.join("corpus.manifest"))
        .map_err(|e| anyhow::anyhow!("reading replayed manifest: {e}"))?;
    ensure_same(&replayed.figures, &manifest.figures, "figure")?;
    ensure_same(&replayed.panels, &manifest.panels, "panel")?;
    ensure_same(&replayed.regions, &manifest.regions, "region")?;
    for name in ["model.ckpt", "retrieval.json", "report.json", "run-manifest.json"] {
        ensure!(
            verify_dir.join(name).exists(),
            "replay run left no {name}"
        );
    }
    ensure!(
        replayed.stats.figures == expected.figures
            && replayed.stats.panels == expected.panels
            && replayed.stats.regions == expected.regions,
        "replayed level counts diverge from expected_counts.json"
    );
    Ok(())
}
