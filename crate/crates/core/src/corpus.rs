//! Hierarchical corpus records and the on-disk manifest format.
//!
//! A corpus has three levels: figures (M), panels (P), and regions (R).
//! Panels link to their parent figure, regions to their parent panel, and
//! the link graph must form a forest with figures as roots.
//!
//! Manifest format (bit-exact, UTF-8): one JSON record per line, the level
//! tag field first. Line 1 is a header carrying `format_version` and level
//! counts; figures, panels, and regions follow in insertion order. Field
//! order within a record is fixed, so writing the same manifest twice
//! yields identical bytes. Images are referenced by relative path, never
//! inlined. Region coordinates are relative to the parent panel, which is
//! what ROI pooling consumes downstream.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption;
use crate::geometry::{BBox, Unit};

pub const FORMAT_VERSION: u32 = 1;

/// Slack for floating-point containment checks, in pixels.
const CONTAIN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown format_version {0}")]
    UnknownVersion(u32),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing header record on line 1")]
    MissingHeader,
    #[error("dangling parent link: {child} references missing {parent}")]
    DanglingLink { child: String, parent: String },
    #[error("header stats {stats:?} disagree with record counts {actual:?}")]
    StatsMismatch { stats: LevelCounts, actual: LevelCounts },
    #[error("manifest violates invariants: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    pub figure_id: String,
    pub image_path: String,
    pub caption: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub article_title: Option<String>,
    pub width_px: u32,
    pub height_px: u32,
    pub license_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub panel_id: String,
    pub parent_figure: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub identifier: Option<String>,
    /// Figure pixel coordinates.
    pub bbox: BBox,
    pub fragments: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_description: Option<String>,
    pub is_photographic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Marker,
    Caption,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub parent_panel: String,
    /// Panel pixel coordinates (origin at the panel's top-left corner).
    pub bbox: BBox,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grounded_subcaption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lvlm_caption: Option<String>,
}

impl RegionRecord {
    /// Texts available for this region, sub-caption first. Both pathways
    /// are stored verbatim even when identical; sampling happens at
    /// training time.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Some(t) = &self.grounded_subcaption {
            out.push(t.as_str());
        }
        if let Some(t) = &self.lvlm_caption {
            out.push(t.as_str());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LevelCounts {
    pub figures: usize,
    pub panels: usize,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub figures: Vec<FigureRecord>,
    pub panels: Vec<PanelRecord>,
    pub regions: Vec<RegionRecord>,
    pub stats: LevelCounts,
}

impl CorpusManifest {
    pub fn new(figures: Vec<FigureRecord>, panels: Vec<PanelRecord>, regions: Vec<RegionRecord>) -> Self {
        let stats = LevelCounts { figures: figures.len(), panels: panels.len(), regions: regions.len() };
        CorpusManifest { format_version: FORMAT_VERSION, figures, panels, regions, stats }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new(), Vec::new())
    }

    pub fn figure(&self, id: &str) -> Option<&FigureRecord> {
        self.figures.iter().find(|f| f.figure_id == id)
    }

    pub fn panel(&self, id: &str) -> Option<&PanelRecord> {
        self.panels.iter().find(|p| p.panel_id == id)
    }

    pub fn panels_of(&self, figure_id: &str) -> Vec<&PanelRecord> {
        self.panels.iter().filter(|p| p.parent_figure == figure_id).collect()
    }

    pub fn regions_of(&self, panel_id: &str) -> Vec<&RegionRecord> {
        self.regions.iter().filter(|r| r.parent_panel == panel_id).collect()
    }
}

/// One line of the manifest file. The `level` tag comes first on every
/// line, which keeps the format greppable by level.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "lowercase")]
enum ManifestLine {
    Header { format_version: u32, stats: LevelCounts },
    Figure(FigureRecord),
    Panel(PanelRecord),
    Region(RegionRecord),
}

/// A single invariant violation found by [`validate_hierarchy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity_id: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity_id, self.message)
    }
}

/// Check every corpus invariant: record-level field constraints, ID
/// uniqueness, parent-link resolution, and geometric containment.
/// Violations are data, not errors; an empty list means well-formed.
pub fn validate_hierarchy(manifest: &CorpusManifest) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |entity_id: &str, message: String| {
        violations.push(Violation { entity_id: entity_id.to_string(), message });
    };

    let mut figure_ids = BTreeSet::new();
    for f in &manifest.figures {
        if !figure_ids.insert(f.figure_id.as_str()) {
            push(&f.figure_id, "duplicate figure_id".into());
        }
        if f.width_px < 1 || f.height_px < 1 {
            push(&f.figure_id, format!("non-positive dimensions {}x{}", f.width_px, f.height_px));
        }
        if f.caption.is_empty() {
            push(&f.figure_id, "empty caption".into());
        }
    }

    let mut panel_ids = BTreeSet::new();
    for p in &manifest.panels {
        if !panel_ids.insert(p.panel_id.as_str()) {
            push(&p.panel_id, "duplicate panel_id".into());
        }
        if let Err(e) = p.bbox.validate() {
            push(&p.panel_id, format!("invalid bbox: {e}"));
        } else if p.bbox.unit != Unit::Pixel {
            push(&p.panel_id, "panel bbox must be in figure pixel coordinates".into());
        }
        if let Some(id) = &p.identifier {
            if !caption::is_valid_identifier(id) {
                push(&p.panel_id, format!("identifier {id:?} outside the identifier grammar"));
            }
        }
        match manifest.figure(&p.parent_figure) {
            None => push(&p.panel_id, format!("dangling parent_figure {:?}", p.parent_figure)),
            Some(f) => {
                let frame = BBox {
                    x_min: 0.0,
                    y_min: 0.0,
                    x_max: f.width_px as f64,
                    y_max: f.height_px as f64,
                    unit: Unit::Pixel,
                };
                if p.bbox.validate().is_ok() && !frame.contains(&p.bbox, CONTAIN_EPS) {
                    push(&p.panel_id, format!("bbox {:?} exceeds figure bounds {}x{}", p.bbox, f.width_px, f.height_px));
                }
            }
        }
    }

    let mut region_ids = BTreeSet::new();
    for r in &manifest.regions {
        if !region_ids.insert(r.region_id.as_str()) {
            push(&r.region_id, "duplicate region_id".into());
        }
        if let Err(e) = r.bbox.validate() {
            push(&r.region_id, format!("invalid bbox: {e}"));
        } else if r.bbox.unit != Unit::Pixel {
            push(&r.region_id, "region bbox must be in panel pixel coordinates".into());
        }
        if r.grounded_subcaption.is_none() && r.lvlm_caption.is_none() {
            push(&r.region_id, "region carries no text on either pathway".into());
        }
        match manifest.panel(&r.parent_panel) {
            None => push(&r.region_id, format!("dangling parent_panel {:?}", r.parent_panel)),
            Some(p) => {
                let frame = BBox {
                    x_min: 0.0,
                    y_min: 0.0,
                    x_max: p.bbox.width(),
                    y_max: p.bbox.height(),
                    unit: Unit::Pixel,
                };
                if r.bbox.validate().is_ok() && !frame.contains(&r.bbox, CONTAIN_EPS) {
                    push(&r.region_id, format!("bbox {:?} exceeds panel extent {}x{}", r.bbox, p.bbox.width(), p.bbox.height()));
                }
            }
        }
    }

    // Stats must mirror the record lists.
    let actual = LevelCounts {
        figures: manifest.figures.len(),
        panels: manifest.panels.len(),
        regions: manifest.regions.len(),
    };
    if manifest.stats != actual {
        push("manifest", format!("stats {:?} disagree with counts {:?}", manifest.stats, actual));
    }
    if manifest.format_version != FORMAT_VERSION {
        push("manifest", format!("unsupported format_version {}", manifest.format_version));
    }

    violations
}

/// Serialize a manifest to its line-delimited form. Rejected wholesale if
/// any invariant fails, so a partial file is never produced.
pub fn manifest_to_string(manifest: &CorpusManifest) -> Result<String, ManifestError> {
    let violations = validate_hierarchy(manifest);
    if !violations.is_empty() {
        let joined = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(ManifestError::Invalid(joined));
    }
    let mut out = String::new();
    let header = ManifestLine::Header { format_version: manifest.format_version, stats: manifest.stats };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for f in &manifest.figures {
        out.push_str(&serde_json::to_string(&ManifestLine::Figure(f.clone())).expect("figure serializes"));
        out.push('\n');
    }
    for p in &manifest.panels {
        out.push_str(&serde_json::to_string(&ManifestLine::Panel(p.clone())).expect("panel serializes"));
        out.push('\n');
    }
    for r in &manifest.regions {
        out.push_str(&serde_json::to_string(&ManifestLine::Region(r.clone())).expect("region serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), ManifestError> {
    let body = manifest_to_string(manifest)?;
    let tmp = path.with_extension("tmp");
    let ioerr = |source| ManifestError::Io { path: path.display().to_string(), source };
    fs::write(&tmp, body).map_err(ioerr)?;
    fs::rename(&tmp, path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
}

pub fn manifest_from_str(content: &str) -> Result<CorpusManifest, ManifestError> {
    let mut lines = content.lines().enumerate();
    let (_, first) = lines.next().ok_or(ManifestError::MissingHeader)?;
    let header: ManifestLine = serde_json::from_str(first)
        .map_err(|e| ManifestError::Malformed { line: 1, message: e.to_string() })?;
    let (format_version, stats) = match header {
        ManifestLine::Header { format_version, stats } => (format_version, stats),
        _ => return Err(ManifestError::MissingHeader),
    };
    if format_version != FORMAT_VERSION {
        return Err(ManifestError::UnknownVersion(format_version));
    }

    let mut manifest = CorpusManifest {
        format_version,
        figures: Vec::new(),
        panels: Vec::new(),
        regions: Vec::new(),
        stats,
    };
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let record: ManifestLine = serde_json::from_str(line)
            .map_err(|e| ManifestError::Malformed { line: idx + 1, message: e.to_string() })?;
        match record {
            ManifestLine::Header { .. } => {
                return Err(ManifestError::Malformed { line: idx + 1, message: "duplicate header".into() })
            }
            ManifestLine::Figure(f) => manifest.figures.push(f),
            ManifestLine::Panel(p) => manifest.panels.push(p),
            ManifestLine::Region(r) => manifest.regions.push(r),
        }
    }

    for p in &manifest.panels {
        if manifest.figure(&p.parent_figure).is_none() {
            return Err(ManifestError::DanglingLink { child: p.panel_id.clone(), parent: p.parent_figure.clone() });
        }
    }
    for r in &manifest.regions {
        if manifest.panel(&r.parent_panel).is_none() {
            return Err(ManifestError::DanglingLink { child: r.region_id.clone(), parent: r.parent_panel.clone() });
        }
    }
    let actual = LevelCounts {
        figures: manifest.figures.len(),
        panels: manifest.panels.len(),
        regions: manifest.regions.len(),
    };
    if stats != actual {
        return Err(ManifestError::StatsMismatch { stats, actual });
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest, ManifestError> {
    let file = fs::File::open(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    let mut content = String::new();
    BufReader::new(file)
        .read_to_string(&mut content)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    manifest_from_str(&content)
}

use std::io::Read as _;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_manifest() -> CorpusManifest {
        let figure = FigureRecord {
            figure_id: "fig1".into(),
            image_path: "images/fig1.png".into(),
            caption: "(A) Tumor region. (B) Control tissue.".into(),
            article_title: Some("A study".into()),
            width_px: 200,
            height_px: 100,
            license_tag: "CC-BY".into(),
        };
        let panels = vec![
            PanelRecord {
                panel_id: "fig1/A".into(),
                parent_figure: "fig1".into(),
                identifier: Some("A".into()),
                bbox: BBox::pixel(0.0, 0.0, 100.0, 100.0).unwrap(),
                fragments: vec!["(A) Tumor region.".into()],
                generated_description: Some("Micrograph of tumor tissue".into()),
                is_photographic: true,
            },
            PanelRecord {
                panel_id: "fig1/B".into(),
                parent_figure: "fig1".into(),
                identifier: Some("B".into()),
                bbox: BBox::pixel(100.0, 0.0, 200.0, 100.0).unwrap(),
                fragments: vec!["(B) Control tissue.".into()],
                generated_description: None,
                is_photographic: true,
            },
        ];
        let regions = vec![
            RegionRecord {
                region_id: "fig1/A/r0".into(),
                parent_panel: "fig1/A".into(),
                bbox: BBox::pixel(10.0, 10.0, 40.0, 40.0).unwrap(),
                provenance: Provenance::Caption,
                grounded_subcaption: Some("necrotic core".into()),
                lvlm_caption: Some("dense eosinophilic area".into()),
            },
            RegionRecord {
                region_id: "fig1/A/r1".into(),
                parent_panel: "fig1/A".into(),
                bbox: BBox::pixel(50.0, 50.0, 90.0, 90.0).unwrap(),
                provenance: Provenance::Marker,
                grounded_subcaption: None,
                lvlm_caption: Some("vessel lumen".into()),
            },
            RegionRecord {
                region_id: "fig1/B/r0".into(),
                parent_panel: "fig1/B".into(),
                bbox: BBox::pixel(5.0, 5.0, 60.0, 60.0).unwrap(),
                provenance: Provenance::Fused,
                grounded_subcaption: Some("normal parenchyma".into()),
                lvlm_caption: None,
            },
        ];
        CorpusManifest::new(vec![figure], panels, regions)
    }

    #[test]
    fn empty_manifest_writes_header_only() {
        let m = CorpusManifest::empty();
        let s = manifest_to_string(&m).unwrap();
        assert_eq!(s.lines().count(), 1);
        assert!(s.starts_with("{\"level\":\"header\""));
        assert_eq!(m.stats, LevelCounts::default());
    }

    #[test]
    fn stats_count_levels() {
        let m = sample_manifest();
        assert_eq!(m.stats, LevelCounts { figures: 1, panels: 2, regions: 3 });
    }

    #[test]
    fn level_tag_leads_every_line() {
        let s = manifest_to_string(&sample_manifest()).unwrap();
        for line in s.lines() {
            assert!(line.starts_with("{\"level\":\""), "line missing leading level tag: {line}");
        }
    }

    #[test]
    fn round_trip_identity() {
        let m = sample_manifest();
        let s = manifest_to_string(&m).unwrap();
        let back = manifest_from_str(&s).unwrap();
        assert_eq!(back, m);
        // And the bytes are reproducible.
        assert_eq!(manifest_to_string(&back).unwrap(), s);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let m = sample_manifest();
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn dangling_link_names_the_missing_parent() {
        let mut m = sample_manifest();
        m.regions[0].parent_panel = "fig1/Z".into();
        let s = {
            // Serialize without validation to simulate a corrupt file.
            let mut s = String::new();
            let header = ManifestLine::Header { format_version: m.format_version, stats: m.stats };
            s.push_str(&serde_json::to_string(&header).unwrap());
            s.push('\n');
            for f in &m.figures {
                s.push_str(&serde_json::to_string(&ManifestLine::Figure(f.clone())).unwrap());
                s.push('\n');
            }
            for p in &m.panels {
                s.push_str(&serde_json::to_string(&ManifestLine::Panel(p.clone())).unwrap());
                s.push('\n');
            }
            for r in &m.regions {
                s.push_str(&serde_json::to_string(&ManifestLine::Region(r.clone())).unwrap());
                s.push('\n');
            }
            s
        };
        match manifest_from_str(&s) {
            Err(ManifestError::DanglingLink { parent, .. }) => assert_eq!(parent, "fig1/Z"),
            other => panic!("expected dangling link, got {other:?}"),
        }
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let m = sample_manifest();
        let s = manifest_to_string(&m).unwrap();
        let cut = &s[..s.len() - 20];
        match manifest_from_str(cut) {
            Err(ManifestError::Malformed { line, .. }) => {
                assert_eq!(line, s.lines().count(), "error should name the truncated line");
            }
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let s = "{\"level\":\"header\",\"format_version\":99,\"stats\":{\"figures\":0,\"panels\":0,\"regions\":0}}\n";
        match manifest_from_str(s) {
            Err(ManifestError::UnknownVersion(99)) => {}
            other => panic!("expected unknown version, got {other:?}"),
        }
    }

    #[test]
    fn validate_well_formed_is_empty() {
        assert_eq!(validate_hierarchy(&sample_manifest()), Vec::new());
    }

    #[test]
    fn validate_flags_containment() {
        let mut m = sample_manifest();
        m.panels[0].bbox = BBox::pixel(0.0, 0.0, 250.0, 100.0).unwrap();
        let v = validate_hierarchy(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("exceeds figure bounds"), "{}", v[0]);
    }

    #[test]
    fn validate_flags_duplicate_panel_id() {
        let mut m = sample_manifest();
        m.panels[1].panel_id = m.panels[0].panel_id.clone();
        // The region pointing at the old ID now dangles as well.
        let v = validate_hierarchy(&m);
        assert!(v.iter().any(|v| v.message.contains("duplicate panel_id")), "{v:?}");
    }

    #[test]
    fn validate_flags_textless_region() {
        let mut m = sample_manifest();
        m.regions[0].grounded_subcaption = None;
        m.regions[0].lvlm_caption = None;
        let v = validate_hierarchy(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("no text"), "{}", v[0]);
    }

    #[test]
    fn write_rejects_invalid_manifest_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut m = sample_manifest();
        m.figures[0].caption = String::new();
        assert!(matches!(write_manifest(&m, &path), Err(ManifestError::Invalid(_))));
        assert!(!path.exists());
    }
}
