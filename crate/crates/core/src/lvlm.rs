//! Client for the external vision-language endpoint.
//!
//! Every call is described by a [`LvlmRequest`]: a prompt template, a map of
//! slot values spliced into it, and an image reference. The request has a
//! stable content hash, which makes two execution modes possible behind the
//! same [`Responder`] trait:
//!
//! * HTTP mode posts an OpenAI-style chat completion with the image attached
//!   as a base64 data URL.
//! * Mock mode replays canned responses from a directory keyed by the request
//!   hash, so pipeline runs are byte-deterministic and test fixtures are just
//!   files on disk.
//!
//! Responses are parsed leniently (numbers arriving as strings or percent
//! strings are coerced) and validated against a per-template schema. Invalid
//! responses are retried up to a limit with an appended repair instruction;
//! after that the call reports itself as invalid and the caller decides what
//! an empty result means for its stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{BBox, Unit};

/// Hard cap on prompt/response round trips for one logical request.
pub const DEFAULT_RETRY_LIMIT: u32 = 3;
/// Default bound on concurrent in-flight endpoint calls.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
/// Instruction appended to the prompt on retries after an invalid response.
const REPAIR_LINE: &str = "Respond with valid JSON only.";

#[derive(Debug, thiserror::Error)]
pub enum LvlmError {
    #[error("template {template}: no value for slot {{{slot}}}")]
    MissingSlot { template: &'static str, slot: String },
    #[error("mock store has no response for request {hash} (template {template})")]
    MissingFixture { hash: String, template: &'static str },
    #[error("endpoint authentication failed: {0}")]
    Auth(String),
    #[error("endpoint transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("failed to read image {path}: {message}")]
    ImageRead { path: PathBuf, message: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The six prompt templates the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PanelDecompose,
    CaptionSegment,
    PanelDescribe,
    MarkerDetect,
    CaptionGround,
    RegionCaption,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::PanelDecompose,
        TemplateId::CaptionSegment,
        TemplateId::PanelDescribe,
        TemplateId::MarkerDetect,
        TemplateId::CaptionGround,
        TemplateId::RegionCaption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::PanelDecompose => "panel_decompose",
            TemplateId::CaptionSegment => "caption_segment",
            TemplateId::PanelDescribe => "panel_describe",
            TemplateId::MarkerDetect => "marker_detect",
            TemplateId::CaptionGround => "caption_ground",
            TemplateId::RegionCaption => "region_caption",
        }
    }

    /// Raw template text, bundled with the binary so prompt revisions are
    /// versioned together with the code that parses their answers.
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::PanelDecompose => include_str!("../templates/panel_decompose.txt"),
            TemplateId::CaptionSegment => include_str!("../templates/caption_segment.txt"),
            TemplateId::PanelDescribe => include_str!("../templates/panel_describe.txt"),
            TemplateId::MarkerDetect => include_str!("../templates/marker_detect.txt"),
            TemplateId::CaptionGround => include_str!("../templates/caption_ground.txt"),
            TemplateId::RegionCaption => include_str!("../templates/region_caption.txt"),
        }
    }

    /// Generation budget. Structured extraction templates get a generous
    /// budget; single-sentence templates are kept short.
    pub fn max_tokens(self) -> u32 {
        match self {
            TemplateId::PanelDecompose
            | TemplateId::CaptionSegment
            | TemplateId::MarkerDetect
            | TemplateId::CaptionGround => 1024,
            TemplateId::PanelDescribe | TemplateId::RegionCaption => 128,
        }
    }

    /// Canned "nothing found" response used by lenient mock stores when a
    /// request has no fixture on disk.
    pub fn empty_response(self) -> &'static str {
        match self {
            TemplateId::PanelDecompose => r#"{"is_multi_panel": false, "panels": []}"#,
            TemplateId::CaptionSegment => r#"{"assignments": []}"#,
            TemplateId::PanelDescribe => r#"{"description": ""}"#,
            TemplateId::MarkerDetect => r#"{"markers": []}"#,
            TemplateId::CaptionGround => r#"{"objects": []}"#,
            TemplateId::RegionCaption => r#"{"caption": ""}"#,
        }
    }
}

/// Decoding parameters sent with every call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl SamplingParams {
    pub fn for_template(template: TemplateId) -> Self {
        SamplingParams {
            temperature: 0.2,
            top_p: 0.9,
            top_k: 50,
            repetition_penalty: 1.05,
            max_tokens: template.max_tokens(),
        }
    }
}

/// Reference to the image attached to a request.
///
/// Crops are expressed as a normalized box into the source file instead of
/// re-encoded pixel buffers, so the request hash depends only on the source
/// bytes and the crop coordinates. HTTP mode materializes the crop; mock mode
/// never needs to decode the image at all.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    File { path: PathBuf },
    Crop { path: PathBuf, bbox: BBox },
}

impl ImageRef {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        ImageRef::File { path: path.into() }
    }

    /// Crop of `path` given in normalized coordinates of the full image.
    pub fn crop(path: impl Into<PathBuf>, bbox: BBox) -> Self {
        assert!(
            bbox.unit == Unit::Normalized,
            "image crops must be normalized boxes, got {:?}",
            bbox.unit
        );
        ImageRef::Crop { path: path.into(), bbox }
    }

    pub fn path(&self) -> &Path {
        match self {
            ImageRef::File { path } | ImageRef::Crop { path, .. } => path,
        }
    }

    /// Content digest: sha256 of the file bytes, plus the crop box when one
    /// is present. Two requests over the same bytes and the same crop hash
    /// identically regardless of where the file lives.
    pub fn digest(&self) -> Result<String, LvlmError> {
        let path = self.path();
        let bytes = std::fs::read(path).map_err(|source| LvlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        if let ImageRef::Crop { bbox, .. } = self {
            // Fixed decimal formatting keeps the digest stable across
            // platforms; 12 digits is far below f64 noise for box coords.
            hasher.update(
                format!(
                    "|crop:{:.12},{:.12},{:.12},{:.12}",
                    bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max
                )
                .as_bytes(),
            );
        }
        Ok(hex(&hasher.finalize()))
    }
}

/// One logical call to the endpoint.
#[derive(Debug, Clone)]
pub struct LvlmRequest {
    pub template: TemplateId,
    pub slots: BTreeMap<String, String>,
    pub image: ImageRef,
}

impl LvlmRequest {
    pub fn new(template: TemplateId, image: ImageRef) -> Self {
        LvlmRequest { template, slots: BTreeMap::new(), image }
    }

    pub fn slot(mut self, key: &str, value: impl Into<String>) -> Self {
        self.slots.insert(key.to_string(), value.into());
        self
    }

    /// Stable content hash of the request: template name, slot map in key
    /// order, and the image digest, each length-prefixed so concatenation is
    /// unambiguous. Mock fixtures are files named by this hash.
    pub fn hash(&self) -> Result<String, LvlmError> {
        let image_digest = self.image.digest()?;
        Ok(self.hash_with_digest(&image_digest))
    }

    fn hash_with_digest(&self, image_digest: &str) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |chunk: &[u8]| {
            hasher.update((chunk.len() as u64).to_le_bytes());
            hasher.update(chunk);
        };
        feed(self.template.name().as_bytes());
        for (key, value) in &self.slots {
            feed(key.as_bytes());
            feed(value.as_bytes());
        }
        feed(image_digest.as_bytes());
        hex(&hasher.finalize())
    }

    /// Splice slot values into the template body. The leading `#` header
    /// lines of the template are bookkeeping, not prompt text, and are
    /// stripped. Retries append a repair instruction.
    pub fn render_prompt(&self, attempt: u32) -> Result<String, LvlmError> {
        let body: String = self
            .template
            .text()
            .lines()
            .filter(|line| !line.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut out = String::with_capacity(body.len());
        let mut rest = body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            // Literal JSON braces in the schema line contain quotes or other
            // JSON punctuation; slot names are bare identifiers.
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    let name = &after[..close];
                    match self.slots.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            return Err(LvlmError::MissingSlot {
                                template: self.template.name(),
                                slot: name.to_string(),
                            })
                        }
                    }
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        if attempt > 1 {
            out.push_str("\n\n");
            out.push_str(REPAIR_LINE);
        }
        Ok(out)
    }
}

fn is_slot_name(candidate: &str) -> bool {
    !candidate.is_empty()
        && candidate
            .chars()
            .all(|c| c.is_ascii_lowercase() || c == '_')
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for byte in bytes {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Response payloads and lenient parsing
// ---------------------------------------------------------------------------

/// Normalized box straight out of a model response, not yet a validated
/// [`BBox`]: stages convert after deciding which frame it refers to.
pub type RawBox = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct PanelEntry {
    pub id: Option<String>,
    pub bbox: RawBox,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentAssignment {
    pub fragment_index: usize,
    pub panels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerEntry {
    pub kind: String,
    pub glyph_box: RawBox,
    pub target_box: Option<RawBox>,
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundedObject {
    pub phrase: String,
    pub fragment_index: Option<usize>,
    pub bbox: RawBox,
    pub visible: bool,
}

/// Parsed, schema-checked response content for each template.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    PanelDecompose { is_multi_panel: bool, panels: Vec<PanelEntry> },
    CaptionSegment { assignments: Vec<FragmentAssignment> },
    PanelDescribe { description: String },
    MarkerDetect { markers: Vec<MarkerEntry> },
    CaptionGround { objects: Vec<GroundedObject> },
    RegionCaption { caption: String },
}

/// Outcome of one logical request after parsing, validation, and retries.
#[derive(Debug, Clone)]
pub struct LvlmResponse {
    pub raw: String,
    pub payload: Option<Payload>,
    /// False when every attempt failed schema validation.
    pub valid: bool,
    pub attempts: u32,
    /// Entries dropped individually for malformed coordinates while the rest
    /// of the response was kept.
    pub rejected_entries: usize,
}

/// Numeric coercion: JSON numbers pass through, numeric strings are parsed,
/// and percent strings are scaled into the unit interval.
fn coerce_f64(value: &serde_json::Value) -> Option<f64> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => {
            let s = s.trim();
            if let Some(stripped) = s.strip_suffix('%') {
                stripped.trim().parse::<f64>().ok().map(|v| v / 100.0)
            } else {
                s.parse::<f64>().ok()
            }
        }
        _ => None,
    }
}

fn coerce_bool(value: &serde_json::Value) -> Option<bool> {
    match value {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn coerce_usize(value: &serde_json::Value) -> Option<usize> {
    let v = coerce_f64(value)?;
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Some(v as usize)
    } else {
        None
    }
}

fn coerce_string(value: &serde_json::Value) -> Option<String> {
    value.as_str().map(|s| s.to_string())
}

/// A response box must be four coercible numbers forming a valid normalized
/// extent. Anything else rejects the entry it belongs to.
fn coerce_box(value: &serde_json::Value) -> Option<RawBox> {
    let arr = value.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let mut out = [0.0f64; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = coerce_f64(item)?;
    }
    let [x0, y0, x1, y1] = out;
    let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
    if in_unit(x0) && in_unit(y0) && in_unit(x1) && in_unit(y1) && x0 < x1 && y0 < y1 {
        Some(out)
    } else {
        None
    }
}

/// Models often wrap JSON in markdown fences; strip them before parsing.
fn strip_fences(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(inner) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    let inner = inner.strip_suffix("```").unwrap_or(inner);
    inner.trim()
}

/// Parse and validate raw response content against the template schema.
///
/// Returns `Err(reason)` when the response as a whole is unusable (not JSON,
/// missing a required field), which triggers a retry. Individually malformed
/// list entries are dropped and counted instead of failing the response.
pub fn parse_payload(template: TemplateId, raw: &str) -> Result<(Payload, usize), String> {
    let value: serde_json::Value =
        serde_json::from_str(strip_fences(raw)).map_err(|e| format!("not valid JSON: {e}"))?;
    let obj = value.as_object().ok_or("top level is not a JSON object")?;
    let mut rejected = 0usize;
    let payload = match template {
        TemplateId::PanelDecompose => {
            let is_multi_panel = obj
                .get("is_multi_panel")
                .and_then(coerce_bool)
                .ok_or("missing or non-boolean is_multi_panel")?;
            let entries = obj
                .get("panels")
                .and_then(|v| v.as_array())
                .ok_or("missing panels array")?;
            let mut panels = Vec::new();
            for entry in entries {
                let Some(e) = entry.as_object() else {
                    rejected += 1;
                    continue;
                };
                let Some(bbox) = e.get("bbox").and_then(coerce_box) else {
                    rejected += 1;
                    continue;
                };
                let id = e.get("id").and_then(coerce_string).filter(|s| !s.is_empty());
                let description = e
                    .get("description")
                    .and_then(coerce_string)
                    .filter(|s| !s.trim().is_empty());
                panels.push(PanelEntry { id, bbox, description });
            }
            Payload::PanelDecompose { is_multi_panel, panels }
        }
        TemplateId::CaptionSegment => {
            let entries = obj
                .get("assignments")
                .and_then(|v| v.as_array())
                .ok_or("missing assignments array")?;
            let mut assignments = Vec::new();
            for entry in entries {
                let parsed = entry.as_object().and_then(|e| {
                    let fragment_index = e.get("fragment_index").and_then(coerce_usize)?;
                    let panels = e
                        .get("panels")?
                        .as_array()?
                        .iter()
                        .filter_map(coerce_string)
                        .collect::<Vec<_>>();
                    Some(FragmentAssignment { fragment_index, panels })
                });
                match parsed {
                    Some(a) => assignments.push(a),
                    None => rejected += 1,
                }
            }
            Payload::CaptionSegment { assignments }
        }
        TemplateId::PanelDescribe => {
            let description = obj
                .get("description")
                .and_then(coerce_string)
                .ok_or("missing description string")?;
            Payload::PanelDescribe { description: description.trim().to_string() }
        }
        TemplateId::MarkerDetect => {
            let entries = obj
                .get("markers")
                .and_then(|v| v.as_array())
                .ok_or("missing markers array")?;
            let mut markers = Vec::new();
            for entry in entries {
                let Some(e) = entry.as_object() else {
                    rejected += 1;
                    continue;
                };
                let kind = e.get("kind").and_then(coerce_string);
                let glyph_box = e.get("glyph_box").and_then(coerce_box);
                let (Some(kind), Some(glyph_box)) = (kind, glyph_box) else {
                    rejected += 1;
                    continue;
                };
                // A present-but-malformed target box rejects the whole
                // marker; an absent or null one is simply no target.
                let target_box = match e.get("target_box") {
                    None | Some(serde_json::Value::Null) => None,
                    Some(v) => match coerce_box(v) {
                        Some(b) => Some(b),
                        None => {
                            rejected += 1;
                            continue;
                        }
                    },
                };
                let role = e
                    .get("role")
                    .and_then(coerce_string)
                    .filter(|s| !s.trim().is_empty());
                markers.push(MarkerEntry { kind, glyph_box, target_box, role });
            }
            Payload::MarkerDetect { markers }
        }
        TemplateId::CaptionGround => {
            let entries = obj
                .get("objects")
                .and_then(|v| v.as_array())
                .ok_or("missing objects array")?;
            let mut objects = Vec::new();
            for entry in entries {
                let parsed = entry.as_object().and_then(|e| {
                    let phrase = e.get("phrase").and_then(coerce_string)?;
                    let bbox = e.get("box").and_then(coerce_box)?;
                    let visible = e.get("visible").and_then(coerce_bool)?;
                    let fragment_index = match e.get("fragment_index") {
                        None | Some(serde_json::Value::Null) => None,
                        Some(v) => Some(coerce_usize(v)?),
                    };
                    Some(GroundedObject { phrase, fragment_index, bbox, visible })
                });
                match parsed {
                    Some(o) => objects.push(o),
                    None => rejected += 1,
                }
            }
            Payload::CaptionGround { objects }
        }
        TemplateId::RegionCaption => {
            let caption = obj
                .get("caption")
                .and_then(coerce_string)
                .ok_or("missing caption string")?;
            Payload::RegionCaption { caption: caption.trim().to_string() }
        }
    };
    Ok((payload, rejected))
}

// ---------------------------------------------------------------------------
// Responders
// ---------------------------------------------------------------------------

/// The transport seam: given a rendered prompt and the request it came from,
/// produce raw response content.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &LvlmRequest, prompt: &str, hash: &str) -> Result<String, LvlmError>;
}

/// Replays canned responses from a directory of `<request hash>.json` files.
#[derive(Debug, Clone)]
pub struct MockStore {
    dir: PathBuf,
    /// Strict stores error on unknown requests (catching fixture drift);
    /// lenient stores hand back the template's empty response.
    strict: bool,
}

impl MockStore {
    pub fn new(dir: impl Into<PathBuf>, strict: bool) -> Self {
        MockStore { dir: dir.into(), strict }
    }

    pub fn response_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }
}

impl Responder for MockStore {
    fn respond(&self, request: &LvlmRequest, _prompt: &str, hash: &str) -> Result<String, LvlmError> {
        let path = self.response_path(hash);
        match std::fs::read_to_string(&path) {
            Ok(content) => Ok(content),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
                if self.strict {
                    Err(LvlmError::MissingFixture {
                        hash: hash.to_string(),
                        template: request.template.name(),
                    })
                } else {
                    Ok(request.template.empty_response().to_string())
                }
            }
            Err(source) => Err(LvlmError::Io { path, source }),
        }
    }
}

/// Wraps another responder and records every response into a mock directory,
/// turning a live run into a replayable fixture set.
pub struct RecordingResponder<R> {
    inner: R,
    dir: PathBuf,
}

impl<R: Responder> RecordingResponder<R> {
    pub fn new(inner: R, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(RecordingResponder { inner, dir })
    }
}

impl<R: Responder> Responder for RecordingResponder<R> {
    fn respond(&self, request: &LvlmRequest, prompt: &str, hash: &str) -> Result<String, LvlmError> {
        let content = self.inner.respond(request, prompt, hash)?;
        let path = self.dir.join(format!("{hash}.json"));
        std::fs::write(&path, &content).map_err(|source| LvlmError::Io { path, source })?;
        Ok(content)
    }
}

/// Settings for the live HTTP responder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL of an OpenAI-compatible server, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. Empty
    /// means the request is sent unauthenticated.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_api_key_env() -> String {
    "FIGMINE_LVLM_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

/// Posts chat completions to an OpenAI-compatible endpoint with the image
/// attached as a base64 PNG data URL.
pub struct HttpResponder {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpResponder {
    pub fn new(config: HttpConfig) -> Result<Self, LvlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LvlmError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpResponder { config, client })
    }

    /// Load the request image, materializing crops, and return PNG bytes.
    fn image_png(&self, image: &ImageRef) -> Result<Vec<u8>, LvlmError> {
        let path = image.path();
        let read_err = |message: String| LvlmError::ImageRead { path: path.to_path_buf(), message };
        let full = image::open(path).map_err(|e| read_err(e.to_string()))?.to_rgb8();
        let (w, h) = (full.width(), full.height());
        let cropped = match image {
            ImageRef::File { .. } => full,
            ImageRef::Crop { bbox, .. } => {
                let px = bbox
                    .to_pixels(f64::from(w), f64::from(h))
                    .map_err(|e| read_err(e.to_string()))?;
                let x = px.x_min.floor().clamp(0.0, (w - 1) as f64) as u32;
                let y = px.y_min.floor().clamp(0.0, (h - 1) as f64) as u32;
                let cw = (px.width().ceil() as u32).clamp(1, w - x);
                let ch = (px.height().ceil() as u32).clamp(1, h - y);
                image::imageops::crop_imm(&full, x, y, cw, ch).to_image()
            }
        };
        let mut bytes = Vec::new();
        let mut cursor = std::io::Cursor::new(&mut bytes);
        cropped
            .write_to(&mut cursor, image::ImageFormat::Png)
            .map_err(|e| read_err(e.to_string()))?;
        Ok(bytes)
    }
}

impl Responder for HttpResponder {
    fn respond(&self, request: &LvlmRequest, prompt: &str, _hash: &str) -> Result<String, LvlmError> {
        use base64::Engine as _;
        let png = self.image_png(&request.image)?;
        let data_url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(&png)
        );
        let sampling = SamplingParams::for_template(request.template);
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": data_url}},
                ],
            }],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "top_k": sampling.top_k,
            "repetition_penalty": sampling.repetition_penalty,
            "max_tokens": sampling.max_tokens,
        });
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&body);
        if !self.config.api_key_env.is_empty() {
            if let Ok(key) = std::env::var(&self.config.api_key_env) {
                builder = builder.bearer_auth(key);
            }
        }
        let response = builder
            .send()
            .map_err(|e| LvlmError::Transport { attempts: 1, message: e.to_string() })?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(LvlmError::Auth(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(LvlmError::Transport {
                attempts: 1,
                message: format!("endpoint returned {status}"),
            });
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| LvlmError::Transport { attempts: 1, message: e.to_string() })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| LvlmError::Transport {
                attempts: 1,
                message: "response has no choices[0].message.content".to_string(),
            })
    }
}

// ---------------------------------------------------------------------------
// Client: retries, validation, concurrency bound
// ---------------------------------------------------------------------------

/// Counting semaphore bounding concurrent endpoint calls.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        assert!(permits > 0, "semaphore needs at least one permit");
        Semaphore { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore mutex poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore mutex poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore mutex poisoned");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

/// Endpoint client: renders prompts, drives the responder with retries, and
/// validates responses. Shareable across threads; the number of in-flight
/// responder calls is bounded.
pub struct LvlmClient {
    responder: Box<dyn Responder>,
    retry_limit: u32,
    semaphore: Semaphore,
}

impl LvlmClient {
    pub fn new(responder: Box<dyn Responder>) -> Self {
        Self::with_limits(responder, DEFAULT_RETRY_LIMIT, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limits(responder: Box<dyn Responder>, retry_limit: u32, max_in_flight: usize) -> Self {
        assert!(retry_limit >= 1, "retry limit must allow at least one attempt");
        LvlmClient {
            responder,
            retry_limit,
            semaphore: Semaphore::new(max_in_flight),
        }
    }

    /// Execute one logical request. Schema-invalid responses are retried with
    /// a repair instruction up to the retry limit, then reported as invalid.
    /// Transport errors are retried on the same budget; authentication
    /// failures abort immediately.
    pub fn request(&self, request: &LvlmRequest) -> Result<LvlmResponse, LvlmError> {
        let hash = request.hash()?;
        let mut last_raw = String::new();
        let mut last_transport: Option<LvlmError> = None;
        for attempt in 1..=self.retry_limit {
            let prompt = request.render_prompt(attempt)?;
            let outcome = {
                let _permit = self.semaphore.acquire();
                self.responder.respond(request, &prompt, &hash)
            };
            let raw = match outcome {
                Ok(raw) => raw,
                Err(LvlmError::Auth(message)) => return Err(LvlmError::Auth(message)),
                Err(LvlmError::MissingFixture { hash, template }) => {
                    // Retrying cannot conjure a fixture file into existence.
                    return Err(LvlmError::MissingFixture { hash, template });
                }
                Err(LvlmError::Transport { message, .. }) => {
                    last_transport = Some(LvlmError::Transport { attempts: attempt, message });
                    continue;
                }
                Err(other) => return Err(other),
            };
            last_transport = None;
            match parse_payload(request.template, &raw) {
                Ok((payload, rejected_entries)) => {
                    return Ok(LvlmResponse {
                        raw,
                        payload: Some(payload),
                        valid: true,
                        attempts: attempt,
                        rejected_entries,
                    })
                }
                Err(_reason) => {
                    last_raw = raw;
                }
            }
        }
        if let Some(err) = last_transport {
            return Err(err);
        }
        Ok(LvlmResponse {
            raw: last_raw,
            payload: None,
            valid: false,
            attempts: self.retry_limit,
            rejected_entries: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

    fn temp_image(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, bytes).expect("write temp image");
        path
    }

    fn sample_request(image_path: &Path) -> LvlmRequest {
        LvlmRequest::new(TemplateId::PanelDecompose, ImageRef::file(image_path))
            .slot("caption", "Figure 1. (A) Overview. (B) Detail.")
            .slot("article_title", "A study")
    }

    #[test]
    fn every_template_renders_with_its_slots() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"not-a-real-png");
        let slot_sets: [(TemplateId, &[&str]); 6] = [
            (TemplateId::PanelDecompose, &["caption", "article_title"]),
            (TemplateId::CaptionSegment, &["caption", "fragments", "panel_identifiers"]),
            (TemplateId::PanelDescribe, &["identifier", "caption_context"]),
            (TemplateId::MarkerDetect, &["caption_context", "article_title"]),
            (TemplateId::CaptionGround, &["caption_context", "article_title"]),
            (TemplateId::RegionCaption, &["context"]),
        ];
        for (template, slots) in slot_sets {
            let mut req = LvlmRequest::new(template, ImageRef::file(&img));
            for slot in slots {
                req = req.slot(slot, format!("<{slot}>"));
            }
            let prompt = req.render_prompt(1).expect("template should render");
            for slot in slots {
                assert!(
                    prompt.contains(&format!("<{slot}>")),
                    "rendered {} prompt should contain value for slot {slot}",
                    template.name()
                );
            }
            assert!(
                !prompt.contains("# figmine"),
                "header comment lines must be stripped from {} prompt",
                template.name()
            );
        }
    }

    #[test]
    fn rendering_fails_on_missing_slot() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let req = LvlmRequest::new(TemplateId::PanelDecompose, ImageRef::file(&img))
            .slot("caption", "only one of two slots");
        let err = req.render_prompt(1).expect_err("missing slot must error");
        match err {
            LvlmError::MissingSlot { slot, .. } => {
                assert_eq!(slot, "article_title", "the unfilled slot should be named")
            }
            other => panic!("expected MissingSlot, got {other:?}"),
        }
    }

    #[test]
    fn repair_line_added_from_second_attempt() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let req = sample_request(&img);
        let first = req.render_prompt(1).expect("render");
        let second = req.render_prompt(2).expect("render");
        assert!(!first.contains(REPAIR_LINE), "first attempt has no repair line");
        assert!(second.ends_with(REPAIR_LINE), "retries end with the repair line");
    }

    #[test]
    fn json_schema_braces_in_template_survive_rendering() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let prompt = sample_request(&img).render_prompt(1).expect("render");
        assert!(
            prompt.contains(r#"{"is_multi_panel": true|false"#),
            "literal JSON schema braces must pass through untouched"
        );
    }

    #[test]
    fn request_hash_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"image-bytes");
        let base = sample_request(&img);
        let h1 = base.hash().expect("hash");
        let h2 = base.hash().expect("hash");
        assert_eq!(h1, h2, "same request must hash identically");
        assert_eq!(h1.len(), 64, "hash is hex sha256");

        let other_slot = sample_request(&img).slot("caption", "different");
        assert_ne!(h1, other_slot.hash().expect("hash"), "slot change must change hash");

        let img2 = temp_image(dir.path(), "y.png", b"other-bytes");
        let other_image = LvlmRequest::new(TemplateId::PanelDecompose, ImageRef::file(&img2))
            .slot("caption", "Figure 1. (A) Overview. (B) Detail.")
            .slot("article_title", "A study");
        assert_ne!(h1, other_image.hash().expect("hash"), "image change must change hash");

        let crop = BBox::normalized(0.0, 0.0, 0.5, 0.5).expect("box");
        let cropped = LvlmRequest::new(TemplateId::PanelDecompose, ImageRef::crop(&img, crop))
            .slot("caption", "Figure 1. (A) Overview. (B) Detail.")
            .slot("article_title", "A study");
        assert_ne!(h1, cropped.hash().expect("hash"), "crop must change hash");
    }

    #[test]
    fn hash_ignores_slot_insertion_order() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let a = LvlmRequest::new(TemplateId::PanelDescribe, ImageRef::file(&img))
            .slot("identifier", "A")
            .slot("caption_context", "ctx");
        let b = LvlmRequest::new(TemplateId::PanelDescribe, ImageRef::file(&img))
            .slot("caption_context", "ctx")
            .slot("identifier", "A");
        assert_eq!(a.hash().expect("hash"), b.hash().expect("hash"));
    }

    #[test]
    fn parse_decompose_with_coercions() {
        let raw = r#"{
            "is_multi_panel": "true",
            "panels": [
                {"id": "A", "bbox": ["0.0", "0%", "50%", 0.5], "description": "a scatter"},
                {"id": null, "bbox": [0.5, 0.0, 1.0, "0.5"]}
            ]
        }"#;
        let (payload, rejected) = parse_payload(TemplateId::PanelDecompose, raw).expect("parse");
        assert_eq!(rejected, 0, "both entries are well-formed after coercion");
        match payload {
            Payload::PanelDecompose { is_multi_panel, panels } => {
                assert!(is_multi_panel, "string 'true' coerces to true");
                assert_eq!(panels.len(), 2);
                assert_eq!(panels[0].bbox, [0.0, 0.0, 0.5, 0.5], "percent strings scale to unit");
                assert_eq!(panels[0].id.as_deref(), Some("A"));
                assert!(panels[1].id.is_none());
                assert!(panels[1].description.is_none());
            }
            other => panic!("wrong payload variant: {other:?}"),
        }
    }

    #[test]
    fn out_of_range_entry_rejected_others_kept() {
        let raw = r#"{
            "is_multi_panel": true,
            "panels": [
                {"id": "A", "bbox": [0.0, 0.0, 1.4, 0.5]},
                {"id": "B", "bbox": [0.5, 0.5, 1.0, 1.0]},
                {"id": "C", "bbox": [0.3, 0.3, 0.3, 0.6]}
            ]
        }"#;
        let (payload, rejected) = parse_payload(TemplateId::PanelDecompose, raw).expect("parse");
        assert_eq!(rejected, 2, "out-of-range box and empty-extent box are dropped");
        match payload {
            Payload::PanelDecompose { panels, .. } => {
                assert_eq!(panels.len(), 1);
                assert_eq!(panels[0].id.as_deref(), Some("B"), "only the valid entry survives");
            }
            other => panic!("wrong payload variant: {other:?}"),
        }
    }

    #[test]
    fn missing_top_level_field_is_whole_response_failure() {
        let raw = r#"{"panels": []}"#;
        let err = parse_payload(TemplateId::PanelDecompose, raw).expect_err("must fail");
        assert!(err.contains("is_multi_panel"), "error should name the missing field: {err}");
    }

    #[test]
    fn fenced_json_is_accepted() {
        let raw = "```json\n{\"description\": \"an H&E stained section\"}\n```";
        let (payload, _) = parse_payload(TemplateId::PanelDescribe, raw).expect("parse");
        assert_eq!(
            payload,
            Payload::PanelDescribe { description: "an H&E stained section".to_string() }
        );
    }

    #[test]
    fn marker_payload_parses_targets_and_roles() {
        let raw = r#"{"markers": [
            {"kind": "arrow", "glyph_box": [0.1, 0.1, 0.15, 0.15], "target_box": [0.2, 0.2, 0.4, 0.4], "role": "points at lesion"},
            {"kind": "asterisk", "glyph_box": [0.8, 0.8, 0.85, 0.85], "target_box": null},
            {"kind": "circle", "glyph_box": [0.5, 0.5, 0.6, 0.6], "target_box": [0.9, 0.9, 0.2, 1.0]}
        ]}"#;
        let (payload, rejected) = parse_payload(TemplateId::MarkerDetect, raw).expect("parse");
        assert_eq!(rejected, 1, "marker with malformed target box is rejected whole");
        match payload {
            Payload::MarkerDetect { markers } => {
                assert_eq!(markers.len(), 2);
                assert!(markers[0].target_box.is_some());
                assert_eq!(markers[0].role.as_deref(), Some("points at lesion"));
                assert!(markers[1].target_box.is_none());
            }
            other => panic!("wrong payload variant: {other:?}"),
        }
    }

    #[test]
    fn grounding_payload_requires_visibility_flag() {
        let raw = r#"{"objects": [
            {"phrase": "necrotic core", "fragment_index": 0, "box": [0.1, 0.1, 0.3, 0.3], "visible": true},
            {"phrase": "mitotic figure", "box": [0.4, 0.4, 0.5, 0.5]}
        ]}"#;
        let (payload, rejected) = parse_payload(TemplateId::CaptionGround, raw).expect("parse");
        assert_eq!(rejected, 1, "entry without visible flag is dropped");
        match payload {
            Payload::CaptionGround { objects } => {
                assert_eq!(objects.len(), 1);
                assert_eq!(objects[0].phrase, "necrotic core");
                assert_eq!(objects[0].fragment_index, Some(0));
                assert!(objects[0].visible);
            }
            other => panic!("wrong payload variant: {other:?}"),
        }
    }

    struct ScriptedResponder {
        responses: Vec<String>,
        calls: AtomicUsize,
        saw_repair: AtomicU32,
    }

    impl ScriptedResponder {
        fn new(responses: Vec<&str>) -> Self {
            ScriptedResponder {
                responses: responses.into_iter().map(|s| s.to_string()).collect(),
                calls: AtomicUsize::new(0),
                saw_repair: AtomicU32::new(0),
            }
        }
    }

    impl Responder for ScriptedResponder {
        fn respond(&self, _req: &LvlmRequest, prompt: &str, _hash: &str) -> Result<String, LvlmError> {
            let idx = self.calls.fetch_add(1, Ordering::SeqCst);
            if prompt.contains(REPAIR_LINE) {
                self.saw_repair.fetch_add(1, Ordering::SeqCst);
            }
            Ok(self.responses[idx.min(self.responses.len() - 1)].clone())
        }
    }

    #[test]
    fn invalid_then_valid_response_retries_and_succeeds() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let scripted = ScriptedResponder::new(vec![
            "sorry, here is the figure analysis you asked for",
            r#"{"is_multi_panel": false, "panels": []}"#,
        ]);
        let client = LvlmClient::new(Box::new(scripted));
        let response = client.request(&sample_request(&img)).expect("request");
        assert!(response.valid, "second attempt is valid");
        assert_eq!(response.attempts, 2);
        assert!(response.payload.is_some());
    }

    #[test]
    fn retries_exhaust_honestly_on_persistent_garbage() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let scripted = ScriptedResponder::new(vec!["not json at all"]);
        let client = LvlmClient::new(Box::new(scripted));
        let response = client.request(&sample_request(&img)).expect("request");
        assert!(!response.valid, "persistent garbage must be reported invalid");
        assert_eq!(response.attempts, DEFAULT_RETRY_LIMIT);
        assert!(response.payload.is_none());
        assert_eq!(response.raw, "not json at all", "last raw text is preserved for logs");
    }

    #[test]
    fn repair_line_reaches_responder_on_retries_only() {
        use std::sync::Arc;
        struct Shared(Arc<ScriptedResponder>);
        impl Responder for Shared {
            fn respond(&self, r: &LvlmRequest, p: &str, h: &str) -> Result<String, LvlmError> {
                self.0.respond(r, p, h)
            }
        }
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let scripted = Arc::new(ScriptedResponder::new(vec!["garbage"]));
        let client = LvlmClient::new(Box::new(Shared(scripted.clone())));
        let _ = client.request(&sample_request(&img)).expect("request");
        assert_eq!(scripted.calls.load(Ordering::SeqCst), DEFAULT_RETRY_LIMIT as usize);
        assert_eq!(
            scripted.saw_repair.load(Ordering::SeqCst),
            DEFAULT_RETRY_LIMIT - 1,
            "every attempt after the first carries the repair line"
        );
    }

    #[test]
    fn mock_store_replays_and_strict_mode_errors_on_unknown() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let req = sample_request(&img);
        let hash = req.hash().expect("hash");
        let mock_dir = dir.path().join("lvlm");
        std::fs::create_dir_all(&mock_dir).expect("mkdir");
        std::fs::write(
            mock_dir.join(format!("{hash}.json")),
            r#"{"is_multi_panel": true, "panels": [{"id": "A", "bbox": [0.0, 0.0, 0.5, 1.0]}]}"#,
        )
        .expect("write fixture");

        let client = LvlmClient::new(Box::new(MockStore::new(&mock_dir, true)));
        let response = client.request(&req).expect("request");
        assert!(response.valid);
        assert_eq!(response.attempts, 1, "fixture hit needs no retry");

        let unknown = sample_request(&img).slot("caption", "something never recorded");
        let err = client.request(&unknown).expect_err("strict store must error");
        match err {
            LvlmError::MissingFixture { hash: missing, .. } => {
                assert_eq!(missing, unknown.hash().expect("hash"), "error names the missing hash")
            }
            other => panic!("expected MissingFixture, got {other:?}"),
        }
    }

    #[test]
    fn lenient_mock_store_falls_back_to_empty_response() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let mock_dir = dir.path().join("lvlm");
        std::fs::create_dir_all(&mock_dir).expect("mkdir");
        let client = LvlmClient::new(Box::new(MockStore::new(&mock_dir, false)));
        let response = client.request(&sample_request(&img)).expect("request");
        assert!(response.valid, "empty fallback is schema-valid");
        match response.payload {
            Some(Payload::PanelDecompose { is_multi_panel, panels }) => {
                assert!(!is_multi_panel);
                assert!(panels.is_empty());
            }
            other => panic!("wrong payload: {other:?}"),
        }
    }

    #[test]
    fn recording_then_replaying_is_byte_identical() {
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let req = sample_request(&img);
        let record_dir = dir.path().join("recorded");
        let content = r#"{"is_multi_panel": false, "panels": []}"#;
        {
            let recorder = RecordingResponder::new(
                ScriptedResponder::new(vec![content]),
                &record_dir,
            )
            .expect("recorder");
            let client = LvlmClient::new(Box::new(recorder));
            let live = client.request(&req).expect("request");
            assert!(live.valid);
        }
        let replay = LvlmClient::new(Box::new(MockStore::new(&record_dir, true)));
        let replayed = replay.request(&req).expect("replay");
        assert_eq!(replayed.raw, content, "replayed bytes equal recorded bytes");
    }

    #[test]
    fn mock_replay_of_garbage_exhausts_deterministically() {
        // Retries change only the rendered prompt, never the request hash, so
        // a recorded-garbage fixture replays identically every attempt and
        // the client reports honest exhaustion.
        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let req = sample_request(&img);
        let mock_dir = dir.path().join("lvlm");
        std::fs::create_dir_all(&mock_dir).expect("mkdir");
        std::fs::write(
            mock_dir.join(format!("{}.json", req.hash().expect("hash"))),
            "I could not comply",
        )
        .expect("write fixture");
        let client = LvlmClient::new(Box::new(MockStore::new(&mock_dir, true)));
        let response = client.request(&req).expect("request");
        assert!(!response.valid);
        assert_eq!(response.attempts, DEFAULT_RETRY_LIMIT);
    }

    #[test]
    fn concurrent_requests_respect_in_flight_bound() {
        use std::sync::atomic::AtomicUsize;
        use std::sync::Arc;

        struct GaugeResponder {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Responder for GaugeResponder {
            fn respond(&self, req: &LvlmRequest, _p: &str, _h: &str) -> Result<String, LvlmError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(req.template.empty_response().to_string())
            }
        }

        let dir = tempfile::tempdir().expect("tempdir");
        let img = temp_image(dir.path(), "x.png", b"png");
        let gauge = Arc::new(GaugeResponder {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });

        struct Shared(Arc<GaugeResponder>);
        impl Responder for Shared {
            fn respond(&self, r: &LvlmRequest, p: &str, h: &str) -> Result<String, LvlmError> {
                self.0.respond(r, p, h)
            }
        }

        let client = Arc::new(LvlmClient::with_limits(
            Box::new(Shared(gauge.clone())),
            1,
            2,
        ));
        std::thread::scope(|scope| {
            for i in 0..8 {
                let client = Arc::clone(&client);
                let img = img.clone();
                scope.spawn(move || {
                    let req = LvlmRequest::new(TemplateId::PanelDescribe, ImageRef::file(&img))
                        .slot("identifier", format!("{i}"))
                        .slot("caption_context", "ctx");
                    client.request(&req).expect("request");
                });
            }
        });
        assert!(
            gauge.peak.load(Ordering::SeqCst) <= 2,
            "no more than two responder calls may be in flight, saw {}",
            gauge.peak.load(Ordering::SeqCst)
        );
    }
}
