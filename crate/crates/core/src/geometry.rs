//! Axis-aligned bounding-box arithmetic shared by every mining stage.
//!
//! All computation is in `f64`; distance gating near a threshold must not
//! flip across platforms. Boxes carry a unit flag (pixels or normalized
//! [0,1] coordinates) and operations that mix units return an error rather
//! than guessing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("unit flag mismatch: {0:?} vs {1:?}")]
    UnitMismatch(Unit, Unit),
    #[error("operation requires normalized coordinates, got {0:?}")]
    NotNormalized(Unit),
    #[error("empty box list")]
    EmptyList,
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Coordinate system of a box: absolute pixels or [0,1] normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "px")]
    Pixel,
    #[serde(rename = "norm")]
    Normalized,
}

/// Axis-aligned box with strictly positive extent in both dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub unit: Unit,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, unit: Unit) -> Result<Self, GeometryError> {
        let b = BBox { x_min, y_min, x_max, y_max, unit };
        b.validate()?;
        Ok(b)
    }

    pub fn pixel(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, Unit::Pixel)
    }

    pub fn normalized(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, Unit::Normalized)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("non-finite coordinate in {:?}", self)));
        }
        if coords.iter().any(|c| *c < 0.0) {
            return Err(GeometryError::InvalidBox(format!("negative coordinate in {:?}", self)));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GeometryError::InvalidBox(format!("degenerate extent in {:?}", self)));
        }
        if self.unit == Unit::Normalized && coords.iter().any(|c| *c > 1.0) {
            return Err(GeometryError::InvalidBox(format!("normalized coordinate > 1 in {:?}", self)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// True when `other` lies inside `self`, with `eps` slack per edge.
    pub fn contains(&self, other: &BBox, eps: f64) -> bool {
        self.unit == other.unit
            && other.x_min >= self.x_min - eps
            && other.y_min >= self.y_min - eps
            && other.x_max <= self.x_max + eps
            && other.y_max <= self.y_max + eps
    }

    /// Convert a normalized box to pixel coordinates of a w×h frame.
    pub fn to_pixels(&self, width: f64, height: f64) -> Result<BBox, GeometryError> {
        if self.unit != Unit::Normalized {
            return Err(GeometryError::NotNormalized(self.unit));
        }
        BBox::new(self.x_min * width, self.y_min * height, self.x_max * width, self.y_max * height, Unit::Pixel)
    }

    /// Convert a pixel box to normalized coordinates of its w×h frame.
    pub fn to_normalized(&self, width: f64, height: f64) -> Result<BBox, GeometryError> {
        if self.unit != Unit::Pixel {
            return Err(GeometryError::UnitMismatch(self.unit, Unit::Pixel));
        }
        BBox::new(
            (self.x_min / width).clamp(0.0, 1.0),
            (self.y_min / height).clamp(0.0, 1.0),
            (self.x_max / width).clamp(0.0, 1.0),
            (self.y_max / height).clamp(0.0, 1.0),
            Unit::Normalized,
        )
    }
}

/// Box plus a suppression score and a free-form tag (identifier, provenance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub tag: String,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, tag: impl Into<String>) -> Result<Self, GeometryError> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidBox(format!("score {score} outside [0,1]")));
        }
        bbox.validate()?;
        Ok(ScoredBox { bbox, score, tag: tag.into() })
    }
}

/// Intersection-over-union of two boxes in the same unit. Disjoint → 0.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    if a.unit != b.unit {
        return Err(GeometryError::UnitMismatch(a.unit, b.unit));
    }
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending (score, area, insertion order) priority;
/// a box is kept iff its IoU with every already-kept box is below
/// `iou_threshold`. Survivors are returned in acceptance order. Ordering is
/// fully deterministic, which reproducible corpus builds rely on.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "iou_threshold must lie in (0,1], got {iou_threshold}"
    );
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap()
            .then(boxes[j].bbox.area().partial_cmp(&boxes[i].bbox.area()).unwrap())
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &k in &kept {
            // Same-unit inputs are a caller obligation; mixed units cannot
            // be ranked meaningfully, so fail loudly rather than skip.
            let overlap = iou(&boxes[i].bbox, &boxes[k].bbox).expect("nms inputs must share a unit flag");
            if overlap >= iou_threshold {
                continue 'candidates;
            }
        }
        kept.push(i);
    }
    kept.into_iter().map(|i| boxes[i].clone()).collect()
}

/// Like [`nms`], but also reports which survivor suppressed each losing box.
///
/// Returns `(survivor_indices, suppressed_by)` where `suppressed_by[i]` is
/// `Some(j)` with `j` the input index of the survivor that eliminated box
/// `i` (the earliest-accepted one), or `None` when box `i` survived.
pub fn nms_with_assignments(boxes: &[ScoredBox], iou_threshold: f64) -> (Vec<usize>, Vec<Option<usize>>) {
    let survivors = nms(boxes, iou_threshold);
    // Recover input indices of the survivors by identity walk in acceptance
    // order; scores/areas/tags may repeat so match on full value + first use.
    let mut used = vec![false; boxes.len()];
    let mut kept_idx = Vec::with_capacity(survivors.len());
    for s in &survivors {
        let i = boxes
            .iter()
            .enumerate()
            .position(|(i, b)| !used[i] && b == s)
            .expect("survivor must originate from the input");
        used[i] = true;
        kept_idx.push(i);
    }
    let mut suppressed_by = vec![None; boxes.len()];
    for (i, b) in boxes.iter().enumerate() {
        if kept_idx.contains(&i) {
            continue;
        }
        for &k in &kept_idx {
            let overlap = iou(&b.bbox, &boxes[k].bbox).expect("nms inputs must share a unit flag");
            if overlap >= iou_threshold {
                suppressed_by[i] = Some(k);
                break;
            }
        }
    }
    (kept_idx, suppressed_by)
}

/// Intersect a pixel box with the [0,w]×[0,h] frame. `None` when nothing
/// with positive area remains.
pub fn clip_to(bbox: &BBox, width: u32, height: u32) -> Option<BBox> {
    clip_to_frame(bbox, width as f64, height as f64)
}

/// [`clip_to`] against a fractional frame; panel extents are sub-pixel
/// after normalized-to-pixel conversion.
pub fn clip_to_frame(bbox: &BBox, width: f64, height: f64) -> Option<BBox> {
    let x0 = bbox.x_min.max(0.0);
    let y0 = bbox.y_min.max(0.0);
    let x1 = bbox.x_max.min(width);
    let y1 = bbox.y_max.min(height);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    Some(BBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1, unit: bbox.unit })
}

/// Euclidean distance between box centers in normalized [0,1]² coordinates.
///
/// Distance gating uses plain Euclidean distance rather than a
/// diagonal-normalized variant; both boxes must carry the normalized flag.
pub fn center_distance(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    if a.unit != b.unit {
        return Err(GeometryError::UnitMismatch(a.unit, b.unit));
    }
    if a.unit != Unit::Normalized {
        return Err(GeometryError::NotNormalized(a.unit));
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
}

/// Grow a pixel box around its center to at least `fraction` of each panel
/// dimension, then clip to the panel. Never shrinks an input dimension.
pub fn inflate(bbox: &BBox, fraction: f64, panel_w: f64, panel_h: f64) -> BBox {
    assert!(fraction > 0.0, "inflate fraction must be positive, got {fraction}");
    let (cx, cy) = bbox.center();
    let w = bbox.width().max(fraction * panel_w);
    let h = bbox.height().max(fraction * panel_h);
    let grown = BBox {
        x_min: (cx - w / 2.0).max(0.0),
        y_min: (cy - h / 2.0).max(0.0),
        x_max: cx + w / 2.0,
        y_max: cy + h / 2.0,
        unit: bbox.unit,
    };
    // The grown box contains the input's center, so the clip cannot empty it.
    clip_to_frame(&grown, panel_w, panel_h).expect("inflated box intersects panel")
}

/// Tight axis-aligned hull of a non-empty list of same-unit boxes.
pub fn merge_union(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::EmptyList)?;
    let mut hull = *first;
    for b in &boxes[1..] {
        if b.unit != hull.unit {
            return Err(GeometryError::UnitMismatch(hull.unit, b.unit));
        }
        hull.x_min = hull.x_min.min(b.x_min);
        hull.y_min = hull.y_min.min(b.y_min);
        hull.x_max = hull.x_max.max(b.x_max);
        hull.y_max = hull.y_max.max(b.y_max);
    }
    Ok(hull)
}
