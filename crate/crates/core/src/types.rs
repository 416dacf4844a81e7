//! Shared domain types: boxes, detections, per-image label sets and seeds.
//!
//! Coordinates are normalized to `[0, 1]` and use the corner convention
//! `(x1, y1, x2, y2)`. Zero-area boxes are legal values.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized corner coordinates.
///
/// Construction always goes through [`clip_box`], so every value satisfies
/// `0 <= x1 <= x2 <= 1` and `0 <= y1 <= y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box, clamping to the unit square and restoring corner order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        clip_box([x1, y1, x2, y2])
    }

    /// Builds a box from center/size coordinates.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// Converts pixel coordinates of a `width x height` image.
    pub fn from_pixels(coords: [f64; 4], width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::validation("image dimensions must be positive"));
        }
        Self::new(coords[0] / width, coords[1] / height, coords[2] / width, coords[3] / height)
    }

    pub fn to_pixels(&self, width: f64, height: f64) -> [f64; 4] {
        [self.x1 * width, self.y1 * height, self.x2 * width, self.y2 * height]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        box_area(self)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Intersection with another box, `None` when they do not overlap with positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x2 > x1 && y2 > y1 {
            Some(BBox { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    /// True when `other` lies inside this box, up to `tol`.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x1 >= self.x1 - tol && other.y1 >= self.y1 - tol && other.x2 <= self.x2 + tol && other.y2 <= self.y2 + tol
    }
}

/// Clamps raw corner coordinates into the unit square.
///
/// Swapped corners are reordered. Non-finite input is rejected.
pub fn clip_box(coords: [f64; 4]) -> Result<BBox> {
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::validation(format!("box coordinates must be finite, got {coords:?}")));
    }
    let [a, b, c, d] = coords.map(|v| v.clamp(0.0, 1.0));
    Ok(BBox { x1: a.min(c), y1: b.min(d), x2: a.max(c), y2: b.max(d) })
}

pub fn box_area(b: &BBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

/// A box with a category and a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::validation(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, class_id, score })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score.clamp(0.0, 1.0);
        self
    }
}

/// Canonical detection order: descending score, then `(class_id, x1, y1)` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    GroundTruth,
    Prediction,
    PseudoLabel,
}

/// Which side of the domain shift a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// All detections of one image, kept in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub image_id: String,
    pub kind: LabelKind,
    detections: Vec<Detection>,
}

impl LabelSet {
    pub fn new(image_id: impl Into<String>, kind: LabelKind, detections: Vec<Detection>) -> Self {
        let mut detections = detections;
        if kind == LabelKind::GroundTruth {
            for d in &mut detections {
                d.score = 1.0;
            }
        }
        // stable sort keeps input order for exact duplicates
        detections.sort_by(detection_order);
        Self { image_id: image_id.into(), kind, detections }
    }

    pub fn empty(image_id: impl Into<String>, kind: LabelKind) -> Self {
        Self::new(image_id, kind, Vec::new())
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn with_kind(self, kind: LabelKind) -> Self {
        Self::new(self.image_id, kind, self.detections)
    }

    /// Keeps detections with `score > threshold`.
    pub fn filter_above(&self, threshold: f64) -> Self {
        Self {
            image_id: self.image_id.clone(),
            kind: self.kind,
            detections: self.detections.iter().filter(|d| d.score > threshold).copied().collect(),
        }
    }

    /// Fails if any detection has `class_id >= class_count`.
    pub fn validate_classes(&self, class_count: u32) -> Result<()> {
        match self.detections.iter().find(|d| d.class_id >= class_count) {
            Some(d) => Err(Error::validation(format!(
                "image {}: class id {} not below class count {class_count}",
                self.image_id, d.class_id
            ))),
            None => Ok(()),
        }
    }
}

/// Root of every random stream in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Independent stream for `(purpose, a, b)`.
    ///
    /// Streams are addressed rather than split off sequentially, so work can be
    /// scheduled in any order without changing results.
    pub fn stream(&self, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(splitmix(splitmix(splitmix(purpose) ^ a) ^ b));
        rng
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
