use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::types::{detection_order, BBox, Detection, Domain, LabelKind, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MosaicConfig {
    /// Max offset of the mosaic centre from 0.5, in normalized units.
    pub center_jitter: f64,
    /// Boxes keeping less than this fraction of their area after clipping
    /// to the quadrant are dropped.
    pub min_visible: f64,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        Self { center_jitter: 0.0, min_visible: 0.1 }
    }
}

impl MosaicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.center_jitter) {
            return Err(Error::validation("center_jitter must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return Err(Error::validation("min_visible must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One quadrant of the mosaic: which pool it was drawn from and which sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub domain: Domain,
    pub sample: usize,
}

/// Geometry of a 2x2 mosaic. Quadrants are numbered top-left, top-right,
/// bottom-left, bottom-right. Each tile is the source image scaled by 1/2
/// and anchored at the mosaic centre, then clipped to its quadrant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicLayout {
    pub center: (f64, f64),
    pub tiles: [Tile; 4],
}

impl MosaicLayout {
    pub fn quadrant_bounds(&self, q: usize) -> [f64; 4] {
        let (cx, cy) = self.center;
        match q {
            0 => [0.0, 0.0, cx, cy],
            1 => [cx, 0.0, 1.0, cy],
            2 => [0.0, cy, cx, 1.0],
            _ => [cx, cy, 1.0, 1.0],
        }
    }

    /// Top-left corner of the (half-size) tile placed in quadrant `q`.
    pub fn tile_origin(&self, q: usize) -> (f64, f64) {
        let (cx, cy) = self.center;
        let x0 = if q.is_multiple_of(2) { cx - 0.5 } else { cx };
        let y0 = if q < 2 { cy - 0.5 } else { cy };
        (x0, y0)
    }

    pub fn quadrant_of(&self, u: f64, v: f64) -> usize {
        let (cx, cy) = self.center;
        usize::from(u >= cx) + 2 * usize::from(v >= cy)
    }

    /// Map a box from tile coordinates into the mosaic. `None` if the box
    /// is degenerate or too little of it survives clipping.
    pub fn transform_box(&self, q: usize, b: &BBox, min_visible: f64) -> Option<BBox> {
        let (x0, y0) = self.tile_origin(q);
        let t = [x0 + 0.5 * b.x1(), y0 + 0.5 * b.y1(), x0 + 0.5 * b.x2(), y0 + 0.5 * b.y2()];
        let full = (t[2] - t[0]) * (t[3] - t[1]);
        if full <= 0.0 {
            return None;
        }
        let [qx1, qy1, qx2, qy2] = self.quadrant_bounds(q);
        let c = [t[0].max(qx1), t[1].max(qy1), t[2].min(qx2), t[3].min(qy2)];
        let visible = (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
        if visible <= 0.0 || visible < min_visible * full {
            return None;
        }
        BBox::new(c[0], c[1], c[2], c[3]).ok()
    }

    /// Transform every detection of a label set placed in quadrant `q`.
    pub fn transform_labels(&self, q: usize, labels: &LabelSet, min_visible: f64) -> Vec<Detection> {
        labels
            .detections()
            .iter()
            .filter_map(|d| self.transform_box(q, &d.bbox, min_visible).map(|bbox| Detection { bbox, ..*d }))
            .collect()
    }

    pub fn has_both_domains(&self) -> bool {
        self.tiles.iter().any(|t| t.domain == Domain::Source) && self.tiles.iter().any(|t| t.domain == Domain::Target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedLabel {
    pub detection: Detection,
    pub origin: LabelKind,
    pub quadrant: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: ImageTensor,
    /// Sorted by descending score.
    pub labels: Vec<MixedLabel>,
    pub layout: MosaicLayout,
}

impl MixedSample {
    pub fn domain_mask(&self) -> [Domain; 4] {
        self.layout.tiles.map(|t| t.domain)
    }

    /// The mixed labels as a plain pseudo-label set.
    pub fn label_set(&self, image_id: impl Into<String>) -> LabelSet {
        LabelSet::new(image_id, LabelKind::PseudoLabel, self.labels.iter().map(|l| l.detection).collect())
    }
}

/// Draw a layout: one quadrant is forced to source, another to target, and
/// the rest pick a domain at random.
pub fn draw_layout<R: Rng>(rng: &mut R, n_source: usize, n_target: usize, cfg: &MosaicConfig) -> Result<MosaicLayout> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::validation("domain_mix needs at least one source and one target sample"));
    }
    cfg.validate()?;
    let jitter = |rng: &mut R| {
        if cfg.center_jitter > 0.0 {
            0.5 + rng.random_range(-cfg.center_jitter..=cfg.center_jitter)
        } else {
            0.5
        }
    };
    let center = (jitter(rng), jitter(rng));
    let src_slot = rng.random_range(0..4usize);
    let tgt_slot = (src_slot + rng.random_range(1..4usize)) % 4;
    let mut tiles = [Tile { domain: Domain::Source, sample: 0 }; 4];
    for (q, tile) in tiles.iter_mut().enumerate() {
        let domain = if q == src_slot {
            Domain::Source
        } else if q == tgt_slot {
            Domain::Target
        } else if rng.random_bool(0.5) {
            Domain::Source
        } else {
            Domain::Target
        };
        let pool = if domain == Domain::Source { n_source } else { n_target };
        *tile = Tile { domain, sample: rng.random_range(0..pool) };
    }
    Ok(MosaicLayout { center, tiles })
}

fn render(
    layout: &MosaicLayout,
    source: &[(ImageTensor, LabelSet)],
    target: &[(ImageTensor, LabelSet)],
    out_size: (usize, usize),
) -> Result<ImageTensor> {
    let (w, h) = out_size;
    let pick = |t: &Tile| match t.domain {
        Domain::Source => &source[t.sample].0,
        Domain::Target => &target[t.sample].0,
    };
    let channels = pick(&layout.tiles[0]).channels();
    if layout.tiles.iter().any(|t| pick(t).channels() != channels) {
        return Err(Error::validation("mosaic inputs must share a channel count"));
    }
    let mut data = Vec::with_capacity(w * h * channels);
    for py in 0..h {
        let v = (py as f64 + 0.5) / h as f64;
        for px in 0..w {
            let u = (px as f64 + 0.5) / w as f64;
            let q = layout.quadrant_of(u, v);
            let (x0, y0) = layout.tile_origin(q);
            let img = pick(&layout.tiles[q]);
            let s = ((u - x0) / 0.5).clamp(0.0, 1.0);
            let t = ((v - y0) / 0.5).clamp(0.0, 1.0);
            let sx = ((s * img.width() as f64) as usize).min(img.width() - 1);
            let sy = ((t * img.height() as f64) as usize).min(img.height() - 1);
            for c in 0..channels {
                data.push(img.get(sx, sy, c));
            }
        }
    }
    ImageTensor::new(w, h, channels, data)
}

/// Build a 2x2 mosaic from randomly drawn source and target samples.
/// Source labels keep their ground-truth origin, target labels are treated
/// as pseudo labels.
pub fn domain_mix<R: Rng>(
    source: &[(ImageTensor, LabelSet)],
    target: &[(ImageTensor, LabelSet)],
    rng: &mut R,
    out_size: (usize, usize),
    cfg: &MosaicConfig,
) -> Result<MixedSample> {
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::validation("mosaic output size must be positive"));
    }
    let layout = draw_layout(rng, source.len(), target.len(), cfg)?;
    let image = render(&layout, source, target, out_size)?;
    let mut labels = Vec::new();
    for (q, tile) in layout.tiles.iter().enumerate() {
        let (set, origin) = match tile.domain {
            Domain::Source => (&source[tile.sample].1, LabelKind::GroundTruth),
            Domain::Target => (&target[tile.sample].1, LabelKind::PseudoLabel),
        };
        for detection in layout.transform_labels(q, set, cfg.min_visible) {
            labels.push(MixedLabel { detection, origin, quadrant: q });
        }
    }
    labels.sort_by(|a, b| detection_order(&a.detection, &b.detection).then(a.quadrant.cmp(&b.quadrant)));
    Ok(MixedSample { image, labels, layout })
}
