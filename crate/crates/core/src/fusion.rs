//! Combining overlapping detections: IoU, NMS, Gaussian Soft-NMS and
//! Weighted Box Fusion.
//!
//! NMS and Soft-NMS discard or down-weight competing boxes. WBF instead keeps
//! every box as a member of a cluster and replaces the cluster by a
//! score-weighted average box, which is what the memory bank builds on.

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, LabelKind, LabelSet};

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy per-class non-maximum suppression.
///
/// A detection is removed when its IoU with an already kept detection of the
/// same class exceeds `iou_threshold`.
pub fn nms(dets: &LabelSet, iou_threshold: f64) -> LabelSet {
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for det in dets.detections() {
        let suppressed = kept.iter().any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*det);
        }
    }
    LabelSet::new(dets.image_id.clone(), dets.kind, kept)
}

/// Gaussian Soft-NMS.
///
/// The highest remaining detection is kept and every same-class competitor
/// whose IoU with it exceeds `iou_threshold` has its score multiplied by
/// `exp(-iou^2 / sigma)`. Detections decaying below `score_floor` are dropped.
/// Pass `iou_threshold = 0` for the classic behaviour where any overlap decays.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
pub fn soft_nms(dets: &LabelSet, iou_threshold: f64, sigma: f64, score_floor: f64) -> Result<LabelSet> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("soft-nms sigma must be positive, got {sigma}")));
    }
    let mut pool: Vec<Detection> = dets.detections().to_vec();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        // first maximum wins, keeping canonical order among ties
        let best = pool.iter().enumerate().fold(0, |bi, (i, d)| if d.score > pool[bi].score { i } else { bi });
        let top = pool.remove(best);
        for other in pool.iter_mut() {
            if other.class_id != top.class_id {
                continue;
            }
            let o = iou(&top.bbox, &other.bbox);
            if o > iou_threshold {
                other.score *= (-(o * o) / sigma).exp();
            }
        }
        pool.retain(|d| d.score >= score_floor);
        kept.push(top);
    }
    Ok(LabelSet::new(dets.image_id.clone(), dets.kind, kept))
}

/// Parameters of Weighted Box Fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    /// Multiply fused scores by `min(n, T) / T`.
    pub rescale_confidence: bool,
    /// `T`, the number of contributing sources.
    pub source_count: usize,
}

impl FusionConfig {
    pub fn new(iou_threshold: f64, rescale_confidence: bool, source_count: usize) -> Result<Self> {
        let cfg = Self { iou_threshold, rescale_confidence, source_count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::validation(format!(
                "fusion iou threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.source_count == 0 {
            return Err(Error::validation("fusion source count must be at least 1"));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, rescale_confidence: false, source_count: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterMember {
    pub detection: Detection,
    /// Index of the source label set.
    pub source: usize,
    /// Position inside that source's canonical order.
    pub index: usize,
}

/// A group of same-class boxes and their fused representative.
///
/// `fused.score` is the plain mean of member scores; confidence rescaling is
/// applied only by [`Cluster::output`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<ClusterMember>,
    pub fused: Detection,
    weighted: [f64; 4],
    weight_sum: f64,
    coord_sum: [f64; 4],
    score_sum: f64,
}

impl Cluster {
    fn found(member: ClusterMember) -> Self {
        let d = member.detection;
        let c = d.bbox.to_array();
        Self {
            members: vec![member],
            fused: d,
            weighted: c.map(|v| v * d.score),
            weight_sum: d.score,
            coord_sum: c,
            score_sum: d.score,
        }
    }

    fn insert(&mut self, member: ClusterMember) {
        let d = member.detection;
        let c = d.bbox.to_array();
        for (k, &ck) in c.iter().enumerate() {
            self.weighted[k] += ck * d.score;
            self.coord_sum[k] += ck;
        }
        self.weight_sum += d.score;
        self.score_sum += d.score;
        self.members.push(member);
        self.refresh();
    }

    fn refresh(&mut self) {
        let n = self.members.len() as f64;
        let coords = if self.weight_sum > 0.0 {
            self.weighted.map(|v| v / self.weight_sum)
        } else {
            // all-zero scores: fall back to the unweighted mean
            self.coord_sum.map(|v| v / n)
        };
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]).expect("mean of valid boxes is finite");
        self.fused = Detection { bbox, class_id: self.fused.class_id, score: (self.score_sum / n).clamp(0.0, 1.0) };
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The fused detection with optional confidence rescaling applied.
    pub fn output(&self, cfg: &FusionConfig) -> Detection {
        let mut d = self.fused;
        if cfg.rescale_confidence {
            let t = cfg.source_count as f64;
            d.score *= (self.members.len() as f64).min(t) / t;
        }
        d
    }
}

fn check_sources(sources: &[LabelSet]) -> Result<&str> {
    let first = sources.first().ok_or_else(|| Error::validation("wbf needs at least one source"))?;
    if let Some(bad) = sources.iter().find(|s| s.image_id != first.image_id) {
        return Err(Error::validation(format!(
            "wbf sources disagree on image id: {} vs {}",
            first.image_id, bad.image_id
        )));
    }
    Ok(&first.image_id)
}

/// Runs WBF clustering and returns the clusters in founding order.
///
/// Detections from all sources are pooled and visited by descending score.
/// Each joins the same-class cluster whose current fused box has the largest
/// IoU with it, provided that IoU exceeds the threshold; ties go to the
/// earlier cluster. Otherwise it founds a new cluster.
pub fn wbf_clusters(sources: &[LabelSet], cfg: &FusionConfig) -> Result<Vec<Cluster>> {
    cfg.validate()?;
    check_sources(sources)?;

    let mut pool: Vec<ClusterMember> = sources
        .iter()
        .enumerate()
        .flat_map(|(source, set)| {
            set.detections().iter().enumerate().map(move |(index, &detection)| ClusterMember {
                detection,
                source,
                index,
            })
        })
        .collect();
    pool.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));

    let mut clusters: Vec<Cluster> = Vec::new();
    for member in pool {
        let mut best: Option<(usize, f64)> = None;
        for (ci, cluster) in clusters.iter().enumerate() {
            if cluster.fused.class_id != member.detection.class_id {
                continue;
            }
            let o = iou(&cluster.fused.bbox, &member.detection.bbox);
            if o > cfg.iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((ci, o));
            }
        }
        match best {
            Some((ci, _)) => clusters[ci].insert(member),
            None => clusters.push(Cluster::found(member)),
        }
    }
    Ok(clusters)
}

/// Weighted Box Fusion of several detection sets for one image.
pub fn wbf(sources: &[LabelSet], cfg: &FusionConfig) -> Result<LabelSet> {
    let clusters = wbf_clusters(sources, cfg)?;
    let image_id = sources[0].image_id.clone();
    let kind = if sources.iter().all(|s| s.kind == sources[0].kind) { sources[0].kind } else { LabelKind::PseudoLabel };
    let fused = clusters.iter().map(|c| c.output(cfg)).collect();
    Ok(LabelSet::new(image_id, kind, fused))
}
