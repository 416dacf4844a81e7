//! Ground-truth evaluation: TP/FP matching, precision/recall, AP50/mAP50,
//! FP-rate-by-confidence histograms and simple-sample proportions.
//!
//! AP uses all-point interpolation: the area under the precision envelope,
//! with tied scores forming a single operating point. Numbers are therefore
//! not directly comparable with 11-point VOC toolkit output.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::iou;
use crate::loss::{classify_simple, LossRecord, SimpleCriterion};
use crate::types::{LabelKind, LabelSet};

/// Per-detection TP/FP decisions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched GT index per detection, in the detection set's order; `None` is a FP.
    pub det_matches: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn is_tp(&self, det_idx: usize) -> bool {
        self.det_matches[det_idx].is_some()
    }

    pub fn tp_count(&self) -> usize {
        self.det_matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp_count(&self) -> usize {
        self.det_matches.len() - self.tp_count()
    }
}

/// Greedy matching by descending score. Each detection claims the unmatched
/// same-class GT box of largest IoU when that IoU reaches `iou_thr`.
pub fn match_tp_fp(dets: &LabelSet, gt: &LabelSet, iou_thr: f64) -> Result<MatchResult> {
    if dets.image_id != gt.image_id {
        return Err(Error::validation(format!(
            "matching detections of {:?} against ground truth of {:?}",
            dets.image_id, gt.image_id
        )));
    }
    Ok(match_unchecked(dets, gt, iou_thr))
}

fn match_unchecked(dets: &LabelSet, gt: &LabelSet, iou_thr: f64) -> MatchResult {
    let gts = gt.detections();
    let mut gt_matched = vec![false; gts.len()];
    let det_matches = dets
        .detections()
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if gt_matched[gi] || g.class_id != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            best.map(|(gi, _)| {
                gt_matched[gi] = true;
                gi
            })
        })
        .collect();
    MatchResult { det_matches, gt_matched, iou_threshold: iou_thr }
}

/// Pairs detection and GT sets by image id over the union of both.
fn paired<'a>(dets: &'a [LabelSet], gts: &'a [LabelSet]) -> Vec<(LabelSet, LabelSet)> {
    let d: BTreeMap<&str, &LabelSet> = dets.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let g: BTreeMap<&str, &LabelSet> = gts.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let ids: BTreeSet<&str> = d.keys().chain(g.keys()).copied().collect();
    ids.into_iter()
        .map(|id| {
            let ds = d.get(id).map(|s| (*s).clone()).unwrap_or_else(|| LabelSet::empty(id, LabelKind::Prediction));
            let gs = g.get(id).map(|s| (*s).clone()).unwrap_or_else(|| LabelSet::empty(id, LabelKind::GroundTruth));
            (ds, gs)
        })
        .collect()
}

/// Scored TP/FP flags for every detection, plus GT counts per class.
#[derive(Debug, Clone, Default)]
pub struct MatchedPool {
    /// `(class_id, score, is_tp)`
    pub detections: Vec<(u32, f64, bool)>,
    pub gt_per_class: BTreeMap<u32, usize>,
}

pub fn match_all(dets: &[LabelSet], gts: &[LabelSet], iou_thr: f64) -> MatchedPool {
    let mut pool = MatchedPool::default();
    for (ds, gs) in paired(dets, gts) {
        let m = match_unchecked(&ds, &gs, iou_thr);
        for (i, d) in ds.detections().iter().enumerate() {
            pool.detections.push((d.class_id, d.score, m.is_tp(i)));
        }
        for g in gs.detections() {
            *pool.gt_per_class.entry(g.class_id).or_default() += 1;
        }
    }
    pool
}

/// Precision/recall operating points and the resulting AP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PRCurve {
    /// Distinct score thresholds, descending.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// AP for one class from `(score, is_tp)` pairs. `None` when the class has
/// neither GT boxes nor detections.
pub fn ap_from_scored(scored: &[(f64, bool)], n_gt: usize) -> Option<PRCurve> {
    if n_gt == 0 && scored.is_empty() {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut thresholds = Vec::new();
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    let ap = envelope_area(&precision, &recall);
    Some(PRCurve { thresholds, precision, recall, ap })
}

/// Area under the precision envelope for points ordered by increasing recall.
pub fn envelope_area(precision: &[f64], recall: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in env.iter().zip(recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

pub fn average_precision(dets: &[LabelSet], gts: &[LabelSet], class_id: u32, iou_thr: f64) -> Option<PRCurve> {
    let pool = match_all(dets, gts, iou_thr);
    class_ap(&pool, class_id)
}

fn class_ap(pool: &MatchedPool, class_id: u32) -> Option<PRCurve> {
    let scored: Vec<(f64, bool)> =
        pool.detections.iter().filter(|(c, _, _)| *c == class_id).map(|&(_, s, tp)| (s, tp)).collect();
    ap_from_scored(&scored, pool.gt_per_class.get(&class_id).copied().unwrap_or(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    /// AP per class id; `None` where undefined.
    pub per_class: Vec<Option<f64>>,
}

/// Mean AP at IoU 0.5 over classes with a defined AP.
pub fn map50(dets: &[LabelSet], gts: &[LabelSet], class_count: u32) -> Result<MapResult> {
    mean_ap(dets, gts, class_count, 0.5)
}

pub fn mean_ap(dets: &[LabelSet], gts: &[LabelSet], class_count: u32, iou_thr: f64) -> Result<MapResult> {
    let pool = match_all(dets, gts, iou_thr);
    let per_class: Vec<Option<f64>> = (0..class_count).map(|c| class_ap(&pool, c).map(|p| p.ap)).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::validation("no class has a defined AP (empty evaluation)"));
    }
    Ok(MapResult { map: defined.iter().sum::<f64>() / defined.len() as f64, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of the detections with `score > min_score`.
pub fn precision_recall(dets: &[LabelSet], gts: &[LabelSet], iou_thr: f64, min_score: f64) -> PrecisionRecall {
    let filtered: Vec<LabelSet> = dets.iter().map(|s| s.filter_above(min_score)).collect();
    let pool = match_all(&filtered, gts, iou_thr);
    let tp = pool.detections.iter().filter(|d| d.2).count();
    let fp = pool.detections.len() - tp;
    let n_gt: usize = pool.gt_per_class.values().sum();
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    PrecisionRecall { tp, fp, n_gt, precision, recall, f1 }
}

/// FP counts per confidence bin. Bin 0 is `[e0, e1]`, bin `i > 0` is `(e_i, e_{i+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FPHistogram {
    pub edges: Vec<f64>,
    pub fp: Vec<usize>,
    pub total: Vec<usize>,
}

impl FPHistogram {
    pub fn new(edges: &[f64]) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::validation("need at least two bin edges"));
        }
        if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
            return Err(Error::validation("bin edges must start at 0 and end at 1"));
        }
        if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::validation(format!("bin edges must be strictly increasing: {edges:?}")));
        }
        let n = edges.len() - 1;
        Ok(Self { edges: edges.to_vec(), fp: vec![0; n], total: vec![0; n] })
    }

    pub fn bin_of(&self, score: f64) -> usize {
        // first bin whose upper edge is >= score
        let n = self.fp.len();
        (0..n).find(|&i| score <= self.edges[i + 1]).unwrap_or(n - 1)
    }

    pub fn add(&mut self, score: f64, is_fp: bool) {
        let b = self.bin_of(score);
        self.total[b] += 1;
        if is_fp {
            self.fp[b] += 1;
        }
    }

    /// FP rate per bin; 0 for empty bins (see [`FPHistogram::is_empty_bin`]).
    pub fn rates(&self) -> Vec<f64> {
        self.fp.iter().zip(&self.total).map(|(&f, &t)| if t == 0 { 0.0 } else { f as f64 / t as f64 }).collect()
    }

    pub fn is_empty_bin(&self, bin: usize) -> bool {
        self.total[bin] == 0
    }

    pub fn total_count(&self) -> usize {
        self.total.iter().sum()
    }

    /// Aggregated FP rates of the bins at or below `split` and above it.
    ///
    /// `split` must be one of the edges. Returns `(low, high)`, `None` for an
    /// empty side.
    pub fn split_rates(&self, split: f64) -> Result<(Option<f64>, Option<f64>)> {
        let k = self
            .edges
            .iter()
            .position(|&e| e == split)
            .ok_or_else(|| Error::validation(format!("{split} is not a bin edge")))?;
        let agg = |range: std::ops::Range<usize>| {
            let fp: usize = self.fp[range.clone()].iter().sum();
            let tot: usize = self.total[range].iter().sum();
            (tot > 0).then(|| fp as f64 / tot as f64)
        };
        Ok((agg(0..k), agg(k..self.fp.len())))
    }

    pub fn merge(&mut self, other: &FPHistogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::validation("cannot merge histograms with different edges"));
        }
        for i in 0..self.fp.len() {
            self.fp[i] += other.fp[i];
            self.total[i] += other.total[i];
        }
        Ok(())
    }
}

/// FP rate by confidence bin over all images, matching at IoU 0.5.
pub fn fp_by_confidence(dets: &[LabelSet], gts: &[LabelSet], bin_edges: &[f64]) -> Result<FPHistogram> {
    let mut hist = FPHistogram::new(bin_edges)?;
    for (_, score, tp) in match_all(dets, gts, 0.5).detections {
        hist.add(score, !tp);
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimpleProportion {
    pub value: f64,
    pub simple: usize,
    pub count: usize,
    /// No records were eligible; `value` is 0.
    pub empty: bool,
}

/// Fraction of (optionally TP-only) records that are simple samples.
pub fn simple_proportion(records: &[LossRecord], criterion: &SimpleCriterion, tp_only: bool) -> SimpleProportion {
    let eligible = records.iter().filter(|r| !tp_only || r.is_true_positive);
    let (mut count, mut simple) = (0usize, 0usize);
    for r in eligible {
        count += 1;
        if classify_simple(r, criterion) {
            simple += 1;
        }
    }
    SimpleProportion {
        value: if count == 0 { 0.0 } else { simple as f64 / count as f64 },
        simple,
        count,
        empty: count == 0,
    }
}
