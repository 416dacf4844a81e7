//! Instance-level pseudo-label memory bank.
//!
//! Three update strategies are supported:
//!
//! * [`BankStrategy::Wbf`]: filtered predictions are fused into the stored
//!   labels with Weighted Box Fusion, so coordinates keep being refined.
//! * [`BankStrategy::Direct`]: stored labels are replaced by the latest
//!   filtered predictions.
//! * [`BankStrategy::Mevc`]: a triplet bank (positive / ignore / discard)
//!   where matched pairs keep the more confident box and unmatched entries
//!   are demoted one level per round.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{iou, wbf_clusters, FusionConfig};
use crate::io::DetectionRecord;
use crate::types::{detection_order, Detection, LabelKind, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankStrategy {
    Wbf,
    Direct,
    Mevc,
}

impl BankStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BankStrategy::Wbf => "wbf",
            BankStrategy::Direct => "direct",
            BankStrategy::Mevc => "mevc",
        }
    }
}

impl std::str::FromStr for BankStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wbf" => Ok(BankStrategy::Wbf),
            "direct" => Ok(BankStrategy::Direct),
            "mevc" => Ok(BankStrategy::Mevc),
            other => Err(Error::validation(format!("unknown bank strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for BankStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankStatus {
    Positive,
    Ignore,
}

/// Confidence and matching thresholds. Score filters are strict (`score > t`)
/// except the MEV-C status cut-offs, which are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankThresholds {
    pub init_conf: f64,
    pub fuse_conf: f64,
    pub iou_match: f64,
    pub mevc_positive: f64,
    pub mevc_ignore: f64,
    pub direct_conf: f64,
}

impl Default for BankThresholds {
    fn default() -> Self {
        Self { init_conf: 0.6, fuse_conf: 0.05, iou_match: 0.5, mevc_positive: 0.6, mevc_ignore: 0.3, direct_conf: 0.4 }
    }
}

impl BankThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("init_conf", self.init_conf),
            ("fuse_conf", self.fuse_conf),
            ("iou_match", self.iou_match),
            ("mevc_positive", self.mevc_positive),
            ("mevc_ignore", self.mevc_ignore),
            ("direct_conf", self.direct_conf),
        ];
        for (name, v) in all {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("threshold {name}={v} outside [0, 1]")));
            }
        }
        if self.iou_match == 0.0 {
            return Err(Error::validation("threshold iou_match must be positive"));
        }
        if self.mevc_ignore > self.mevc_positive {
            return Err(Error::validation(format!(
                "mevc_ignore ({}) must not exceed mevc_positive ({})",
                self.mevc_ignore, self.mevc_positive
            )));
        }
        Ok(())
    }

    fn mevc_status(&self, score: f64) -> Option<BankStatus> {
        if score >= self.mevc_positive {
            Some(BankStatus::Positive)
        } else if score >= self.mevc_ignore {
            Some(BankStatus::Ignore)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankEntry {
    pub detection: Detection,
    pub status: BankStatus,
    /// Update rounds survived since the entry was created.
    pub age: u32,
    /// Number of fusions (WBF) or matches (MEV-C) absorbed.
    pub fuse_count: u32,
}

impl BankEntry {
    pub fn fresh(detection: Detection) -> Self {
        Self { detection, status: BankStatus::Positive, age: 0, fuse_count: 0 }
    }
}

fn sort_entries(entries: &mut [BankEntry]) {
    entries.sort_by(|a, b| detection_order(&a.detection, &b.detection));
}

/// Per-image store of pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: BTreeMap<String, Vec<BankEntry>>,
    round: u32,
    strategy: BankStrategy,
    thresholds: BankThresholds,
    rescale_confidence: bool,
}

fn index_unique(preds: &[LabelSet]) -> Result<BTreeMap<&str, &LabelSet>> {
    let mut map = BTreeMap::new();
    for p in preds {
        if map.insert(p.image_id.as_str(), p).is_some() {
            return Err(Error::validation(format!("duplicate image id {:?}", p.image_id)));
        }
    }
    Ok(map)
}

/// Builds a bank from the first teacher predictions, keeping `score > init_conf`.
pub fn init_bank(initial_preds: &[LabelSet], thresholds: BankThresholds, strategy: BankStrategy) -> Result<MemoryBank> {
    thresholds.validate()?;
    let by_id = index_unique(initial_preds)?;
    let entries = by_id
        .into_iter()
        .map(|(id, set)| {
            let kept =
                set.filter_above(thresholds.init_conf).detections().iter().map(|&d| BankEntry::fresh(d)).collect();
            (id.to_string(), kept)
        })
        .collect();
    Ok(MemoryBank { entries, round: 0, strategy, thresholds, rescale_confidence: false })
}

impl MemoryBank {
    pub fn strategy(&self) -> BankStrategy {
        self.strategy
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn thresholds(&self) -> &BankThresholds {
        &self.thresholds
    }

    pub fn rescale_confidence(&self) -> bool {
        self.rescale_confidence
    }

    /// Enables WBF confidence rescaling with `T = 2` (bank plus predictions).
    pub fn with_rescale(mut self, on: bool) -> Self {
        self.rescale_confidence = on;
        self
    }

    pub fn entries(&self, image_id: &str) -> Option<&[BankEntry]> {
        self.entries.get(image_id).map(Vec::as_slice)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            iou_threshold: self.thresholds.iou_match,
            rescale_confidence: self.rescale_confidence,
            source_count: 2,
        }
    }

    /// Applies the bank's own update strategy.
    pub fn update(self, new_preds: &[LabelSet]) -> Result<Self> {
        match self.strategy {
            BankStrategy::Wbf => self.update_wbf(new_preds),
            BankStrategy::Direct => self.update_direct(new_preds),
            BankStrategy::Mevc => self.update_mevc(new_preds),
        }
    }

    fn expect_strategy(&self, s: BankStrategy) -> Result<()> {
        if self.strategy != s {
            return Err(Error::validation(format!("bank strategy is {}, cannot apply {} update", self.strategy, s)));
        }
        Ok(())
    }

    /// Runs `per_image` over the union of bank and prediction image ids.
    fn apply<F>(mut self, new_preds: &[LabelSet], per_image: F) -> Result<Self>
    where
        F: Fn(&str, &[BankEntry], Option<&LabelSet>) -> Result<Vec<BankEntry>> + Sync,
    {
        let by_id = index_unique(new_preds)?;
        for id in by_id.keys() {
            if !self.entries.contains_key(*id) {
                log::info!("memory bank: admitting new image {id:?} in round {}", self.round + 1);
            }
        }
        let ids: BTreeSet<&str> = self.entries.keys().map(String::as_str).chain(by_id.keys().copied()).collect();
        let empty: Vec<BankEntry> = Vec::new();
        let updated: Vec<(String, Vec<BankEntry>)> = ids
            .into_par_iter()
            .map(|id| {
                let old = self.entries.get(id).unwrap_or(&empty);
                let mut next = per_image(id, old, by_id.get(id).copied())?;
                sort_entries(&mut next);
                Ok((id.to_string(), next))
            })
            .collect::<Result<_>>()?;
        self.entries = updated.into_iter().collect();
        self.round += 1;
        Ok(self)
    }

    /// Fuses predictions with `score > fuse_conf` into the stored labels.
    pub fn update_wbf(self, new_preds: &[LabelSet]) -> Result<Self> {
        self.expect_strategy(BankStrategy::Wbf)?;
        let cfg = self.fusion_config();
        let fuse_conf = self.thresholds.fuse_conf;
        self.apply(new_preds, |id, old, preds| {
            let stored = LabelSet::new(id, LabelKind::PseudoLabel, old.iter().map(|e| e.detection).collect());
            // LabelSet keeps canonical order and so does the bank, so indices line up
            let fresh = match preds {
                Some(p) => p.filter_above(fuse_conf),
                None => LabelSet::empty(id, LabelKind::Prediction),
            };
            let clusters = wbf_clusters(&[stored, fresh], &cfg)?;
            Ok(clusters
                .iter()
                .map(|cluster| {
                    let from_bank: Vec<&BankEntry> =
                        cluster.members.iter().filter(|m| m.source == 0).map(|m| &old[m.index]).collect();
                    let fused = u32::from(cluster.len() > 1);
                    let (age, fuse_count) = if from_bank.is_empty() {
                        (0, fused)
                    } else {
                        let age = from_bank.iter().map(|e| e.age).max().unwrap_or(0) + 1;
                        let fc = from_bank.iter().map(|e| e.fuse_count).max().unwrap_or(0) + fused;
                        (age, fc)
                    };
                    BankEntry { detection: cluster.output(&cfg), status: BankStatus::Positive, age, fuse_count }
                })
                .collect())
        })
    }

    /// Replaces every image's labels by its predictions with `score > direct_conf`.
    pub fn update_direct(self, new_preds: &[LabelSet]) -> Result<Self> {
        self.expect_strategy(BankStrategy::Direct)?;
        let conf = self.thresholds.direct_conf;
        self.apply(new_preds, |_, _, preds| {
            Ok(preds
                .map(|p| p.filter_above(conf).detections().iter().map(|&d| BankEntry::fresh(d)).collect())
                .unwrap_or_default())
        })
    }

    /// Triplet-bank update with one-level demotion of unmatched entries.
    pub fn update_mevc(self, new_preds: &[LabelSet]) -> Result<Self> {
        self.expect_strategy(BankStrategy::Mevc)?;
        let th = self.thresholds;
        self.apply(new_preds, |_, old, preds| {
            let candidates: Vec<(Detection, BankStatus)> = preds
                .map(|p| p.detections().iter().filter_map(|&d| th.mevc_status(d.score).map(|s| (d, s))).collect())
                .unwrap_or_default();
            let mut taken = vec![false; candidates.len()];
            let mut out = Vec::with_capacity(old.len() + candidates.len());

            // `old` is in canonical order, i.e. descending score
            for entry in old {
                let mut best: Option<(usize, f64)> = None;
                for (ni, (cand, _)) in candidates.iter().enumerate() {
                    if taken[ni] || cand.class_id != entry.detection.class_id {
                        continue;
                    }
                    let o = iou(&entry.detection.bbox, &cand.bbox);
                    if o > th.iou_match && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((ni, o));
                    }
                }
                match best {
                    Some((ni, _)) => {
                        taken[ni] = true;
                        let cand = candidates[ni].0;
                        let kept = if cand.score > entry.detection.score { cand } else { entry.detection };
                        let status = match (th.mevc_status(kept.score), entry.status) {
                            (Some(s), _) => Some(s),
                            // never fall more than one level in a round
                            (None, BankStatus::Positive) => Some(BankStatus::Ignore),
                            (None, BankStatus::Ignore) => None,
                        };
                        if let Some(status) = status {
                            out.push(BankEntry {
                                detection: kept,
                                status,
                                age: entry.age + 1,
                                fuse_count: entry.fuse_count + 1,
                            });
                        }
                    }
                    None => {
                        if entry.status == BankStatus::Positive {
                            out.push(BankEntry { status: BankStatus::Ignore, age: entry.age + 1, ..*entry });
                        }
                    }
                }
            }
            for (ni, (cand, status)) in candidates.iter().enumerate() {
                if !taken[ni] {
                    out.push(BankEntry { detection: *cand, status: *status, age: 0, fuse_count: 0 });
                }
            }
            Ok(out)
        })
    }

    /// Pseudo labels per image; `positive_only` drops ignore-status entries.
    pub fn snapshot(&self, positive_only: bool) -> Vec<LabelSet> {
        self.snapshot_above(positive_only, None)
    }

    /// Like [`snapshot`](Self::snapshot) with an optional `score > min_score` re-filter.
    pub fn snapshot_above(&self, positive_only: bool, min_score: Option<f64>) -> Vec<LabelSet> {
        self.entries
            .iter()
            .map(|(id, entries)| {
                let dets = entries
                    .iter()
                    .filter(|e| !positive_only || e.status == BankStatus::Positive)
                    .filter(|e| min_score.is_none_or(|m| e.detection.score > m))
                    .map(|e| e.detection)
                    .collect();
                LabelSet::new(id.clone(), LabelKind::PseudoLabel, dets)
            })
            .collect()
    }

    /// Writes the bank persistence format: a header line then one entry per line.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = BankHeader {
            round: self.round,
            strategy: self.strategy,
            thresholds: self.thresholds,
            rescale_confidence: self.rescale_confidence,
            images: self.entries.keys().cloned().collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for (id, entries) in &self.entries {
            for e in entries {
                let rec = EntryRecord {
                    det: DetectionRecord::from_detection(id, &e.detection, LabelKind::PseudoLabel),
                    status: e.status,
                    age: e.age,
                    fuse_count: e.fuse_count,
                };
                writeln!(out, "{}", serde_json::to_string(&rec).expect("entry serializes"))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads the bank persistence format.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: BankHeader = loop {
            match lines.next() {
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| Error::Parse { line: i + 1, message: format!("bank header: {e}") })?;
                }
                None => return Err(Error::Parse { line: 1, message: "missing bank header".into() }),
            }
        };
        header.thresholds.validate()?;
        let mut entries: BTreeMap<String, Vec<BankEntry>> =
            header.images.into_iter().map(|id| (id, Vec::new())).collect();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let detection = rec.det.to_detection(LabelKind::PseudoLabel).map_err(|e| parse_err(e.to_string()))?;
            entries.entry(rec.det.image_id).or_default().push(BankEntry {
                detection,
                status: rec.status,
                age: rec.age,
                fuse_count: rec.fuse_count,
            });
        }
        for list in entries.values_mut() {
            sort_entries(list);
        }
        Ok(Self {
            entries,
            round: header.round,
            strategy: header.strategy,
            thresholds: header.thresholds,
            rescale_confidence: header.rescale_confidence,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    round: u32,
    strategy: BankStrategy,
    thresholds: BankThresholds,
    #[serde(default)]
    rescale_confidence: bool,
    #[serde(default)]
    images: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    #[serde(flatten)]
    det: DetectionRecord,
    status: BankStatus,
    age: u32,
    fuse_count: u32,
}
