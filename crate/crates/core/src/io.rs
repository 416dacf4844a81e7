//! Line-oriented JSON detection interchange and atomic file writes.
//!
//! One object per line:
//! `{"image_id": "...", "class_id": 0, "bbox": [x1, y1, x2, y2], "score": 0.9}`.
//! Ground-truth files omit `score`. Unknown keys are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, LabelKind, LabelSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl DetectionRecord {
    pub fn from_detection(image_id: &str, det: &Detection, kind: LabelKind) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: det.class_id,
            bbox: det.bbox.to_array(),
            score: (kind != LabelKind::GroundTruth).then_some(det.score),
        }
    }

    pub fn to_detection(&self, kind: LabelKind) -> Result<Detection> {
        let score = match (kind, self.score) {
            (LabelKind::GroundTruth, _) => 1.0,
            (_, Some(s)) => s,
            (_, None) => return Err(Error::validation("missing \"score\"")),
        };
        let [x1, y1, x2, y2] = self.bbox;
        Detection::new(BBox::new(x1, y1, x2, y2)?, self.class_id, score)
    }
}

/// Parses detection lines into per-image label sets ordered by `image_id`.
pub fn read_label_sets<R: BufRead>(reader: R, kind: LabelKind) -> Result<Vec<LabelSet>> {
    let mut grouped: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let det = rec.to_detection(kind).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        grouped.entry(rec.image_id).or_default().push(det);
    }
    Ok(grouped.into_iter().map(|(id, dets)| LabelSet::new(id, kind, dets)).collect())
}

pub fn read_label_sets_file(path: &Path, kind: LabelKind) -> Result<Vec<LabelSet>> {
    let file = fs::File::open(path)?;
    read_label_sets(std::io::BufReader::new(file), kind)
}

/// Serializes label sets, sorted by `image_id` then canonical detection order.
pub fn write_label_sets<W: Write>(mut out: W, sets: &[LabelSet]) -> Result<()> {
    let mut sorted: Vec<&LabelSet> = sets.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for set in sorted {
        for det in set.detections() {
            let rec = DetectionRecord::from_detection(&set.image_id, det, set.kind);
            let line = serde_json::to_string(&rec).expect("detection records always serialize");
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn write_label_sets_file(path: &Path, sets: &[LabelSet]) -> Result<()> {
    let mut buf = Vec::new();
    write_label_sets(&mut buf, sets)?;
    write_atomic(path, &buf)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
