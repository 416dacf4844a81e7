use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// JSON sidecar describing a raw `f64` little-endian image dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `path` (raw values) and `path.json` (shape).
pub fn write_raw(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.len() * 8);
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let side = RawSidecar { width: img.width(), height: img.height(), channels: img.channels() };
    let json = serde_json::to_vec_pretty(&side).map_err(|e| Error::validation(e.to_string()))?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_raw(path: &Path) -> Result<ImageTensor> {
    let side: RawSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)
        .map_err(|e| Error::validation(format!("bad image sidecar: {e}")))?;
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::validation("raw image length is not a multiple of 8"));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    ImageTensor::new(side.width, side.height, side.channels, data)
}

/// 8-bit binary PGM (1 channel) or PPM (3 channels) for eyeballing.
pub fn write_pnm(img: &ImageTensor, path: &Path) -> Result<()> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = Vec::new();
    write!(out, "{magic}\n{} {}\n255\n", img.width(), img.height())?;
    out.extend(img.data().iter().map(|v| (v * 255.0).round() as u8));
    write_atomic(path, &out)
}
