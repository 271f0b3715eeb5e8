//! `BMTF` feature files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BMTF"
//! 4       1     version (1)
//! 5       1     modality (0 audio, 1 visual)
//! 6       2     reserved (0)
//! 8       4     T  (u32 LE)
//! 12      4     d  (u32 LE)
//! 16      4     cell_seconds (f32 LE)
//! 20      4·T·d values (f32 LE, row-major)
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Reader;
use crate::tensor::Tensor;
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"BMTF";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

/// One modality's `T×d` features; row `i` covers `[i·cell, (i+1)·cell)` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub features: Tensor,
    pub cell_seconds: f64,
}

impl FeatureSequence {
    pub fn new(modality: Modality, features: Tensor, cell_seconds: f64) -> Result<Self> {
        features.dims2()?;
        if !(cell_seconds > 0.0 && cell_seconds.is_finite()) {
            return Err(Error::data(format!("cell span {cell_seconds} must be positive")));
        }
        Ok(FeatureSequence {
            modality,
            features,
            cell_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Seconds of media covered by all rows.
    pub fn span_seconds(&self) -> f64 {
        self.len() as f64 * self.cell_seconds
    }

    pub fn row_span(&self, i: usize) -> (f64, f64) {
        (i as f64 * self.cell_seconds, (i + 1) as f64 * self.cell_seconds)
    }

    /// Keeps rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(FeatureSequence {
            modality: self.modality,
            features: self.features.slice_rows(start, end)?,
            cell_seconds: self.cell_seconds,
        })
    }
}

pub fn write_features(seq: &FeatureSequence) -> Vec<u8> {
    let (t, d) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(20 + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(seq.modality.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(seq.cell_seconds as f32).to_le_bytes());
    for v in seq.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes a feature file. When `expected_dim` is given the width must match it.
pub fn read_features(bytes: &[u8], expected_dim: Option<usize>) -> Result<FeatureSequence> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad feature-file magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported feature-file version {version}")));
    }
    let code = r.u8()?;
    let modality =
        Modality::from_code(code).ok_or_else(|| Error::format(5, format!("unknown modality code {code}")))?;
    let _reserved = r.u16()?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(8, format!("empty feature shape {t}x{d}")));
    }
    if let Some(want) = expected_dim {
        if d != want {
            return Err(Error::format(12, format!("feature width {d}, expected {want}")));
        }
    }
    let cell = r.f32()? as f64;
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::format(16, format!("cell span {cell} must be positive")));
    }
    let payload = r.take(t * d * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    FeatureSequence::new(modality, Tensor::new(vec![t, d], data)?, cell)
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    write_atomic(path, &write_features(seq))
}

pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<FeatureSequence> {
    read_features(&std::fs::read(path)?, expected_dim)
}
