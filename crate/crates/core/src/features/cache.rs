use std::path::Path;

use super::{layout_descriptor, SEGMENTS_PER_RECORDING, SEGMENT_DIM};
use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFFEATv\0";
const VERSION: u32 = 1;

/// Unstandardized segment features of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: Option<usize>,
    /// `7 x 820`, one row per segment.
    pub segments: Vec<Vec<f64>>,
}

pub fn write_feature_cache(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BinWriter::with_magic(MAGIC, VERSION);
    w.str(&layout_descriptor());
    w.u32(records.len() as u32);
    w.u32(SEGMENTS_PER_RECORDING as u32);
    w.u32(SEGMENT_DIM as u32);
    for r in records {
        if r.segments.len() != SEGMENTS_PER_RECORDING || r.segments.iter().any(|s| s.len() != SEGMENT_DIM) {
            return Err(Error::shape(format!("record {} is not 7 x 820", r.id)));
        }
        w.str(&r.id);
        w.i32(r.label.map(|l| l as i32).unwrap_or(-1));
        for s in &r.segments {
            w.f64s(s);
        }
    }
    w.write_to(path)
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut r = BinReader::open(path, MAGIC, VERSION)?;
    let layout = r.str()?;
    if layout != layout_descriptor() {
        return Err(Error::Format(format!("incompatible feature layout {layout:?}")));
    }
    let n = r.u32()? as usize;
    let (segs, dim) = (r.u32()? as usize, r.u32()? as usize);
    if segs != SEGMENTS_PER_RECORDING || dim != SEGMENT_DIM {
        return Err(Error::Format(format!("unexpected shape {segs} x {dim}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.str()?;
        let label = r.i32()?;
        let segments = (0..segs).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        out.push(FeatureRecord {
            id,
            label: (label >= 0).then_some(label as usize),
            segments,
        });
    }
    r.finish()?;
    Ok(out)
}
