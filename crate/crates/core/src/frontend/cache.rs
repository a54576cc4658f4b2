use std::path::Path;

use super::patches::{PATCHES_PER_RECORDING, PATCH_FRAMES};
use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFMELv\0\0";
const VERSION: u32 = 1;

/// Cached, unstandardized log-mel patches of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct MelRecord {
    pub id: String,
    pub label: Option<usize>,
    /// Original frame count before tail padding.
    pub valid_frames: usize,
    pub n_mels: usize,
    pub patches: Vec<Vec<f32>>,
}

impl MelRecord {
    /// Original frame `t` (t < valid_frames).
    pub fn frame(&self, t: usize) -> &[f32] {
        let p = &self.patches[t / PATCH_FRAMES];
        let r = t % PATCH_FRAMES;
        &p[r * self.n_mels..(r + 1) * self.n_mels]
    }
}

/// Layout: magic, version, record count, patch shape `(7, 75, n_mels)`,
/// then per record: id, label (-1 when absent), valid frame count and the
/// row-major f32 patch values.
pub fn write_mel_cache(path: &Path, records: &[MelRecord]) -> Result<()> {
    let n_mels = records.first().map(|r| r.n_mels).unwrap_or(128);
    let mut w = BinWriter::with_magic(MAGIC, VERSION);
    w.u32(records.len() as u32);
    w.u32(PATCHES_PER_RECORDING as u32);
    w.u32(PATCH_FRAMES as u32);
    w.u32(n_mels as u32);
    for r in records {
        if r.n_mels != n_mels || r.patches.len() != PATCHES_PER_RECORDING {
            return Err(Error::shape(format!("record {} has an inconsistent patch shape", r.id)));
        }
        w.str(&r.id);
        w.i32(r.label.map(|l| l as i32).unwrap_or(-1));
        w.u32(r.valid_frames as u32);
        for p in &r.patches {
            w.f32s(p);
        }
    }
    w.write_to(path)
}

pub fn read_mel_cache(path: &Path) -> Result<Vec<MelRecord>> {
    let mut r = BinReader::open(path, MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let (np, nf, nm) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if np != PATCHES_PER_RECORDING || nf != PATCH_FRAMES {
        return Err(Error::Format(format!("unexpected patch shape ({np}, {nf}, {nm})")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.str()?;
        let label = r.i32()?;
        let valid_frames = r.u32()? as usize;
        let patches = (0..np).map(|_| r.f32s(nf * nm)).collect::<Result<Vec<_>>>()?;
        out.push(MelRecord {
            id,
            label: (label >= 0).then_some(label as usize),
            valid_frames,
            n_mels: nm,
            patches,
        });
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rec = MelRecord {
            id: "audio/a.wav".into(),
            label: Some(3),
            valid_frames: 499,
            n_mels: 4,
            patches: (0..7).map(|p| (0..300).map(|i| (p * 300 + i) as f32 * 0.5).collect()).collect(),
        };
        let mut unlabeled = rec.clone();
        unlabeled.label = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mel.bin");
        write_mel_cache(&path, &[rec.clone(), unlabeled.clone()]).unwrap();
        assert_eq!(read_mel_cache(&path).unwrap(), vec![rec.clone(), unlabeled]);
        assert_eq!(rec.frame(76), &rec.patches[1][4..8]);
    }
}
