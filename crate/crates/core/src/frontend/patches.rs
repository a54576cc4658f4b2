use serde::{Deserialize, Serialize};

use super::mel::LogMelSpectrogram;
use crate::dataset::Recording;
use crate::error::{Error, Result};

pub const PATCH_FRAMES: usize = 75;
pub const PATCHES_PER_RECORDING: usize = 7;
const MIN_FRAMES: usize = PATCH_FRAMES * (PATCHES_PER_RECORDING - 1) + 1;
const MAX_FRAMES: usize = PATCH_FRAMES * PATCHES_PER_RECORDING;

/// One `75 x n_mels` time-frequency segment, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TfPatch {
    pub recording_id: String,
    pub segment_index: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
}

/// Split into 7 non-overlapping 75-frame patches. The last patch repeats
/// the final original frame to fill its missing frames.
pub fn segment_patches(logmel: &LogMelSpectrogram, recording_id: &str) -> Result<Vec<TfPatch>> {
    let frames = logmel.frame_count;
    if frames < PATCH_FRAMES {
        return Err(Error::shape(format!(
            "{frames} frames is shorter than one {PATCH_FRAMES}-frame patch"
        )));
    }
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&frames) {
        return Err(Error::shape(format!(
            "{frames} frames does not form {PATCHES_PER_RECORDING} patches (expected {MIN_FRAMES}..={MAX_FRAMES})"
        )));
    }
    let nm = logmel.n_mels;
    Ok((0..PATCHES_PER_RECORDING)
        .map(|p| {
            let mut data = Vec::with_capacity(PATCH_FRAMES * nm);
            for t in 0..PATCH_FRAMES {
                let src = (p * PATCH_FRAMES + t).min(frames - 1);
                data.extend(logmel.frame(src).iter().map(|&v| v as f32));
            }
            TfPatch {
                recording_id: recording_id.to_string(),
                segment_index: p,
                n_mels: nm,
                data,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaveformNorm {
    #[default]
    None,
    Peak,
    Rms,
}

/// Divide by the peak absolute amplitude. Silent input is returned as is.
pub fn normalize_waveform(rec: &Recording) -> Recording {
    normalize_waveform_with(rec, WaveformNorm::Peak)
}

/// Peak normalization maps the max |x| to 1; RMS normalization maps the
/// RMS to 0.1 (leaving headroom).
pub fn normalize_waveform_with(rec: &Recording, mode: WaveformNorm) -> Recording {
    let scale = match mode {
        WaveformNorm::None => return rec.clone(),
        WaveformNorm::Peak => rec.samples.iter().fold(0.0f32, |m, v| m.max(v.abs())),
        WaveformNorm::Rms => {
            let ms = rec.samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / rec.samples.len().max(1) as f64;
            (ms.sqrt() / 0.1) as f32
        }
    };
    if scale == 0.0 {
        log::warn!("recording {} is silent; waveform left unnormalized", rec.id);
        return rec.clone();
    }
    let mut out = rec.clone();
    for v in out.samples.iter_mut() {
        *v /= scale;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> LogMelSpectrogram {
        let nm = 4;
        LogMelSpectrogram {
            frame_count: frames,
            n_mels: nm,
            data: (0..frames * nm).map(|i| (i / nm) as f64).collect(),
        }
    }

    #[test]
    fn padding_of_499_frames() {
        let p = segment_patches(&ramp(499), "r").unwrap();
        assert_eq!(p.len(), 7);
        for (k, patch) in p.iter().enumerate() {
            assert_eq!(patch.data.len(), 75 * 4);
            assert_eq!(patch.data[0], (75 * k) as f32);
        }
        let last = &p[6];
        for t in 0..75 {
            let expect = if t < 49 { 450 + t } else { 498 };
            assert_eq!(last.data[t * 4], expect as f32);
        }
        // patches 0..6 tile frames [0, 450)
        let tiled: Vec<f32> = p[..6].iter().flat_map(|q| q.data.clone()).collect();
        let direct: Vec<f32> = ramp(499).data[..450 * 4].iter().map(|&v| v as f32).collect();
        assert_eq!(tiled, direct);
    }

    #[test]
    fn exact_525_frames_needs_no_padding() {
        let p = segment_patches(&ramp(525), "r").unwrap();
        assert_eq!(p[6].data[74 * 4], 524.0);
    }

    #[test]
    fn out_of_range_frame_counts() {
        assert!(segment_patches(&ramp(74), "r").is_err());
        assert!(segment_patches(&ramp(450), "r").is_err());
        assert!(segment_patches(&ramp(526), "r").is_err());
    }

    fn rec(samples: Vec<f32>) -> Recording {
        Recording::new("x", samples, None).unwrap()
    }

    #[test]
    fn peak_normalization() {
        let r = rec(vec![0.1, -0.25, 0.2]);
        let n = normalize_waveform(&r);
        assert_eq!(n.samples.iter().fold(0.0f32, |m, v| m.max(v.abs())), 1.0);
        assert_eq!(normalize_waveform(&n), n);
        let scaled = rec(r.samples.iter().map(|v| v * 3.0).collect());
        for (a, b) in normalize_waveform(&scaled).samples.iter().zip(&n.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let silent = rec(vec![0.0; 4]);
        assert_eq!(normalize_waveform(&silent), silent);
    }
}
