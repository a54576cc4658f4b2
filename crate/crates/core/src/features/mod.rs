//! Hand-crafted descriptor pool for the GBM branch: 205 frame-level
//! values aggregated into 820-dim segment vectors.

mod cache;
mod frame;

pub use cache::{read_feature_cache, write_feature_cache, FeatureRecord};
pub use frame::{bark_to_hz, hz_to_bark, hz_to_erb_rate, FrameFeatureExtractor};

use crate::dataset::{Recording, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frontend::{Stft, StftConfig};
use crate::scaler::{ScalerScope, Standardizer};

/// Feature blocks in frame-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    BarkBands,
    ErbBands,
    MelBands,
    Mfcc,
    Hpcp,
    Tonal,
    Pitch,
    SilenceRate,
    Spectral,
    Gfcc,
}

pub const BLOCKS: [(Block, &str, usize); 10] = [
    (Block::BarkBands, "bark_bands", 32),
    (Block::ErbBands, "erb_bands", 23),
    (Block::MelBands, "mel_bands", 45),
    (Block::Mfcc, "mfcc", 13),
    (Block::Hpcp, "hpcp", 38),
    (Block::Tonal, "tonal", 3),
    (Block::Pitch, "pitch", 3),
    (Block::SilenceRate, "silence_rate", 3),
    (Block::Spectral, "spectral", 32),
    (Block::Gfcc, "gfcc", 13),
];

pub const FRAME_DIM: usize = 205;
pub const SEGMENT_DIM: usize = 4 * FRAME_DIM;
pub const SEGMENTS_PER_RECORDING: usize = 7;

/// Names of the 32 spectral descriptors, in vector order.
pub const SPECTRAL_NAMES: [&str; 32] = [
    "centroid",
    "spread",
    "skewness",
    "kurtosis",
    "flatness",
    "crest",
    "decrease",
    "rolloff85",
    "rolloff95",
    "flux",
    "entropy",
    "energy",
    "rms",
    "zcr",
    "hfc",
    "strong_peak",
    "contrast_0",
    "contrast_1",
    "contrast_2",
    "contrast_3",
    "contrast_4",
    "contrast_5",
    "valley_0",
    "valley_1",
    "valley_2",
    "valley_3",
    "valley_4",
    "valley_5",
    "energy_ratio_low",
    "energy_ratio_mid_low",
    "energy_ratio_mid_high",
    "energy_ratio_high",
];

/// Offset and length of `block` within a frame vector.
pub fn block_range(block: Block) -> std::ops::Range<usize> {
    let mut start = 0;
    for (b, _, d) in BLOCKS {
        if b == block {
            return start..start + d;
        }
        start += d;
    }
    unreachable!()
}

/// Block layout string embedded in cached feature files.
pub fn layout_descriptor() -> String {
    let blocks: Vec<String> = BLOCKS.iter().map(|(_, n, d)| format!("{n}:{d}")).collect();
    format!("{};agg=mean,var,dmean,dvar", blocks.join(","))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
}

impl FeatureFrame {
    pub fn block(&self, b: Block) -> &[f64] {
        &self.values[block_range(b)]
    }
}

/// `[mean | variance | mean of first difference | variance of first
/// difference]`, each 205 values in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatureVector {
    pub recording_id: String,
    pub segment_index: usize,
    pub values: Vec<f64>,
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Aggregate the frames of one segment. Variance is the population
/// variance; the derivative is the first difference of consecutive frames.
pub fn aggregate_segment(frames: &[FeatureFrame]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "segment needs at least 2 frames for derivatives, got {}",
            frames.len()
        )));
    }
    let d = frames[0].values.len();
    if frames.iter().any(|f| f.values.len() != d) {
        return Err(Error::shape("frames of unequal dimension"));
    }
    let mut out = vec![0.0; 4 * d];
    for j in 0..d {
        let track = frames.iter().map(|f| f.values[j]);
        let (m, v) = mean_var(track);
        let diffs = frames.windows(2).map(|w| w[1].values[j] - w[0].values[j]);
        let (dm, dv) = mean_var(diffs);
        out[j] = m;
        out[d + j] = v;
        out[2 * d + j] = dm;
        out[3 * d + j] = dv;
    }
    Ok(out)
}

/// Segment spans in seconds: six of 1.5 s then one of 1 s.
pub fn segment_boundaries(duration_s: f64) -> Result<Vec<(f64, f64)>> {
    if duration_s < 10.0 - 1e-9 {
        return Err(Error::invalid(format!("recording of {duration_s} s is shorter than 10 s")));
    }
    let mut spans: Vec<(f64, f64)> = (0..6).map(|i| (1.5 * i as f64, 1.5 * (i + 1) as f64)).collect();
    spans.push((9.0, 10.0));
    Ok(spans)
}

/// Frames whose start time lies in `[start_s, end_s)`.
pub fn frames_in_span(span: (f64, f64), hop: usize, frame_count: usize) -> std::ops::Range<usize> {
    let rate = SAMPLE_RATE as f64 / hop as f64;
    let a = ((span.0 * rate) - 1e-9).ceil().max(0.0) as usize;
    let b = ((span.1 * rate) - 1e-9).ceil() as usize;
    a.min(frame_count)..b.min(frame_count)
}

/// Recording-level driver: STFT shared with the log-mel front end, then
/// per-frame extraction and per-segment aggregation.
#[derive(Debug)]
pub struct FeatureExtractor {
    stft: Stft,
    frame: FrameFeatureExtractor,
}

impl FeatureExtractor {
    pub fn new(config: StftConfig) -> Result<Self> {
        Ok(FeatureExtractor {
            stft: Stft::new(config)?,
            frame: FrameFeatureExtractor::new(config.fft_size, config.window, SAMPLE_RATE as f64)?,
        })
    }

    pub fn frame_features(&self, rec: &Recording) -> Result<Vec<FeatureFrame>> {
        let power = self.stft.power(&rec.samples)?;
        let cfg = self.stft.config();
        Ok((0..power.frame_count)
            .map(|i| {
                let start = i * cfg.hop;
                let end = (start + cfg.window).min(rec.samples.len());
                let prev = (i > 0).then(|| power.frame(i - 1));
                self.frame.extract(&rec.samples[start..end], power.frame(i), prev)
            })
            .collect())
    }

    pub fn segment_features(&self, rec: &Recording) -> Result<Vec<SegmentFeatureVector>> {
        let frames = self.frame_features(rec)?;
        let spans = segment_boundaries(rec.duration_s())?;
        spans
            .into_iter()
            .enumerate()
            .map(|(s, span)| {
                let range = frames_in_span(span, self.stft.config().hop, frames.len());
                Ok(SegmentFeatureVector {
                    recording_id: rec.id.clone(),
                    segment_index: s,
                    values: aggregate_segment(&frames[range])?,
                })
            })
            .collect()
    }
}

/// Per-dimension standardization of the 820-dim segment vectors.
pub type FeatureScaler = Standardizer;

pub fn fit_feature_scaler<'a>(rows: impl IntoIterator<Item = &'a [f64]> + Clone) -> Result<FeatureScaler> {
    let mut s = Standardizer::new(SEGMENT_DIM, ScalerScope::PerBand);
    s.fit(rows)?;
    Ok(s)
}

pub fn apply_feature_scaler(scaler: &FeatureScaler, rows: &mut [f64]) -> Result<()> {
    scaler.apply_in_place(rows)
}
