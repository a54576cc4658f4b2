//! Log-mel front end for the CNN branch: STFT power, Slaney mel
//! filterbank, log compression, standardization and 75-frame patches.

mod cache;
mod mel;
mod patches;
mod stft;

pub use cache::{read_mel_cache, write_mel_cache, MelRecord};
pub use mel::{build_mel_filterbank, hz_to_mel, log_mel, mel_to_hz, LogMelSpectrogram, MelFilterbank, LOG_FLOOR};
pub use patches::{
    normalize_waveform, normalize_waveform_with, segment_patches, TfPatch, WaveformNorm, PATCHES_PER_RECORDING,
    PATCH_FRAMES,
};
pub use stft::{hamming, stft_power, PowerSpectrogram, Stft, StftConfig};

use serde::{Deserialize, Serialize};

use crate::dataset::{Recording, SAMPLE_RATE};
use crate::error::Result;
use crate::scaler::{ScalerScope, Standardizer};

/// Per-mel-band (or global) standardization of log-mel frames.
pub type StandardizationScaler = Standardizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub scaler_scope: ScalerScope,
    pub waveform_norm: WaveformNorm,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            stft: StftConfig::default(),
            n_mels: 128,
            f_lo: 0.0,
            f_hi: 22_050.0,
            scaler_scope: ScalerScope::PerBand,
            waveform_norm: WaveformNorm::None,
        }
    }
}

/// Recording to log-mel spectrogram, with the filterbank and FFT plan
/// built once.
#[derive(Debug)]
pub struct Frontend {
    pub config: FrontendConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        let stft = Stft::new(config.stft)?;
        let filterbank = build_mel_filterbank(
            config.n_mels,
            config.f_lo,
            config.f_hi,
            config.stft.fft_size,
            SAMPLE_RATE as f64,
        )?;
        Ok(Frontend {
            config,
            stft,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn log_mel(&self, rec: &Recording) -> Result<LogMelSpectrogram> {
        let rec = normalize_waveform_with(rec, self.config.waveform_norm);
        let power = self.stft.power(&rec.samples)?;
        log_mel(&power, &self.filterbank)
    }

    /// Unstandardized patches plus the number of original frames.
    pub fn mel_record(&self, rec: &Recording) -> Result<MelRecord> {
        let lm = self.log_mel(rec)?;
        let patches = segment_patches(&lm, &rec.id)?;
        Ok(MelRecord {
            id: rec.id.clone(),
            label: rec.label,
            valid_frames: lm.frame_count,
            n_mels: lm.n_mels,
            patches: patches.into_iter().map(|p| p.data).collect(),
        })
    }
}

/// Fit a log-mel scaler over the original (unpadded) frames of `records`.
pub fn fit_scaler<'a>(
    records: impl IntoIterator<Item = &'a MelRecord>,
    scope: ScalerScope,
) -> Result<StandardizationScaler> {
    let records: Vec<&MelRecord> = records.into_iter().collect();
    let n_mels = records.first().map(|r| r.n_mels).unwrap_or(128);
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for r in &records {
        for t in 0..r.valid_frames {
            frames.push(r.frame(t).iter().map(|&v| v as f64).collect());
        }
    }
    let mut s = Standardizer::new(n_mels, scope);
    s.fit(frames.iter().map(Vec::as_slice))?;
    Ok(s)
}

/// Standardize a log-mel spectrogram with a fitted scaler.
pub fn apply_scaler(scaler: &StandardizationScaler, logmel: &LogMelSpectrogram) -> Result<LogMelSpectrogram> {
    let mut out = logmel.clone();
    scaler.apply_in_place(&mut out.data)?;
    Ok(out)
}
