use crate::error::{Error, Result};

use super::stft::PowerSpectrogram;

const MIN_LOG_HZ: f64 = 1000.0;
const LINEAR_SLOPE: f64 = 3.0 / 200.0;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    let min_log_mel = MIN_LOG_HZ * LINEAR_SLOPE;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz * LINEAR_SLOPE
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let min_log_mel = MIN_LOG_HZ * LINEAR_SLOPE;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (log_step() * (mel - min_log_mel)).exp()
    } else {
        mel / LINEAR_SLOPE
    }
}

/// Triangular filters on the Slaney mel scale, each scaled to peak 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bin_count: usize,
    /// Row-major `n_mels x bin_count`.
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
    /// Non-zero support of each row as a half-open bin range.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bin_count..(m + 1) * self.bin_count]
    }

    pub fn support(&self, m: usize) -> (usize, usize) {
        self.support[m]
    }

    /// Filter energies of one power frame.
    pub fn apply(&self, frame: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.support[m];
            let row = self.row(m);
            *o = (lo..hi).map(|k| row[k] * frame[k]).sum();
        }
    }
}

pub fn build_mel_filterbank(
    n_mels: usize,
    f_lo: f64,
    f_hi: f64,
    fft_size: usize,
    sample_rate: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate / 2.0;
    if n_mels == 0 || !(0.0..f_hi).contains(&f_lo) || f_hi > nyquist {
        return Err(Error::invalid(format!(
            "mel range [{f_lo}, {f_hi}] invalid for Nyquist {nyquist}"
        )));
    }
    let bins = fft_size / 2 + 1;
    let fft_freqs: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate / fft_size as f64).collect();
    let (mlo, mhi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![0.0; n_mels * bins];
    let mut support = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, &f) in fft_freqs.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            row[k] = up.min(down).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::invalid(format!(
                "fft size {fft_size} cannot resolve mel filter {m} ({left:.1}-{right:.1} Hz)"
            )));
        }
        for w in row.iter_mut() {
            *w /= peak;
        }
        let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
        let hi = bins - row.iter().rev().position(|&w| w > 0.0).unwrap_or(0);
        support.push((lo, hi));
    }

    Ok(MelFilterbank {
        n_mels,
        bin_count: bins,
        weights,
        centers_hz: edges[1..=n_mels].to_vec(),
        support,
    })
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Row-major `frames x n_mels` natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frame_count: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }
}

/// `ln(max(filterbank . frame, 1e-10))` for every frame.
pub fn log_mel(power: &PowerSpectrogram, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if power.bin_count != fb.bin_count {
        return Err(Error::shape(format!(
            "power spectrum has {} bins, filterbank expects {}",
            power.bin_count, fb.bin_count
        )));
    }
    let mut data = vec![0.0; power.frame_count * fb.n_mels];
    for (f, out) in data.chunks_exact_mut(fb.n_mels).enumerate() {
        fb.apply(power.frame(f), out);
        for v in out.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram {
        frame_count: power.frame_count,
        n_mels: fb.n_mels,
        data,
    })
}
