use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// STFT framing parameters. Defaults: 40 ms Hamming window, 50% overlap
/// at 44.1 kHz, zero-padded to a 2048-point transform, no centering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window: usize,
    pub hop: usize,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 2048,
            window: 1764,
            hop: 882,
            center: false,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        let n = if self.center { n_samples + self.window } else { n_samples };
        if n < self.window {
            0
        } else {
            (n - self.window) / self.hop + 1
        }
    }
}

/// Periodic Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Row-major `frames x bins` grid of squared STFT magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub frame_count: usize,
    pub bin_count: usize,
    pub hop: usize,
    pub window: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.bin_count..(i + 1) * self.bin_count]
    }
}

/// Reusable STFT engine (window and FFT plan are built once).
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        if config.window == 0 || config.hop == 0 || config.fft_size < config.window {
            return Err(Error::invalid(format!("invalid STFT configuration {config:?}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Stft {
            window: hamming(config.window),
            config,
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Start sample of frame `i` in the (possibly padded) signal.
    fn padded(&self, samples: &[f32]) -> Vec<f64> {
        if self.config.center {
            let half = self.config.window / 2;
            let mut v = vec![0.0; half];
            v.extend(samples.iter().map(|&s| s as f64));
            v.extend(std::iter::repeat_n(0.0, self.config.window - half));
            v
        } else {
            samples.iter().map(|&s| s as f64).collect()
        }
    }

    pub fn power(&self, samples: &[f32]) -> Result<PowerSpectrogram> {
        let cfg = self.config;
        let frames = cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                samples.len(),
                cfg.window
            )));
        }
        let signal = self.padded(samples);
        let bins = cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            let start = f * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < cfg.window {
                    Complex::new(signal[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(PowerSpectrogram {
            frame_count: frames,
            bin_count: bins,
            hop: cfg.hop,
            window: cfg.window,
            data,
        })
    }
}

/// Power spectrogram with the default framing.
pub fn stft_power(samples: &[f32]) -> Result<PowerSpectrogram> {
    Stft::new(StftConfig::default())?.power(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_seconds_gives_499_frames() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(441_000), (441_000 - 1764) / 882 + 1);
        assert_eq!(cfg.frame_count(441_000), 499);
        let p = stft_power(&vec![0.0; 441_000]).unwrap();
        assert_eq!(p.frame_count, 499);
        assert_eq!(p.bin_count, 1025);
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_is_error() {
        assert!(stft_power(&[0.0; 1000]).is_err());
    }

    #[test]
    fn bin_centered_sine_has_isolated_peak() {
        for k in [100usize, 237, 600] {
            let f = k as f64 * 44_100.0 / 2048.0;
            let x: Vec<f32> = (0..8820)
                .map(|n| (2.0 * PI * f * n as f64 / 44_100.0).sin() as f32)
                .collect();
            let p = stft_power(&x).unwrap();
            for fr in 0..p.frame_count {
                let row = p.frame(fr);
                let peak = row[k];
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(argmax, k);
                for (j, &v) in row.iter().enumerate() {
                    if j.abs_diff(k) >= 2 {
                        assert!(peak >= 100.0 * v, "bin {j} too close to peak at {k}");
                    }
                }
            }
        }
    }
}
