//! Frame-level descriptor extractors. Every block reads the shared power
//! spectrum of the frame; pitch additionally reads the raw frame samples.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureFrame, FRAME_DIM};
use crate::frontend::{build_mel_filterbank, MelFilterbank};
use crate::error::Result;

const EPS: f64 = 1e-10;
const N_BARK: usize = 32;
const N_ERB: usize = 23;
const N_MEL: usize = 45;
const N_CEPS: usize = 13;
const HPCP_SIZE: usize = 36;
const CONTRAST_BANDS: usize = 6;
const SILENCE_DB: [f64; 3] = [-20.0, -30.0, -60.0];
const ENERGY_BANDS_HZ: [(f64, f64); 4] = [(20.0, 150.0), (150.0, 800.0), (800.0, 4000.0), (4000.0, 20_000.0)];
const PEAK_RANGE_HZ: (f64, f64) = (40.0, 5000.0);
const MAX_PEAKS: usize = 100;
const PITCH_RANGE_HZ: (f64, f64) = (60.0, 1000.0);

/// Traunmüller Bark scale.
pub fn hz_to_bark(f: f64) -> f64 {
    26.81 * f / (1960.0 + f) - 0.53
}

pub fn bark_to_hz(z: f64) -> f64 {
    1960.0 * (z + 0.53) / (26.28 - z)
}

/// Glasberg-Moore ERB-rate scale.
pub fn hz_to_erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Sparse weighted band: (first bin, weights).
#[derive(Debug, Clone)]
struct Band {
    start: usize,
    weights: Vec<f64>,
}

impl Band {
    fn energy(&self, power: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&power[self.start..self.start + self.weights.len()])
            .map(|(w, p)| w * p)
            .sum()
    }
}

fn nearest_bin(f: f64, df: f64, bins: usize) -> usize {
    ((f / df).round() as usize).min(bins - 1)
}

fn bin_range(lo: f64, hi: f64, df: f64, bins: usize) -> (usize, usize) {
    let a = (lo / df).ceil().max(0.0) as usize;
    let b = ((hi / df).ceil() as usize).min(bins);
    if a >= b {
        let k = nearest_bin((lo + hi) / 2.0, df, bins);
        (k, k + 1)
    } else {
        (a, b)
    }
}

fn unit_sum_bands(fb: &MelFilterbank) -> Vec<Band> {
    (0..fb.n_mels)
        .map(|m| {
            let (lo, hi) = fb.support(m);
            let row = &fb.row(m)[lo..hi];
            let s: f64 = row.iter().sum();
            Band {
                start: lo,
                weights: row.iter().map(|w| w / s).collect(),
            }
        })
        .collect()
}

/// Orthonormal DCT-II rows `0..n_out` for inputs of length `n_in`.
fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|j| {
            let s = if j == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
            (0..n_in)
                .map(|m| s * (PI * j as f64 * (m as f64 + 0.5) / n_in as f64).cos())
                .collect()
        })
        .collect()
}

fn dct(matrix: &[Vec<f64>], energies: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = energies.iter().map(|&e| e.max(EPS).ln()).collect();
    matrix
        .iter()
        .map(|row| row.iter().zip(&logs).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    freq: f64,
    magnitude: f64,
}

/// Stateless per-frame extractor with precomputed band layouts.
pub struct FrameFeatureExtractor {
    sample_rate: f64,
    fft_size: usize,
    bins: usize,
    bark: Vec<Band>,
    erb: Vec<Band>,
    mel: Vec<Band>,
    mel_dct: Vec<Vec<f64>>,
    erb_dct: Vec<Vec<f64>>,
    contrast_ranges: Vec<(usize, usize)>,
    energy_ranges: Vec<(usize, usize)>,
    acf_size: usize,
    acf_fwd: Arc<dyn Fft<f64>>,
    acf_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FrameFeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameFeatureExtractor")
            .field("fft_size", &self.fft_size)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl FrameFeatureExtractor {
    pub fn new(fft_size: usize, window: usize, sample_rate: f64) -> Result<Self> {
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate / 2.0;
        let df = sample_rate / fft_size as f64;

        let (z0, z1) = (hz_to_bark(0.0), hz_to_bark(nyquist));
        let bark = (0..N_BARK)
            .map(|b| {
                let lo = bark_to_hz(z0 + (z1 - z0) * b as f64 / N_BARK as f64);
                let hi = bark_to_hz(z0 + (z1 - z0) * (b + 1) as f64 / N_BARK as f64);
                // include the Nyquist bin in the last band
                let hi = if b + 1 == N_BARK { nyquist + df } else { hi };
                let (a, e) = bin_range(lo.max(0.0), hi, df, bins);
                Band {
                    start: a,
                    weights: vec![1.0; e - a],
                }
            })
            .collect();

        let (e0, e1) = (hz_to_erb_rate(50.0), hz_to_erb_rate(nyquist));
        let step = (e1 - e0) / (N_ERB - 1) as f64;
        let erb = (0..N_ERB)
            .map(|b| {
                let center = e0 + step * b as f64;
                let lo = erb_rate_to_hz(center - step).max(0.0);
                let hi = erb_rate_to_hz(center + step).min(nyquist);
                let (a, e) = bin_range(lo, hi, df, bins);
                let mut w: Vec<f64> = (a..e)
                    .map(|k| {
                        let d = (hz_to_erb_rate(k as f64 * df) - center).abs() / step;
                        let t = (1.0 - d).max(0.0);
                        t * t
                    })
                    .collect();
                if w.iter().all(|&v| v == 0.0) {
                    w = vec![1.0; e - a];
                }
                let s: f64 = w.iter().sum();
                Band {
                    start: a,
                    weights: w.into_iter().map(|v| v / s).collect(),
                }
            })
            .collect();

        let mel = unit_sum_bands(&build_mel_filterbank(N_MEL, 0.0, nyquist, fft_size, sample_rate)?);

        let ratio = (11_000.0f64 / 20.0).powf(1.0 / CONTRAST_BANDS as f64);
        let contrast_ranges = (0..CONTRAST_BANDS)
            .map(|b| bin_range(20.0 * ratio.powi(b as i32), 20.0 * ratio.powi(b as i32 + 1), df, bins))
            .collect();
        let energy_ranges = ENERGY_BANDS_HZ
            .iter()
            .map(|&(lo, hi)| bin_range(lo, hi, df, bins))
            .collect();

        let acf_size = (2 * window).next_power_of_two();
        let mut planner = FftPlanner::new();
        Ok(FrameFeatureExtractor {
            sample_rate,
            fft_size,
            bins,
            bark,
            erb,
            mel,
            mel_dct: dct_matrix(N_CEPS, N_MEL),
            erb_dct: dct_matrix(N_CEPS, N_ERB),
            contrast_ranges,
            energy_ranges,
            acf_size,
            acf_fwd: planner.plan_fft_forward(acf_size),
            acf_inv: planner.plan_fft_inverse(acf_size),
        })
    }

    fn bin_hz(&self, k: f64) -> f64 {
        k * self.sample_rate / self.fft_size as f64
    }

    /// Features of one frame. `prev_power` is the previous frame's power
    /// spectrum (for spectral flux); `None` on the first frame.
    pub fn extract(&self, frame: &[f32], power: &[f64], prev_power: Option<&[f64]>) -> FeatureFrame {
        assert_eq!(power.len(), self.bins, "power spectrum size");
        let mag: Vec<f64> = power.iter().map(|p| p.sqrt()).collect();
        let mut v = Vec::with_capacity(FRAME_DIM);

        let bark: Vec<f64> = self.bark.iter().map(|b| b.energy(power)).collect();
        let erb: Vec<f64> = self.erb.iter().map(|b| b.energy(power)).collect();
        let mel: Vec<f64> = self.mel.iter().map(|b| b.energy(power)).collect();
        v.extend_from_slice(&bark);
        v.extend_from_slice(&erb);
        v.extend_from_slice(&mel);
        v.extend(dct(&self.mel_dct, &mel));

        let peaks = self.spectral_peaks(&mag);
        v.extend(self.hpcp(&peaks));

        let (f0, confidence) = self.pitch_acf(frame);
        v.extend(self.tonal(&peaks, power, f0));
        v.push(f0);
        v.push(confidence);
        v.push(self.pitch_salience(&mag));

        let frame_power = frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / frame.len().max(1) as f64;
        let db = 10.0 * frame_power.max(1e-30).log10();
        v.extend(SILENCE_DB.iter().map(|&t| if db < t { 1.0 } else { 0.0 }));

        v.extend(self.spectral(frame, power, &mag, prev_power));
        v.extend(dct(&self.erb_dct, &erb));

        debug_assert_eq!(v.len(), FRAME_DIM);
        debug_assert!(v.iter().all(|x| x.is_finite()));
        FeatureFrame { values: v }
    }

    fn spectral_peaks(&self, mag: &[f64]) -> Vec<Peak> {
        let max = mag.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let df = self.sample_rate / self.fft_size as f64;
        let lo = ((PEAK_RANGE_HZ.0 / df).ceil() as usize).max(1);
        let hi = ((PEAK_RANGE_HZ.1 / df).floor() as usize).min(mag.len() - 2);
        let mut peaks: Vec<Peak> = (lo..=hi)
            .filter(|&k| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1] && mag[k] >= 1e-4 * max)
            .map(|k| {
                let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
                let denom = a - 2.0 * b + c;
                let offset = if denom.abs() > 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
                Peak {
                    freq: self.bin_hz(k as f64 + offset),
                    magnitude: b - 0.25 * (a - c) * offset,
                }
            })
            .collect();
        peaks.sort_by(|x, y| y.magnitude.total_cmp(&x.magnitude));
        peaks.truncate(MAX_PEAKS);
        peaks
    }

    /// 36-bin pitch-class profile (A = bin 0), unit max, followed by its
    /// crest and normalized entropy.
    fn hpcp(&self, peaks: &[Peak]) -> Vec<f64> {
        let mut h = vec![0.0; HPCP_SIZE];
        let per_semitone = HPCP_SIZE as f64 / 12.0;
        for p in peaks {
            let pos = (HPCP_SIZE as f64 * (p.freq / 440.0).log2()).rem_euclid(HPCP_SIZE as f64);
            for (b, slot) in h.iter_mut().enumerate() {
                let mut d = (pos - b as f64).abs();
                d = d.min(HPCP_SIZE as f64 - d) / per_semitone;
                // cos^2 window one semitone wide
                if d < 0.5 {
                    let w = (PI * d).cos();
                    *slot += w * w * p.magnitude * p.magnitude;
                }
            }
        }
        let max = h.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            h.extend([0.0, 0.0]);
            return h;
        }
        for x in h.iter_mut() {
            *x /= max;
        }
        let sum: f64 = h.iter().sum();
        let crest = 1.0 / (sum / HPCP_SIZE as f64);
        let entropy = -h
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| {
                let q = x / sum;
                q * q.log2()
            })
            .sum::<f64>()
            / (HPCP_SIZE as f64).log2();
        h.push(crest);
        h.push(entropy);
        h
    }

    /// (tuning deviation in semitones, peak-energy ratio, inharmonicity).
    fn tonal(&self, peaks: &[Peak], power: &[f64], f0: f64) -> [f64; 3] {
        if peaks.is_empty() {
            return [0.0; 3];
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for p in peaks {
            let x = 12.0 * (p.freq / 440.0).log2();
            let dev = x - x.round();
            cx += p.magnitude * (2.0 * PI * dev).cos();
            cy += p.magnitude * (2.0 * PI * dev).sin();
        }
        let tuning = cy.atan2(cx) / (2.0 * PI);

        let total: f64 = power.iter().sum();
        let peak_energy: f64 = peaks.iter().map(|p| p.magnitude * p.magnitude).sum();
        let tonality = (peak_energy / total.max(EPS)).min(1.0);

        let inharm = if f0 > 0.0 {
            let (mut num, mut den) = (0.0, 0.0);
            for p in peaks {
                let h = (p.freq / f0).round().max(1.0);
                let a2 = p.magnitude * p.magnitude;
                num += (p.freq - h * f0).abs() * a2;
                den += a2;
            }
            num / (f0 * den.max(EPS))
        } else {
            0.0
        };
        [tuning, tonality, inharm]
    }

    /// Normalized-autocorrelation pitch: (f0 Hz, confidence in [0,1]).
    fn pitch_acf(&self, frame: &[f32]) -> (f64, f64) {
        let n = frame.len();
        let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        if energy <= 1e-20 {
            return (0.0, 0.0);
        }
        let mut buf: Vec<Complex<f64>> = (0..self.acf_size)
            .map(|i| Complex::new(if i < n { x[i] } else { 0.0 }, 0.0))
            .collect();
        self.acf_fwd.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.acf_inv.process(&mut buf);
        let r: Vec<f64> = buf.iter().map(|c| c.re / self.acf_size as f64).collect();

        // prefix energies for the normalization of each lag
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + x[i] * x[i];
        }
        let lag_min = (self.sample_rate / PITCH_RANGE_HZ.1).floor() as usize;
        let lag_max = ((self.sample_rate / PITCH_RANGE_HZ.0).ceil() as usize).min(n - 2);
        let nccf = |tau: usize| {
            let head = prefix[n - tau];
            let tail = prefix[n] - prefix[tau];
            let d = (head * tail).sqrt();
            if d > 1e-20 {
                r[tau] / d
            } else {
                0.0
            }
        };
        let mut best = (lag_min, f64::MIN);
        for tau in lag_min..=lag_max {
            let c = nccf(tau);
            if c > best.1 {
                best = (tau, c);
            }
        }
        // earliest local peak close to the best one avoids octave-down errors
        let vals: Vec<f64> = (lag_min..=lag_max).map(nccf).collect();
        for i in 1..vals.len().saturating_sub(1) {
            if vals[i] >= 0.95 * best.1 && vals[i] >= vals[i - 1] && vals[i] >= vals[i + 1] {
                best = (lag_min + i, vals[i]);
                break;
            }
        }
        let (tau, c) = best;
        if c <= 0.0 {
            return (0.0, 0.0);
        }
        let mut lag = tau as f64;
        if tau > lag_min && tau < lag_max {
            let (a, b, d) = (nccf(tau - 1), c, nccf(tau + 1));
            let denom = a - 2.0 * b + d;
            if denom.abs() > 0.0 {
                lag += (0.5 * (a - d) / denom).clamp(-0.5, 0.5);
            }
        }
        (self.sample_rate / lag, c.clamp(0.0, 1.0))
    }

    /// Highest autocorrelation peak of the magnitude spectrum over lags
    /// spanning 100-1000 Hz, relative to lag 0.
    fn pitch_salience(&self, mag: &[f64]) -> f64 {
        let r0: f64 = mag.iter().map(|m| m * m).sum();
        if r0 <= 1e-20 {
            return 0.0;
        }
        let df = self.sample_rate / self.fft_size as f64;
        let lo = (100.0 / df).ceil() as usize;
        let hi = (1000.0 / df).floor() as usize;
        (lo..=hi)
            .map(|l| mag.iter().zip(&mag[l..]).map(|(a, b)| a * b).sum::<f64>())
            .fold(0.0, f64::max)
            / r0
    }

    fn spectral(&self, frame: &[f32], power: &[f64], mag: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        let n = mag.len();
        let msum: f64 = mag.iter().sum();
        let psum: f64 = power.iter().sum();
        let mut out = Vec::with_capacity(32);

        // shape moments over normalized frequency in [0, 1]
        let nu = |k: usize| k as f64 / (n - 1) as f64;
        let (centroid, spread, skew, kurt) = if msum > EPS {
            let c = mag.iter().enumerate().map(|(k, m)| nu(k) * m).sum::<f64>() / msum;
            let moment = |p: i32| mag.iter().enumerate().map(|(k, m)| (nu(k) - c).powi(p) * m).sum::<f64>() / msum;
            let s = moment(2);
            if s > 1e-20 {
                (c, s, moment(3) / s.powf(1.5), moment(4) / (s * s) - 3.0)
            } else {
                (c, s, 0.0, 0.0)
            }
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        out.extend([centroid * self.sample_rate / 2.0, spread, skew, kurt]);

        let flatness = if psum > EPS {
            let lg = power.iter().map(|p| p.max(1e-20).ln()).sum::<f64>() / n as f64;
            (lg.exp() / (psum / n as f64)).min(1.0)
        } else {
            1.0
        };
        let mmax = mag.iter().cloned().fold(0.0, f64::max);
        let crest = if msum > EPS { mmax / (msum / n as f64) } else { 0.0 };
        let tail: f64 = mag[1..].iter().sum();
        let decrease = if tail > EPS {
            mag[1..].iter().enumerate().map(|(i, m)| (m - mag[0]) / (i + 1) as f64).sum::<f64>() / tail
        } else {
            0.0
        };
        out.extend([flatness, crest, decrease]);

        for frac in [0.85, 0.95] {
            let target = frac * psum;
            let mut acc = 0.0;
            let mut k_roll = 0;
            for (k, p) in power.iter().enumerate() {
                acc += p;
                if acc >= target {
                    k_roll = k;
                    break;
                }
            }
            out.push(if psum > EPS { self.bin_hz(k_roll as f64) } else { 0.0 });
        }

        let flux = match prev {
            Some(pp) => {
                let a: Vec<f64> = pp.iter().map(|p| p.sqrt()).collect();
                let asum: f64 = a.iter().sum();
                let na = |i: usize| if asum > EPS { a[i] / asum } else { 0.0 };
                let nb = |i: usize| if msum > EPS { mag[i] / msum } else { 0.0 };
                (0..n).map(|i| (nb(i) - na(i)).powi(2)).sum::<f64>().sqrt()
            }
            None => 0.0,
        };
        let entropy = if psum > EPS {
            -power
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| {
                    let q = p / psum;
                    q * q.log2()
                })
                .sum::<f64>()
                / (n as f64).log2()
        } else {
            0.0
        };
        let rms = (frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / frame.len().max(1) as f64).sqrt();
        let zcr = frame
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count() as f64
            / (frame.len().max(2) - 1) as f64;
        let hfc = power.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / n as f64;
        let strong_peak = if mmax > EPS {
            let kmax = mag.iter().position(|&m| m == mmax).unwrap_or(0);
            let half = mmax / 2.0;
            let mut lo = kmax;
            while lo > 0 && mag[lo - 1] > half {
                lo -= 1;
            }
            let mut hi = kmax;
            while hi + 1 < n && mag[hi + 1] > half {
                hi += 1;
            }
            mmax / (hi - lo + 1) as f64
        } else {
            0.0
        };
        out.extend([flux, entropy, psum, rms, zcr, hfc, strong_peak]);

        let mut contrast = Vec::with_capacity(CONTRAST_BANDS);
        let mut valleys = Vec::with_capacity(CONTRAST_BANDS);
        for &(a, b) in &self.contrast_ranges {
            let mut band: Vec<f64> = mag[a..b].to_vec();
            band.sort_by(f64::total_cmp);
            let k = ((0.4 * band.len() as f64).round() as usize).max(1);
            let valley = band[..k].iter().sum::<f64>() / k as f64;
            let peak = band[band.len() - k..].iter().sum::<f64>() / k as f64;
            contrast.push(((peak + EPS) / (valley + EPS)).ln());
            valleys.push((valley + EPS).ln());
        }
        out.extend(contrast);
        out.extend(valleys);

        for &(a, b) in &self.energy_ranges {
            let e: f64 = power[a..b].iter().sum();
            out.push(if psum > EPS { e / psum } else { 0.0 });
        }
        debug_assert_eq!(out.len(), 32);
        out
    }
}
