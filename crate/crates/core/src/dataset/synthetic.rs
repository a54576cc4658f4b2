use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::wav::write_wav_mono;
use super::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Scene names of the 15-class task, in sorted (class-index) order.
pub const DCASE_SCENES: [&str; 15] = [
    "beach",
    "bus",
    "cafe/restaurant",
    "car",
    "city_center",
    "forest_path",
    "grocery_store",
    "home",
    "library",
    "metro_station",
    "office",
    "park",
    "residential_area",
    "train",
    "tram",
];

/// Generative parameters shared by every recording of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    /// Spectral slope of the background noise in dB per octave.
    pub tilt_db_per_octave: f64,
    pub tones_hz: Vec<f64>,
    pub am_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub n_classes: usize,
    pub recordings_per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub class_signatures: Vec<ClassSignature>,
}

impl SyntheticSceneSpec {
    /// Spec with the default signature family: a tone pair a fifth apart
    /// stepping by four semitones per class, a three-way cycle of noise
    /// tilts and a five-way cycle of modulation rates.
    pub fn new(n_classes: usize, recordings_per_class: usize, duration_s: f64, seed: u64) -> Self {
        const TILTS: [f64; 3] = [-3.0, 0.0, 3.0];
        const AM: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];
        let class_signatures = (0..n_classes)
            .map(|c| {
                let f1 = 220.0 * 2f64.powf(c as f64 * 4.0 / 12.0);
                ClassSignature {
                    tilt_db_per_octave: TILTS[c % 3],
                    tones_hz: vec![f1, f1 * 1.5],
                    am_rate_hz: AM[c % 5],
                }
            })
            .collect();
        SyntheticSceneSpec {
            n_classes,
            recordings_per_class,
            duration_s,
            seed,
            class_signatures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.recordings_per_class == 0 {
            return Err(Error::invalid("synthetic spec needs at least one class and recording"));
        }
        if self.duration_s <= 1.5 {
            return Err(Error::invalid(format!("duration_s must exceed 1.5, got {}", self.duration_s)));
        }
        if self.class_signatures.len() != self.n_classes {
            return Err(Error::invalid("one class signature per class required"));
        }
        for (i, a) in self.class_signatures.iter().enumerate() {
            if a.tones_hz.iter().any(|&f| f <= 0.0 || f >= SAMPLE_RATE as f64 / 2.0) {
                return Err(Error::invalid(format!("class {i}: tone outside (0, Nyquist)")));
            }
            for b in &self.class_signatures[i + 1..] {
                if a == b {
                    return Err(Error::invalid("class signatures must be pairwise distinct"));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.n_classes == DCASE_SCENES.len() {
            DCASE_SCENES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.n_classes).map(|c| format!("scene{c:02}")).collect()
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }
}

/// Noise with a power-law spectral slope, shaped in the frequency domain.
fn tilted_noise(rng: &mut ChaCha8Rng, n: usize, tilt_db_per_octave: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    // amplitude exponent: tilt dB/oct over 20*log10(2) dB per doubling
    let exponent = tilt_db_per_octave / (20.0 * 2f64.log10());
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        if bin == 0 {
            *v = Complex::new(0.0, 0.0);
            continue;
        }
        let f = (bin as f64 * df).max(20.0);
        *v *= (f / 1000.0).powf(exponent);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Synthesize recording `index` of class `class`. Deterministic in
/// `(spec.seed, class, index)`.
pub fn synthesize_recording(spec: &SyntheticSceneSpec, class: usize, index: usize) -> Vec<f32> {
    let sig = &spec.class_signatures[class];
    let n = spec.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class as u64) << 32 | index as u64);

    let noise = tilted_noise(&mut rng, n, sig.tilt_db_per_octave);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let phases: Vec<f64> = sig.tones_hz.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let snr_db: f64 = rng.gen_range(0.0..6.0);
    let gain: f64 = rng.gen_range(0.3..0.9);

    let sr = SAMPLE_RATE as f64;
    let tones: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 1.0 + 0.8 * (2.0 * PI * sig.am_rate_hz * t + am_phase).sin();
            let s: f64 = sig
                .tones_hz
                .iter()
                .zip(&phases)
                .map(|(f, p)| (2.0 * PI * f * t + p).sin())
                .sum();
            env * s
        })
        .collect();

    let tone_scale = 10f64.powf(snr_db / 20.0) * rms(&noise) / rms(&tones).max(1e-12);
    let mix: Vec<f64> = tones
        .iter()
        .zip(&noise)
        .map(|(t, w)| t * tone_scale + w)
        .collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    mix.into_iter().map(|v| (v * gain / peak) as f32).collect()
}

/// Write the synthetic corpus under `out_dir`: `audio/*.wav` plus a
/// `meta.txt` manifest. Returns the manifest (rooted at `out_dir`).
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let names = spec.class_names();

    let mut entries = Vec::with_capacity(spec.n_classes * spec.recordings_per_class);
    for (c, name) in names.iter().enumerate() {
        let stem = name.replace('/', "_");
        for r in 0..spec.recordings_per_class {
            let rel = format!("audio/{stem}_{r:03}.wav");
            let samples = synthesize_recording(spec, c, r);
            write_wav_mono(&out_dir.join(&rel), &samples)?;
            entries.push(ManifestEntry {
                audio_path: rel,
                label: name.clone(),
            });
        }
    }

    let mut class_names = names;
    class_names.sort();
    let manifest = DatasetManifest {
        entries,
        class_names,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("meta.txt"))?;
    Ok(manifest)
}
