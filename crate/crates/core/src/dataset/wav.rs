use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Recording, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Decode a PCM or float WAV file into a mono recording.
///
/// Stereo is down-mixed with the per-sample mean of the two channels. The
/// recording id is the path as given; callers usually replace it with the
/// manifest-relative path.
pub fn load_recording(path: &Path) -> Result<Recording> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Decode(format!(
            "{}: sample rate {} Hz is not supported (expected {SAMPLE_RATE}, no resampling)",
            path.display(),
            spec.sample_rate
        )));
    }
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(Error::Decode(format!(
            "{}: {channels} channels (only mono or stereo supported)",
            path.display()
        )));
    }

    let decode_err = |e: hound::Error| Error::Decode(format!("{}: {e}", path.display()));
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(decode_err)?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(decode_err)?
        }
    };

    let samples = if channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|lr| (lr[0] + lr[1]) * 0.5)
            .collect()
    } else {
        interleaved
    };
    Recording::new(path.display().to_string(), samples, None)
}

/// Write a mono 16-bit PCM WAV at 44.1 kHz. Samples are clipped to [-1, 1].
pub fn write_wav_mono(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut w = WavWriter::create(path, spec).map_err(map)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(map)?;
    }
    w.finalize().map_err(map)
}
