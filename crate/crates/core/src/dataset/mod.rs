//! Dataset ingestion: manifests, audio loading, cross-validation folds and
//! the synthetic scene corpus used when the real dataset is not available.

mod folds;
mod manifest;
mod synthetic;
mod wav;

pub use folds::{load_fold_files, make_folds, write_fold_files, FoldSplit};
pub use manifest::{load_manifest, load_manifest_with_classes, parse_manifest, DatasetManifest, ManifestEntry};
pub use synthetic::{
    generate_synthetic_dataset, synthesize_recording, ClassSignature, SyntheticSceneSpec, DCASE_SCENES,
};
pub use wav::{load_recording, write_wav_mono};

use crate::error::{Error, Result};

/// Sample rate every recording must have after ingestion.
pub const SAMPLE_RATE: u32 = 44_100;

/// Number of acoustic scene classes in the full task.
pub const N_CLASSES: usize = 15;

/// A mono waveform plus identity and optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: Option<usize>,
}

impl Recording {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, label: Option<usize>) -> Result<Self> {
        let rec = Recording {
            id: id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Decode(format!(
                "unsupported sample rate {} (expected {SAMPLE_RATE})",
                self.sample_rate
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::Decode(format!("recording {} has no samples", self.id)));
        }
        if let Some(l) = self.label {
            if l >= N_CLASSES {
                return Err(Error::Label { label: l.to_string() });
            }
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
