//! Recording-level aggregation, accuracy, confusion matrices, trial
//! statistics and the cross-validation / evaluation workflows.

mod pipeline;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use pipeline::{
    run_cv, run_eval, Branch, CnnBranch, CnnBranchModel, CvResult, EvalResult, GbmBranch, GbmBranchModel, LeakageGuard,
    RecordingData,
};

use crate::error::{Error, Result};
use crate::features::SEGMENTS_PER_RECORDING;
use crate::fusion::{argmax, ProbabilityRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingPrediction {
    pub recording_id: String,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub label: Option<usize>,
}

impl RecordingPrediction {
    pub fn from_probs(recording_id: impl Into<String>, probs: Vec<f64>, label: Option<usize>) -> Self {
        RecordingPrediction {
            recording_id: recording_id.into(),
            predicted: argmax(&probs),
            probs,
            label,
        }
    }

    pub fn to_row(&self, model_tag: &str) -> ProbabilityRow {
        ProbabilityRow {
            recording_id: self.recording_id.clone(),
            label: self.label,
            probs: self.probs.clone(),
            model_tag: model_tag.into(),
        }
    }

    pub fn from_row(row: &ProbabilityRow) -> Self {
        Self::from_probs(row.recording_id.clone(), row.probs.clone(), row.label)
    }
}

/// Mean of the 7 segment distributions; the label is its argmax.
pub fn aggregate_recording(
    recording_id: &str,
    segment_probs: &[Vec<f64>],
    label: Option<usize>,
) -> Result<RecordingPrediction> {
    if segment_probs.len() != SEGMENTS_PER_RECORDING {
        return Err(Error::shape(format!(
            "{recording_id}: {} segments, expected {SEGMENTS_PER_RECORDING}",
            segment_probs.len()
        )));
    }
    let k = segment_probs[0].len();
    if segment_probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape(format!("{recording_id}: ragged segment probabilities")));
    }
    let mut mean = vec![0.0; k];
    for p in segment_probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= SEGMENTS_PER_RECORDING as f64);
    Ok(RecordingPrediction::from_probs(recording_id, mean, label))
}

fn labelled(preds: &[RecordingPrediction]) -> Result<Vec<(usize, usize)>> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    preds
        .iter()
        .map(|p| {
            p.label
                .map(|l| (l, p.predicted))
                .ok_or_else(|| Error::invalid(format!("recording {} has no true label", p.recording_id)))
        })
        .collect()
}

pub fn accuracy(preds: &[RecordingPrediction]) -> Result<f64> {
    let pairs = labelled(preds)?;
    Ok(pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Fraction correct per true class; `None` for classes never seen.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s: u64 = r.iter().sum();
                (s > 0).then(|| r[i] as f64 / s as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let k = self.classes();
        let mut s = String::from("true\\pred");
        for j in 0..k {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, r) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in r {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[RecordingPrediction], classes: usize) -> Result<ConfusionMatrix> {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (t, p) in labelled(preds)? {
        if t >= classes || p >= classes {
            return Err(Error::Label { label: t.max(p).to_string() });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Entrywise `a - b`. Both matrices must cover the same recordings, so
/// their row sums have to agree.
pub fn confusion_diff(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<Vec<Vec<i64>>> {
    if a.classes() != b.classes() || a.row_sums() != b.row_sums() {
        return Err(Error::invalid("confusion matrices cover different recordings"));
    }
    Ok(a.counts
        .iter()
        .zip(&b.counts)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x as i64 - y as i64).collect())
        .collect())
}

/// `confusion_diff` of two prediction sets, checked to be over the same ids.
pub fn confusion_diff_predictions(
    a: &[RecordingPrediction],
    b: &[RecordingPrediction],
    classes: usize,
) -> Result<Vec<Vec<i64>>> {
    let ids = |p: &[RecordingPrediction]| p.iter().map(|r| r.recording_id.clone()).collect::<BTreeSet<_>>();
    if ids(a) != ids(b) || a.len() != b.len() {
        return Err(Error::invalid("prediction sets cover different recordings"));
    }
    confusion_diff(&confusion(a, classes)?, &confusion(b, classes)?)
}

pub fn diff_to_csv(diff: &[Vec<i64>]) -> String {
    let mut s = String::from("true\\pred");
    for j in 0..diff.len() {
        s.push_str(&format!(",{j}"));
    }
    s.push('\n');
    for (i, r) in diff.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in r {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStatistics {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Student-t 95% confidence half-width.
    pub half_width: f64,
}

pub fn trial_statistics(accuracies: &[f64]) -> Result<TrialStatistics> {
    let n = accuracies.len();
    if n == 0 {
        return Err(Error::invalid("no trials"));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let half_width = if n == 1 {
        0.0
    } else {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var == 0.0 {
            0.0
        } else {
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .map_err(|e| Error::invalid(e.to_string()))?
                .inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        }
    };
    Ok(TrialStatistics {
        accuracies: accuracies.to_vec(),
        mean,
        half_width,
    })
}

/// Run `trial(seed)` for seeds `base_seed..base_seed + n_trials`.
pub fn run_trials(n_trials: usize, base_seed: u64, mut trial: impl FnMut(u64) -> Result<f64>) -> Result<TrialStatistics> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let accs = (0..n_trials as u64)
        .map(|t| trial(base_seed + t))
        .collect::<Result<Vec<f64>>>()?;
    trial_statistics(&accs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub recordings: usize,
    /// Pooled accuracy over all scored recordings.
    pub accuracy: f64,
    /// Per-fold accuracies in CV mode.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fold_accuracies: Vec<f64>,
    /// Mean of `fold_accuracies` in CV mode.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold_mean_accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trials: Option<TrialStatistics>,
}

impl MetricsReport {
    pub fn new(model_tag: &str, preds: &[RecordingPrediction], classes: usize, fold_accuracies: Vec<f64>) -> Result<Self> {
        let cm = confusion(preds, classes)?;
        let fold_mean_accuracy =
            (!fold_accuracies.is_empty()).then(|| fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64);
        Ok(MetricsReport {
            model_tag: model_tag.into(),
            recordings: preds.len(),
            accuracy: accuracy(preds)?,
            fold_accuracies,
            fold_mean_accuracy,
            per_class_accuracy: cm.per_class_accuracy(),
            confusion: cm,
            trials: None,
        })
    }

    /// Mean fold accuracy in CV mode, otherwise the pooled accuracy.
    pub fn headline(&self) -> f64 {
        self.fold_mean_accuracy.unwrap_or(self.accuracy)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{stem}_confusion.csv"));
        std::fs::write(&p, self.confusion.to_csv()).map_err(|e| Error::io(&p, e))
    }
}
