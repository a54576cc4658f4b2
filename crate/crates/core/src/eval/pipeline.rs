use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, aggregate_recording, RecordingPrediction};
use crate::codec::sha256_hex;
use crate::dataset::FoldSplit;
use crate::error::{Error, Result};
use crate::features::{fit_feature_scaler, FeatureRecord, FeatureScaler};
use crate::frontend::{fit_scaler, MelRecord, StandardizationScaler};
use crate::fusion::ProbabilityRow;
use crate::gbm::{bin_features, fit_gbm, GbmConfig, GbmModel};
use crate::lda::{fit_lda_with, LdaModel, LdaOptions};
use crate::nn::{build_network, predict_segments, train, Network, NetworkConfig, TrainingConfig};
use crate::scaler::ScalerScope;

/// Per-recording input of a branch.
pub trait RecordingData: Sync {
    fn id(&self) -> &str;
    fn label(&self) -> Option<usize>;
}

impl RecordingData for MelRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Option<usize> {
        self.label
    }
}

impl RecordingData for FeatureRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Option<usize> {
        self.label
    }
}

/// One classification branch: everything fitted from training recordings
/// and a segment-level predictor.
pub trait Branch: Sync {
    type Data: RecordingData;
    type Model: Send + Sync;

    fn tag(&self) -> &str;
    fn classes(&self) -> usize;
    fn fit(&self, train: &[&Self::Data], seed: u64) -> Result<Self::Model>;
    /// One class distribution per segment.
    fn predict_segments(&self, model: &Self::Model, rec: &Self::Data) -> Result<Vec<Vec<f64>>>;
}

/// Records which recordings a model was fitted on and refuses to score
/// any of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageGuard {
    train: BTreeSet<String>,
    pub digest: String,
}

impl LeakageGuard {
    pub fn new<'a>(train_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let train: BTreeSet<String> = train_ids.into_iter().map(String::from).collect();
        let joined = train.iter().cloned().collect::<Vec<_>>().join("\n");
        LeakageGuard {
            digest: sha256_hex(joined.as_bytes()),
            train,
        }
    }

    pub fn check<'a>(&self, test_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in test_ids {
            if self.train.contains(id) {
                return Err(Error::Leakage(format!("recording {id} is in both the fitting and the scored set")));
            }
        }
        Ok(())
    }
}

fn predict_all<B: Branch>(branch: &B, model: &B::Model, recs: &[&B::Data]) -> Result<Vec<RecordingPrediction>> {
    recs.par_iter()
        .map(|r| {
            let seg = branch.predict_segments(model, r)?;
            aggregate_recording(r.id(), &seg, r.label())
        })
        .collect()
}

fn index_by_id<D: RecordingData>(data: &[D]) -> Result<BTreeMap<&str, usize>> {
    let mut m = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        if m.insert(d.id(), i).is_some() {
            return Err(Error::invalid(format!("duplicate recording id {}", d.id())));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub fold_accuracies: Vec<f64>,
    /// Out-of-fold predictions in input order.
    pub predictions: Vec<RecordingPrediction>,
    /// Digest of each fold's fitting set.
    pub train_digests: Vec<String>,
}

impl CvResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.fold_accuracies.iter().sum::<f64>() / self.fold_accuracies.len() as f64
    }

    pub fn rows(&self, tag: &str) -> Vec<ProbabilityRow> {
        self.predictions.iter().map(|p| p.to_row(tag)).collect()
    }
}

/// Fit on each fold's training recordings and score its test recordings.
/// Every recording must be tested by exactly one fold.
pub fn run_cv<B: Branch>(branch: &B, data: &[B::Data], folds: &[FoldSplit], seed: u64) -> Result<CvResult> {
    let index = index_by_id(data)?;
    let mut covered: BTreeMap<&str, usize> = BTreeMap::new();
    for f in folds {
        for id in &f.test_ids {
            if !index.contains_key(id.as_str()) {
                return Err(Error::invalid(format!("fold {} tests unknown recording {id}", f.fold_index)));
            }
            *covered.entry(id.as_str()).or_default() += 1;
        }
    }
    if covered.len() != data.len() || covered.values().any(|&c| c != 1) {
        return Err(Error::invalid("folds must test every recording exactly once"));
    }

    let mut slots: Vec<Option<RecordingPrediction>> = vec![None; data.len()];
    let mut fold_accuracies = Vec::new();
    let mut train_digests = Vec::new();
    for f in folds {
        let train: Vec<&B::Data> = f
            .train_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &data[i])
                    .ok_or_else(|| Error::invalid(format!("fold {} trains on unknown recording {id}", f.fold_index)))
            })
            .collect::<Result<_>>()?;
        let test: Vec<&B::Data> = f.test_ids.iter().map(|id| &data[index[id.as_str()]]).collect();
        let guard = LeakageGuard::new(train.iter().map(|d| d.id()));
        guard.check(test.iter().map(|d| d.id()))?;
        log::info!("{} fold {}: fitting on {} recordings", branch.tag(), f.fold_index, train.len());
        let model = branch.fit(&train, seed)?;
        let preds = predict_all(branch, &model, &test)?;
        let acc = accuracy(&preds)?;
        log::info!("{} fold {}: accuracy {acc:.4}", branch.tag(), f.fold_index);
        fold_accuracies.push(acc);
        train_digests.push(guard.digest);
        for p in preds {
            let i = index[p.recording_id.as_str()];
            slots[i] = Some(p);
        }
    }
    Ok(CvResult {
        fold_accuracies,
        predictions: slots.into_iter().map(|p| p.expect("covered")).collect(),
        train_digests,
    })
}

pub struct EvalResult<M> {
    pub model: M,
    pub predictions: Vec<RecordingPrediction>,
    /// Present when every evaluation recording is labelled.
    pub accuracy: Option<f64>,
    pub train_digest: String,
}

/// Fit on all development recordings and score the evaluation set.
pub fn run_eval<B: Branch>(branch: &B, dev: &[B::Data], eval: &[B::Data], seed: u64) -> Result<EvalResult<B::Model>> {
    index_by_id(dev)?;
    index_by_id(eval)?;
    let guard = LeakageGuard::new(dev.iter().map(|d| d.id()));
    guard.check(eval.iter().map(|d| d.id()))?;
    let train: Vec<&B::Data> = dev.iter().collect();
    let model = branch.fit(&train, seed)?;
    let test: Vec<&B::Data> = eval.iter().collect();
    let predictions = predict_all(branch, &model, &test)?;
    let accuracy = if predictions.iter().all(|p| p.label.is_some()) && !predictions.is_empty() {
        Some(accuracy(&predictions)?)
    } else {
        None
    };
    Ok(EvalResult {
        model,
        predictions,
        accuracy,
        train_digest: guard.digest,
    })
}

fn labels_of<D: RecordingData>(recs: &[&D]) -> Result<Vec<usize>> {
    recs.iter()
        .map(|r| {
            r.label()
                .ok_or_else(|| Error::invalid(format!("training recording {} has no label", r.id())))
        })
        .collect()
}

/// Hand-crafted features, optional standardization + LDA, then GBM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmBranch {
    pub config: GbmConfig,
    pub lda: Option<LdaOptions>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmBranchModel {
    pub scaler: Option<FeatureScaler>,
    pub lda: Option<LdaModel>,
    pub gbm: GbmModel,
}

impl GbmBranchModel {
    pub fn reduce(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (Some(scaler), Some(lda)) = (&self.scaler, &self.lda) else {
            return Ok(rows.to_vec());
        };
        rows.iter()
            .map(|r| {
                let mut v = r.clone();
                scaler.apply_in_place(&mut v)?;
                lda.transform_row(&v)
            })
            .collect()
    }
}

impl GbmBranch {
    /// Fit from segment rows with their labels.
    pub fn fit_rows(&self, rows: &[Vec<f64>], labels: &[usize]) -> Result<GbmBranchModel> {
        let (scaler, lda, reduced) = match &self.lda {
            Some(opts) => {
                let scaler = fit_feature_scaler(rows.iter().map(Vec::as_slice))?;
                let mut std_rows = rows.to_vec();
                for r in &mut std_rows {
                    scaler.apply_in_place(r)?;
                }
                let lda = fit_lda_with(&std_rows, labels, opts)?;
                let reduced = lda.transform(&std_rows)?;
                (Some(scaler), Some(lda), reduced)
            }
            None => (None, None, rows.to_vec()),
        };
        let binned = bin_features(&reduced, self.config.max_bins)?;
        let gbm = fit_gbm(&binned, labels, self.classes, &self.config)?;
        Ok(GbmBranchModel { scaler, lda, gbm })
    }
}

impl Branch for GbmBranch {
    type Data = FeatureRecord;
    type Model = GbmBranchModel;

    fn tag(&self) -> &str {
        if self.lda.is_some() {
            "gbm_lda"
        } else {
            "gbm"
        }
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn fit(&self, train: &[&FeatureRecord], _seed: u64) -> Result<GbmBranchModel> {
        let labels = labels_of(train)?;
        let mut rows = Vec::new();
        let mut seg_labels = Vec::new();
        for (r, &l) in train.iter().zip(&labels) {
            rows.extend(r.segments.iter().cloned());
            seg_labels.extend(std::iter::repeat_n(l, r.segments.len()));
        }
        self.fit_rows(&rows, &seg_labels)
    }

    fn predict_segments(&self, model: &GbmBranchModel, rec: &FeatureRecord) -> Result<Vec<Vec<f64>>> {
        model.gbm.predict_proba(&model.reduce(&rec.segments)?)
    }
}

/// Log-mel patches through the CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnBranch {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub scaler_scope: ScalerScope,
}

pub struct CnnBranchModel {
    pub scaler: StandardizationScaler,
    pub net: Network<f32>,
}

impl CnnBranchModel {
    pub fn standardized(&self, rec: &MelRecord) -> Result<Vec<Vec<f32>>> {
        rec.patches
            .iter()
            .map(|p| {
                let mut v = p.clone();
                self.scaler.apply_in_place_f32(&mut v)?;
                Ok(v)
            })
            .collect()
    }
}

impl Branch for CnnBranch {
    type Data = MelRecord;
    type Model = CnnBranchModel;

    fn tag(&self) -> &str {
        "cnn"
    }

    fn classes(&self) -> usize {
        self.network.classes
    }

    fn fit(&self, train_recs: &[&MelRecord], seed: u64) -> Result<CnnBranchModel> {
        let labels = labels_of(train_recs)?;
        let scaler = fit_scaler(train_recs.iter().copied(), self.scaler_scope)?;
        let mut patches = Vec::new();
        let mut patch_labels = Vec::new();
        for (r, &l) in train_recs.iter().zip(&labels) {
            for p in &r.patches {
                let mut v = p.clone();
                scaler.apply_in_place_f32(&mut v)?;
                patches.push(v);
                patch_labels.push(l);
            }
        }
        let mut net = build_network::<f32>(&self.network, seed)?;
        let cfg = TrainingConfig {
            seed,
            ..self.training.clone()
        };
        let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
        train(&mut net, &refs, &patch_labels, &cfg, |_| {})?;
        Ok(CnnBranchModel { scaler, net })
    }

    fn predict_segments(&self, model: &CnnBranchModel, rec: &MelRecord) -> Result<Vec<Vec<f64>>> {
        let patches = model.standardized(rec)?;
        let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
        predict_segments(&model.net, &refs)
    }
}
