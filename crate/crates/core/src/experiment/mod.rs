//! Config-driven experiment stages. Each stage reads the artifacts of the
//! stages before it from the output directory and returns the files it
//! wrote.

mod config;

pub use config::{
    valid_keys, CnnSection, DatasetSection, EvalMode, EvaluationSection, ExperimentConfig, FusionSection, GridSection,
    LdaSection, SyntheticSection,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_file, sha256_hex};
use crate::dataset::{
    generate_synthetic_dataset, load_fold_files, load_manifest, load_manifest_with_classes, load_recording, make_folds,
    write_fold_files, DatasetManifest, FoldSplit, SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    confusion_diff_predictions, diff_to_csv, run_cv, run_eval, trial_statistics, Branch, CnnBranch, CnnBranchModel,
    GbmBranch, GbmBranchModel, MetricsReport, RecordingPrediction,
};
use crate::features::{read_feature_cache, write_feature_cache, FeatureExtractor, FeatureRecord, FeatureScaler};
use crate::frontend::{read_mel_cache, write_mel_cache, Frontend, MelRecord, StandardizationScaler};
use crate::fusion::{
    align, fit_meta_learner, fuse_simple, read_probability_csv, write_probability_csv, FusionMethod, ProbabilityRow,
};
use crate::gbm::{grid_search, GbmModel};
use crate::lda::LdaModel;
use crate::nn::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Cnn,
    Gbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// What a stage ran with and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: String,
    pub outputs: Vec<OutputFile>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = PathBuf::from(&config.output_dir);
        Ok(Experiment { config, out })
    }

    fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                producer: producer.to_string(),
            })
        }
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.out.join("synthetic")
    }

    fn manifest_path(&self, split: Split) -> Option<PathBuf> {
        let configured = match split {
            Split::Dev => &self.config.dataset.dev_manifest,
            Split::Eval => &self.config.dataset.eval_manifest,
        };
        if !configured.is_empty() {
            return Some(PathBuf::from(configured));
        }
        let synthetic = self.synthetic_dir().join(format!("{}.txt", split.name()));
        (split == Split::Dev || self.config.dataset.synthetic.eval_recordings_per_class > 0).then_some(synthetic)
    }

    pub fn manifest(&self, split: Split) -> Result<DatasetManifest> {
        let path = self
            .manifest_path(split)
            .ok_or_else(|| Error::Config("no evaluation manifest configured (dataset.eval_manifest)".into()))?;
        let path = self.require(path, "scenefuse gen-synthetic")?;
        match split {
            Split::Dev => load_manifest(&path),
            Split::Eval => load_manifest_with_classes(&path, &self.manifest(Split::Dev)?.class_names),
        }
    }

    fn has_eval(&self) -> bool {
        self.manifest_path(Split::Eval).is_some()
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.manifest(Split::Dev)?.class_names.len())
    }

    /// Write the synthetic corpus with `dev.txt` and, when requested,
    /// `eval.txt` manifests over disjoint recordings.
    pub fn gen_synthetic(&self) -> Result<Vec<PathBuf>> {
        let s = &self.config.dataset.synthetic;
        let per_class = s.recordings_per_class + s.eval_recordings_per_class;
        let spec = SyntheticSceneSpec::new(s.n_classes, per_class, s.duration_s, s.seed);
        let dir = self.synthetic_dir();
        let all = generate_synthetic_dataset(&spec, &dir)?;
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut dev = all.clone();
        let mut eval = all.clone();
        dev.entries.clear();
        eval.entries.clear();
        for e in &all.entries {
            let n = seen.entry(e.label.as_str()).or_default();
            if *n < s.recordings_per_class {
                dev.entries.push(e.clone());
            } else {
                eval.entries.push(e.clone());
            }
            *n += 1;
        }
        let mut outputs = vec![dir.join("meta.txt"), dir.join("dev.txt")];
        dev.write(&outputs[1])?;
        if s.eval_recordings_per_class > 0 {
            outputs.push(dir.join("eval.txt"));
            eval.write(&outputs[2])?;
        }
        outputs.extend(all.entries.iter().map(|e| all.resolve(e)));
        Ok(outputs)
    }

    fn cache_path(&self, kind: &str, split: Split) -> PathBuf {
        self.out.join("cache").join(format!("{}_{kind}.bin", split.name()))
    }

    fn splits(&self) -> Vec<Split> {
        if self.has_eval() {
            vec![Split::Dev, Split::Eval]
        } else {
            vec![Split::Dev]
        }
    }

    fn load_split<T: Send>(
        &self,
        split: Split,
        f: impl Fn(crate::dataset::Recording) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let m = self.manifest(split)?;
        let labels = m.labels()?;
        m.entries
            .par_iter()
            .zip(labels.par_iter())
            .map(|(e, &l)| {
                let mut rec = load_recording(&m.resolve(e))?;
                rec.id = e.audio_path.clone();
                rec.label = Some(l);
                f(rec)
            })
            .collect()
    }

    pub fn extract_mel(&self) -> Result<Vec<PathBuf>> {
        let fe = Frontend::new(self.config.frontend.clone())?;
        let mut outputs = Vec::new();
        for split in self.splits() {
            let records = self.load_split(split, |r| fe.mel_record(&r))?;
            let path = self.cache_path("mel", split);
            ensure_parent(&path)?;
            write_mel_cache(&path, &records)?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    pub fn extract_features(&self) -> Result<Vec<PathBuf>> {
        let fx = FeatureExtractor::new(self.config.frontend.stft)?;
        let mut outputs = Vec::new();
        for split in self.splits() {
            let records = self.load_split(split, |r| {
                let segments = fx.segment_features(&r)?.into_iter().map(|s| s.values).collect();
                Ok(FeatureRecord {
                    id: r.id,
                    label: r.label,
                    segments,
                })
            })?;
            let path = self.cache_path("features", split);
            ensure_parent(&path)?;
            write_feature_cache(&path, &records)?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    pub fn mel_records(&self, split: Split) -> Result<Vec<MelRecord>> {
        read_mel_cache(&self.require(self.cache_path("mel", split), "scenefuse extract mel")?)
    }

    pub fn feature_records(&self, split: Split) -> Result<Vec<FeatureRecord>> {
        read_feature_cache(&self.require(self.cache_path("features", split), "scenefuse extract features")?)
    }

    /// Configured folds, written under `folds/` on first use.
    pub fn folds(&self) -> Result<Vec<FoldSplit>> {
        let d = &self.config.dataset;
        if !d.fold_dir.is_empty() {
            return load_fold_files(Path::new(&d.fold_dir), d.folds);
        }
        let m = self.manifest(Split::Dev)?;
        let folds = make_folds(&m, d.folds, d.fold_seed)?;
        write_fold_files(&self.out.join("folds"), &m, &folds)?;
        Ok(folds)
    }

    pub fn cnn_branch(&self) -> Result<CnnBranch> {
        Ok(CnnBranch {
            network: self.config.cnn.network(self.classes()?, self.config.frontend.n_mels)?,
            training: self.config.cnn.training.clone(),
            scaler_scope: self.config.frontend.scaler_scope,
        })
    }

    pub fn gbm_branch(&self) -> Result<GbmBranch> {
        Ok(GbmBranch {
            config: self.config.gbm,
            lda: self.config.lda.options(),
            classes: self.classes()?,
        })
    }

    pub fn tag(&self, branch: BranchKind) -> &'static str {
        match branch {
            BranchKind::Cnn => "cnn",
            BranchKind::Gbm if self.config.lda.enabled => "gbm_lda",
            BranchKind::Gbm => "gbm",
        }
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.out.join("models").join(name)
    }

    /// Fit a branch on the whole development set and save it.
    pub fn train(&self, branch: BranchKind) -> Result<Vec<PathBuf>> {
        let seed = self.config.evaluation.seed;
        match branch {
            BranchKind::Cnn => {
                let b = self.cnn_branch()?;
                let data = self.mel_records(Split::Dev)?;
                let refs: Vec<&MelRecord> = data.iter().collect();
                let model = b.fit(&refs, seed)?;
                self.save_cnn(&model)
            }
            BranchKind::Gbm => {
                let b = self.gbm_branch()?;
                let data = self.feature_records(Split::Dev)?;
                let refs: Vec<&FeatureRecord> = data.iter().collect();
                let model = b.fit(&refs, seed)?;
                self.save_gbm(&model)
            }
        }
    }

    fn save_cnn(&self, m: &CnnBranchModel) -> Result<Vec<PathBuf>> {
        let scaler_path = self.model_path("cnn_scaler.json");
        let json = to_json(&m.scaler)?;
        write_file(&scaler_path, &json)?;
        let ckpt = self.model_path("cnn.ckpt");
        save_checkpoint(&ckpt, &m.net, &sha256_hex(json.as_bytes()))?;
        Ok(vec![scaler_path, ckpt])
    }

    fn load_cnn(&self) -> Result<CnnBranchModel> {
        let ckpt = self.require(self.model_path("cnn.ckpt"), "scenefuse train cnn")?;
        let scaler_path = self.require(self.model_path("cnn_scaler.json"), "scenefuse train cnn")?;
        let (net, hash) = load_checkpoint(&ckpt)?;
        if sha256_file(&scaler_path)? != hash {
            return Err(Error::Format("cnn checkpoint was saved with a different scaler".into()));
        }
        let scaler: StandardizationScaler = from_json(&scaler_path)?;
        Ok(CnnBranchModel { scaler, net })
    }

    fn save_gbm(&self, m: &GbmBranchModel) -> Result<Vec<PathBuf>> {
        let tag = self.tag(BranchKind::Gbm);
        let path = self.model_path(&format!("{tag}.json"));
        ensure_parent(&path)?;
        m.gbm.save(&path)?;
        let mut out = vec![path];
        if let (Some(scaler), Some(lda)) = (&m.scaler, &m.lda) {
            let p = self.model_path(&format!("{tag}_scaler.json"));
            write_file(&p, to_json(scaler)?)?;
            out.push(p);
            let p = self.model_path(&format!("{tag}_lda.bin"));
            lda.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    fn load_gbm(&self) -> Result<GbmBranchModel> {
        let tag = self.tag(BranchKind::Gbm);
        let producer = "scenefuse train gbm";
        let gbm = GbmModel::load(&self.require(self.model_path(&format!("{tag}.json")), producer)?)?;
        if !self.config.lda.enabled {
            return Ok(GbmBranchModel {
                scaler: None,
                lda: None,
                gbm,
            });
        }
        let scaler: FeatureScaler = from_json(&self.require(self.model_path(&format!("{tag}_scaler.json")), producer)?)?;
        let lda = LdaModel::load(&self.require(self.model_path(&format!("{tag}_lda.bin")), producer)?)?;
        Ok(GbmBranchModel {
            scaler: Some(scaler),
            lda: Some(lda),
            gbm,
        })
    }

    /// Grid search over the configured GBM hyperparameters with the
    /// development folds.
    pub fn grid_search(&self) -> Result<Vec<PathBuf>> {
        let data = self.feature_records(Split::Dev)?;
        let folds = self.folds()?;
        let report = grid_search(&data, &folds, &self.config.grid_spec(), self.classes()?)?;
        let best = report.best();
        log::info!("best grid point {:?} lda {:?}: {:.4}", best.point.config, best.point.lda_dim, best.mean);
        let csv = self.out.join("grid").join("gbm_grid.csv");
        write_file(&csv, report.to_csv())?;
        let json = self.out.join("grid").join("gbm_best.json");
        write_file(&json, to_json(best)? + "\n")?;
        Ok(vec![csv, json])
    }

    fn predictions_path(&self, tag: &str, split: Split) -> PathBuf {
        self.out.join("predictions").join(format!("{tag}_{}.csv", split.name()))
    }

    fn write_predictions(&self, tag: &str, split: Split, preds: &[RecordingPrediction]) -> Result<PathBuf> {
        let path = self.predictions_path(tag, split);
        ensure_parent(&path)?;
        let rows: Vec<ProbabilityRow> = preds.iter().map(|p| p.to_row(tag)).collect();
        write_probability_csv(&path, &rows)?;
        Ok(path)
    }

    fn cv_branch<B: Branch>(&self, b: &B, data: &[B::Data], seed: u64) -> Result<(Vec<f64>, Vec<RecordingPrediction>)> {
        let r = run_cv(b, data, &self.folds()?, seed)?;
        Ok((r.fold_accuracies, r.predictions))
    }

    fn cv(&self, branch: BranchKind, seed: u64) -> Result<(Vec<f64>, Vec<RecordingPrediction>)> {
        match branch {
            BranchKind::Cnn => self.cv_branch(&self.cnn_branch()?, &self.mel_records(Split::Dev)?, seed),
            BranchKind::Gbm => self.cv_branch(&self.gbm_branch()?, &self.feature_records(Split::Dev)?, seed),
        }
    }

    fn eval_branch(&self, branch: BranchKind, seed: u64) -> Result<Vec<RecordingPrediction>> {
        match branch {
            BranchKind::Cnn => {
                let r = run_eval(&self.cnn_branch()?, &self.mel_records(Split::Dev)?, &self.mel_records(Split::Eval)?, seed)?;
                Ok(r.predictions)
            }
            BranchKind::Gbm => {
                let dev = self.feature_records(Split::Dev)?;
                let eval = self.feature_records(Split::Eval)?;
                Ok(run_eval(&self.gbm_branch()?, &dev, &eval, seed)?.predictions)
            }
        }
    }

    /// Dev: out-of-fold probabilities over the folds. Eval: score the
    /// evaluation set with the model saved by `train`.
    pub fn predict(&self, branch: BranchKind, split: Split) -> Result<Vec<PathBuf>> {
        let tag = self.tag(branch);
        let preds = match split {
            Split::Dev => self.cv(branch, self.config.evaluation.seed)?.1,
            Split::Eval => match branch {
                BranchKind::Cnn => {
                    let b = self.cnn_branch()?;
                    let m = self.load_cnn()?;
                    score(&b, &m, &self.mel_records(Split::Eval)?)?
                }
                BranchKind::Gbm => {
                    let b = self.gbm_branch()?;
                    let m = self.load_gbm()?;
                    score(&b, &m, &self.feature_records(Split::Eval)?)?
                }
            },
        };
        Ok(vec![self.write_predictions(tag, split, &preds)?])
    }

    fn write_metrics(&self, stem: &str, report: &MetricsReport) -> Result<Vec<PathBuf>> {
        let dir = self.out.join("metrics");
        report.write(&dir, stem)?;
        Ok(vec![dir.join(format!("{stem}.json")), dir.join(format!("{stem}_confusion.csv"))])
    }

    /// Run the configured evaluation mode for one branch over
    /// `evaluation.n_trials` seeds. Predictions of the first trial are kept.
    pub fn evaluate(&self, branch: BranchKind, mode: EvalMode) -> Result<Vec<PathBuf>> {
        let tag = self.tag(branch);
        let classes = self.classes()?;
        let ev = &self.config.evaluation;
        let mut first: Option<(Vec<f64>, Vec<RecordingPrediction>)> = None;
        let mut accs = Vec::with_capacity(ev.n_trials);
        for t in 0..ev.n_trials {
            let seed = ev.seed + t as u64;
            let (folds, preds) = match mode {
                EvalMode::Cv => self.cv(branch, seed)?,
                EvalMode::Eval => (Vec::new(), self.eval_branch(branch, seed)?),
            };
            let report = MetricsReport::new(tag, &preds, classes, folds.clone())?;
            accs.push(report.headline());
            log::info!("{tag} trial {t}: {:.4}", report.headline());
            if first.is_none() {
                first = Some((folds, preds));
            }
        }
        let (folds, preds) = first.expect("at least one trial");
        let split = match mode {
            EvalMode::Cv => Split::Dev,
            EvalMode::Eval => Split::Eval,
        };
        let mut report = MetricsReport::new(tag, &preds, classes, folds)?;
        report.trials = Some(trial_statistics(&accs)?);
        let mut out = vec![self.write_predictions(tag, split, &preds)?];
        out.extend(self.write_metrics(&format!("{tag}_{}", split.name()), &report)?);
        Ok(out)
    }

    fn branch_rows(&self, branch: BranchKind, split: Split) -> Result<Vec<ProbabilityRow>> {
        let producer = format!(
            "scenefuse predict {} --split {}",
            match branch {
                BranchKind::Cnn => "cnn",
                BranchKind::Gbm => "gbm",
            },
            split.name()
        );
        read_probability_csv(&self.require(self.predictions_path(self.tag(branch), split), &producer)?)
    }

    /// Fuse the two branches' recording probabilities. Stacking on the
    /// development set fits the meta learner fold by fold on out-of-fold
    /// rows; on the evaluation set it is fitted on all development rows.
    pub fn fuse(&self, method: FusionMethod, split: Split) -> Result<Vec<PathBuf>> {
        let cnn = self.branch_rows(BranchKind::Cnn, split)?;
        let gbm = self.branch_rows(BranchKind::Gbm, split)?;
        let seed = self.config.evaluation.seed;
        let preds: Vec<RecordingPrediction> = match method.simple() {
            Some(m) => align(&cnn, &gbm)?
                .into_iter()
                .map(|(a, b)| {
                    let (fused, _) = fuse_simple(m, &a.distribution(), &b.distribution())?;
                    Ok(RecordingPrediction::from_probs(&a.recording_id, fused.probs, a.label))
                })
                .collect::<Result<_>>()?,
            None => match split {
                Split::Eval => {
                    let meta = fit_meta_learner(
                        &self.config.fusion.meta,
                        &self.branch_rows(BranchKind::Cnn, Split::Dev)?,
                        &self.branch_rows(BranchKind::Gbm, Split::Dev)?,
                        seed,
                    )?;
                    let meta_path = self.model_path("meta.json");
                    ensure_parent(&meta_path)?;
                    meta.save(&meta_path)?;
                    stacked(&meta, &cnn, &gbm)?
                }
                Split::Dev => {
                    let mut by_id: BTreeMap<String, RecordingPrediction> = BTreeMap::new();
                    for f in self.folds()? {
                        let part = |rows: &[ProbabilityRow], ids: &std::collections::BTreeSet<String>| {
                            rows.iter()
                                .filter(|r| ids.contains(&r.recording_id))
                                .cloned()
                                .collect::<Vec<_>>()
                        };
                        let meta = fit_meta_learner(
                            &self.config.fusion.meta,
                            &part(&cnn, &f.train_ids),
                            &part(&gbm, &f.train_ids),
                            seed,
                        )?;
                        for p in stacked(&meta, &part(&cnn, &f.test_ids), &part(&gbm, &f.test_ids))? {
                            by_id.insert(p.recording_id.clone(), p);
                        }
                    }
                    // keep the CNN file's row order
                    cnn.iter()
                        .map(|r| {
                            by_id.remove(&r.recording_id).ok_or_else(|| {
                                Error::invalid(format!("recording {} is in no test fold", r.recording_id))
                            })
                        })
                        .collect::<Result<_>>()?
                }
            },
        };
        let tag = format!("fused_{}", method.name());
        let mut out = vec![self.write_predictions(&tag, split, &preds)?];
        if preds.iter().all(|p| p.label.is_some()) {
            let report = MetricsReport::new(&tag, &preds, self.classes()?, Vec::new())?;
            out.extend(self.write_metrics(&format!("{tag}_{}", split.name()), &report)?);
        }
        Ok(out)
    }

    /// Summary of all metric files plus CNN-minus-GBM confusion
    /// differences where both branches have predictions.
    pub fn report(&self) -> Result<(String, Vec<PathBuf>)> {
        let dir = self.out.join("metrics");
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(_) => Vec::new(),
        };
        if files.is_empty() {
            return Err(Error::MissingArtifact {
                path: dir,
                producer: "scenefuse evaluate".into(),
            });
        }
        files.sort();
        let mut text = String::from("stem,model_tag,recordings,accuracy,fold_mean_accuracy,trial_mean,trial_half_width\n");
        for f in &files {
            let r: MetricsReport = from_json(f)?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            text.push_str(&format!(
                "{stem},{},{},{:.6},{},{},{}\n",
                r.model_tag,
                r.recordings,
                r.accuracy,
                opt(r.fold_mean_accuracy),
                opt(r.trials.as_ref().map(|t| t.mean)),
                opt(r.trials.as_ref().map(|t| t.half_width)),
            ));
        }
        let summary = dir.join("summary.csv");
        write_file(&summary, &text)?;
        let mut out = vec![summary];
        for split in [Split::Dev, Split::Eval] {
            let a = self.predictions_path(self.tag(BranchKind::Cnn), split);
            let b = self.predictions_path(self.tag(BranchKind::Gbm), split);
            if !(a.exists() && b.exists()) {
                continue;
            }
            let load = |p: &Path| -> Result<Vec<RecordingPrediction>> {
                Ok(read_probability_csv(p)?.iter().map(RecordingPrediction::from_row).collect())
            };
            let diff = confusion_diff_predictions(&load(&a)?, &load(&b)?, self.classes()?)?;
            let p = dir.join(format!("confusion_diff_{}.csv", split.name()));
            write_file(&p, diff_to_csv(&diff))?;
            out.push(p);
        }
        Ok((text, out))
    }

    /// Record a finished stage under `manifests/<command>.json`.
    pub fn write_run_manifest(&self, command: &str, threads: usize, outputs: &[PathBuf]) -> Result<PathBuf> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.evaluation.seed,
            threads,
            config: self.config.to_toml(),
            outputs,
        };
        let name = command.replace(' ', "_").replace("--", "").replace('/', "_");
        let path = self.out.join("manifests").join(format!("{name}.json"));
        write_file(&path, to_json(&m)? + "\n")?;
        Ok(path)
    }
}

fn score<B: Branch>(b: &B, m: &B::Model, data: &[B::Data]) -> Result<Vec<RecordingPrediction>> {
    use crate::eval::{aggregate_recording, RecordingData};
    data.par_iter()
        .map(|r| aggregate_recording(r.id(), &b.predict_segments(m, r)?, r.label()))
        .collect()
}

fn stacked(
    meta: &crate::fusion::MetaLearner,
    cnn: &[ProbabilityRow],
    gbm: &[ProbabilityRow],
) -> Result<Vec<RecordingPrediction>> {
    align(cnn, gbm)?
        .into_iter()
        .map(|(a, b)| Ok(RecordingPrediction::from_probs(&a.recording_id, meta.distribution(&a.probs, &b.probs)?, a.label)))
        .collect()
}
