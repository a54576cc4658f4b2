use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bin_features, fit_gbm, GbmConfig};
use crate::dataset::FoldSplit;
use crate::error::{Error, Result};
use crate::eval::{accuracy, aggregate_recording, LeakageGuard};
use crate::features::{fit_feature_scaler, FeatureRecord};
use crate::lda::{fit_lda_with, LdaOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rate: Vec<f64>,
    pub max_bins: Vec<usize>,
    pub num_leaves: Vec<usize>,
    pub min_data_in_leaf: Vec<usize>,
    /// Reduced dimensions to try; empty means no LDA.
    pub lda_dims: Vec<usize>,
    /// Values for everything the grid does not vary.
    pub base: GbmConfig,
    pub lda: LdaOptions,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            learning_rate: vec![0.01, 0.05, 0.1],
            max_bins: vec![128, 256, 512],
            num_leaves: vec![64, 128, 256],
            min_data_in_leaf: vec![500, 1000, 2000],
            lda_dims: Vec::new(),
            base: GbmConfig::default(),
            lda: LdaOptions::default(),
        }
    }
}

impl GridSpec {
    pub fn with_lda(mut self) -> Self {
        self.lda_dims = vec![64, 128, 256, 512];
        self
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let dims: Vec<Option<usize>> = if self.lda_dims.is_empty() {
            vec![None]
        } else {
            self.lda_dims.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &max_bins in &self.max_bins {
                for &num_leaves in &self.num_leaves {
                    for &min_data_in_leaf in &self.min_data_in_leaf {
                        for &lda_dim in &dims {
                            out.push(GridPoint {
                                config: GbmConfig {
                                    learning_rate,
                                    max_bins,
                                    num_leaves,
                                    min_data_in_leaf,
                                    ..self.base
                                },
                                lda_dim,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub config: GbmConfig,
    pub lda_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub results: Vec<GridResult>,
    pub best: usize,
}

impl GridReport {
    pub fn best(&self) -> &GridResult {
        &self.results[self.best]
    }

    pub fn to_csv(&self) -> String {
        let folds = self.results.first().map_or(0, |r| r.fold_accuracies.len());
        let mut s = String::from("learning_rate,max_bins,num_leaves,min_data_in_leaf,lda_dim");
        for f in 1..=folds {
            let _ = write!(s, ",fold{f}");
        }
        s.push_str(",mean\n");
        for r in &self.results {
            let c = r.point.config;
            let _ = write!(
                s,
                "{},{},{},{},{}",
                c.learning_rate,
                c.max_bins,
                c.num_leaves,
                c.min_data_in_leaf,
                r.point.lda_dim.map(|d| d.to_string()).unwrap_or_default()
            );
            for a in &r.fold_accuracies {
                let _ = write!(s, ",{a}");
            }
            let _ = writeln!(s, ",{}", r.mean);
        }
        s
    }
}

/// Highest mean accuracy; ties go to fewer leaves, then fewer bins, then
/// a lower learning rate.
fn select(results: &[GridResult]) -> usize {
    let key = |r: &GridResult| {
        let c = r.point.config;
        (c.num_leaves, c.max_bins, c.learning_rate, c.min_data_in_leaf, r.point.lda_dim)
    };
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        let better = r.mean > b.mean
            || (r.mean == b.mean && key(r).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less));
        if better {
            best = i;
        }
    }
    best
}

struct FoldData {
    train_rows: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    /// Per test recording: id, label, its segment rows.
    test: Vec<(String, Option<usize>, Vec<Vec<f64>>)>,
}

fn segment_rows(recs: &[&FeatureRecord]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in recs {
        let l = r
            .label
            .ok_or_else(|| Error::invalid(format!("training recording {} has no label", r.id)))?;
        rows.extend(r.segments.iter().cloned());
        labels.extend(std::iter::repeat_n(l, r.segments.len()));
    }
    Ok((rows, labels))
}

fn prepare(train: &[&FeatureRecord], test: &[&FeatureRecord], lda: Option<LdaOptions>) -> Result<FoldData> {
    let (rows, labels) = segment_rows(train)?;
    let Some(opts) = lda else {
        return Ok(FoldData {
            train_rows: rows,
            train_labels: labels,
            test: test.iter().map(|r| (r.id.clone(), r.label, r.segments.clone())).collect(),
        });
    };
    let scaler = fit_feature_scaler(rows.iter().map(Vec::as_slice))?;
    let standardize = |r: &Vec<f64>| -> Result<Vec<f64>> {
        let mut v = r.clone();
        scaler.apply_in_place(&mut v)?;
        Ok(v)
    };
    let std_rows = rows.iter().map(standardize).collect::<Result<Vec<_>>>()?;
    let model = fit_lda_with(&std_rows, &labels, &opts)?;
    let reduce = |segs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        segs.iter().map(|s| model.transform_row(&standardize(s)?)).collect()
    };
    Ok(FoldData {
        train_rows: model.transform(&std_rows)?,
        train_labels: labels,
        test: test
            .iter()
            .map(|r| Ok((r.id.clone(), r.label, reduce(&r.segments)?)))
            .collect::<Result<_>>()?,
    })
}

/// Evaluate every grid point by fold-wise recording accuracy.
pub fn grid_search(data: &[FeatureRecord], folds: &[FoldSplit], spec: &GridSpec, classes: usize) -> Result<GridReport> {
    let points = spec.points();
    if points.is_empty() {
        return Err(Error::Config("grid search needs at least one value per hyperparameter".into()));
    }
    let by_id: BTreeMap<&str, &FeatureRecord> = data.iter().map(|r| (r.id.as_str(), r)).collect();
    let pick = |ids: &std::collections::BTreeSet<String>| -> Result<Vec<&FeatureRecord>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("fold refers to unknown recording {id}")))
            })
            .collect()
    };
    let dims: Vec<Option<usize>> = if spec.lda_dims.is_empty() {
        vec![None]
    } else {
        spec.lda_dims.iter().copied().map(Some).collect()
    };

    // fold x dim
    let mut prepared: Vec<BTreeMap<Option<usize>, FoldData>> = Vec::new();
    for f in folds {
        let train = pick(&f.train_ids)?;
        let test = pick(&f.test_ids)?;
        LeakageGuard::new(train.iter().map(|r| r.id.as_str())).check(test.iter().map(|r| r.id.as_str()))?;
        let mut per_dim = BTreeMap::new();
        for &d in &dims {
            let opts = d.map(|dim| LdaOptions { dim, ..spec.lda });
            per_dim.insert(d, prepare(&train, &test, opts)?);
        }
        prepared.push(per_dim);
    }

    let results = points
        .par_iter()
        .map(|p| {
            let mut fold_accuracies = Vec::with_capacity(folds.len());
            for fd in &prepared {
                let d = &fd[&p.lda_dim];
                let binned = bin_features(&d.train_rows, p.config.max_bins)?;
                let model = fit_gbm(&binned, &d.train_labels, classes, &p.config)?;
                let preds = d
                    .test
                    .iter()
                    .map(|(id, label, segs)| aggregate_recording(id, &model.predict_proba(segs)?, *label))
                    .collect::<Result<Vec<_>>>()?;
                fold_accuracies.push(accuracy(&preds)?);
            }
            let mean = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len().max(1) as f64;
            log::info!("grid {:?} lda {:?}: {mean:.4}", p.config, p.lda_dim);
            Ok(GridResult {
                point: *p,
                fold_accuracies,
                mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select(&results);
    Ok(GridReport { results, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(GridSpec::default().points().len(), 81);
        assert_eq!(GridSpec::default().with_lda().points().len(), 324);
    }

    fn result(lr: f64, bins: usize, leaves: usize, mean: f64) -> GridResult {
        GridResult {
            point: GridPoint {
                config: GbmConfig {
                    learning_rate: lr,
                    max_bins: bins,
                    num_leaves: leaves,
                    ..GbmConfig::default()
                },
                lda_dim: None,
            },
            fold_accuracies: vec![mean],
            mean,
        }
    }

    #[test]
    fn ties_prefer_simpler_models() {
        let r = vec![
            result(0.1, 128, 128, 0.8),
            result(0.05, 256, 64, 0.8),
            result(0.01, 128, 64, 0.8),
            result(0.05, 128, 64, 0.8),
            result(0.1, 512, 256, 0.7),
        ];
        assert_eq!(select(&r), 2);
        let r = vec![result(0.1, 512, 256, 0.7), result(0.1, 512, 256, 0.9)];
        assert_eq!(select(&r), 1);
    }

    #[test]
    fn single_point_grid() {
        let data: Vec<FeatureRecord> = (0..12)
            .map(|i| FeatureRecord {
                id: format!("r{i}"),
                label: Some(i % 2),
                segments: (0..7).map(|s| vec![(i % 2) as f64 + 0.1 * s as f64]).collect(),
            })
            .collect();
        let folds: Vec<FoldSplit> = (0..3)
            .map(|f| FoldSplit {
                fold_index: f + 1,
                test_ids: (0..12).filter(|i| i % 3 == f).map(|i| format!("r{i}")).collect(),
                train_ids: (0..12).filter(|i| i % 3 != f).map(|i| format!("r{i}")).collect(),
            })
            .collect();
        let spec = GridSpec {
            learning_rate: vec![0.2],
            max_bins: vec![16],
            num_leaves: vec![4],
            min_data_in_leaf: vec![3],
            base: GbmConfig {
                num_rounds: 5,
                ..GbmConfig::default()
            },
            ..GridSpec::default()
        };
        let rep = grid_search(&data, &folds, &spec, 2).unwrap();
        assert_eq!(rep.results.len(), 1);
        assert_eq!(rep.best, 0);
        assert_eq!(rep.best().mean, 1.0);
        let csv = rep.to_csv();
        assert!(csv.starts_with("learning_rate,max_bins,num_leaves,min_data_in_leaf,lda_dim,fold1,fold2,fold3,mean\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
