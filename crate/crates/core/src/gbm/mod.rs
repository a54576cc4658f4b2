//! Histogram gradient boosted trees with a multiclass softmax objective.

mod binning;
mod grid;
mod tree;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use binning::{bin_features, BinMapper, BinnedDataset};
pub use grid::{grid_search, GridPoint, GridReport, GridResult, GridSpec};
pub use tree::{grow_tree, leaf_score, leaf_value, min_gain, pick_best, Candidate, GrowParams, Node, SplitEvent, Tree, TIE_TOLERANCE};

use crate::error::{Error, Result};

const FORMAT: &str = "scenefuse-gbm";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmConfig {
    pub learning_rate: f64,
    pub max_bins: usize,
    pub num_leaves: usize,
    pub min_data_in_leaf: usize,
    pub num_rounds: usize,
    pub lambda_l2: f64,
    pub min_sum_hessian: f64,
    /// Stop when the validation loss has not improved for this many
    /// rounds. Zero disables it; only used when a validation set is given.
    pub early_stopping_rounds: usize,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            learning_rate: 0.05,
            max_bins: 128,
            num_leaves: 128,
            min_data_in_leaf: 500,
            num_rounds: 100,
            lambda_l2: 0.0,
            min_sum_hessian: 1e-3,
            early_stopping_rounds: 0,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gbm: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_bins < 2 || self.max_bins > u16::MAX as usize {
            return bad("max_bins must be in 2..=65535");
        }
        if self.num_leaves == 0 || self.min_data_in_leaf == 0 {
            return bad("num_leaves and min_data_in_leaf must be positive");
        }
        if !(self.lambda_l2 >= 0.0) || !(self.min_sum_hessian >= 0.0) {
            return bad("lambda_l2 and min_sum_hessian must be non-negative");
        }
        Ok(())
    }

    pub fn grow_params(&self) -> GrowParams {
        GrowParams {
            num_leaves: self.num_leaves,
            min_data_in_leaf: self.min_data_in_leaf,
            lambda_l2: self.lambda_l2,
            min_sum_hessian: self.min_sum_hessian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub format: String,
    pub version: u32,
    pub config: GbmConfig,
    pub n_classes: usize,
    pub n_features: usize,
    pub base_scores: Vec<f64>,
    pub mappers: Vec<BinMapper>,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    /// Training log-loss before the first round and after every round.
    pub train_loss: Vec<f64>,
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Mean multiclass log-loss of raw scores (`n x k`, row-major).
pub fn log_loss(scores: &[f64], labels: &[usize], k: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = &scores[i * k..(i + 1) * k];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum();
    total / labels.len() as f64
}

fn class_counts(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::Label { label: y.to_string() });
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no training samples")));
    }
    Ok(counts)
}

pub fn fit_gbm(data: &BinnedDataset, labels: &[usize], n_classes: usize, config: &GbmConfig) -> Result<GbmModel> {
    fit_gbm_validated(data, labels, n_classes, config, None)
}

/// `fit_gbm` with an optional validation set (raw rows and labels) for
/// round-level early stopping.
pub fn fit_gbm_validated(
    data: &BinnedDataset,
    labels: &[usize],
    n_classes: usize,
    config: &GbmConfig,
    valid: Option<(&[Vec<f64>], &[usize])>,
) -> Result<GbmModel> {
    config.validate()?;
    let n = data.n;
    let k = n_classes;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
    }
    let counts = class_counts(labels, k)?;
    let base_scores: Vec<f64> = counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
    let mut model = GbmModel {
        format: FORMAT.into(),
        version: VERSION,
        config: *config,
        n_classes: k,
        n_features: data.features(),
        base_scores: base_scores.clone(),
        mappers: data.mappers.clone(),
        trees: Vec::new(),
        train_loss: Vec::new(),
    };

    let mut scores: Vec<f64> = (0..n).flat_map(|_| base_scores.iter().copied()).collect();
    let rows: Vec<usize> = (0..n).collect();
    let params = config.grow_params();
    let lr = config.learning_rate;
    model.train_loss.push(log_loss(&scores, labels, k));

    let stopping = config.early_stopping_rounds > 0 && valid.is_some();
    let mut val_scores = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    if let Some((vx, vy)) = valid.filter(|_| stopping) {
        if let Some(&y) = vy.iter().find(|&&y| y >= k) {
            return Err(Error::Label { label: y.to_string() });
        }
        val_scores = vx.iter().flat_map(|_| base_scores.iter().copied()).collect();
        best = (log_loss(&val_scores, vy, k), 0);
    }

    for round in 0..config.num_rounds {
        let mut probs = scores.clone();
        probs.chunks_mut(k).for_each(softmax_in_place);
        let trees: Vec<Tree> = (0..k)
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; n];
                let mut h = vec![0.0; n];
                for i in 0..n {
                    let p = probs[i * k + c];
                    g[i] = p - if labels[i] == c { 1.0 } else { 0.0 };
                    h[i] = p * (1.0 - p);
                }
                grow_tree(data, &g, &h, &rows, params, None)
            })
            .collect();
        for (c, t) in trees.iter().enumerate() {
            for i in 0..n {
                scores[i * k + c] += lr * t.predict_binned(data, i);
            }
        }
        let loss = log_loss(&scores, labels, k);
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: "gbm".into(),
                message: format!("training loss became {loss} at round {}", round + 1),
            });
        }
        model.train_loss.push(loss);

        if let Some((vx, vy)) = valid.filter(|_| stopping) {
            for (i, x) in vx.iter().enumerate() {
                for (c, t) in trees.iter().enumerate() {
                    val_scores[i * k + c] += lr * t.predict(x);
                }
            }
            let vl = log_loss(&val_scores, vy, k);
            model.trees.push(trees);
            if vl < best.0 {
                best = (vl, round + 1);
            } else if round + 1 - best.1 >= config.early_stopping_rounds {
                break;
            }
        } else {
            model.trees.push(trees);
        }
    }
    if stopping {
        model.trees.truncate(best.1);
        model.train_loss.truncate(best.1 + 1);
    }
    Ok(model)
}

impl GbmModel {
    pub fn raw_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::shape(format!("model expects {} features, got {}", self.n_features, x.len())));
        }
        let lr = self.config.learning_rate;
        let mut z = self.base_scores.clone();
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                z[c] += lr * t.predict(x);
            }
        }
        Ok(z)
    }

    pub fn predict_proba_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.raw_scores(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.par_iter().map(|r| self.predict_proba_row(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: GbmModel = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!("{} is not a version {VERSION} GBM model", path.display())));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over every (feature, bin) with sums taken directly
    /// from the rows.
    fn oracle(data: &BinnedDataset, g: &[f64], h: &[f64], rows: &[usize], p: GrowParams) -> Option<Candidate> {
        let gp: f64 = rows.iter().map(|&i| g[i]).sum();
        let hp: f64 = rows.iter().map(|&i| h[i]).sum();
        let parent = leaf_score(gp, hp, p.lambda_l2);
        let mut cands = Vec::new();
        for f in 0..data.features() {
            let col = data.column(f);
            for b in 0..data.mappers[f].bins() - 1 {
                let left: Vec<usize> = rows.iter().copied().filter(|&i| col[i] as usize <= b).collect();
                let right: Vec<usize> = rows.iter().copied().filter(|&i| col[i] as usize > b).collect();
                if left.len() < p.min_data_in_leaf || right.len() < p.min_data_in_leaf {
                    continue;
                }
                let (gl, hl): (f64, f64) = (left.iter().map(|&i| g[i]).sum(), left.iter().map(|&i| h[i]).sum());
                let (gr, hr): (f64, f64) = (right.iter().map(|&i| g[i]).sum(), right.iter().map(|&i| h[i]).sum());
                if hl < p.min_sum_hessian || hr < p.min_sum_hessian {
                    continue;
                }
                let gain = leaf_score(gl, hl, p.lambda_l2) + leaf_score(gr, hr, p.lambda_l2) - parent;
                if gain > min_gain(parent) {
                    cands.push(Candidate { feature: f, bin: b as u16, gain });
                }
            }
        }
        pick_best(&cands)
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (BinnedDataset, Vec<f64>, Vec<f64>, GrowParams) {
        let n = rng.gen_range(20..=200);
        let f = rng.gen_range(1..=5);
        let max_bins = rng.gen_range(2..=16);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| (rng.gen_range(0..40) as f64) * 0.25).collect())
            .collect();
        let data = bin_features(&rows, max_bins).unwrap();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let g: Vec<f64> = p.iter().map(|&p| p - if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let h: Vec<f64> = p.iter().map(|&p| p * (1.0 - p)).collect();
        let params = GrowParams {
            num_leaves: rng.gen_range(2..=12),
            min_data_in_leaf: rng.gen_range(1..=15),
            lambda_l2: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..2.0) },
            min_sum_hessian: 1e-3,
        };
        (data, g, h, params)
    }

    #[test]
    fn every_split_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut splits = 0;
        for _ in 0..50 {
            let (data, g, h, params) = random_instance(&mut rng);
            let rows: Vec<usize> = (0..data.n).collect();
            let mut log = Vec::new();
            let tree = grow_tree(&data, &g, &h, &rows, params, Some(&mut log));
            for ev in &log {
                let want = oracle(&data, &g, &h, &ev.rows, params).expect("oracle finds a split");
                assert_eq!((ev.feature, ev.bin), (want.feature, want.bin));
                splits += 1;
            }
            assert!(tree.leaf_count() <= params.num_leaves);
            assert!(tree.leaves().all(|(_, c)| c >= params.min_data_in_leaf));
        }
        assert!(splits > 50);
    }

    #[test]
    fn one_dimensional_threshold_is_learnt() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 99.5) / 10.0]).collect();
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let data = bin_features(&x, 32).unwrap();
        let cfg = GbmConfig {
            learning_rate: 0.3,
            num_leaves: 4,
            min_data_in_leaf: 5,
            num_rounds: 20,
            ..GbmConfig::default()
        };
        let m = fit_gbm(&data, &y, 2, &cfg).unwrap();
        match m.trees[0][1].nodes[0] {
            Node::Split { threshold, .. } => assert!(threshold.abs() < 0.2, "root threshold {threshold}"),
            _ => panic!("root did not split"),
        }
        let probs = m.predict_proba(&x).unwrap();
        let correct = probs.iter().zip(&y).filter(|(p, &y)| (p[1] > p[0]) == (y == 1)).count();
        assert_eq!(correct, 200);
    }

    #[test]
    fn no_admissible_split_gives_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let data = bin_features(&x, 16).unwrap();
        for min_data in [60, 31] {
            let cfg = GbmConfig {
                min_data_in_leaf: min_data,
                num_leaves: 8,
                num_rounds: 5,
                ..GbmConfig::default()
            };
            let m = fit_gbm(&data, &y, 3, &cfg).unwrap();
            assert!(m.trees.iter().flatten().all(|t| t.leaf_count() == 1));
            for p in m.predict_proba(&x).unwrap() {
                for v in p {
                    assert!((v - 1.0 / 3.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_rounds_predict_class_frequencies() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = [0, 0, 0, 0, 0, 0, 1, 1, 2, 2];
        let cfg = GbmConfig {
            num_rounds: 0,
            min_data_in_leaf: 1,
            ..GbmConfig::default()
        };
        let m = fit_gbm(&bin_features(&x, 8).unwrap(), &y, 3, &cfg).unwrap();
        let p = m.predict_proba_row(&[3.0]).unwrap();
        for (a, b) in p.iter().zip([0.6, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn blobs(seed: u64, n_per: usize, k: usize, f: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..k {
            for _ in 0..n_per {
                x.push((0..f).map(|j| rng.gen::<f64>() + if j % k == c { 0.7 } else { 0.0 }).collect());
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn loss_is_monotone_and_rows_sum_to_one() {
        let (x, y) = blobs(4, 30, 4, 6);
        let cfg = GbmConfig {
            learning_rate: 0.1,
            num_leaves: 6,
            min_data_in_leaf: 5,
            num_rounds: 100,
            ..GbmConfig::default()
        };
        let m = fit_gbm(&bin_features(&x, 32).unwrap(), &y, 4, &cfg).unwrap();
        assert_eq!(m.train_loss.len(), 101);
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for p in m.predict_proba(&x).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_order_does_not_change_predictions() {
        let (x, y) = blobs(5, 20, 3, 4);
        let cfg = GbmConfig {
            num_leaves: 5,
            min_data_in_leaf: 4,
            num_rounds: 10,
            ..GbmConfig::default()
        };
        let a = fit_gbm(&bin_features(&x, 16).unwrap(), &y, 3, &cfg).unwrap();
        let xr: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let yr: Vec<usize> = y.iter().rev().copied().collect();
        let b = fit_gbm(&bin_features(&xr, 16).unwrap(), &yr, 3, &cfg).unwrap();
        for r in &x {
            let (pa, pb) = (a.predict_proba_row(r).unwrap(), b.predict_proba_row(r).unwrap());
            for (u, v) in pa.iter().zip(&pb) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn early_stopping_truncates() {
        let (x, y) = blobs(6, 20, 3, 4);
        let (vx, vy) = blobs(7, 10, 3, 4);
        let cfg = GbmConfig {
            learning_rate: 0.5,
            num_leaves: 8,
            min_data_in_leaf: 2,
            num_rounds: 200,
            early_stopping_rounds: 5,
            ..GbmConfig::default()
        };
        let m = fit_gbm_validated(&bin_features(&x, 16).unwrap(), &y, 3, &cfg, Some((&vx, &vy))).unwrap();
        assert!(m.trees.len() < 200);
        assert_eq!(m.train_loss.len(), m.trees.len() + 1);
    }

    #[test]
    fn errors_and_persistence() {
        let (x, y) = blobs(8, 10, 3, 3);
        let data = bin_features(&x, 8).unwrap();
        assert!(fit_gbm(&data, &y, 4, &GbmConfig::default()).is_err());
        let cfg = GbmConfig {
            min_data_in_leaf: 3,
            num_rounds: 3,
            num_leaves: 4,
            ..GbmConfig::default()
        };
        let m = fit_gbm(&data, &y, 3, &cfg).unwrap();
        assert!(m.predict_proba_row(&[1.0]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gbm.json");
        m.save(&path).unwrap();
        assert_eq!(GbmModel::load(&path).unwrap(), m);
    }
}
