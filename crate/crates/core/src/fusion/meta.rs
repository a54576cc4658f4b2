//! Stacking: a meta classifier over the concatenated branch probabilities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{align, argmax, ProbabilityRow};
use crate::error::{Error, Result};

const FORMAT: &str = "scenefuse-meta";
const VERSION: u32 = 1;
const LOG_FLOOR: f64 = 1e-12;
const CV_FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    Logistic,
    Svm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kernel")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        // the constant term stands in for an unregularized bias
        1.0 + match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
            Kernel::Rbf { gamma } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    /// Inverse regularization strength.
    pub c: f64,
    pub kernel: Option<Kernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub kind: MetaKind,
    pub c_grid: Vec<f64>,
    pub rbf_gammas: Vec<f64>,
    /// Feed `ln(p)` instead of `p`.
    pub log_inputs: bool,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            kind: MetaKind::Logistic,
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            rbf_gammas: vec![0.1, 1.0],
            log_inputs: false,
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

impl MetaConfig {
    fn grid(&self) -> Vec<MetaParams> {
        let mut g = Vec::new();
        for &c in &self.c_grid {
            match self.kind {
                MetaKind::Logistic => g.push(MetaParams { c, kernel: None }),
                MetaKind::Svm => {
                    g.push(MetaParams {
                        c,
                        kernel: Some(Kernel::Linear),
                    });
                    for &gamma in &self.rbf_gammas {
                        g.push(MetaParams {
                            c,
                            kernel: Some(Kernel::Rbf { gamma }),
                        });
                    }
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub support: Vec<Vec<f64>>,
    /// Per class, `alpha_i * y_i` for every training row.
    pub coef: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub format: String,
    pub version: u32,
    pub kind: MetaKind,
    pub fitted: bool,
    pub params: MetaParams,
    pub log_inputs: bool,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Logistic weights, `n_classes x (input_dim + 1)` with the bias last.
    pub weights: Vec<f64>,
    pub svm: Option<SvmModel>,
    /// Mean CV accuracy of every grid point tried.
    pub cv_accuracy: Vec<(MetaParams, f64)>,
    /// Objective value per optimizer iteration of the final logistic fit.
    pub loss_history: Vec<f64>,
}

impl MetaLearner {
    pub fn unfitted(kind: MetaKind, n_classes: usize) -> Self {
        MetaLearner {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            fitted: false,
            params: MetaParams { c: 1.0, kernel: None },
            log_inputs: false,
            n_classes,
            input_dim: 2 * n_classes,
            weights: Vec::new(),
            svm: None,
            cv_accuracy: Vec::new(),
            loss_history: Vec::new(),
        }
    }

    /// Logistic learner with explicit weights (`n_classes x (input_dim + 1)`).
    pub fn logistic_with_weights(n_classes: usize, input_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_classes * (input_dim + 1) {
            return Err(Error::shape(format!("{} weights for {n_classes} x {}", weights.len(), input_dim + 1)));
        }
        Ok(MetaLearner {
            fitted: true,
            input_dim,
            weights,
            ..MetaLearner::unfitted(MetaKind::Logistic, n_classes)
        })
    }

    pub fn features(&self, p_cnn: &[f64], p_gbm: &[f64]) -> Vec<f64> {
        meta_features(p_cnn, p_gbm, self.log_inputs)
    }

    /// Class scores for an already concatenated feature row.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::State("meta learner used before fitting".into()));
        }
        if x.len() != self.input_dim {
            return Err(Error::shape(format!("meta learner expects {} inputs, got {}", self.input_dim, x.len())));
        }
        Ok(match &self.svm {
            Some(svm) => svm_scores(svm, x),
            None => logistic_scores(&self.weights, self.n_classes, x),
        })
    }

    /// Softmax of the class scores.
    pub fn distribution(&self, p_cnn: &[f64], p_gbm: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.scores(&self.features(p_cnn, p_gbm))?;
        crate::gbm::softmax_in_place(&mut z);
        Ok(z)
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
        let m: MetaLearner = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!("{} is not a version {VERSION} meta learner", path.display())));
        }
        Ok(m)
    }
}

pub fn meta_features(p_cnn: &[f64], p_gbm: &[f64], log: bool) -> Vec<f64> {
    p_cnn
        .iter()
        .chain(p_gbm)
        .map(|&p| if log { p.max(LOG_FLOOR).ln() } else { p })
        .collect()
}

pub fn predict_stacked(meta: &MetaLearner, p_cnn: &[f64], p_gbm: &[f64]) -> Result<usize> {
    Ok(argmax(&meta.scores(&meta.features(p_cnn, p_gbm))?))
}

fn logistic_scores(w: &[f64], k: usize, x: &[f64]) -> Vec<f64> {
    let d1 = x.len() + 1;
    (0..k)
        .map(|c| {
            let row = &w[c * d1..(c + 1) * d1];
            row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()]
        })
        .collect()
}

fn svm_scores(svm: &SvmModel, x: &[f64]) -> Vec<f64> {
    let kx: Vec<f64> = svm.support.iter().map(|s| svm.kernel.eval(s, x)).collect();
    svm.coef
        .iter()
        .map(|a| a.iter().zip(&kx).map(|(u, v)| u * v).sum())
        .collect()
}

/// `0.5 * |W|^2 + C * sum_i CE_i`, the bias column unpenalized.
fn logistic_objective(w: &[f64], x: &[Vec<f64>], y: &[usize], k: usize, c: f64) -> f64 {
    let d = x.first().map_or(0, Vec::len);
    let reg: f64 = (0..k).map(|a| w[a * (d + 1)..a * (d + 1) + d].iter().map(|v| v * v).sum::<f64>()).sum();
    let ce: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let z = logistic_scores(w, k, xi);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[yi]
        })
        .sum();
    0.5 * reg + c * ce
}

/// Damped Newton with backtracking; returns weights and the objective
/// after each accepted step.
fn fit_logistic(x: &[Vec<f64>], y: &[usize], k: usize, c: f64, tol: f64, max_iter: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.first().map_or(0, Vec::len);
    let d1 = d + 1;
    let dim = k * d1;
    let mut w = vec![0.0; dim];
    let mut f = logistic_objective(&w, x, y, k, c);
    let mut history = vec![f];
    for _ in 0..max_iter {
        let mut g = DVector::<f64>::zeros(dim);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for a in 0..k {
            for j in 0..d {
                g[a * d1 + j] = w[a * d1 + j];
                h[(a * d1 + j, a * d1 + j)] = 1.0;
            }
        }
        for (xi, &yi) in x.iter().zip(y) {
            let mut p = logistic_scores(&w, k, xi);
            crate::gbm::softmax_in_place(&mut p);
            let xt: Vec<f64> = xi.iter().copied().chain(std::iter::once(1.0)).collect();
            for a in 0..k {
                let r = c * (p[a] - if a == yi { 1.0 } else { 0.0 });
                for u in 0..d1 {
                    g[a * d1 + u] += r * xt[u];
                }
                for b in 0..k {
                    let coef = c * (if a == b { p[a] } else { 0.0 } - p[a] * p[b]);
                    if coef == 0.0 {
                        continue;
                    }
                    for u in 0..d1 {
                        let cu = coef * xt[u];
                        for v in 0..d1 {
                            h[(a * d1 + u, b * d1 + v)] += cu * xt[v];
                        }
                    }
                }
            }
        }
        if g.amax() < tol {
            break;
        }
        let mut mu = 1e-10 * (1.0 + h.trace() / dim as f64);
        let step = loop {
            let mut hd = h.clone();
            for i in 0..dim {
                hd[(i, i)] += mu;
            }
            if let Some(ch) = hd.cholesky() {
                break -ch.solve(&g);
            }
            mu *= 100.0;
            if mu > 1e12 {
                return Err(Error::Numeric {
                    layer: "meta".into(),
                    message: "Newton system is not positive definite".into(),
                });
            }
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let fc = logistic_objective(&cand, x, y, k, c);
            if fc <= f + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let done = f - fc <= 1e-15 * f.abs().max(1.0);
        w = cand;
        f = fc;
        history.push(f);
        if done {
            break;
        }
    }
    Ok((w, history))
}

/// One-vs-rest hinge-loss SVM via dual coordinate descent.
fn fit_svm(x: &[Vec<f64>], y: &[usize], k: usize, c: f64, kernel: Kernel, tol: f64, seed: u64) -> SvmModel {
    let n = x.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&x[i], &x[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = Vec::with_capacity(k);
    for class in 0..k {
        let s: Vec<f64> = y.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let mut alpha = vec![0.0; n];
        // f[i] = sum_j alpha_j s_j K(i, j)
        let mut f = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..1000 {
            order.shuffle(&mut rng);
            let mut worst: f64 = 0.0;
            for &i in &order {
                let q = gram[i * n + i];
                if q <= 0.0 {
                    continue;
                }
                let grad = s[i] * f[i] - 1.0;
                let pg = if alpha[i] <= 0.0 {
                    grad.min(0.0)
                } else if alpha[i] >= c {
                    grad.max(0.0)
                } else {
                    grad
                };
                worst = worst.max(pg.abs());
                if pg == 0.0 {
                    continue;
                }
                let new = (alpha[i] - grad / q).clamp(0.0, c);
                let delta = (new - alpha[i]) * s[i];
                alpha[i] = new;
                for j in 0..n {
                    f[j] += delta * gram[i * n + j];
                }
            }
            if worst < tol.max(1e-6) {
                break;
            }
        }
        coef.push(alpha.iter().zip(&s).map(|(a, b)| a * b).collect());
    }
    SvmModel {
        kernel,
        support: x.to_vec(),
        coef,
    }
}

fn fit_params(
    x: &[Vec<f64>],
    y: &[usize],
    k: usize,
    p: MetaParams,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(Vec<f64>, Option<SvmModel>, Vec<f64>)> {
    match p.kernel {
        None => {
            let (w, hist) = fit_logistic(x, y, k, p.c, cfg.tolerance, cfg.max_iterations)?;
            Ok((w, None, hist))
        }
        Some(kernel) => Ok((Vec::new(), Some(fit_svm(x, y, k, p.c, kernel, cfg.tolerance, seed)), Vec::new())),
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
fn stratified_folds(y: &[usize], k: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; y.len()];
    let mut next = 0;
    for c in 0..k {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

/// Fit on concatenated feature rows. Hyperparameters come from 4-fold CV
/// accuracy on these rows; ties go to the earlier (more regularized) grid
/// point.
pub fn fit_meta_on(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &MetaConfig, seed: u64) -> Result<MetaLearner> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::shape(format!("{} meta rows, {} labels", x.len(), y.len())));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Label { label: l.to_string() });
    }
    let grid = cfg.grid();
    if grid.is_empty() {
        return Err(Error::Config("meta learner grid is empty".into()));
    }
    let min_class = (0..n_classes)
        .map(|c| y.iter().filter(|&&l| l == c).count())
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let folds = CV_FOLDS.min(min_class);
    let mut cv_accuracy = Vec::new();
    let mut best = grid[grid.len() / 2];
    if folds >= 2 {
        let assign = stratified_folds(y, n_classes, folds, seed);
        let mut best_acc = f64::NEG_INFINITY;
        for &p in &grid {
            let mut correct = 0usize;
            for f in 0..folds {
                let tr: Vec<usize> = (0..y.len()).filter(|&i| assign[i] != f).collect();
                let te: Vec<usize> = (0..y.len()).filter(|&i| assign[i] == f).collect();
                let xs: Vec<Vec<f64>> = tr.iter().map(|&i| x[i].clone()).collect();
                let ys: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
                let (w, svm, _) = fit_params(&xs, &ys, n_classes, p, cfg, seed)?;
                for &i in &te {
                    let s = match &svm {
                        Some(m) => svm_scores(m, &x[i]),
                        None => logistic_scores(&w, n_classes, &x[i]),
                    };
                    correct += usize::from(argmax(&s) == y[i]);
                }
            }
            let acc = correct as f64 / y.len() as f64;
            cv_accuracy.push((p, acc));
            if acc > best_acc {
                best_acc = acc;
                best = p;
            }
        }
    }
    let (weights, svm, loss_history) = fit_params(x, y, n_classes, best, cfg, seed)?;
    Ok(MetaLearner {
        format: FORMAT.into(),
        version: VERSION,
        kind: cfg.kind,
        fitted: true,
        params: best,
        log_inputs: cfg.log_inputs,
        n_classes,
        input_dim: x[0].len(),
        weights,
        svm,
        cv_accuracy,
        loss_history,
    })
}

/// Fit on out-of-fold probabilities of the two branches, paired by
/// recording id. Labels are taken from the CNN rows and must agree.
pub fn fit_meta_learner(cfg: &MetaConfig, cnn: &[ProbabilityRow], gbm: &[ProbabilityRow], seed: u64) -> Result<MetaLearner> {
    let pairs = align(cnn, gbm)?;
    let n_classes = cnn.first().map_or(0, |r| r.probs.len());
    let mut x = Vec::with_capacity(pairs.len());
    let mut y = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let label = a
            .label
            .ok_or_else(|| Error::invalid(format!("recording {} has no label", a.recording_id)))?;
        if b.label.is_some_and(|l| l != label) {
            return Err(Error::invalid(format!("recording {} has conflicting labels", a.recording_id)));
        }
        x.push(meta_features(&a.probs, &b.probs, cfg.log_inputs));
        y.push(label);
    }
    fit_meta_on(&x, &y, n_classes, cfg, seed)
}
