//! Fisher linear discriminant analysis for reducing the aggregated
//! hand-crafted features.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFLDAv\0\0";
const VERSION: u32 = 1;

/// Relative eigenvalue level below which a direction counts as null.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaOptions {
    pub dim: usize,
    /// Within-class scatter gets `shrinkage * trace(Sw) / p` added to its diagonal.
    pub shrinkage: f64,
    /// Cap the output dimension at the effective rank instead of padding
    /// with near-null directions.
    pub strict: bool,
}

impl Default for LdaOptions {
    fn default() -> Self {
        LdaOptions {
            dim: 64,
            shrinkage: 1e-4,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub input_dim: usize,
    pub requested_dim: usize,
    pub effective_rank: usize,
    pub mean: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `d x input_dim`, row-major.
    pub projection: Vec<f64>,
    pub warning: Option<String>,
}

fn class_counts(labels: &[usize]) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Population within-class and between-class scatter (divided by `n`).
pub fn scatter_matrices(rows: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n == 0 || n != labels.len() {
        return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
    }
    let p = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != p) {
        return Err(Error::shape(format!("row of {} values, expected {p}", r.len())));
    }
    let counts = class_counts(labels);
    let classes = counts.len();

    let mut mean = vec![0.0; p];
    let mut class_sum = vec![vec![0.0; p]; classes];
    for (r, &l) in rows.iter().zip(labels) {
        for j in 0..p {
            mean[j] += r[j];
            class_sum[l][j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let mut mb = DMatrix::<f64>::zeros(present.len(), p);
    for (i, &c) in present.iter().enumerate() {
        let w = (counts[c] as f64 / n as f64).sqrt();
        for j in 0..p {
            mb[(i, j)] = w * (class_sum[c][j] / counts[c] as f64 - mean[j]);
        }
    }
    let mut xc = DMatrix::<f64>::zeros(n, p);
    for (i, (r, &l)) in rows.iter().zip(labels).enumerate() {
        for j in 0..p {
            xc[(i, j)] = r[j] - class_sum[l][j] / counts[l] as f64;
        }
    }
    let sw = xc.tr_mul(&xc) / n as f64;
    let sb = mb.tr_mul(&mb);
    Ok((mean, sw, sb))
}

/// `Sw + shrinkage * trace(Sw) / p * I`.
pub fn regularized_within(sw: &DMatrix<f64>, shrinkage: f64) -> DMatrix<f64> {
    let p = sw.nrows();
    let mut s = sw.clone();
    let mut add = shrinkage * sw.trace() / p as f64;
    if add <= 0.0 {
        add = shrinkage.max(f64::MIN_POSITIVE);
    }
    for i in 0..p {
        s[(i, i)] += add;
    }
    s
}

pub fn fit_lda(rows: &[Vec<f64>], labels: &[usize], dim: usize) -> Result<LdaModel> {
    fit_lda_with(
        rows,
        labels,
        &LdaOptions {
            dim,
            ..LdaOptions::default()
        },
    )
}

pub fn fit_lda_with(rows: &[Vec<f64>], labels: &[usize], opts: &LdaOptions) -> Result<LdaModel> {
    let (mean, sw, sb) = scatter_matrices(rows, labels)?;
    let p = mean.len();
    let counts = class_counts(labels);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::invalid("LDA needs at least two classes"));
    }
    if let Some(c) = counts.iter().position(|&c| c == 1) {
        return Err(Error::invalid(format!("class {c} has a single sample")));
    }
    if opts.dim == 0 || opts.dim > p {
        return Err(Error::invalid(format!("LDA dimension {} outside 1..={p}", opts.dim)));
    }
    if !(opts.shrinkage >= 0.0) {
        return Err(Error::invalid("shrinkage must be non-negative"));
    }

    let reg = regularized_within(&sw, opts.shrinkage);
    let chol = reg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric {
            layer: "lda".into(),
            message: "regularized within-class scatter is not positive definite".into(),
        })?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(&sb)
        .ok_or_else(|| numeric("triangular solve failed"))?;
    let a = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| numeric("triangular solve failed"))?;
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let effective_rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count()
        .min(present - 1);

    let d = if opts.strict { opts.dim.min(effective_rank.max(1)) } else { opts.dim };
    let warning = (opts.dim > effective_rank).then(|| {
        let msg = if opts.strict {
            format!("requested {} LDA dims, capped at effective rank {effective_rank}", opts.dim)
        } else {
            format!(
                "requested {} LDA dims exceeds effective rank {effective_rank}; trailing directions are near-null",
                opts.dim
            )
        };
        log::warn!("{msg}");
        msg
    });

    let mut projection = Vec::with_capacity(d * p);
    let mut eigenvalues = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let u = DVector::from_column_slice(eig.eigenvectors.column(i).as_slice());
        let mut v = l
            .tr_solve_lower_triangular(&u)
            .ok_or_else(|| numeric("back substitution failed"))?;
        let pivot = v.iter().copied().enumerate().fold((0, 0.0f64), |best, (k, x)| {
            if x.abs() > best.1.abs() {
                (k, x)
            } else {
                best
            }
        });
        if pivot.1 < 0.0 {
            v.neg_mut();
        }
        projection.extend(v.iter());
        eigenvalues.push(eig.eigenvalues[i]);
    }

    Ok(LdaModel {
        input_dim: p,
        requested_dim: opts.dim,
        effective_rank,
        mean,
        eigenvalues,
        projection,
        warning,
    })
}

fn numeric(msg: &str) -> Error {
    Error::Numeric {
        layer: "lda".into(),
        message: msg.into(),
    }
}

impl LdaModel {
    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        &self.projection[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!("LDA expects {} features, got {}", self.input_dim, x.len())));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.output_dim())
            .map(|k| self.direction(k).iter().zip(&centered).map(|(w, c)| w * c).sum())
            .collect())
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_magic(MAGIC, VERSION);
        w.u64(self.input_dim as u64);
        w.u64(self.requested_dim as u64);
        w.u64(self.effective_rank as u64);
        w.u64(self.output_dim() as u64);
        w.str(self.warning.as_deref().unwrap_or(""));
        w.f64s(&self.mean);
        w.f64s(&self.eigenvalues);
        w.f64s(&self.projection);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, MAGIC, VERSION)?;
        let input_dim = r.u64()? as usize;
        let requested_dim = r.u64()? as usize;
        let effective_rank = r.u64()? as usize;
        let d = r.u64()? as usize;
        let warning = Some(r.str()?).filter(|s| !s.is_empty());
        let mean = r.f64s(input_dim)?;
        let eigenvalues = r.f64s(d)?;
        let projection = r.f64s(d * input_dim)?;
        r.finish()?;
        Ok(LdaModel {
            input_dim,
            requested_dim,
            effective_rank,
            mean,
            eigenvalues,
            projection,
            warning,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn gaussian_classes(classes: usize, per_class: usize, p: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..p).map(|_| spread * sample_normal(&mut rng)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..per_class {
                rows.push(mu.iter().map(|m| m + sample_normal(&mut rng)).collect());
                labels.push(c);
            }
        }
        (rows, labels)
    }

    fn residual(model: &LdaModel, rows: &[Vec<f64>], labels: &[usize], shrinkage: f64) -> f64 {
        let (_, sw, sb) = scatter_matrices(rows, labels).unwrap();
        let reg = regularized_within(&sw, shrinkage);
        (0..model.output_dim())
            .map(|k| {
                let v = DVector::from_column_slice(model.direction(k));
                let r = &sb * &v - (&reg * &v) * model.eigenvalues[k];
                r.norm() / v.norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn two_class_direction_matches_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, mx) in [(0usize, 0.0), (1, 10.0)] {
            for _ in 0..200 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![mx + a, b]);
                labels.push(c);
            }
        }
        let m = fit_lda(&rows, &labels, 1).unwrap();
        let (_, sw, _) = scatter_matrices(&rows, &labels).unwrap();
        let mu = |c: usize| {
            let sel: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            DVector::from_fn(2, |j, _| sel.iter().map(|r| r[j]).sum::<f64>() / sel.len() as f64)
        };
        let fisher = sw.try_inverse().unwrap() * (mu(1) - mu(0));
        let v = DVector::from_column_slice(m.direction(0));
        let cos = (v.dot(&fisher) / (v.norm() * fisher.norm())).abs();
        assert!(cos >= 0.999, "cosine {cos}");
        assert!(v[0].abs() > 10.0 * v[1].abs());
        assert_eq!(m.effective_rank, 1);
    }

    #[test]
    fn fifteen_classes_rank_and_residual() {
        let (rows, labels) = gaussian_classes(15, 20, 40, 3.0, 5);
        let m = fit_lda(&rows, &labels, 20).unwrap();
        assert!(m.effective_rank <= 14);
        assert_eq!(m.effective_rank, 14);
        assert!(m.warning.is_some());
        assert!(residual(&m, &rows, &labels, 1e-4) < 1e-6);
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.eigenvalues[13] > 1e3 * m.eigenvalues[14].abs().max(1e-300));
        assert!(m.eigenvalues.iter().all(|&e| e >= -1e-9));
    }

    #[test]
    fn strict_mode_caps_dimension() {
        let (rows, labels) = gaussian_classes(4, 30, 10, 3.0, 6);
        let opts = LdaOptions {
            dim: 8,
            strict: true,
            ..LdaOptions::default()
        };
        let m = fit_lda_with(&rows, &labels, &opts).unwrap();
        assert_eq!(m.output_dim(), 3);
        assert_eq!(fit_lda(&rows, &labels, 8).unwrap().output_dim(), 8);
    }

    #[test]
    fn duplicating_samples_keeps_directions() {
        let (rows, labels) = gaussian_classes(5, 25, 12, 2.0, 7);
        let a = fit_lda(&rows, &labels, 4).unwrap();
        let rows2: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let b = fit_lda(&rows2, &labels2, 4).unwrap();
        for (x, y) in a.projection.iter().zip(&b.projection) {
            assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let (rows, labels) = gaussian_classes(5, 25, 12, 2.0, 8);
        let a = fit_lda(&rows, &labels, 4).unwrap();
        let rows2: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let labels2: Vec<usize> = labels.iter().rev().copied().collect();
        let b = fit_lda(&rows2, &labels2, 4).unwrap();
        for (x, y) in a.projection.iter().zip(&b.projection) {
            assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn transform_centers_and_reduces() {
        let (rows, labels) = gaussian_classes(15, 6, 30, 2.0, 9);
        let m = fit_lda(&rows, &labels, 16).unwrap();
        let z = m.transform_row(&m.mean).unwrap();
        assert_eq!(z.len(), 16);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        let out = m.transform(&rows).unwrap();
        assert_eq!(out.len(), rows.len());
        assert!(m.transform_row(&[1.0; 3]).is_err());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (rows, _) = gaussian_classes(1, 10, 4, 1.0, 1);
        assert!(fit_lda(&rows, &[0; 10], 2).is_err());
        let (rows, labels) = gaussian_classes(3, 10, 4, 1.0, 1);
        assert!(fit_lda(&rows, &labels, 5).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let (rows, labels) = gaussian_classes(3, 10, 6, 2.0, 2);
        let m = fit_lda(&rows, &labels, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lda.bin");
        m.save(&path).unwrap();
        assert_eq!(LdaModel::load(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn transform_is_affine(alpha in -2.0f64..2.0, seed in 0u64..1000) {
            let (rows, labels) = gaussian_classes(3, 8, 5, 2.0, 11);
            let m = fit_lda(&rows, &labels, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let (tx, ty, tm) = (m.transform_row(&x).unwrap(), m.transform_row(&y).unwrap(), m.transform_row(&mix).unwrap());
            for k in 0..3 {
                let want = alpha * tx[k] + (1.0 - alpha) * ty[k];
                prop_assert!((tm[k] - want).abs() < 1e-9 * (1.0 + want.abs()));
            }
        }
    }
}
