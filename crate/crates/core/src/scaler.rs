//! Mean/standard-deviation standardization fitted on training rows only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Whether statistics are kept per dimension or pooled over all dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerScope {
    #[default]
    PerBand,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub scope: ScalerScope,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted: bool,
}

impl Standardizer {
    pub fn new(dim: usize, scope: ScalerScope) -> Self {
        Standardizer {
            scope,
            dim,
            mean: Vec::new(),
            std: Vec::new(),
            fitted: false,
        }
    }

    /// Two-pass mean/population-std over `rows`, accumulated in row order.
    pub fn fit<'a, I>(&mut self, rows: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        let d = self.dim;
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for r in rows.clone() {
            if r.len() != d {
                return Err(Error::shape(format!("row of {} values, scaler dim {d}", r.len())));
            }
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        }
        let mut mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in sq.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        if self.scope == ScalerScope::Global {
            let gm = mean.iter().sum::<f64>() / d as f64;
            // pooled variance = mean within-dim variance + spread of dim means
            let gv = std
                .iter()
                .zip(&mean)
                .map(|(s, m)| s * s + (m - gm) * (m - gm))
                .sum::<f64>()
                / d as f64;
            mean = vec![gm; d];
            std = vec![gv.sqrt(); d];
        }
        for s in std.iter_mut() {
            if *s < STD_FLOOR {
                *s = STD_FLOOR;
            }
        }
        self.mean = mean;
        self.std = std;
        self.fitted = true;
        Ok(())
    }

    fn check(&self, len: usize) -> Result<()> {
        if !self.fitted {
            return Err(Error::State("scaler applied before fit".into()));
        }
        if !len.is_multiple_of(self.dim) {
            return Err(Error::shape(format!("{len} values are not rows of {}", self.dim)));
        }
        Ok(())
    }

    /// Standardize a row-major buffer of rows in place.
    pub fn apply_in_place(&self, data: &mut [f64]) -> Result<()> {
        self.check(data.len())?;
        for row in data.chunks_exact_mut(self.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn apply_in_place_f32(&self, data: &mut [f32]) -> Result<()> {
        self.check(data.len())?;
        for row in data.chunks_exact_mut(self.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }
}
