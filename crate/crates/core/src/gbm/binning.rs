use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper-inclusive cut points of one feature. A value `x` falls in the
/// first bin `i` with `x <= cuts[i]`, or in the last bin past every cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMapper {
    pub cuts: Vec<f64>,
}

impl BinMapper {
    /// Equal-frequency cut points over `values`, at most `max_bins - 1`.
    pub fn fit(values: &[f64], max_bins: usize) -> Self {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        let mut cuts = Vec::new();
        if distinct.len() <= max_bins {
            for w in distinct.windows(2) {
                cuts.push(midpoint(w[0], w[1]));
            }
        } else {
            let n = sorted.len();
            for b in 1..max_bins {
                let q = ((b * n) as f64 / max_bins as f64).round() as usize;
                let q = q.clamp(1, n - 1);
                let (lo, hi) = (sorted[q - 1], sorted[q]);
                let cut = if lo < hi { midpoint(lo, hi) } else { lo };
                if cut < sorted[n - 1] && cuts.last().is_none_or(|&c| cut > c) {
                    cuts.push(cut);
                }
            }
        }
        BinMapper { cuts }
    }

    pub fn bins(&self) -> usize {
        self.cuts.len() + 1
    }

    pub fn bin(&self, x: f64) -> u16 {
        self.cuts.partition_point(|&c| c < x) as u16
    }

    /// Raw threshold equivalent to "bin <= b".
    pub fn threshold(&self, b: u16) -> f64 {
        self.cuts[b as usize]
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Bin indices stored feature-major: `bins[f * n + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDataset {
    pub n: usize,
    pub mappers: Vec<BinMapper>,
    pub bins: Vec<u16>,
}

impl BinnedDataset {
    pub fn features(&self) -> usize {
        self.mappers.len()
    }

    pub fn column(&self, f: usize) -> &[u16] {
        &self.bins[f * self.n..(f + 1) * self.n]
    }

    /// Map rows with cut points learnt elsewhere.
    pub fn with_mappers(rows: &[Vec<f64>], mappers: Vec<BinMapper>) -> Result<Self> {
        let f = mappers.len();
        check_rows(rows, f)?;
        let n = rows.len();
        let mut bins = vec![0u16; f * n];
        for (j, m) in mappers.iter().enumerate() {
            for (i, r) in rows.iter().enumerate() {
                bins[j * n + i] = m.bin(r[j]);
            }
        }
        Ok(BinnedDataset { n, mappers, bins })
    }
}

fn check_rows(rows: &[Vec<f64>], f: usize) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != f) {
        return Err(Error::shape(format!("row of {} features, expected {f}", r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    Ok(())
}

pub fn bin_features(rows: &[Vec<f64>], max_bins: usize) -> Result<BinnedDataset> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot bin zero rows"));
    }
    if !(2..=u16::MAX as usize).contains(&max_bins) {
        return Err(Error::invalid(format!("max_bins {max_bins} out of range")));
    }
    let f = rows[0].len();
    check_rows(rows, f)?;
    let mappers = (0..f)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            BinMapper::fit(&col, max_bins)
        })
        .collect();
    BinnedDataset::with_mappers(rows, mappers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quartiles_of_a_ramp() {
        let rows: Vec<Vec<f64>> = (1..=1000).map(|v| vec![v as f64]).collect();
        let b = bin_features(&rows, 4).unwrap();
        let cuts = &b.mappers[0].cuts;
        assert_eq!(cuts.len(), 3);
        for (c, want) in cuts.iter().zip([250.0, 500.0, 750.0]) {
            assert!((c - want).abs() <= 1.0, "{cuts:?}");
        }
        let mut counts = [0usize; 4];
        for &v in b.column(0) {
            counts[v as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c.abs_diff(250) <= 1), "{counts:?}");
    }

    #[test]
    fn constant_feature_is_one_bin() {
        let rows = vec![vec![3.0]; 20];
        let b = bin_features(&rows, 16).unwrap();
        assert!(b.mappers[0].cuts.is_empty());
        assert!(b.column(0).iter().all(|&v| v == 0));
    }

    #[test]
    fn few_distinct_values_get_own_bins() {
        let rows: Vec<Vec<f64>> = [1.0, 2.0, 2.0, 5.0, 1.0].iter().map(|&v| vec![v]).collect();
        let b = bin_features(&rows, 8).unwrap();
        assert_eq!(b.column(0), &[0, 1, 1, 2, 0]);
    }

    #[test]
    fn skewed_values_keep_cuts_increasing() {
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0]; 900];
        rows.extend((0..100).map(|v| vec![v as f64 + 1.0]));
        let b = bin_features(&rows, 10).unwrap();
        let cuts = &b.mappers[0].cuts;
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
        assert!(cuts.len() <= 9);
        assert!(b.column(0).iter().all(|&v| (v as usize) < b.mappers[0].bins()));
    }

    proptest! {
        #[test]
        fn mapping_is_monotone(values in proptest::collection::vec(-1e3f64..1e3, 1..300), max_bins in 2usize..40) {
            let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
            let b = bin_features(&rows, max_bins).unwrap();
            let m = &b.mappers[0];
            prop_assert!(m.cuts.len() < max_bins);
            prop_assert!(m.cuts.windows(2).all(|w| w[0] < w[1]));
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(b.column(0)[i] <= b.column(0)[j]);
                    }
                }
            }
        }
    }
}
