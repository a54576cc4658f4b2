//! Late fusion of the two branches' recording-level class probabilities.

mod meta;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use meta::{
    fit_meta_learner, fit_meta_on, meta_features, predict_stacked, Kernel, MetaConfig, MetaKind, MetaLearner, MetaParams,
    SvmModel,
};

use crate::error::{Error, Result};

pub const GEOMETRIC_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-6;

/// A recording-level class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub recording_id: String,
    pub probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(recording_id: impl Into<String>, probs: Vec<f64>) -> Result<Self> {
        let p = ClassProbabilities {
            recording_id: recording_id.into(),
            probs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("{}: probabilities must be finite and >= 0", self.recording_id)));
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("{}: probabilities sum to {s}", self.recording_id)));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimpleFusion {
    Arithmetic,
    Geometric,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Arithmetic,
    Geometric,
    Rank,
    Stacking,
}

impl FusionMethod {
    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Arithmetic => "arithmetic",
            FusionMethod::Geometric => "geometric",
            FusionMethod::Rank => "rank",
            FusionMethod::Stacking => "stacking",
        }
    }

    pub fn simple(self) -> Option<SimpleFusion> {
        match self {
            FusionMethod::Arithmetic => Some(SimpleFusion::Arithmetic),
            FusionMethod::Geometric => Some(SimpleFusion::Geometric),
            FusionMethod::Rank => Some(SimpleFusion::Rank),
            FusionMethod::Stacking => None,
        }
    }
}

/// Ranks 1..=k, the largest value getting k. Tied values share their
/// average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn fuse_simple(
    method: SimpleFusion,
    p: &ClassProbabilities,
    q: &ClassProbabilities,
) -> Result<(ClassProbabilities, usize)> {
    if p.recording_id != q.recording_id {
        return Err(Error::invalid(format!(
            "cannot fuse {} with {}",
            p.recording_id, q.recording_id
        )));
    }
    if p.probs.len() != q.probs.len() {
        return Err(Error::shape(format!("{} vs {} classes", p.probs.len(), q.probs.len())));
    }
    let fused = match method {
        SimpleFusion::Arithmetic => p.probs.iter().zip(&q.probs).map(|(a, b)| (a + b) / 2.0).collect(),
        SimpleFusion::Geometric => {
            let mut v: Vec<f64> = p
                .probs
                .iter()
                .zip(&q.probs)
                .map(|(a, b)| (a.max(GEOMETRIC_FLOOR) * b.max(GEOMETRIC_FLOOR)).sqrt())
                .collect();
            normalize(&mut v);
            v
        }
        SimpleFusion::Rank => {
            let mut v: Vec<f64> = ranks(&p.probs)
                .iter()
                .zip(ranks(&q.probs))
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            normalize(&mut v);
            v
        }
    };
    let out = ClassProbabilities {
        recording_id: p.recording_id.clone(),
        probs: fused,
    };
    let label = out.argmax();
    Ok((out, label))
}

/// One line of the probability interchange file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow {
    pub recording_id: String,
    pub label: Option<usize>,
    pub probs: Vec<f64>,
    pub model_tag: String,
}

impl ProbabilityRow {
    pub fn distribution(&self) -> ClassProbabilities {
        ClassProbabilities {
            recording_id: self.recording_id.clone(),
            probs: self.probs.clone(),
        }
    }
}

/// Header: `recording_id,label,p0..p{k-1},model_tag`. An unknown label is
/// written as an empty field.
pub fn write_probability_csv(path: &Path, rows: &[ProbabilityRow]) -> Result<()> {
    let k = rows.first().map_or(15, |r| r.probs.len());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["recording_id".to_string(), "label".to_string()];
    header.extend((0..k).map(|i| format!("p{i}")));
    header.push("model_tag".into());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.probs.len() != k {
            return Err(Error::shape(format!("{}: {} probabilities, expected {k}", r.recording_id, r.probs.len())));
        }
        let mut rec = vec![r.recording_id.clone(), r.label.map(|l| l.to_string()).unwrap_or_default()];
        rec.extend(r.probs.iter().map(|p| p.to_string()));
        rec.push(r.model_tag.clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_probability_csv(path: &Path) -> Result<Vec<ProbabilityRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let header = rd.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let k = header.len().saturating_sub(3);
    let valid = header.len() >= 4
        && header.get(0) == Some("recording_id")
        && header.get(1) == Some("label")
        && header.get(header.len() - 1) == Some("model_tag")
        && (0..k).all(|i| header.get(i + 2) == Some(format!("p{i}").as_str()));
    if !valid {
        return Err(Error::Format(format!("{}: unexpected probability header", path.display())));
    }
    let mut out = Vec::new();
    for (n, rec) in rd.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let parse_err = |m: String| Error::Parse { line, message: m };
        let label = match &rec[1] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|e| parse_err(format!("label {s:?}: {e}")))?),
        };
        let probs = (0..k)
            .map(|i| rec[i + 2].parse::<f64>().map_err(|e| parse_err(format!("p{i}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ProbabilityRow {
            recording_id: rec[0].to_string(),
            label,
            probs,
            model_tag: rec[k + 2].to_string(),
        });
    }
    Ok(out)
}

/// Pair two probability sets by recording id, in the order of `a`.
pub fn align<'a>(a: &'a [ProbabilityRow], b: &'a [ProbabilityRow]) -> Result<Vec<(&'a ProbabilityRow, &'a ProbabilityRow)>> {
    let by_id: BTreeMap<&str, &ProbabilityRow> = b.iter().map(|r| (r.recording_id.as_str(), r)).collect();
    if by_id.len() != b.len() {
        return Err(Error::invalid("duplicate recording id in probability set"));
    }
    let pairs = a
        .iter()
        .map(|r| {
            by_id
                .get(r.recording_id.as_str())
                .map(|&o| (r, o))
                .ok_or_else(|| Error::invalid(format!("recording {} missing from {}", r.recording_id, b.first().map_or("", |x| x.model_tag.as_str()))))
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.len() != b.len() {
        return Err(Error::invalid("probability sets cover different recordings"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cp(p: &[f64]) -> ClassProbabilities {
        ClassProbabilities::new("r", p.to_vec()).unwrap()
    }

    fn random_dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn arithmetic_of_equal_inputs_is_identity() {
        let p = cp(&[0.1, 0.2, 0.7]);
        let (f, l) = fuse_simple(SimpleFusion::Arithmetic, &p, &p).unwrap();
        assert_eq!(f.probs, p.probs);
        assert_eq!(l, 2);
    }

    #[test]
    fn geometric_with_uniform_is_sqrt() {
        let p = cp(&[0.04, 0.16, 0.8]);
        let q = cp(&[1.0 / 3.0; 3]);
        let (f, _) = fuse_simple(SimpleFusion::Geometric, &p, &q).unwrap();
        let want = random_dist(&[0.2, 0.4, 0.8f64.sqrt()]);
        for (a, b) in f.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_model_wins_arithmetic() {
        let mut p = vec![0.0; 15];
        p[0] = 0.9;
        p[1] = 0.1;
        let mut q = vec![0.0; 15];
        q[0] = 0.4;
        q[1] = 0.6;
        let (_, l) = fuse_simple(SimpleFusion::Arithmetic, &cp(&p), &cp(&q)).unwrap();
        assert_eq!(l, 0);
    }

    #[test]
    fn rank_fusion_and_ties() {
        assert_eq!(ranks(&[0.1, 0.5, 0.1, 0.3]), vec![1.5, 4.0, 1.5, 3.0]);
        let (f, l) = fuse_simple(SimpleFusion::Rank, &cp(&[0.2, 0.3, 0.5]), &cp(&[0.6, 0.3, 0.1])).unwrap();
        assert_eq!(f.probs, vec![2.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0]);
        assert_eq!(l, 0);
    }

    #[test]
    fn mismatched_ids_are_rejected() {
        let a = cp(&[0.5, 0.5]);
        let b = ClassProbabilities::new("other", vec![0.5, 0.5]).unwrap();
        assert!(fuse_simple(SimpleFusion::Arithmetic, &a, &b).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ProbabilityRow {
                recording_id: "a".into(),
                label: Some(2),
                probs: vec![0.1, 0.2, 0.7],
                model_tag: "cnn".into(),
            },
            ProbabilityRow {
                recording_id: "b,c".into(),
                label: None,
                probs: vec![1.0 / 3.0; 3],
                model_tag: "cnn".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_probability_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("recording_id,label,p0,p1,p2,model_tag\n"));
        assert_eq!(read_probability_csv(&path).unwrap(), rows);
    }

    #[test]
    fn align_requires_same_recordings() {
        let row = |id: &str| ProbabilityRow {
            recording_id: id.into(),
            label: None,
            probs: vec![1.0],
            model_tag: "x".into(),
        };
        let a = vec![row("1"), row("2")];
        let b = vec![row("2"), row("1")];
        let pairs = align(&a, &b).unwrap();
        assert_eq!(pairs[0].1.recording_id, "1");
        assert!(align(&a, &[row("1")]).is_err());
        assert!(align(&a, &[row("1"), row("3")]).is_err());
    }

    proptest! {
        #[test]
        fn fused_outputs_are_distributions(a in proptest::collection::vec(0.0f64..1.0, 15), b in proptest::collection::vec(0.0f64..1.0, 15)) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let (p, q) = (cp(&random_dist(&a)), cp(&random_dist(&b)));
            for m in [SimpleFusion::Arithmetic, SimpleFusion::Geometric, SimpleFusion::Rank] {
                let (f, l) = fuse_simple(m, &p, &q).unwrap();
                prop_assert!(f.validate().is_ok());
                prop_assert_eq!(l, f.argmax());
            }
            for m in [SimpleFusion::Arithmetic, SimpleFusion::Geometric] {
                prop_assert_eq!(fuse_simple(m, &p, &q).unwrap().0.probs, fuse_simple(m, &q, &p).unwrap().0.probs);
            }
        }

        #[test]
        fn rank_fusion_ignores_monotone_maps(a in proptest::collection::vec(0.0f64..1.0, 15), b in proptest::collection::vec(0.0f64..1.0, 15), pw in 0.2f64..5.0) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let (p, q) = (cp(&random_dist(&a)), cp(&random_dist(&b)));
            let mapped = cp(&random_dist(&p.probs.iter().map(|v| v.powf(pw)).collect::<Vec<_>>()));
            let (f1, _) = fuse_simple(SimpleFusion::Rank, &p, &q).unwrap();
            let (f2, _) = fuse_simple(SimpleFusion::Rank, &mapped, &q).unwrap();
            prop_assert_eq!(f1.probs, f2.probs);
        }
    }
}
