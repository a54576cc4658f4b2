use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{parse_manifest, DatasetManifest};
use crate::error::{Error, Result};

/// One cross-validation split. `fold_index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Stratified k-fold split.
///
/// Each class is shuffled with the seeded RNG and dealt round-robin over
/// the folds. The starting fold rotates with the class so fold sizes stay
/// balanced when class sizes are not multiples of `k`.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {k}")));
    }
    let by_class = manifest.ids_by_class()?;
    let smallest = by_class.values().map(Vec::len).min().unwrap_or(0);
    if smallest < k {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {smallest} recordings of the smallest class"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    let mut offset = 0usize;
    for ids in by_class.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            tests[(offset + i) % k].insert(id);
        }
        offset += 1;
    }

    let all: BTreeSet<String> = manifest.ids().into_iter().collect();
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(i, test_ids)| FoldSplit {
            fold_index: i + 1,
            train_ids: all.difference(&test_ids).cloned().collect(),
            test_ids,
        })
        .collect())
}

fn read_ids(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // Test lists in DCASE setups may omit the label column.
    if text.lines().all(|l| l.trim().is_empty() || !l.contains('\t')) {
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    Ok(parse_manifest(&text, None)?.ids().into_iter().collect())
}

/// Read `fold{i}_train.txt` and `fold{i}_test.txt` (or `fold{i}_evaluate.txt`)
/// for i in 1..=k from `dir`.
pub fn load_fold_files(dir: &Path, k: usize) -> Result<Vec<FoldSplit>> {
    let mut out = Vec::with_capacity(k);
    for i in 1..=k {
        let train = read_ids(&dir.join(format!("fold{i}_train.txt")))?;
        let test_path = ["test", "evaluate"]
            .iter()
            .map(|s| dir.join(format!("fold{i}_{s}.txt")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::MissingArtifact {
                path: dir.join(format!("fold{i}_test.txt")),
                producer: "gen-synthetic".into(),
            })?;
        let test = read_ids(&test_path)?;
        if let Some(dup) = train.intersection(&test).next() {
            return Err(Error::Leakage(format!("fold {i}: {dup} is in both train and test")));
        }
        out.push(FoldSplit {
            fold_index: i,
            train_ids: train,
            test_ids: test,
        });
    }
    Ok(out)
}

pub fn write_fold_files(dir: &Path, manifest: &DatasetManifest, folds: &[FoldSplit]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in folds {
        manifest
            .subset(&f.train_ids)
            .write(&dir.join(format!("fold{}_train.txt", f.fold_index)))?;
        manifest
            .subset(&f.test_ids)
            .write(&dir.join(format!("fold{}_test.txt", f.fold_index)))?;
    }
    Ok(())
}
