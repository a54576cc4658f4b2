use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub label: String,
}

/// Ordered list of `(audio path, scene label)` pairs.
///
/// Class index of a label is its rank in the sorted `class_names`, which
/// gives every module the same label/index mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    /// Directory relative audio paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.class_names
            .binary_search_by(|c| c.as_str().cmp(label))
            .map_err(|_| Error::Label {
                label: label.to_string(),
            })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.audio_path)
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.entries.iter().map(|e| self.class_index(&e.label)).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.audio_path.clone()).collect()
    }

    /// Recording ids grouped per class index, in manifest order.
    pub fn ids_by_class(&self) -> Result<BTreeMap<usize, Vec<String>>> {
        let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(self.class_index(&e.label)?)
                .or_default()
                .push(e.audio_path.clone());
        }
        Ok(out)
    }

    /// Subset of the manifest restricted to `ids`, keeping order and classes.
    pub fn subset(&self, ids: &BTreeSet<String>) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| ids.contains(&e.audio_path))
                .cloned()
                .collect(),
            class_names: self.class_names.clone(),
            root: self.root.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.audio_path);
            s.push('\t');
            s.push_str(&e.label);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Parse manifest text. Extra tab-separated columns after the label are
/// ignored so DCASE meta files load directly.
pub fn parse_manifest(text: &str, fixed_classes: Option<&[String]>) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let path = cols.next().unwrap_or_default();
        let label = cols.next().ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `<path>\\t<label>`, got {line:?}"),
        })?;
        if path.is_empty() || label.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty path or label".into(),
            });
        }
        entries.push(ManifestEntry {
            audio_path: path.to_string(),
            label: label.to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }

    let class_names = match fixed_classes {
        Some(fixed) => {
            let mut names: Vec<String> = fixed.to_vec();
            names.sort();
            names.dedup();
            for e in &entries {
                if names.binary_search(&e.label).is_err() {
                    return Err(Error::Label {
                        label: e.label.clone(),
                    });
                }
            }
            names
        }
        None => entries
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    Ok(DatasetManifest {
        entries,
        class_names,
        root: PathBuf::new(),
    })
}

fn read_manifest(path: &Path, fixed: Option<&[String]>) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text, fixed)?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    read_manifest(path, None)
}

/// Like [`load_manifest`] but every label must belong to `classes`.
pub fn load_manifest_with_classes(path: &Path, classes: &[String]) -> Result<DatasetManifest> {
    read_manifest(path, Some(classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line() {
        let m = parse_manifest("audio/b020.wav\tbeach\n", None).unwrap();
        assert_eq!(
            m.entries[0],
            ManifestEntry {
                audio_path: "audio/b020.wav".into(),
                label: "beach".into()
            }
        );
        assert_eq!(m.class_names, vec!["beach".to_string()]);
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let err = parse_manifest("", None).unwrap_err();
        assert_eq!(err.to_string(), "empty manifest");
        assert!(matches!(parse_manifest("\n\n", None), Err(Error::EmptyManifest)));
    }

    #[test]
    fn missing_tab_names_line() {
        let err = parse_manifest("a.wav\tbus\nb.wav bus\n", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_label_with_fixed_classes() {
        let classes = vec!["bus".to_string(), "park".to_string()];
        let err = parse_manifest("a.wav\tbeach\n", Some(&classes)).unwrap_err();
        assert!(matches!(err, Error::Label { .. }));
    }

    #[test]
    fn full_development_manifest_shape() {
        let mut text = String::new();
        for c in 0..15 {
            for r in 0..312 {
                text.push_str(&format!("audio/{c}_{r}.wav\tscene{c:02}\tsrc{r}\n"));
            }
        }
        let m = parse_manifest(&text, None).unwrap();
        assert_eq!(m.entries.len(), 4680);
        assert_eq!(m.class_names.len(), 15);
        let by = m.ids_by_class().unwrap();
        assert!(by.values().all(|v| v.len() == 312));
    }

    #[test]
    fn class_index_is_sorted_rank() {
        let m = parse_manifest("x\ttram\ny\tbeach\nz\tpark\n", None).unwrap();
        assert_eq!(m.class_index("beach").unwrap(), 0);
        assert_eq!(m.class_index("park").unwrap(), 1);
        assert_eq!(m.class_index("tram").unwrap(), 2);
        // order preserved
        assert_eq!(m.entries[0].label, "tram");
    }
}
