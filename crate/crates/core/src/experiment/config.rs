use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::fusion::{FusionMethod, MetaConfig};
use crate::gbm::{GbmConfig, GridSpec};
use crate::lda::LdaOptions;
use crate::nn::{NetworkConfig, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub dataset: DatasetSection,
    pub frontend: FrontendConfig,
    pub cnn: CnnSection,
    pub gbm: GbmConfig,
    pub lda: LdaSection,
    pub grid: GridSection,
    pub fusion: FusionSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: "out".into(),
            dataset: DatasetSection::default(),
            frontend: FrontendConfig::default(),
            cnn: CnnSection::default(),
            gbm: GbmConfig::default(),
            lda: LdaSection::default(),
            grid: GridSection::default(),
            fusion: FusionSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Empty means the synthetic corpus under the output directory.
    pub dev_manifest: String,
    pub eval_manifest: String,
    /// Directory with `fold{k}_train.txt` / `fold{k}_test.txt`; empty
    /// means stratified folds drawn with `fold_seed`.
    pub fold_dir: String,
    pub folds: usize,
    pub fold_seed: u64,
    pub synthetic: SyntheticSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dev_manifest: String::new(),
            eval_manifest: String::new(),
            fold_dir: String::new(),
            folds: 4,
            fold_seed: 0,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_classes: usize,
    pub recordings_per_class: usize,
    /// Extra recordings per class held out as an evaluation set.
    pub eval_recordings_per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_classes: 15,
            recordings_per_class: 8,
            eval_recordings_per_class: 0,
            duration_s: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub filter_configuration: String,
    pub pre_activation: bool,
    pub pre_activation_mid: bool,
    pub l2: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub training: TrainingConfig,
}

impl Default for CnnSection {
    fn default() -> Self {
        let n = NetworkConfig::named("CNN_4").expect("CNN_4 is a known configuration");
        CnnSection {
            filter_configuration: "CNN_4".into(),
            pre_activation: false,
            pre_activation_mid: false,
            l2: n.l2,
            bn_momentum: n.bn_momentum,
            bn_epsilon: n.bn_epsilon,
            training: TrainingConfig::default(),
        }
    }
}

impl CnnSection {
    pub fn network(&self, classes: usize, n_mels: usize) -> Result<NetworkConfig> {
        let mut n = NetworkConfig::named(&self.filter_configuration)?;
        n.pre_activation = self.pre_activation;
        n.pre_activation_mid = self.pre_activation_mid;
        n.l2 = self.l2;
        n.bn_momentum = self.bn_momentum;
        n.bn_epsilon = self.bn_epsilon;
        n.classes = classes;
        n.input_bands = n_mels;
        n.validate()?;
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    pub enabled: bool,
    pub dim: usize,
    pub shrinkage: f64,
    pub strict: bool,
}

impl LdaSection {
    pub fn options(&self) -> Option<LdaOptions> {
        self.enabled.then_some(LdaOptions {
            dim: self.dim,
            shrinkage: self.shrinkage,
            strict: self.strict,
        })
    }
}

impl Default for LdaSection {
    fn default() -> Self {
        let o = LdaOptions::default();
        LdaSection {
            enabled: false,
            dim: o.dim,
            shrinkage: o.shrinkage,
            strict: o.strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub learning_rate: Vec<f64>,
    pub max_bins: Vec<usize>,
    pub num_leaves: Vec<usize>,
    pub min_data_in_leaf: Vec<usize>,
    /// Only searched when `lda.enabled` is set.
    pub lda_dims: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::default().with_lda();
        GridSection {
            learning_rate: g.learning_rate,
            max_bins: g.max_bins,
            num_leaves: g.num_leaves,
            min_data_in_leaf: g.min_data_in_leaf,
            lda_dims: g.lda_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub method: FusionMethod,
    pub meta: MetaConfig,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            method: FusionMethod::Stacking,
            meta: MetaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Cv,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub mode: EvalMode,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            mode: EvalMode::Cv,
            n_trials: 1,
            seed: 0,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Dotted paths of every settable key.
pub fn valid_keys() -> BTreeSet<String> {
    let v = toml::Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut out = BTreeSet::new();
    collect_keys(&v, "", &mut out);
    out
}

fn collect_keys(v: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_keys(v, &p, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

/// A TOML literal, or a bare string when it does not parse as one.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut t = root;
    for p in parts {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        t = entry.as_table_mut().expect("just made a table");
    }
    t.insert(last.to_string(), value);
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parse `text`, then apply `key=value` overrides.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        if !overrides.is_empty() {
            let keys = valid_keys();
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
                let k = k.trim();
                if !keys.contains(k) {
                    let list: Vec<&str> = keys.iter().map(String::as_str).collect();
                    return Err(Error::Config(format!(
                        "unknown key `{k}`; valid keys: {}",
                        list.join(", ")
                    )));
                }
                set_path(&mut table, k, parse_value(v.trim()));
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        if self.dataset.folds < 2 {
            return Err(Error::Config("dataset.folds must be at least 2".into()));
        }
        if self.evaluation.n_trials == 0 {
            return Err(Error::Config("evaluation.n_trials must be at least 1".into()));
        }
        if self.lda.enabled && self.lda.dim == 0 {
            return Err(Error::Config("lda.dim must be positive".into()));
        }
        self.gbm.validate()?;
        self.cnn.training.validate()?;
        NetworkConfig::named(&self.cnn.filter_configuration)
            .map_err(|_| Error::Config(format!("unknown filter configuration `{}`", self.cnn.filter_configuration)))?;
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            learning_rate: self.grid.learning_rate.clone(),
            max_bins: self.grid.max_bins.clone(),
            num_leaves: self.grid.num_leaves.clone(),
            min_data_in_leaf: self.grid.min_data_in_leaf.clone(),
            lda_dims: if self.lda.enabled { self.grid.lda_dims.clone() } else { Vec::new() },
            base: self.gbm,
            lda: self.lda.options().unwrap_or_default(),
        }
    }
}
