//! Run configuration: model dimensions, optimization settings, dataset and
//! output location, loadable from TOML or JSON with `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic_split, load_folder, EvalSet, LabeledSet, Split, UnlabeledSet};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Environment variable overriding [`RunConfig::precision`].
pub const PRECISION_ENV: &str = "FFTAT_PRECISION";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Folder,
}

/// Where the two domains come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Synthetic generator seed.
    pub seed: u64,
    /// Synthetic training images per class and domain.
    pub n_per_class: usize,
    /// Synthetic held-out images per class and domain.
    pub test_per_class: usize,
    /// Folder datasets: labeled source images.
    pub source: Option<PathBuf>,
    /// Folder datasets: target images (labels ignored for training).
    pub target: Option<PathBuf>,
    /// Folder datasets: labeled target images for evaluation; defaults to
    /// `target`.
    pub target_eval: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            seed: 0,
            n_per_class: 100,
            test_per_class: 50,
            source: None,
            target: None,
            target_eval: None,
        }
    }
}

/// Materialized data for one run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub source_eval: LabeledSet,
    pub target_eval: EvalSet,
}

impl DatasetSpec {
    pub fn load(&self, model: &ModelConfig) -> Result<Datasets> {
        match self.kind {
            DatasetKind::Synthetic => {
                let side = model.image_side;
                let (s, t) = gen_synthetic_split(self.seed, self.n_per_class, model.classes, side, Split::Train)?;
                let (se, te) = gen_synthetic_split(self.seed, self.test_per_class, model.classes, side, Split::Test)?;
                Ok(Datasets {
                    source: s,
                    target: t.unlabeled(),
                    source_eval: se,
                    target_eval: te.into_eval(),
                })
            }
            DatasetKind::Folder => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("dataset.{key} is required for folder datasets")))
                };
                let source_dir = need(&self.source, "source")?;
                let target_dir = need(&self.target, "target")?;
                let source = load_folder(&source_dir, model.image_side)?;
                let target = load_folder(&target_dir, model.image_side)?;
                let target_eval = match &self.target_eval {
                    Some(p) => load_folder(p, model.image_side)?,
                    None => target.clone(),
                };
                if source.classes() != model.classes || target_eval.classes() != model.classes {
                    return Err(Error::Config(format!(
                        "model.classes = {} but the folders hold {} source and {} target classes",
                        model.classes,
                        source.classes(),
                        target_eval.classes()
                    )));
                }
                Ok(Datasets {
                    target: target.unlabeled(),
                    source_eval: source.clone(),
                    source,
                    target_eval: target_eval.into_eval(),
                })
            }
        }
    }
}

/// Complete description of a run; written verbatim into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when `path` ends in `.json`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every settable dotted key.
    pub fn keys() -> Vec<String> {
        let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut keys = Vec::new();
        for (section, inner) in v.as_object().unwrap() {
            match inner.as_object() {
                Some(fields) => keys.extend(fields.keys().map(|k| format!("{section}.{k}"))),
                None => keys.push(section.clone()),
            }
        }
        keys
    }

    /// Applies `key=value`; `key` is dotted (`train.steps`) or a bare field
    /// name that is unique across sections (`steps`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let keys = Self::keys();
        let full = if keys.iter().any(|k| k == key) {
            key.to_string()
        } else {
            let matches: Vec<&String> = keys.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
            match matches.as_slice() {
                [one] => one.to_string(),
                [] => {
                    return Err(Error::Config(format!(
                        "unknown key '{key}'; valid keys: {}",
                        keys.join(", ")
                    )))
                }
                many => {
                    let names: Vec<&str> = many.iter().map(|s| s.as_str()).collect();
                    return Err(Error::Config(format!(
                        "ambiguous key '{key}', use one of: {}",
                        names.join(", ")
                    )));
                }
            }
        };
        let value = parse_value(raw.trim());
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in full.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown key '{full}'")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{full}: {e}")))?;
        Ok(())
    }

    /// Applies [`PRECISION_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(PRECISION_ENV) {
            self.precision = v
                .parse()
                .map_err(|_| Error::Config(format!("{PRECISION_ENV} must be f32 or f64, got '{v}'")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    /// Writes `config.toml` plus a version stamp.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml())?;
        fs::write(
            dir.join("version.txt"),
            format!("fftat {}\nconfig {}\n", env!("CARGO_PKG_VERSION"), self.hash()),
        )?;
        Ok(())
    }
}

/// Override values: booleans and numbers as such, anything else a string.
fn parse_value(raw: &str) -> serde_json::Value {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw) {
        return v;
    }
    serde_json::Value::String(raw.trim_matches('"').to_string())
}
