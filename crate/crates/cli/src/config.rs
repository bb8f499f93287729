//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use volcls_core::data::{AugmentationSpec, Preprocess, DEFAULT_RATIOS};
use volcls_core::models::{Architecture, ModelConfig};
use volcls_core::train::TrainConfig;
use volcls_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratios: DEFAULT_RATIOS, stratified: true }
    }
}

/// Everything that determines a training run. Written to the run directory
/// before any computation; feeding it back with `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationSpec,
    pub preprocess: Preprocess,
    pub split: SplitConfig,
    /// Data-pipeline workers. Loading is sequential, so only 1 is accepted.
    pub workers: usize,
}

impl RunConfig {
    pub fn defaults(architecture: Architecture) -> Self {
        RunConfig {
            manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            model: ModelConfig::reference(architecture),
            train: TrainConfig::default(),
            augmentation: AugmentationSpec::default(),
            preprocess: Preprocess::default(),
            split: SplitConfig::default(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::Config("manifest: a dataset manifest is required (--manifest)".into()));
        }
        if self.workers != 1 {
            return Err(Error::Config(format!("workers: only 1 is supported, got {}", self.workers)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.augmentation.validate().map_err(|e| e.context("augmentation"))?;
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Sets a dotted path such as `train.lr`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj.entry(p.to_string()).or_insert(Value::Object(Default::default()));
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Deserializes with the offending field path in the error message.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Config(format!("{what}: field '{}': {}", e.path(), e.inner())))
}

/// Layers defaults, an optional config file and flag overrides (dotted
/// paths), in that order of increasing precedence.
pub fn resolve(file: Option<&Path>, overrides: Vec<(&str, Value)>) -> Result<RunConfig> {
    let file_value = file.map(read_json).transpose()?;
    let arch_of = |v: &Value| v.pointer("/model/architecture").and_then(Value::as_str).map(str::to_string);
    let flag_arch = overrides.iter().find(|(k, _)| *k == "model.architecture").and_then(|(_, v)| v.as_str().map(str::to_string));
    let arch: Architecture = match flag_arch.or_else(|| file_value.as_ref().and_then(arch_of)) {
        Some(a) => a.parse()?,
        None => Architecture::Convnet3d,
    };
    // Defaults come from the chosen architecture's template, so fields of
    // another template never leak in.
    let mut value = serde_json::to_value(RunConfig::defaults(arch))?;
    if let Some(mut f) = file_value {
        // The training recipe owns dropout; a model-section value counts
        // as the recipe's when the file gives no train.dropout.
        if f.pointer("/train/dropout").is_none() {
            if let Some(d) = f.pointer("/model/dropout").cloned() {
                set_path(&mut f, "train.dropout", d);
            }
        }
        merge(&mut value, f);
    }
    for (k, v) in overrides {
        set_path(&mut value, k, v);
    }
    if let Some(d) = value.pointer("/train/dropout").cloned() {
        set_path(&mut value, "model.dropout", d);
    }
    from_value(value, "run config")
}
