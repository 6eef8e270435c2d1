//! Config files, shared CLI enums, and artifact plumbing.
//!
//! Each subcommand has a file-config struct in which every field is optional;
//! command resolution in `commands` fills the gaps with flags and defaults.
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use predhet::dataset::{Dataset, GeneratorConfig, TaskHint};
use predhet::families::FamilySpec;
use predhet::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

// ---------------------------------------------------------------------------
// Shared enums (flag spelling kebab-case, file spelling snake_case)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Regression,
    Classification,
}

impl TaskArg {
    pub fn hint(self) -> TaskHint {
        match self {
            TaskArg::Regression => TaskHint::Regression,
            TaskArg::Classification => TaskHint::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    V1Linear,
    V1LinearNoIntercept,
    V2Linear,
}

impl FamilyArg {
    /// Build the spec for data of the given shape. V2 takes its class count
    /// from the data, so the CSV must have been loaded as classification.
    pub fn spec(self, data: &Dataset) -> Result<FamilySpec> {
        match self {
            FamilyArg::V1Linear => Ok(FamilySpec::v1_linear(data.d())),
            FamilyArg::V1LinearNoIntercept => Ok(FamilySpec::v1_linear_no_intercept(data.d())),
            FamilyArg::V2Linear => match data.task().n_classes() {
                Some(classes) => Ok(FamilySpec::v2_linear(data.d(), classes)),
                None => Err(Error::InvalidConfig(
                    "a classification family needs classification data; pass --task classification"
                        .into(),
                )),
            },
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, FamilyArg::V2Linear)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Homogeneous,
    SelectionBias,
    HiddenVariable,
    SpuriousLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioArg {
    SelectionBias,
    HiddenVariable,
    SpuriousLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Erm,
    Balance,
    Irm,
    Iga,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceArg {
    True,
    Kmeans,
    Im,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleModeArg {
    SelectionBias,
    HiddenVariable,
    HomogeneousSweep,
}

// ---------------------------------------------------------------------------
// File configs
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub task: Option<TaskArg>,
    pub family: Option<FamilyArg>,
    pub k: Option<usize>,
    pub outer_lr: Option<f64>,
    pub outer_iters: Option<usize>,
    pub inner_alpha: Option<f64>,
    pub inner_steps: Option<usize>,
    pub eval_every: Option<usize>,
    /// Fraction of N below which an environment is skipped; 0 disables.
    pub mass_floor: Option<f64>,
    pub init_scale: Option<f64>,
    /// Inclusive K range like "2..6"; overrides `k`.
    pub sweep_k: Option<String>,
    pub elbow_ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodFile {
    pub out: Option<PathBuf>,
    pub scenario: Option<ScenarioArg>,
    pub data: Option<PathBuf>,
    pub train_n: Option<usize>,
    pub test_n: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub methods: Option<Vec<MethodArg>>,
    pub env_sources: Option<Vec<SourceArg>>,
    pub k: Option<usize>,
    pub irm_lambda: Option<f64>,
    pub iga_lambda: Option<f64>,
    pub fit_alpha: Option<f64>,
    pub fit_steps: Option<usize>,
    pub penalized_alpha: Option<f64>,
    pub penalized_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<OracleModeArg>,
    pub env_masses: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub sigma: Option<Vec<f64>>,
    pub sigma_y: Option<f64>,
    pub ef2: Option<f64>,
    pub n: Option<usize>,
    pub beta: Option<f64>,
    /// Sample sizes for the homogeneous sweep.
    pub ns: Option<Vec<usize>>,
    /// Label-noise SD for the homogeneous sweep.
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub b: Option<f64>,
    pub k: Option<usize>,
    pub delta: Option<f64>,
    pub n: Option<usize>,
    pub rademacher: Option<f64>,
    pub estimate_rademacher: Option<bool>,
    pub data: Option<PathBuf>,
    pub task: Option<TaskArg>,
    pub family: Option<FamilyArg>,
    pub draws: Option<usize>,
    pub ascent_alpha: Option<f64>,
    pub ascent_steps: Option<usize>,
}

/// Parse `path` as a `T`, or give the all-defaults `T` when no file was
/// named. A missing or malformed file is a config error (exit 2).
pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    require_file(path)?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(Error::from)
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!("no such file: {}", path.display())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// SHA-256 of the resolved configuration's canonical JSON.
pub fn config_hash<T: Serialize>(resolved: &T) -> Result<String> {
    let bytes = serde_json::to_vec(resolved)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

pub fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Pretty JSON with `config_hash` injected as the first key.
pub fn write_json_with_hash(path: &Path, hash: &str, value: serde_json::Value) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("config_hash".into(), hash.into());
    match value {
        serde_json::Value::Object(rest) => obj.extend(rest),
        other => {
            obj.insert("value".into(), other);
        }
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))?;
    write_text(path, &(text + "\n"))
}

/// CSV with the hash as a leading comment line the loader skips.
pub fn write_csv_with_hash(path: &Path, hash: &str, body: &str) -> Result<()> {
    write_text(path, &format!("# config_hash={hash}\n{body}"))
}
