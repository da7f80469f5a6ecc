//! Settings files and the fully resolved configuration of each command.
//!
//! Every resolved configuration is also the schema of its settings file, so
//! the `config` object of a JSON report can be fed back through `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pruneprint::completion::CompletionConfig;
use pruneprint::revival::RevivalPlan;
use pruneprint::synthbench::{BenchConfig, IdealVariant, MaskMode, SynthSpec};
use pruneprint::tensor::Dtype;

use crate::grid::GridSpec;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] pruneprint::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Rejections of the resolved configuration are usage errors.
pub fn invalid(e: pruneprint::Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Reads a TOML settings file, or the `config` object of a JSON report.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| usage(format!("invalid settings in {}: {e}", path.display()));
    if path.extension().is_some_and(|x| x == "json") {
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        serde_json::from_value(value).map_err(|e| bad(&e))
    } else {
        toml::from_str(&text).map_err(|e| bad(&e))
    }
}

fn default_glob() -> String {
    "*.npy".to_string()
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub input: Option<PathBuf>,
    pub glob: String,
    pub output: Option<PathBuf>,
    pub dtype: Dtype,
    pub jobs: usize,
    pub completion: CompletionConfig,
    pub plan: RevivalPlan,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            input: None,
            glob: default_glob(),
            output: None,
            dtype: Dtype::F8,
            jobs: default_jobs(),
            completion: CompletionConfig::default(),
            plan: RevivalPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefendConfig {
    pub input: Option<PathBuf>,
    pub glob: String,
    pub output: Option<PathBuf>,
    pub dtype: Dtype,
    pub sigma_m: Option<f64>,
    pub w: Option<f64>,
    pub seed: u64,
}

impl Default for DefendConfig {
    fn default() -> Self {
        DefendConfig {
            input: None,
            glob: default_glob(),
            output: None,
            dtype: Dtype::F8,
            sigma_m: None,
            w: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub input: Option<PathBuf>,
    pub glob: String,
    pub w: Option<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            input: None,
            glob: default_glob(),
            w: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub alpha: GridSpec,
    pub sigma_m: GridSpec,
    pub sigma_u: f64,
    pub w: Option<f64>,
    pub output: Option<PathBuf>,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            alpha: GridSpec {
                start: 0.05,
                stop: 0.5,
                count: 10,
            },
            sigma_m: GridSpec {
                start: 1e-6,
                stop: 1e-1,
                count: 25,
            },
            sigma_u: 0.02,
            w: None,
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PConfig {
    pub alpha: Option<f64>,
    pub sigma_m: Option<f64>,
    pub sigma_u: Option<f64>,
    pub w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSynthConfig {
    pub output: Option<PathBuf>,
    pub jobs: usize,
    pub bench: BenchConfig,
}

impl Default for BenchSynthConfig {
    fn default() -> Self {
        BenchSynthConfig {
            output: None,
            jobs: default_jobs(),
            bench: BenchConfig::default(),
        }
    }
}

/// The synthetic cell used when nothing else is configured.
pub fn default_cell_spec() -> SynthSpec {
    SynthSpec::new(200, 100, 5, 0)
}

pub fn default_cell_mask() -> MaskMode {
    MaskMode::Uniform { frac: 0.2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdealConfig {
    pub truth: Option<PathBuf>,
    pub pruned: Option<PathBuf>,
    /// Used when no truth file is given.
    pub spec: SynthSpec,
    /// Used when no pruned file is given.
    pub mask: MaskMode,
    pub variants: Vec<IdealVariant>,
    pub plan: RevivalPlan,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for IdealConfig {
    fn default() -> Self {
        IdealConfig {
            truth: None,
            pruned: None,
            spec: default_cell_spec(),
            mask: default_cell_mask(),
            variants: vec![
                IdealVariant::TrueMagRandomSign,
                IdealVariant::TrueSignSampledMag,
                IdealVariant::TrueSignNms,
            ],
            plan: RevivalPlan::default(),
            seed: 0,
            output: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_only_named_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.toml");
        fs::write(&path, "input = \"layers\"\n[completion]\nrank_cap = 64\n[plan]\nk_fraction = 0.3\n").unwrap();
        let cfg: AttackConfig = load(Some(&path)).unwrap();
        assert_eq!(cfg.input.as_deref(), Some(Path::new("layers")));
        assert_eq!(cfg.completion.rank_cap, 64);
        assert_eq!(cfg.completion.rel_tol, 1e-4);
        assert_eq!(cfg.plan.k_fraction, 0.3);
        assert_eq!(cfg.glob, "*.npy");
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.toml");
        fs::write(&path, "inptu = \"x\"\n").unwrap();
        let err = load::<AttackConfig>(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn report_config_object_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let cfg = DefendConfig {
            sigma_m: Some(1e-4),
            seed: 7,
            ..DefendConfig::default()
        };
        let report = serde_json::json!({ "tool": "pruneprint", "config": cfg, "result": {} });
        fs::write(&path, report.to_string()).unwrap();
        assert_eq!(load::<DefendConfig>(Some(&path)).unwrap(), cfg);
    }
}
