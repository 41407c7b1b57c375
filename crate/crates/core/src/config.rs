//! Run configuration: a flat JSON object selecting and tuning a harmonization method.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::harmonize::MethodRegistry;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub covariates: Vec<String>,
    /// Covariates forced to categorical even if their cells look numeric.
    pub categorical: Vec<String>,
    pub alpha: f64,
    pub combat_eb: bool,
    pub combat_tol: f64,
    pub combat_max_iter: usize,
    pub output_dir: Option<PathBuf>,
    pub image_column: String,
    pub site_column: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: "none".into(),
            covariates: Vec::new(),
            categorical: Vec::new(),
            alpha: DEFAULT_ALPHA,
            combat_eb: true,
            combat_tol: 1e-4,
            combat_max_iter: 100,
            output_dir: None,
            image_column: "image".into(),
            site_column: "site".into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    method: String,
    #[serde(default)]
    covariates: Vec<String>,
    #[serde(default)]
    categorical: Vec<String>,
    alpha: Option<f64>,
    combat_eb: Option<bool>,
    combat_tol: Option<f64>,
    combat_max_iter: Option<usize>,
    output_dir: Option<PathBuf>,
    image_column: Option<String>,
    site_column: Option<String>,
}

/// Reads a run config, accepting only the built-in method names.
pub fn read_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    read_run_config_with(path, &MethodRegistry::with_builtins())
}

/// Reads a run config, resolving the method against `registry`.
pub fn read_run_config_with(path: impl AsRef<Path>, registry: &MethodRegistry) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(path, &text, registry)
}

pub fn parse_run_config(path: &Path, text: &str, registry: &MethodRegistry) -> Result<RunConfig> {
    let raw: RawConfig = parse_json(path, text)?;
    let err = |message: String| Error::Config {
        path: path.to_path_buf(),
        message,
    };
    if registry.get(&raw.method).is_none() {
        return Err(err(format!(
            "unknown method {:?}; available: {}",
            raw.method,
            registry.names().join(", ")
        )));
    }
    let defaults = RunConfig::default();
    let alpha = raw.alpha.unwrap_or(defaults.alpha);
    validate_alpha(alpha).map_err(err)?;
    let combat_tol = raw.combat_tol.unwrap_or(defaults.combat_tol);
    if !(combat_tol.is_finite() && combat_tol > 0.0) {
        return Err(err(format!("combat_tol must be positive, got {combat_tol}")));
    }
    let combat_max_iter = raw.combat_max_iter.unwrap_or(defaults.combat_max_iter);
    if combat_max_iter == 0 {
        return Err(err("combat_max_iter must be at least 1".into()));
    }
    for name in &raw.categorical {
        if !raw.covariates.contains(name) {
            return Err(err(format!("categorical {name:?} is not listed in covariates")));
        }
    }
    Ok(RunConfig {
        method: raw.method,
        covariates: raw.covariates,
        categorical: raw.categorical,
        alpha,
        combat_eb: raw.combat_eb.unwrap_or(defaults.combat_eb),
        combat_tol,
        combat_max_iter,
        output_dir: raw.output_dir,
        image_column: raw.image_column.unwrap_or(defaults.image_column),
        site_column: raw.site_column.unwrap_or(defaults.site_column),
    })
}

pub fn validate_alpha(alpha: f64) -> std::result::Result<(), String> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(format!("alpha must lie in (0, 1), got {alpha}"))
    }
}

/// Parses JSON, reporting failures with line, column, and byte offset.
pub(crate) fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::Config {
            path: path.to_path_buf(),
            message: format!("{e} (byte offset {offset})"),
        }
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}
