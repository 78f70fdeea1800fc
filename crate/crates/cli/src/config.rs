//! TOML config files with schema checks that report the offending field.

use std::path::Path;

use neuron_ot::harness::CONFIG_SCHEMA_VERSION;
use neuron_ot::SolverSettings;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Config accepted by `solve`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            solver: SolverSettings::default(),
        }
    }
}

pub fn parse<T: DeserializeOwned>(text: &str, source: &str) -> Result<T, CliError> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| CliError::Input(format!("{source}: {}", e.to_string().trim_end())))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        CliError::Input(format!("{source}: field `{path}`: {}", inner.trim_end()))
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub fn check_version(found: u32, source: &str) -> Result<(), CliError> {
    if found != CONFIG_SCHEMA_VERSION {
        return Err(CliError::Input(format!(
            "{source}: field `schema_version`: version {found} is not supported (expected {CONFIG_SCHEMA_VERSION})"
        )));
    }
    Ok(())
}
