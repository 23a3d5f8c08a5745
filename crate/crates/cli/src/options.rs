//! Run configuration assembled from a base, an optional TOML file and flags.
//!
//! Keys are flat and dotted (`fit.w`, `decomp.alpha`, `prune.t_m`). Later sources
//! win: base, then file, then `--set key=value` overrides in order.

use std::path::Path;

use lightsq::config::ConfigError;
use lightsq::RunConfig;
use toml::{Table, Value};

use crate::CliError;

/// Parses one `key=value` override. Values that are not valid TOML are taken as
/// bare strings, so `input=/tmp/a.obj` works unquoted.
pub fn parse_override(text: &str) -> Result<Table, CliError> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("override {text:?} has an empty key")));
    }
    let value = value.trim();
    toml::from_str::<Table>(&format!("{key} = {value}"))
        .or_else(|_| toml::from_str::<Table>(&format!("{key} = {}", Value::String(value.into()))))
        .map_err(|e| CliError::Usage(format!("bad override {text:?}: {e}")))
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn assemble(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match Value::try_from(base).map_err(|e| CliError::Usage(e.to_string()))? {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        merge(&mut table, toml::from_str(&text).map_err(ConfigError::from)?);
    }
    for o in overrides {
        merge(&mut table, parse_override(o)?);
    }
    let config: RunConfig = Value::Table(table).try_into().map_err(ConfigError::from)?;
    config.validate()?;
    Ok(config)
}
