//! Scenario resolution: built-in name or TOML file, plus dotted-path
//! `--set key=value` overrides applied to the TOML document before
//! deserialization.

use crate::{CliError, ScenarioArgs};
use mfg_core::scenario::{builtin, ScenarioConfig};
use std::path::Path;

pub fn resolve_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig, CliError> {
    let base = match (&args.scenario, &args.config) {
        (Some(name), None) => builtin(name).ok_or_else(|| {
            CliError::config(
                "scenario-unknown",
                format!("no built-in scenario named `{name}` (see `mfg scenarios`)"),
            )
        })?,
        (None, Some(path)) => load_config(path)?,
        _ => {
            return Err(CliError::config(
                "scenario-missing",
                "exactly one of --scenario or --config is required",
            ))
        }
    };
    apply_overrides(base, &args.set)
}

fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::config(
            "config-not-found",
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    ScenarioConfig::from_toml(&text)
        .map_err(|e| CliError::config("config-parse", format!("{}: {e}", path.display())))
}

pub fn apply_overrides(
    cfg: ScenarioConfig,
    sets: &[String],
) -> Result<ScenarioConfig, CliError> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut doc = toml::Value::try_from(&cfg)
        .map_err(|e| CliError::config("config-invalid", format!("re-serialization failed: {e}")))?;
    for entry in sets {
        let Some((key, raw)) = entry.split_once('=') else {
            return Err(CliError::config(
                "override-syntax",
                format!("override `{entry}` is not KEY=VALUE"),
            ));
        };
        let value = parse_value(raw.trim());
        set_path(&mut doc, key.trim(), value).map_err(|msg| {
            CliError::config("override-path", format!("--set {entry}: {msg}"))
        })?;
    }
    let cfg: ScenarioConfig = doc
        .try_into()
        .map_err(|e| CliError::config("override-type", format!("override produced an invalid scenario: {e}")))?;
    cfg.validate()
        .map_err(|e| CliError::config("config-invalid", e.to_string()))?;
    Ok(cfg)
}

/// Interprets the raw override text as a TOML scalar, arrays included;
/// anything unparseable is kept as a string (expressions contain `*`).
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err("empty key path".into());
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` is not a table"))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    let leaf = parts[parts.len() - 1];
    node.as_table_mut()
        .ok_or_else(|| format!("parent of `{leaf}` is not a table"))?
        .insert(leaf.to_string(), value);
    Ok(())
}

pub fn parse_point(text: &str, dim: usize) -> Result<Vec<f64>, CliError> {
    let parts: Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match parts {
        Ok(v) if v.len() == dim => Ok(v),
        Ok(v) => Err(CliError::config(
            "point-dimension",
            format!("expected {dim} coordinates, got {}", v.len()),
        )),
        Err(e) => Err(CliError::config("point-parse", format!("bad point `{text}`: {e}"))),
    }
}
