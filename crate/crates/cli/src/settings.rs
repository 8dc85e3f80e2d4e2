//! Strict dotted-key configuration with command-line overrides.

use crate::failure::Failure;
use kpz_core::ExperimentConfig;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use toml::{Table, Value};

/// Reads `path` (if any), applies `key=value` overrides in order and
/// deserializes, rejecting keys the configuration does not know.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Failure::config(format!("override `{o}` is not key=value")))?;
        set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    check_keys(&table, &known_keys(), "")?;
    ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| Failure::config(e.to_string()))
}

/// A TOML literal when it parses as one, else the raw text as a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Failure::config(format!("empty key in override `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Failure::config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn known_keys() -> Table {
    match Value::try_from(ExperimentConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("the default configuration serializes to a table"),
    }
}

fn check_keys(given: &Table, known: &Table, prefix: &str) -> Result<(), Failure> {
    for (k, v) in given {
        let name = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => return Err(Failure::config(format!("unknown key `{name}`"))),
            (Some(Value::Table(inner)), Value::Table(sub)) => check_keys(sub, inner, &format!("{name}."))?,
            (Some(Value::Table(_)), _) => return Err(Failure::config(format!("`{name}` must be a table"))),
            _ => {}
        }
    }
    Ok(())
}

/// Canonical text of a configuration: every key, fixed order.
pub fn normalized(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("configuration serializes")
}

/// Git-style content hash: SHA-256 of `config <len>\0<normalized text>`.
pub fn content_hash(config: &ExperimentConfig) -> String {
    let body = normalized(config);
    let mut h = Sha256::new();
    h.update(format!("config {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize().as_slice())
}
