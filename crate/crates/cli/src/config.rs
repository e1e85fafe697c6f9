//! TOML configuration with `--section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drkgc_core::pipeline::PipelineConfig;
use toml::{Table, Value};

/// Keys under `[data]` that hold paths; relative ones are resolved against
/// the config file's directory.
const PATH_KEYS: [&str; 6] = ["train", "valid", "test", "entity_labels", "relation_labels", "lexicon"];

/// Splits `--section.key=value` arguments from the rest.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.strip_prefix("--").and_then(|body| {
            let (key, value) = body.split_once('=')?;
            key.contains('.').then(|| (key.to_string(), value.to_string()))
        });
        match parsed {
            Some(kv) => overrides.push(kv),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

/// A bare word becomes a string; anything TOML can read as a value keeps
/// its type.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn resolve_paths(table: &mut Table, base: &Path) {
    let Some(Value::Table(data)) = table.get_mut("data") else {
        return;
    };
    for key in PATH_KEYS {
        if let Some(Value::String(s)) = data.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() && !s.is_empty() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

/// Dotted keys present in `given` but absent from `known`.
fn unknown_keys(given: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (Value::Table(g), Some(Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            (_, Some(_)) => {}
            // Optional keys left unset do not appear in the serialised form.
            (_, None) if prefix == "data" && PATH_KEYS.contains(&k.as_str()) => {}
            (_, None) => out.push(path),
        }
    }
}

/// Reads `path` (or starts from defaults), applies overrides and checks
/// every value. All problems are reported together.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            let mut t: Table = text.parse().with_context(|| format!("cannot parse config {}", p.display()))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            resolve_paths(&mut t, &base);
            t
        }
        None => Table::new(),
    };
    for (key, raw) in overrides {
        set_path(&mut table, key, parse_value(raw))?;
    }
    let config: PipelineConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    let known = match Value::try_from(&config).context("configuration does not serialise")? {
        Value::Table(t) => t,
        _ => unreachable!("a struct serialises to a table"),
    };
    let mut problems = Vec::new();
    let mut unknown = Vec::new();
    unknown_keys(&table, &known, "", &mut unknown);
    problems.extend(unknown.into_iter().map(|k| format!("unknown setting {k}")));
    problems.extend(config.validate());
    if !problems.is_empty() {
        bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
    }
    Ok(config)
}
