//! Layered configuration: struct defaults, then an optional TOML file, then
//! `--dotted.key value` overrides from the command line.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Name of the file each command writes next to its outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Splits `--key value` and `--key=value` tokens into pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key value, found {tok:?}"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("override --{key} has no value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn merge(base: &mut Table, patch: Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn collect_paths(table: &Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        out.push(prefix.clone());
        if let Value::Table(t) = v {
            collect_paths(t, prefix, out);
        }
        prefix.pop();
    }
}

fn lookup<'a>(table: &'a Table, path: &[String]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut t = table;
    for p in parents {
        t = t.get(p)?.as_table()?;
    }
    t.get(last)
}

fn parse_value(raw: &str, current: Option<&Value>) -> Value {
    let parse = |s: &str| {
        toml::from_str::<Table>(&format!("v = {s}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    let parsed = match current {
        Some(Value::Array(_)) if !raw.trim_start().starts_with('[') => parse(&format!("[{raw}]")),
        Some(Value::String(_)) => None,
        _ => parse(raw),
    };
    match (parsed, current) {
        (Some(Value::Integer(i)), Some(Value::Float(_))) => Value::Float(i as f64),
        (Some(Value::Array(a)), Some(Value::Array(cur)))
            if cur.first().is_some_and(Value::is_float) =>
        {
            Value::Array(
                a.into_iter()
                    .map(|v| match v {
                        Value::Integer(i) => Value::Float(i as f64),
                        v => v,
                    })
                    .collect(),
            )
        }
        (Some(v), _) => v,
        (None, _) => Value::String(raw.to_string()),
    }
}

fn set(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{p} is not a section"))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Applies one override. The key matches every path that ends with it, so
/// `sampler.T` reaches `model.sampler.T`; a key matching nothing is taken
/// from the root and left for deserialization to accept or reject.
fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let want: Vec<String> = key.split('.').map(str::to_string).collect();
    if want.iter().any(String::is_empty) {
        bail!("malformed key {key:?}");
    }
    let mut paths = Vec::new();
    collect_paths(table, &mut Vec::new(), &mut paths);
    let mut hits: Vec<Vec<String>> = paths.into_iter().filter(|p| p.ends_with(&want)).collect();
    if hits.is_empty() {
        hits.push(want);
    }
    for path in hits {
        let value = parse_value(raw, lookup(table, &path));
        set(table, &path, value)?;
    }
    Ok(())
}

/// Resolves a configuration from `defaults`, an optional file and
/// overrides. Unknown keys are rejected by the target type.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<T> {
    let mut table = Table::try_from(defaults).context("serializing defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut table, patch);
    }
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid configuration: {}", e.message()))
}

/// Writes the resolved configuration into `dir`.
pub fn persist<T: Serialize>(config: &T, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string_pretty(config)?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
