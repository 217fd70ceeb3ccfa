//! Layered run configuration: defaults < the run directory's previous
//! `config.resolved` < `--config` file < `MSQALE_*` environment < flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use msqale::pipeline::RunConfig;
use toml::{Table, Value};

pub const RESOLVED_VERSION_LINE: &str = "# msqale resolved config v1";

/// Keys that have no default value and therefore no type to infer from.
const OPTIONAL_PATH_KEYS: &[&str] = &["base_dir"];

fn defaults() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Parses a command-line or environment string into the type the key has
/// in the defaults.
pub fn typed_value(key: &str, raw: &str) -> Result<Value> {
    let defaults = defaults();
    let Some(template) = defaults.get(key) else {
        if OPTIONAL_PATH_KEYS.contains(&key) {
            return Ok(Value::String(raw.to_string()));
        }
        bail!("unknown config key '{key}'");
    };
    let bad = || anyhow!("config key '{key}': cannot parse '{raw}'");
    Ok(match template {
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad())?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad())?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad())?),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(|p| p.trim().parse::<i64>().map(Value::Integer).map_err(|_| bad()))
                .collect::<Result<_>>()?,
        ),
        _ => Value::String(raw.to_string()),
    })
}

fn merge(into: &mut Table, layer: Table, source: &str) -> Result<()> {
    let known = defaults();
    for (k, v) in layer {
        if !known.contains_key(&k) && !OPTIONAL_PATH_KEYS.contains(&k.as_str()) {
            bail!("{source}: unknown config key '{k}'");
        }
        into.insert(k, v);
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))
}

/// `MSQALE_<KEY>` variables, keys lowercased. Unknown ones are ignored
/// with a warning.
fn env_layer(vars: impl Iterator<Item = (String, String)>) -> Result<Table> {
    let known = defaults();
    let mut t = Table::new();
    for (name, raw) in vars {
        let Some(key) = name.strip_prefix("MSQALE_") else {
            continue;
        };
        let key = key.to_ascii_lowercase();
        if !known.contains_key(&key) && !OPTIONAL_PATH_KEYS.contains(&key.as_str()) {
            log::warn!("ignoring {name}: not a config key");
            continue;
        }
        t.insert(key.clone(), typed_value(&key, &raw).with_context(|| format!("in {name}"))?);
    }
    Ok(t)
}

pub struct Layers<'a> {
    pub previous: Option<&'a Path>,
    pub file: Option<&'a Path>,
    pub env: Vec<(String, String)>,
    pub flags: Vec<(String, String)>,
}

pub fn resolve(layers: Layers<'_>) -> Result<RunConfig> {
    let mut t = defaults();
    if let Some(p) = layers.previous {
        merge(&mut t, read_table(p)?, &p.display().to_string())?;
    }
    if let Some(p) = layers.file {
        merge(&mut t, read_table(p)?, &p.display().to_string())?;
    }
    merge(&mut t, env_layer(layers.env.into_iter())?, "environment")?;
    let mut flags = Table::new();
    for (k, v) in layers.flags {
        flags.insert(k.clone(), typed_value(&k, &v)?);
    }
    merge(&mut t, flags, "flags")?;
    let cfg: RunConfig = Value::Table(t).try_into().context("resolving configuration")?;
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

pub fn to_resolved_text(cfg: &RunConfig) -> Result<String> {
    Ok(format!("{RESOLVED_VERSION_LINE}\n{}", toml::to_string(cfg)?))
}
