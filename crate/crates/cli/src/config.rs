use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{de::DeserializeOwned, Serialize};

use crate::Failure;

pub fn load(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Overlays the `[section]` table of the config file on the parsed flags.
/// Argument structs deny unknown fields, so typos are reported.
pub fn apply<A>(args: A, file: Option<&toml::Table>, section: &str) -> Result<A, Failure>
where
    A: Serialize + DeserializeOwned,
{
    let Some(table) = file.and_then(|f| f.get(section)) else {
        return Ok(args);
    };
    let overrides = table
        .as_table()
        .ok_or_else(|| Failure::Usage(anyhow!("config: [{section}] must be a table")))?;
    let mut merged = toml::Table::try_from(&args).map_err(|e| Failure::Usage(e.into()))?;
    merged.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(anyhow!("config [{section}]: {}", e.message())))
}
