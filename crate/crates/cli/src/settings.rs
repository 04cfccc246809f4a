//! Flag and config-file layering. Values from a config file replace the
//! ones given on the command line; `DPUNET_SEED` replaces both.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use toml::{Table, Value};

use dpunet::training::SEED_ENV;

/// Recursively copies `over` into `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Layers `file` over `base` and deserializes the result.
pub fn resolve<T: DeserializeOwned>(mut base: Table, file: Option<&Path>) -> anyhow::Result<T> {
    if let Some(p) = file {
        merge(&mut base, read_table(p)?);
    }
    Value::Table(base).try_into().context("invalid settings")
}

pub fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("{SEED_ENV}={v:?} is not an unsigned integer")
            })?))
        }
        Err(_) => Ok(None),
    }
}

/// Collects command-line values that were actually given.
#[derive(Default)]
pub struct Flags(pub Table);

impl Flags {
    pub fn set<V: Into<Value>>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn path(&mut self, key: &str, v: Option<&Path>) -> &mut Self {
        self.set(key, v.map(|p| p.display().to_string()))
    }

    pub fn into_table(self) -> Table {
        self.0
    }
}
