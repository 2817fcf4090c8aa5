//! `--config` files: TOML with optional `[train]`, `[synth]` and `[simulate]`
//! sections. A file without sections is read as a flat training config.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

const SECTIONS: [&str; 3] = ["train", "synth", "simulate"];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let sectioned = table.keys().any(|k| SECTIONS.contains(&k.as_str()));
        if sectioned {
            if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
                return Err(CliError::data(format!(
                    "{}: unknown top-level key `{k}` (expected sections {SECTIONS:?})",
                    path.display()
                )));
            }
            Ok(Self { table })
        } else {
            let mut wrapped = toml::Table::new();
            wrapped.insert("train".into(), toml::Value::Table(table));
            Ok(Self { table: wrapped })
        }
    }

    /// Deserializes a section; a missing section yields the type's default.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T, CliError> {
        match self.table.get(name) {
            None => Ok(T::default()),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::data(format!("config section [{name}]: {e}"))),
        }
    }
}
