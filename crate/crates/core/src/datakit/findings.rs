//! Multi-label finding targets for encoder pretraining.
//!
//! File layout: `id,<finding 1>,<finding 2>,...` with cells `1` (present),
//! `0` (absent), `-1` or empty (uncertain / not mentioned).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FindingsError {
    #[error("findings io: {0}")]
    Io(#[from] std::io::Error),
    #[error("findings line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How uncertain findings become binary targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertainPolicy {
    #[default]
    Negative,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindingsTable {
    pub vocabulary: Vec<String>,
    /// `None` marks an uncertain entry.
    pub rows: BTreeMap<String, Vec<Option<bool>>>,
}

impl FindingsTable {
    pub fn targets(&self, id: &str, policy: UncertainPolicy) -> Option<Vec<bool>> {
        let fill = policy == UncertainPolicy::Positive;
        self.rows
            .get(id)
            .map(|row| row.iter().map(|v| v.unwrap_or(fill)).collect())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!("id,{}\n", self.vocabulary.join(","));
        for (id, row) in &self.rows {
            let cells: Vec<&str> = row
                .iter()
                .map(|v| match v {
                    Some(true) => "1",
                    Some(false) => "0",
                    None => "-1",
                })
                .collect();
            out.push_str(&format!("{id},{}\n", cells.join(",")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), FindingsError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, FindingsError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(FindingsError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let mut cols = header.split(',');
        if cols.next().map(str::trim) != Some("id") {
            return Err(FindingsError::Parse {
                line: 1,
                message: "first column must be `id`".into(),
            });
        }
        let vocabulary: Vec<String> = cols.map(|c| c.trim().to_string()).collect();
        if vocabulary.is_empty() {
            return Err(FindingsError::Parse {
                line: 1,
                message: "no finding columns".into(),
            });
        }
        let mut rows = BTreeMap::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != vocabulary.len() + 1 {
                return Err(FindingsError::Parse {
                    line: i + 1,
                    message: format!("expected {} cells, got {}", vocabulary.len() + 1, cells.len()),
                });
            }
            let values = cells[1..]
                .iter()
                .map(|c| match *c {
                    "1" | "1.0" => Ok(Some(true)),
                    "0" | "0.0" => Ok(Some(false)),
                    "-1" | "-1.0" | "" => Ok(None),
                    other => Err(FindingsError::Parse {
                        line: i + 1,
                        message: format!("bad cell `{other}`"),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.insert(cells[0].to_string(), values);
        }
        Ok(Self { vocabulary, rows })
    }

    pub fn load(path: &Path) -> Result<Self, FindingsError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertain_policy() {
        let t = FindingsTable::parse("id,A,B,C\nx,1,-1,0\ny,0,,1\n").unwrap();
        assert_eq!(
            t.targets("x", UncertainPolicy::Negative),
            Some(vec![true, false, false])
        );
        assert_eq!(t.targets("y", UncertainPolicy::Positive), Some(vec![false, true, true]));
        assert_eq!(FindingsTable::parse(&t.to_csv_string()).unwrap(), t);
        assert!(FindingsTable::parse("id,A\nx,2\n").is_err());
    }
}
