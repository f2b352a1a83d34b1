//! Plot-ready output tables.
//!
//! Every analysis emits rows with a fixed column set. Tables render either as
//! tab-separated text with a one-line header or as JSON lines (one object per
//! row, keys in column order).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Tsv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Tsv => "tsv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

/// Formats a float with a fixed number of decimals so output is stable.
pub fn fixed(x: f64, decimals: usize) -> Value {
    if x.is_finite() {
        Value::String(format!("{x:.decimals$}"))
    } else {
        Value::String("undefined".into())
    }
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; panics if the arity does not match the header, which
    /// is always a programming error.
    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row arity for {:?}", self.columns);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn cell(v: &Value) -> String {
        match v {
            Value::String(s) => s.replace(['\t', '\n'], " "),
            Value::Null => String::new(),
            other => other.to_string(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Self::cell).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push('{');
            for (i, (c, v)) in self.columns.iter().zip(row).enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}:{}", Value::String(c.clone()), v);
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Tsv => self.to_tsv(),
            Format::Jsonl => self.to_jsonl(),
        }
    }

    /// Writes `<dir>/<stem>.<ext>` and returns the path.
    pub fn write(&self, dir: &Path, stem: &str, format: Format) -> Result<std::path::PathBuf, Error> {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        std::fs::write(&path, self.render(format)).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
