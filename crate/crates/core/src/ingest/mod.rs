//! Tabular sources: CSV and JSON-lines parsing, column type inference, and
//! row sampling. Values pass through untouched; there is no cleaning,
//! rescaling or imputation anywhere in this module.

mod formats;
mod infer;
mod sampling;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use formats::{emit_csv, emit_jsonl, parse_table, SourceFormat};
pub use infer::{infer_column_type, infer_column_type_with, InferOptions};
pub use sampling::{sample_epoch_rows, split_train_test, SampledRow};

pub use crate::value::{CellValue, ColumnType};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub column_type: ColumnType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TableManifest {
    pub columns: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
}

impl TableManifest {
    pub fn new(columns: Vec<(String, ColumnType)>) -> Result<Self> {
        let m = TableManifest {
            columns: columns.into_iter().map(|(name, column_type)| ColumnSpec { name, column_type }).collect(),
            target: None,
            task: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(Error::Manifest("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate column name `{}`", c.name)));
            }
        }
        if self.task.is_some() {
            match &self.target {
                Some(t) if seen.contains(t.as_str()) => {}
                Some(t) => return Err(Error::Manifest(format!("target `{t}` is not a column"))),
                None => return Err(Error::Manifest("task set without a target column".into())),
            }
        }
        Ok(())
    }

    pub fn column_type(&self, name: &str) -> Option<ColumnType> {
        self.columns.iter().find(|c| c.name == name).map(|c| c.column_type)
    }

    pub fn with_target(mut self, target: impl Into<String>, task: Task) -> Result<Self> {
        self.target = Some(target.into());
        self.task = Some(task);
        self.validate()?;
        Ok(self)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let m: TableManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub column: String,
    pub value: CellValue,
}

/// One table row as column/value pairs. Rows may be ragged: a column absent
/// from the row is equivalent to a missing cell.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Row {
    pub cells: Vec<Cell>,
}

impl Row {
    pub fn new(cells: Vec<(String, CellValue)>) -> Self {
        Row { cells: cells.into_iter().map(|(column, value)| Cell { column, value }).collect() }
    }

    pub fn get(&self, column: &str) -> Option<&CellValue> {
        self.cells.iter().find(|c| c.column == column).map(|c| &c.value)
    }

    pub fn present(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.value.is_missing())
    }

    /// The row without `column`, as used when a target is held out.
    pub fn without(&self, column: &str) -> Row {
        Row { cells: self.cells.iter().filter(|c| c.column != column).cloned().collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub manifest: TableManifest,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(name: impl Into<String>, manifest: TableManifest, rows: Vec<Row>) -> Self {
        Table { name: name.into(), manifest, rows }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let format = SourceFormat::from_path(path)
            .ok_or_else(|| Error::invalid(format!("unsupported table file {}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
        let manifest_path = path.with_file_name(format!("{stem}.manifest.json"));
        let manifest = if manifest_path.exists() { Some(TableManifest::from_json_file(&manifest_path)?) } else { None };
        let file = fs::File::open(path)?;
        let (manifest, rows) = parse_table(std::io::BufReader::new(file), format, manifest.as_ref())?;
        Ok(Table { name: stem, manifest, rows })
    }
}

impl Table {
    /// Loads a table using `expected` for column types. A manifest file next
    /// to the source that disagrees on a shared column, or a source lacking
    /// one of the expected columns, is a schema mismatch.
    pub fn from_path_with_manifest(path: &Path, expected: &TableManifest) -> Result<Self> {
        let format = SourceFormat::from_path(path)
            .ok_or_else(|| Error::invalid(format!("unsupported table file {}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
        let manifest_path = path.with_file_name(format!("{stem}.manifest.json"));
        if manifest_path.exists() {
            let own = TableManifest::from_json_file(&manifest_path)?;
            for c in &own.columns {
                if let Some(t) = expected.column_type(&c.name) {
                    if t != c.column_type {
                        return Err(Error::Manifest(format!(
                            "column `{}` is {} in {} but {t} in the model",
                            c.name,
                            c.column_type,
                            manifest_path.display()
                        )));
                    }
                }
            }
        }
        let file = fs::File::open(path)?;
        let (manifest, rows) = parse_table(std::io::BufReader::new(file), format, Some(expected))?;
        if let Some(first) = rows.first() {
            for c in &expected.columns {
                if first.get(&c.name).is_none() && rows.iter().all(|r| r.get(&c.name).is_none()) {
                    return Err(Error::Manifest(format!("column `{}` is missing from {}", c.name, path.display())));
                }
            }
        }
        Ok(Table { name: stem, manifest, rows })
    }
}

/// Loads every `.csv` / `.jsonl` file in `dir`, sorted by file name.
pub fn load_table_dir(dir: &Path) -> Result<Vec<Table>> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("data directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| SourceFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    let mut tables = Vec::with_capacity(paths.len());
    for p in paths {
        let t = Table::from_path(&p)?;
        if !t.rows.is_empty() {
            tables.push(t);
        }
    }
    if tables.is_empty() {
        return Err(Error::invalid(format!("no non-empty tables in {}", dir.display())));
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rejects_duplicates_and_dangling_targets() {
        let dup = TableManifest::new(vec![("a".into(), ColumnType::Text), ("a".into(), ColumnType::Number)]);
        assert!(matches!(dup, Err(Error::Manifest(_))));
        let m = TableManifest::new(vec![("a".into(), ColumnType::Text)]).unwrap();
        assert!(m.clone().with_target("b", Task::Regression).is_err());
        assert!(m.with_target("a", Task::Classification).is_ok());
    }

    #[test]
    fn manifest_json_shape() {
        let json = r#"{"columns":[{"name":"x","type":"number"},{"name":"y","type":"text"}],"target":"y","task":"classification"}"#;
        let m: TableManifest = serde_json::from_str(json).unwrap();
        m.validate().unwrap();
        assert_eq!(m.column_type("x"), Some(ColumnType::Number));
        assert_eq!(serde_json::to_string(&m).unwrap(), json);
    }
}
