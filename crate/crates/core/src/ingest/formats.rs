use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::{infer_column_type, ColumnSpec, Row, TableManifest};
use crate::error::{Error, Result};
use crate::value::CellValue;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    Csv,
    Jsonl,
}

impl SourceFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(SourceFormat::Csv),
            "jsonl" | "ndjson" => Some(SourceFormat::Jsonl),
            _ => None,
        }
    }
}

/// Raw, untyped table: column names in first-seen order and per-row raw
/// strings (`None` for JSON null / absent keys).
struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<(usize, Option<String>)>>,
}

fn read_csv<R: Read>(source: R) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        rows.push(record.iter().enumerate().map(|(i, v)| (i, Some(v.to_string()))).collect());
    }
    Ok(RawTable { columns: headers, rows })
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

fn read_jsonl<R: BufRead>(source: R) -> Result<RawTable> {
    let mut columns: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line_no = lineno as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Map<String, Value> = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let mut row = Vec::with_capacity(obj.len());
        for (key, value) in obj {
            let raw = match value {
                Value::Null => None,
                Value::Bool(b) => Some(b.to_string()),
                Value::Number(n) => Some(n.to_string()),
                Value::String(s) => Some(s),
                Value::Array(_) | Value::Object(_) => {
                    return Err(Error::Parse { line: line_no, message: format!("non-scalar value for key `{key}`") })
                }
            };
            let col = *index.entry(key.clone()).or_insert_with(|| {
                columns.push(key);
                columns.len() - 1
            });
            row.push((col, raw));
        }
        rows.push(row);
    }
    Ok(RawTable { columns, rows })
}

/// Parses a CSV or JSON-lines source into typed rows. Without a manifest,
/// column types are inferred; cells that fail their column's parse become
/// `Missing`.
pub fn parse_table<R: BufRead>(
    source: R,
    format: SourceFormat,
    manifest: Option<&TableManifest>,
) -> Result<(TableManifest, Vec<Row>)> {
    let raw = match format {
        SourceFormat::Csv => read_csv(source)?,
        SourceFormat::Jsonl => read_jsonl(source)?,
    };
    let mut seen = std::collections::HashSet::new();
    for c in &raw.columns {
        if !seen.insert(c.as_str()) {
            return Err(Error::Manifest(format!("duplicate column name `{c}`")));
        }
    }

    let mut out = match manifest {
        Some(m) => {
            m.validate()?;
            m.clone()
        }
        None => TableManifest::default(),
    };
    let mut types = Vec::with_capacity(raw.columns.len());
    for (ci, name) in raw.columns.iter().enumerate() {
        let ty = match out.column_type(name) {
            Some(t) => t,
            None => {
                let values: Vec<&str> = raw
                    .rows
                    .iter()
                    .flat_map(|r| r.iter().filter(|(c, _)| *c == ci).filter_map(|(_, v)| v.as_deref()))
                    .collect();
                let t = infer_column_type(&values);
                out.columns.push(ColumnSpec { name: name.clone(), column_type: t });
                t
            }
        };
        types.push(ty);
    }
    out.validate()?;

    let rows = raw
        .rows
        .into_iter()
        .map(|r| {
            Row::new(
                r.into_iter()
                    .map(|(ci, v)| {
                        let value = v.map_or(CellValue::Missing, |s| CellValue::parse_as(&s, types[ci]));
                        (raw.columns[ci].clone(), value)
                    })
                    .collect(),
            )
        })
        .collect();
    Ok((out, rows))
}

/// Writes rows as CSV with the manifest's columns as header; absent and
/// missing cells are written as empty fields.
pub fn emit_csv<W: Write>(manifest: &TableManifest, rows: &[Row], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(manifest.columns.iter().map(|c| c.name.as_str())).map_err(|e| csv_error(&e))?;
    for row in rows {
        let record: Vec<String> =
            manifest.columns.iter().map(|c| row.get(&c.name).map_or(String::new(), CellValue::render)).collect();
        w.write_record(&record).map_err(|e| csv_error(&e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one JSON object per row in the row's own cell order; missing cells
/// become `null`.
pub fn emit_jsonl<W: Write>(rows: &[Row], mut sink: W) -> Result<()> {
    for row in rows {
        let mut obj = Map::new();
        for cell in &row.cells {
            let v = match &cell.value {
                CellValue::Text(s) => Value::String(s.clone()),
                CellValue::Number(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
                CellValue::Date(d) => Value::String(d.to_string()),
                CellValue::Missing => Value::Null,
            };
            obj.insert(cell.column.clone(), v);
        }
        serde_json::to_writer(&mut sink, &obj)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::ColumnType;

    #[test]
    fn csv_with_inferred_types() {
        let (m, rows) = parse_table("a,b\n1,x\n2,y\n".as_bytes(), SourceFormat::Csv, None).unwrap();
        assert_eq!(m.column_type("a"), Some(ColumnType::Number));
        assert_eq!(m.column_type("b"), Some(ColumnType::Text));
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].get("a"), Some(&CellValue::Number(2.0)));
    }

    #[test]
    fn jsonl_rows_are_variable_length() {
        let (m, rows) = parse_table("{\"a\": 1}\n{\"b\": \"x\"}\n".as_bytes(), SourceFormat::Jsonl, None).unwrap();
        assert_eq!(m.columns.len(), 2);
        assert_eq!(rows[0].cells.len(), 1);
        assert_eq!(rows[1].get("b"), Some(&CellValue::Text("x".into())));
        assert_eq!(rows[1].get("a"), None);
    }

    #[test]
    fn dirty_numeric_cell_becomes_missing() {
        let src = "a\n1\n2\n3\n4\nfoo\n5\n6\n7\n8\n9\n";
        let (m, rows) = parse_table(src.as_bytes(), SourceFormat::Csv, None).unwrap();
        assert_eq!(m.column_type("a"), Some(ColumnType::Number));
        assert_eq!(rows[4].get("a"), Some(&CellValue::Missing));
        assert_eq!(rows[5].get("a"), Some(&CellValue::Number(5.0)));
    }

    #[test]
    fn outliers_pass_through_untouched() {
        let (_, rows) = parse_table("v\n1\n1e30\n-7.25e-300\n".as_bytes(), SourceFormat::Csv, None).unwrap();
        assert_eq!(rows[1].get("v"), Some(&CellValue::Number(1e30)));
        assert_eq!(rows[2].get("v"), Some(&CellValue::Number(-7.25e-300)));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad_csv = "a,b\n1,2\n3\n";
        match parse_table(bad_csv.as_bytes(), SourceFormat::Csv, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_json = "{\"a\":1}\n{oops}\n";
        match parse_table(bad_json.as_bytes(), SourceFormat::Jsonl, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let nested = "{\"a\":[1]}\n";
        assert!(matches!(parse_table(nested.as_bytes(), SourceFormat::Jsonl, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_headers_are_manifest_errors() {
        let r = parse_table("a,a\n1,2\n".as_bytes(), SourceFormat::Csv, None);
        assert!(matches!(r, Err(Error::Manifest(_))));
    }

    #[test]
    fn manifest_overrides_inference() {
        let m = TableManifest::new(vec![("code".into(), ColumnType::Text)]).unwrap();
        let (_, rows) = parse_table("code\n12\n".as_bytes(), SourceFormat::Csv, Some(&m)).unwrap();
        assert_eq!(rows[0].get("code"), Some(&CellValue::Text("12".into())));
    }
}
