use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Reads `dim=E` then `text<TAB>v1,...,vE` lines.
pub fn read_file_cache(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty embedding cache".into() })??;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse { line: 1, message: format!("bad cache header {header:?}") })?;
    let mut entries = HashMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (text, vec) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Parse { line: line_no, message: "missing tab separator".into() })?;
        let values = vec
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if values.len() != dim {
            return Err(Error::EmbedConfig(format!("line {line_no}: {} values, expected {dim}", values.len())));
        }
        entries.insert(text.to_string(), values);
    }
    Ok((dim, entries))
}

/// Writes entries sorted by text. Texts containing tabs or newlines cannot
/// be represented and are skipped; returns the number written.
pub fn write_file_cache<'a, I>(path: &Path, dim: usize, entries: I) -> Result<usize>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut items: Vec<(&str, &[f32])> =
        entries.into_iter().filter(|(t, _)| !t.contains(['\t', '\n', '\r'])).collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "dim={dim}")?;
    for (text, v) in &items {
        if v.len() != dim {
            return Err(Error::EmbedConfig(format!("cache entry {text:?} has length {}", v.len())));
        }
        let joined = v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        writeln!(w, "{text}\t{joined}")?;
    }
    w.flush()?;
    Ok(items.len())
}
