//! Parses a small messy CSV without a manifest, prints the inferred column
//! types and typed rows, then re-emits the table as JSON lines.

use std::io::Cursor;

use portal::ingest::{emit_jsonl, parse_table, SourceFormat};

const SOURCE: &str = "\
city,founded,population,mayor since
Lisbon,1147-10-25,545796,2021-10-18
Porto,,231800,2021-10-26
Braga,0020-01-01,n/a,2013-10-22
Coimbra,1111-01-01,140796,
";

fn main() -> anyhow::Result<()> {
    let (manifest, rows) = parse_table(Cursor::new(SOURCE), SourceFormat::Csv, None)?;
    println!("inferred columns:");
    for c in &manifest.columns {
        println!("  {:<12} {}", c.name, c.column_type);
    }
    println!("\ntyped rows:");
    for row in &rows {
        let cells: Vec<String> = row.cells.iter().map(|c| format!("{}={}", c.column, c.value.render())).collect();
        println!("  {}", cells.join("  "));
    }
    println!("\nas JSON lines:");
    emit_jsonl(&rows, std::io::stdout().lock())?;
    Ok(())
}
