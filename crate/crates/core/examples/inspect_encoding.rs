//! Shows how single cell values are broken down before they become tokens:
//! sign / fraction / exponent for numbers, calendar features for dates and
//! the embedding summary for text.
//!
//! Usage: inspect_encoding [value:type ...]   (type is number, date or text)

use portal::embed::EmbedderHandle;
use portal::encoder::inspect_value;
use portal::ingest::ColumnType;

fn main() -> anyhow::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() {
        args = ["-6:number", "0.1:number", "1e30:number", "1900-05-07:date", "2024-12-25:date", "lisbon:text"]
            .map(String::from)
            .to_vec();
    }
    let embedder = EmbedderHandle::fallback(384);
    for arg in &args {
        let (raw, ty) = arg.rsplit_once(':').unwrap_or((arg, "text"));
        let ty: ColumnType = ty.parse()?;
        let inspection = inspect_value(raw, ty, 32, &embedder)?;
        println!("{raw} ({ty})");
        println!("  {}", serde_json::to_string(&inspection)?);
    }
    Ok(())
}
