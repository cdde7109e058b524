use crate::value::{is_missing_marker, parse_date, parse_number, ColumnType};

#[derive(Clone, Debug)]
pub struct InferOptions {
    /// Minimum share of non-missing values that must parse for a typed vote.
    pub threshold: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { threshold: 0.9 }
    }
}

pub fn infer_column_type<S: AsRef<str>>(values: &[S]) -> ColumnType {
    infer_column_type_with(values, &InferOptions::default())
}

pub fn infer_column_type_with<S: AsRef<str>>(values: &[S], opts: &InferOptions) -> ColumnType {
    let present: Vec<&str> = values.iter().map(AsRef::as_ref).filter(|v| !is_missing_marker(v)).collect();
    if present.is_empty() {
        return ColumnType::Text;
    }
    let n = present.len() as f64;
    let numbers = present.iter().filter(|v| parse_number(v).is_some()).count() as f64;
    if numbers / n >= opts.threshold {
        return ColumnType::Number;
    }
    let dates = present.iter().filter(|v| parse_date(v).is_some()).count() as f64;
    if dates / n >= opts.threshold {
        return ColumnType::Date;
    }
    ColumnType::Text
}
