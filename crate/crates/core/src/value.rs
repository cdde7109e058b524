//! Cell values and the scalar parsers shared by ingest and the CLI.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A proleptic Gregorian calendar date.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CivilDate {
    year: i32,
    month: u8,
    day: u8,
}

pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        2 => 28,
        _ => 0,
    }
}

impl CivilDate {
    pub fn new(year: i32, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::invalid(format!("invalid date {year:04}-{month:02}-{day:02}")));
        }
        Ok(CivilDate { year, month, day })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u8 {
        self.month
    }

    pub fn day(self) -> u8 {
        self.day
    }

    /// Days since 1970-01-01 (Hinnant's days_from_civil).
    pub fn days_since_epoch(self) -> i64 {
        let y = self.year as i64 - if self.month <= 2 { 1 } else { 0 };
        let era = if y >= 0 { y } else { y - 399 } / 400;
        let yoe = y - era * 400;
        let m = self.month as i64;
        let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + self.day as i64 - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }

    pub fn from_days_since_epoch(z: i64) -> Self {
        let z = z + 719_468;
        let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let day = (doy - (153 * mp + 2) / 5 + 1) as u8;
        let month = if mp < 10 { mp + 3 } else { mp - 9 } as u8;
        let year = (yoe + era * 400 + if month <= 2 { 1 } else { 0 }) as i32;
        CivilDate { year, month, day }
    }

    /// Monday = 0 ... Sunday = 6.
    pub fn weekday(self) -> u8 {
        // 1970-01-01 was a Thursday (3).
        (self.days_since_epoch() + 3).rem_euclid(7) as u8
    }
}

impl fmt::Display for CivilDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

/// A date cell, optionally carrying a time of day that the encoder ignores.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DateValue {
    pub date: CivilDate,
    pub time: Option<(u8, u8, u8)>,
}

impl From<CivilDate> for DateValue {
    fn from(date: CivilDate) -> Self {
        DateValue { date, time: None }
    }
}

impl fmt::Display for DateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.date)?;
        if let Some((h, m, s)) = self.time {
            write!(f, "T{h:02}:{m:02}:{s:02}")?;
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Number,
    Date,
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Text => "text",
            ColumnType::Number => "number",
            ColumnType::Date => "date",
        })
    }
}

impl std::str::FromStr for ColumnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ColumnType::Text),
            "number" => Ok(ColumnType::Number),
            "date" => Ok(ColumnType::Date),
            other => Err(Error::invalid(format!("unknown column type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Text(String),
    Number(f64),
    Date(DateValue),
    Missing,
}

impl CellValue {
    pub fn column_type(&self) -> Option<ColumnType> {
        match self {
            CellValue::Text(_) => Some(ColumnType::Text),
            CellValue::Number(_) => Some(ColumnType::Number),
            CellValue::Date(_) => Some(ColumnType::Date),
            CellValue::Missing => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, CellValue::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            CellValue::Number(x) => Some(*x),
            _ => None,
        }
    }

    /// Parses `raw` as a value of column type `ty`; unparseable cells and
    /// missing markers become `Missing`.
    pub fn parse_as(raw: &str, ty: ColumnType) -> CellValue {
        if is_missing_marker(raw) {
            return CellValue::Missing;
        }
        match ty {
            ColumnType::Number => parse_number(raw).map_or(CellValue::Missing, CellValue::Number),
            ColumnType::Date => parse_date(raw).map_or(CellValue::Missing, CellValue::Date),
            ColumnType::Text => CellValue::Text(raw.to_string()),
        }
    }

    /// Canonical text form, as written by the emitters.
    pub fn render(&self) -> String {
        match self {
            CellValue::Text(s) => s.clone(),
            CellValue::Number(x) => format!("{x:?}"),
            CellValue::Date(d) => d.to_string(),
            CellValue::Missing => String::new(),
        }
    }
}

pub const MISSING_MARKERS: [&str; 6] = ["", "na", "n/a", "nan", "null", "none"];

pub fn is_missing_marker(raw: &str) -> bool {
    let t = raw.trim();
    MISSING_MARKERS.iter().any(|m| t.eq_ignore_ascii_case(m))
}

/// Finite decimal or scientific numeral.
pub fn parse_number(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if !t.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    if !t.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E')) {
        return None;
    }
    t.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn digits(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// ISO-8601 `YYYY-MM-DD` or `YYYY-MM-DDThh:mm:ss`.
pub fn parse_date(raw: &str) -> Option<DateValue> {
    let t = raw.trim();
    let (date_part, time_part) = match t.split_once('T') {
        Some((d, tm)) => (d, Some(tm)),
        None => (t, None),
    };
    let b = date_part.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    let year = digits(&date_part[0..4])? as i32;
    let month = digits(&date_part[5..7])? as u8;
    let day = digits(&date_part[8..10])? as u8;
    let date = CivilDate::new(year, month, day).ok()?;
    let time = match time_part {
        None => None,
        Some(tm) => {
            let tb = tm.as_bytes();
            if tb.len() != 8 || tb[2] != b':' || tb[5] != b':' {
                return None;
            }
            let h = digits(&tm[0..2])? as u8;
            let m = digits(&tm[3..5])? as u8;
            let s = digits(&tm[6..8])? as u8;
            if h > 23 || m > 59 || s > 59 {
                return None;
            }
            Some((h, m, s))
        }
    };
    Some(DateValue { date, time })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_days_round_trip() {
        for z in (-800_000..800_000).step_by(997) {
            let d = CivilDate::from_days_since_epoch(z);
            assert_eq!(d.days_since_epoch(), z);
            assert!(CivilDate::new(d.year(), d.month(), d.day()).is_ok());
        }
        assert_eq!(CivilDate::new(1970, 1, 1).unwrap().days_since_epoch(), 0);
        assert_eq!(CivilDate::new(2000, 3, 1).unwrap().days_since_epoch(), 11_017);
    }

    #[test]
    fn numerals() {
        assert_eq!(parse_number("-3e2"), Some(-300.0));
        assert_eq!(parse_number(" 2.5 "), Some(2.5));
        assert_eq!(parse_number("inf"), None);
        assert_eq!(parse_number("NaN"), None);
        assert_eq!(parse_number("1e400"), None);
        assert_eq!(parse_number("12abc"), None);
        assert_eq!(parse_number("01/02/03"), None);
    }

    #[test]
    fn dates() {
        assert!(parse_date("2021-01-01").is_some());
        assert!(parse_date("2021-02-29").is_none());
        assert!(parse_date("2024-02-29T23:59:59").is_some());
        assert!(parse_date("2024-02-29T24:00:00").is_none());
        assert!(parse_date("01/02/03").is_none());
        let v = parse_date("1999-12-31T08:05:00").unwrap();
        assert_eq!(v.to_string(), "1999-12-31T08:05:00");
    }

    #[test]
    fn missing_markers_are_case_insensitive() {
        for m in ["", "NA", "n/a", "NaN", "NULL", "None", "  "] {
            assert!(is_missing_marker(m), "{m:?}");
        }
        assert!(!is_missing_marker("0"));
    }
}
