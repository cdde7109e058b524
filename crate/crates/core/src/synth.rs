//! Seeded synthetic tables for examples, tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{ColumnType, Row, Table, TableManifest, Task};
use crate::pretrain::ValidationSet;
use crate::value::{CellValue, CivilDate, DateValue};

pub const ITEMS: [&str; 12] = [
    "anchor", "basket", "candle", "dagger", "engine", "feather", "goblet", "hammer", "inkwell", "jacket", "kettle", "lantern",
];

fn date_cell(days: i64) -> CellValue {
    CellValue::Date(DateValue { date: CivilDate::from_days_since_epoch(days), time: None })
}

/// The number and date that `item` determines in [`dependent_corpus`].
pub fn item_attributes(index: usize) -> (f64, CivilDate) {
    let price = 2.5 * (index as f64 + 1.0).powf(1.7) + 0.25 * index as f64;
    let base = CivilDate::new(1961, 3, 14).expect("valid").days_since_epoch();
    (price, CivilDate::from_days_since_epoch(base + 1_337 * index as i64 + 29 * (index * index) as i64))
}

/// `tables` tables of `rows` rows each. The `item` text column determines the
/// `price` number column and the `released` date column through a mapping
/// shared by every table.
pub fn dependent_corpus(tables: usize, rows: usize, seed: u64) -> Vec<Table> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest = TableManifest::new(vec![
        ("item".into(), ColumnType::Text),
        ("price".into(), ColumnType::Number),
        ("released".into(), ColumnType::Date),
    ])
    .expect("valid manifest");
    (0..tables)
        .map(|t| {
            let rows = (0..rows)
                .map(|_| {
                    let i = rng.random_range(0..ITEMS.len());
                    let (price, date) = item_attributes(i);
                    Row::new(vec![
                        ("item".into(), CellValue::Text(ITEMS[i].into())),
                        ("price".into(), CellValue::Number(price)),
                        ("released".into(), date_cell(date.days_since_epoch())),
                    ])
                })
                .collect();
            Table::new(format!("table{t:03}"), manifest.clone(), rows)
        })
        .collect()
}

/// Holds out the last row of the first `count` tables for validation.
pub fn hold_out_rows(tables: &[Table], count: usize) -> (Vec<Table>, ValidationSet) {
    ValidationSet::hold_out(tables, count)
}

/// `y = 3·x1 − x2 + ε` with `ε ~ N(0, noise²)`.
pub fn linear_regression(n: usize, noise: f64, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let rows = (0..n)
        .map(|_| {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random_range(-1.0..1.0);
            let y = 3.0 * x1 - x2 + if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 };
            Row::new(vec![
                ("x1".into(), CellValue::Number(x1)),
                ("x2".into(), CellValue::Number(x2)),
                ("y".into(), CellValue::Number(y)),
            ])
        })
        .collect();
    let manifest = TableManifest::new(vec![
        ("x1".into(), ColumnType::Number),
        ("x2".into(), ColumnType::Number),
        ("y".into(), ColumnType::Number),
    ])
    .and_then(|m| m.with_target("y", Task::Regression))
    .expect("valid manifest");
    Table::new("linear", manifest, rows)
}

/// Mixed-type regression: the target depends on a number, a category and
/// the month of a date, spanning several orders of magnitude.
pub fn mixed_regression(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colours = ["red", "green", "blue", "amber"];
    let base = CivilDate::new(2015, 1, 1).expect("valid").days_since_epoch();
    let rows = (0..n)
        .map(|_| {
            let size: f64 = rng.random_range(1.0..100.0);
            let c = rng.random_range(0..colours.len());
            let days = base + rng.random_range(0..365 * 5);
            let month = CivilDate::from_days_since_epoch(days).month() as f64;
            let y = size * (1.0 + c as f64) + 10.0 * month.sin();
            Row::new(vec![
                ("size".into(), CellValue::Number(size)),
                ("colour".into(), CellValue::Text(colours[c].into())),
                ("listed".into(), date_cell(days)),
                ("value".into(), CellValue::Number(y)),
            ])
        })
        .collect();
    let manifest = TableManifest::new(vec![
        ("size".into(), ColumnType::Number),
        ("colour".into(), ColumnType::Text),
        ("listed".into(), ColumnType::Date),
        ("value".into(), ColumnType::Number),
    ])
    .and_then(|m| m.with_target("value", Task::Regression))
    .expect("valid manifest");
    Table::new("mixed", manifest, rows)
}

/// Two-class task: the label is whether `a + b > 0`, with a noise column.
pub fn threshold_classification(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let label = if a + b > 0.0 { "high" } else { "low" };
            Row::new(vec![
                ("a".into(), CellValue::Number(a)),
                ("b".into(), CellValue::Number(b)),
                ("tag".into(), CellValue::Text(ITEMS[rng.random_range(0..ITEMS.len())].into())),
                ("label".into(), CellValue::Text(label.into())),
            ])
        })
        .collect();
    let manifest = TableManifest::new(vec![
        ("a".into(), ColumnType::Number),
        ("b".into(), ColumnType::Number),
        ("tag".into(), ColumnType::Text),
        ("label".into(), ColumnType::Text),
    ])
    .and_then(|m| m.with_target("label", Task::Classification))
    .expect("valid manifest");
    Table::new("threshold", manifest, rows)
}
