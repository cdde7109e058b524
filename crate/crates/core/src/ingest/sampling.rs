use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Row, Table};
use crate::error::{Error, Result};

/// A row drawn for one pre-training epoch, by table and row index.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SampledRow {
    pub table: usize,
    pub row: usize,
}

impl SampledRow {
    pub fn resolve<'t>(&self, tables: &'t [Table]) -> &'t Row {
        &tables[self.table].rows[self.row]
    }
}

/// One uniformly drawn row per table, in a seeded shuffled order.
pub fn sample_epoch_rows(tables: &[Table], seed: u64) -> Result<Vec<SampledRow>> {
    if tables.is_empty() {
        return Err(Error::invalid("no tables to sample from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tables.len());
    for (ti, t) in tables.iter().enumerate() {
        if t.rows.is_empty() {
            return Err(Error::invalid(format!("table `{}` has no rows", t.name)));
        }
        out.push(SampledRow { table: ti, row: rng.random_range(0..t.rows.len()) });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Seeded disjoint split; the train side gets `round(n * train_fraction)` items.
pub fn split_train_test<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    if items.len() < 2 {
        return Err(Error::invalid("need at least two items to split"));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).round() as usize;
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CellValue, TableManifest};

    fn table(name: &str, n: usize) -> Table {
        let rows = (0..n).map(|i| Row::new(vec![("x".into(), CellValue::Number(i as f64))])).collect();
        Table::new(name, TableManifest::default(), rows)
    }

    #[test]
    fn one_row_per_table() {
        let tables = vec![table("a", 5), table("b", 7), table("c", 1)];
        let s = sample_epoch_rows(&tables, 3).unwrap();
        assert_eq!(s.len(), 3);
        let mut ts: Vec<_> = s.iter().map(|r| r.table).collect();
        ts.sort();
        assert_eq!(ts, vec![0, 1, 2]);
        assert!(s.iter().all(|r| r.row < tables[r.table].rows.len()));
        assert_eq!(s, sample_epoch_rows(&tables, 3).unwrap());
        let c = s.iter().find(|r| r.table == 2).unwrap();
        assert_eq!(c.row, 0);
    }

    #[test]
    fn sampling_errors() {
        assert!(sample_epoch_rows(&[], 0).is_err());
        assert!(sample_epoch_rows(&[table("e", 0)], 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, te) = split_train_test(&items, 0.8, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<u32> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!((tr, te), split_train_test(&items, 0.8, 9).unwrap());

        let five: Vec<u32> = (0..5).collect();
        let (tr, te) = split_train_test(&five, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));

        assert!(split_train_test(&[1], 0.5, 0).is_err());
        assert!(split_train_test(&five, 1.0, 0).is_err());
    }
}
