use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::embed::EmbedderHandle;
use crate::encoder::{prepare_cell, TokenContent, TokenSpec};
use crate::error::{Error, Result};
use crate::ingest::Row;
use crate::value::CellValue;

pub const DEFAULT_MASK_PROBABILITY: f64 = 0.30;
pub const ZEROED_SHARE: f64 = 0.80;
pub const KEPT_SHARE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub enum MaskAction {
    Unmasked,
    Zeroed,
    Kept,
    Replaced(CellValue),
}

impl MaskAction {
    pub fn is_selected(&self) -> bool {
        !matches!(self, MaskAction::Unmasked)
    }
}

/// One action per non-missing cell of a row, in row order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub actions: Vec<MaskAction>,
    pub probability: f64,
}

/// Distinct non-missing values of each column of one table, in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct ColumnPools {
    pools: HashMap<String, Vec<CellValue>>,
}

impl ColumnPools {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a Row>) -> Self {
        let mut pools: HashMap<String, Vec<CellValue>> = HashMap::new();
        let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
        for row in rows {
            for cell in row.present() {
                if seen.entry(cell.column.clone()).or_default().insert(cell.value.render()) {
                    pools.entry(cell.column.clone()).or_default().push(cell.value.clone());
                }
            }
        }
        ColumnPools { pools }
    }

    pub fn get(&self, column: &str) -> &[CellValue] {
        self.pools.get(column).map_or(&[], Vec::as_slice)
    }
}

pub fn make_mask_plan<R: Rng + ?Sized>(row: &Row, pools: &ColumnPools, p: f64, rng: &mut R) -> MaskPlan {
    let actions = row
        .present()
        .map(|cell| {
            if rng.random::<f64>() >= p {
                return MaskAction::Unmasked;
            }
            let u: f64 = rng.random();
            if u < ZEROED_SHARE {
                MaskAction::Zeroed
            } else if u < ZEROED_SHARE + KEPT_SHARE {
                MaskAction::Kept
            } else {
                let pool = pools.get(&cell.column);
                if pool.len() < 2 {
                    return MaskAction::Zeroed;
                }
                let current = cell.value.render();
                let others: Vec<&CellValue> = pool.iter().filter(|v| v.render() != current).collect();
                MaskAction::Replaced(others[rng.random_range(0..others.len())].clone())
            }
        })
        .collect();
    MaskPlan { actions, probability: p }
}

/// Applies `plan` to the prepared cells of one row. Zeroed cells keep only
/// their column-name term; replaced cells are re-encoded under the same name.
pub fn apply_mask(specs: &[TokenSpec], plan: &MaskPlan, embedder: &EmbedderHandle, bins: usize) -> Result<Vec<TokenSpec>> {
    if specs.len() != plan.actions.len() {
        return Err(Error::invalid(format!("mask plan covers {} cells, row has {}", plan.actions.len(), specs.len())));
    }
    specs
        .iter()
        .zip(&plan.actions)
        .map(|(spec, action)| match action {
            MaskAction::Unmasked | MaskAction::Kept => Ok(spec.clone()),
            MaskAction::Zeroed => Ok(spec.zeroed()),
            MaskAction::Replaced(v) => prepare_cell(v, &spec.column, embedder, bins),
        })
        .collect()
}

/// Loss targets of a row: the original content of every selected cell,
/// keyed by its position. Unselected cells never become targets.
pub fn masked_targets(specs: &[TokenSpec], plan: &MaskPlan) -> Vec<(usize, TokenContent)> {
    plan.actions
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_selected())
        .map(|(i, _)| (i, specs[i].content.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(n: usize) -> Row {
        Row::new((0..n).map(|i| (format!("c{i}"), CellValue::Number(i as f64))).collect())
    }

    #[test]
    fn probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = row(20);
        let pools = ColumnPools::from_rows([&r]);
        let none = make_mask_plan(&r, &pools, 0.0, &mut rng);
        assert!(none.actions.iter().all(|a| *a == MaskAction::Unmasked));
        for _ in 0..50 {
            let all = make_mask_plan(&r, &pools, 1.0, &mut rng);
            assert!(all.actions.iter().all(|a| matches!(a, MaskAction::Zeroed | MaskAction::Kept)));
        }
    }

    #[test]
    fn replacements_come_from_the_column_and_differ() {
        let rows: Vec<Row> = (0..5)
            .map(|i| Row::new(vec![("a".into(), CellValue::Number(i as f64)), ("b".into(), CellValue::Text(format!("t{i}")))]))
            .collect();
        let pools = ColumnPools::from_rows(&rows);
        assert_eq!(pools.get("a").len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut replaced = 0;
        for _ in 0..2000 {
            let plan = make_mask_plan(&rows[0], &pools, 1.0, &mut rng);
            for (cell, action) in rows[0].cells.iter().zip(&plan.actions) {
                if let MaskAction::Replaced(v) = action {
                    replaced += 1;
                    assert!(pools.get(&cell.column).contains(v));
                    assert_ne!(v, &cell.value);
                }
            }
        }
        assert!(replaced > 300);
    }

    #[test]
    fn apply_checks_length() {
        let emb = EmbedderHandle::fallback(8);
        let plan = MaskPlan { actions: vec![MaskAction::Zeroed], probability: 1.0 };
        assert!(apply_mask(&[], &plan, &emb, 4).is_err());
    }
}
