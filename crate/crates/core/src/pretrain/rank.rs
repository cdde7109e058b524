//! Masked-cell validation: rank the ground truth among a column's unique
//! values by similarity to the model's prediction.

use rand_chacha::ChaCha8Rng;

use super::mask::ColumnPools;
use crate::autodiff::Graph;
use crate::embed::EmbedderHandle;
use crate::encoder::prepare_row;
use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::ingest::Row;
use crate::model::{hidden_states, PretrainModel};
use crate::tensor::Scalar;
use crate::value::CellValue;

#[derive(Copy, Clone, Debug)]
pub struct ValidationRow<'a> {
    pub row: &'a Row,
    pub uniques: &'a ColumnPools,
}

/// `1 − (r − 1)/(n − 1)` where `r` is the tie-averaged rank of `truth`
/// (best = 1) among `n` candidates ordered by descending similarity.
pub fn relative_rank_score(similarities: &[f64], truth: usize) -> f64 {
    let n = similarities.len();
    if n < 2 {
        return f64::NAN;
    }
    let s = similarities[truth];
    let better = similarities.iter().filter(|&&x| x > s).count();
    let ties = similarities.iter().filter(|&&x| x == s).count() - 1;
    let rank = 1.0 + better as f64 + ties as f64 / 2.0;
    1.0 - (rank - 1.0) / (n - 1) as f64
}

fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, &y)| x * y as f64).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn similarity(prediction: &Prediction, candidate: &CellValue, embedder: &EmbedderHandle) -> Result<f64> {
    Ok(match (prediction, candidate) {
        (Prediction::Number(p), CellValue::Number(v)) => -(p - v).abs(),
        (Prediction::Date(p), CellValue::Date(v)) => -((p.days_since_epoch() - v.date.days_since_epoch()).abs() as f64),
        (Prediction::Text(p), CellValue::Text(v)) => cosine(p, &embedder.embed_one(v)?),
        _ => f64::NEG_INFINITY,
    })
}

/// Mean cell score over every scorable cell. Columns with fewer than two
/// unique values are skipped.
pub fn validate_relative_rank<T: Scalar>(
    model: &PretrainModel<T>,
    rows: &[ValidationRow<'_>],
    embedder: &EmbedderHandle,
) -> Result<f64> {
    let mut total = 0.0;
    let mut cells = 0usize;
    for vr in rows {
        let present: Vec<_> = vr.row.present().collect();
        let Ok(specs) = prepare_row(vr.row, embedder, model.config.bins) else { continue };
        let mut variants = Vec::new();
        let mut scored = Vec::new();
        for (i, cell) in present.iter().enumerate() {
            let pool = vr.uniques.get(&cell.column);
            if pool.len() < 2 {
                continue;
            }
            let truth = cell.value.render();
            let Some(t) = pool.iter().position(|v| v.render() == truth) else { continue };
            let mut masked = specs.clone();
            masked[i] = masked[i].zeroed();
            variants.push(masked);
            scored.push((i, t, pool));
        }
        if variants.is_empty() {
            continue;
        }
        let mut g = Graph::new(&model.store);
        let (hidden, inputs) = hidden_states(&mut g, &model.encoder, &model.backbone, &variants, None::<&mut ChaCha8Rng>)?;
        for (b, (i, t, pool)) in scored.into_iter().enumerate() {
            let pred = model.heads.predict(&mut g, hidden, b * inputs.max_len + i, &specs[i].content);
            let sims = pool.iter().map(|v| similarity(&pred, v, embedder)).collect::<Result<Vec<_>>>()?;
            total += relative_rank_score(&sims, t);
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(Error::invalid("no validation cell has a column with two or more unique values"));
    }
    Ok(total / cells as f64)
}
