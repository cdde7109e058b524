use super::Predictions;
use crate::error::{Error, Result};

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn mean_squared_error(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.len() != targets.len() || targets.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    Ok(predicted.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64)
}

/// Coefficient of determination, floored at zero.
pub fn r2_capped(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.len() != targets.len() || targets.len() < 2 {
        return Err(Error::shape(format!("R² needs two or more paired values, got {} and {}", predicted.len(), targets.len())));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantTarget);
    }
    let ss_res: f64 = predicted.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((1.0 - ss_res / ss_tot).max(0.0))
}

/// Indices of the `n` members with the highest validation score; ties keep
/// the earlier member.
pub fn select_top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n.max(1));
    idx.sort_unstable();
    idx
}

/// Averages member predictions: the mean value for regression, the mean
/// probability vector for classification.
pub fn bag_predictions(members: &[Predictions]) -> Result<Predictions> {
    let first = members.first().ok_or_else(|| Error::invalid("no member predictions to bag"))?;
    let n = first.len();
    if members.iter().any(|m| m.len() != n) {
        return Err(Error::shape("members predict different numbers of rows"));
    }
    let k = members.len() as f64;
    match first {
        Predictions::Regression(_) => {
            let mut acc = vec![0.0; n];
            for m in members {
                let Predictions::Regression(v) = m else { return Err(Error::shape("mixed task predictions")) };
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            Ok(Predictions::Regression(acc.into_iter().map(|a| a / k).collect()))
        }
        Predictions::Classification { classes, probabilities } => {
            let width = probabilities.first().map_or(0, Vec::len);
            let mut acc = vec![vec![0.0; width]; n];
            for m in members {
                let Predictions::Classification { classes: c, probabilities: p } = m else {
                    return Err(Error::shape("mixed task predictions"));
                };
                if c != classes {
                    return Err(Error::shape("members disagree on the class set"));
                }
                for (a, row) in acc.iter_mut().zip(p) {
                    for (x, y) in a.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
            for row in &mut acc {
                for x in row.iter_mut() {
                    *x /= k;
                }
            }
            Ok(Predictions::Classification { classes: classes.clone(), probabilities: acc })
        }
    }
}
