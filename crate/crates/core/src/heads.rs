//! Pre-training decoding heads and the weighted multi-task objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_row, Graph, ParamId, ParamStore, Var};
use crate::backbone::{truncated_normal, ModelConfig, INIT_STD};
use crate::encoder::date::{DateFeatures, DAY_CLASSES, MONTH_CLASSES, YEAR_CLASSES, YEAR_MIN};
use crate::encoder::numeric::{NumericTriplet, Sign, EXPONENT_CLASSES, MAX_EXPONENT, MIN_EXPONENT, SIGN_CLASSES};
use crate::encoder::TokenContent;
use crate::error::{Error, Result};
use crate::tensor::{sc, Matrix, Scalar};
use crate::value::{days_in_month, CivilDate};

pub const HUBER_DELTA: f64 = 1.0;

/// Parity-continuous fraction target: `α − 1` for even `β`, `2 − α` for odd.
pub fn tilde_alpha(alpha: f64, beta: i32) -> f64 {
    if beta.rem_euclid(2) == 0 {
        alpha - 1.0
    } else {
        2.0 - alpha
    }
}

/// Inverse of [`tilde_alpha`] combined with the sign and exponent.
pub fn invert_number(sign_prob: f64, tilde: f64, beta: i32) -> f64 {
    let alpha = if beta.rem_euclid(2) == 0 { 1.0 + tilde } else { 2.0 - tilde };
    let s = if sign_prob >= 0.5 { 1.0 } else { -1.0 };
    s * alpha * 2f64.powi(beta)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub day: f64,
    pub month: f64,
    pub year: f64,
    pub sign: f64,
    pub fraction: f64,
    pub exponent: f64,
    pub text: f64,
}

impl Default for LossWeights {
    /// Text gets a third; the six discrete components share the rest.
    fn default() -> Self {
        let n = 1.0 / 9.0;
        LossWeights { day: n, month: n, year: n, sign: n, fraction: n, exponent: n, text: 1.0 / 3.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [self.day, self.month, self.year, self.sign, self.fraction, self.exponent, self.text]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// The seven component losses, each averaged over the masked tokens of its
/// type, and their weighted total.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub day: f64,
    pub month: f64,
    pub year: f64,
    pub sign: f64,
    pub fraction: f64,
    pub exponent: f64,
    pub text: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 7] {
        [self.day, self.month, self.year, self.sign, self.fraction, self.exponent, self.text]
    }

    fn from_components(c: [f64; 7], weights: &LossWeights) -> Self {
        LossBundle {
            day: c[0],
            month: c[1],
            year: c[2],
            sign: c[3],
            fraction: c[4],
            exponent: c[5],
            text: c[6],
            total: total_loss(&c, weights),
        }
    }

    /// Adds another partial bundle computed against the same normalizers.
    pub fn accumulate(&mut self, other: &LossBundle) {
        self.day += other.day;
        self.month += other.month;
        self.year += other.year;
        self.sign += other.sign;
        self.fraction += other.fraction;
        self.exponent += other.exponent;
        self.text += other.text;
        self.total += other.total;
    }
}

pub fn total_loss(components: &[f64; 7], weights: &LossWeights) -> f64 {
    components.iter().zip(weights.as_array()).map(|(l, w)| w * l).sum()
}

fn cross_entropy_plain(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn bce_plain(logit: f64, target: f64) -> f64 {
    logit.max(0.0) + (-logit.abs()).exp().ln_1p() - logit * target
}

/// `(L_sign, L_exponent, L_fraction)` for one numeric token.
pub fn number_loss(sign_logits: &[f64], exponent_logits: &[f64], fraction_logit: f64, target: &NumericTriplet) -> (f64, f64, f64) {
    (
        cross_entropy_plain(sign_logits, target.sign.class()),
        cross_entropy_plain(exponent_logits, target.exponent_class()),
        bce_plain(fraction_logit, tilde_alpha(target.alpha, target.beta)),
    )
}

/// `(L_day, L_month, L_year)` for one date token.
pub fn date_loss(day_logits: &[f64], month_logits: &[f64], year_logits: &[f64], target: &DateFeatures) -> (f64, f64, f64) {
    (
        cross_entropy_plain(day_logits, target.day_index()),
        cross_entropy_plain(month_logits, target.month_index()),
        cross_entropy_plain(year_logits, target.year_index()),
    )
}

/// Elementwise Huber loss averaged over the embedding dimension.
pub fn text_loss(predicted: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    if predicted.len() != target.len() || target.is_empty() {
        return Err(Error::shape(format!("text prediction of length {} vs target {}", predicted.len(), target.len())));
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = (p - t).abs();
            if r <= delta {
                0.5 * r * r
            } else {
                delta * (r - 0.5 * delta)
            }
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// Masked-token counts per head family, used as loss normalizers.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct TypeCounts {
    pub number: usize,
    pub date: usize,
    pub text: usize,
}

impl TypeCounts {
    pub fn of<'a>(targets: impl IntoIterator<Item = &'a TokenContent>) -> Self {
        let mut c = TypeCounts::default();
        for t in targets {
            match t {
                TokenContent::Number { .. } => c.number += 1,
                TokenContent::Date(_) => c.date += 1,
                TokenContent::Text(_) => c.text += 1,
                TokenContent::Zeroed => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: TypeCounts) {
        self.number += other.number;
        self.date += other.date;
        self.text += other.text;
    }
}

/// Reconstruction target at one position of the padded token batch.
#[derive(Clone, Debug)]
pub struct MaskedTarget {
    pub position: usize,
    pub content: TokenContent,
}

/// Decoded prediction for one masked token.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Number(f64),
    Date(CivilDate),
    Text(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct PretrainHeads {
    sign: (ParamId, ParamId),
    exponent: (ParamId, ParamId),
    fraction: (ParamId, ParamId),
    day: (ParamId, ParamId),
    month: (ParamId, ParamId),
    year: (ParamId, ParamId),
    text: (ParamId, ParamId),
    text_dim: usize,
}

const HEADS: [&str; 7] = ["sign", "exponent", "fraction", "day", "month", "year", "text"];

fn head_width(name: &str, cfg: &ModelConfig) -> usize {
    match name {
        "sign" => SIGN_CLASSES,
        "exponent" => EXPONENT_CLASSES,
        "fraction" => 1,
        "day" => DAY_CLASSES,
        "month" => MONTH_CLASSES,
        "year" => YEAR_CLASSES,
        _ => cfg.text_dim,
    }
}

impl PretrainHeads {
    pub const PREFIX: &'static str = "heads.";

    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        for name in HEADS {
            let out = head_width(name, cfg);
            store.insert(format!("heads.{name}.w"), truncated_normal(cfg.hidden, out, INIT_STD, rng))?;
            store.insert(format!("heads.{name}.b"), Matrix::zeros(1, out))?;
        }
        Self::bind(store, cfg)
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let mut ids = Vec::with_capacity(HEADS.len());
        for name in HEADS {
            let w = store.require(&format!("heads.{name}.w"))?;
            let b = store.require(&format!("heads.{name}.b"))?;
            if store.get(w).shape() != (cfg.hidden, head_width(name, cfg)) {
                return Err(Error::Checkpoint(format!("heads.{name}.w has shape {:?}", store.get(w).shape())));
            }
            ids.push((w, b));
        }
        Ok(PretrainHeads {
            sign: ids[0],
            exponent: ids[1],
            fraction: ids[2],
            day: ids[3],
            month: ids[4],
            year: ids[5],
            text: ids[6],
            text_dim: cfg.text_dim,
        })
    }

    /// Weighted loss over `targets`, whose positions index rows of `hidden`.
    /// Each component is divided by the matching count in `norm`, so partial
    /// losses of micro-batches sum to the loss of the full batch.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        hidden: Var,
        targets: &[MaskedTarget],
        norm: TypeCounts,
        weights: &LossWeights,
    ) -> (Option<Var>, LossBundle) {
        let mut num_pos = Vec::new();
        let mut date_pos = Vec::new();
        let mut text_pos = Vec::new();
        let (mut sign_t, mut exp_t, mut frac_t) = (Vec::new(), Vec::new(), Vec::new());
        let (mut day_t, mut month_t, mut year_t) = (Vec::new(), Vec::new(), Vec::new());
        let mut text_t: Vec<T> = Vec::new();
        for t in targets {
            match &t.content {
                TokenContent::Number { triplet, .. } => {
                    num_pos.push(t.position);
                    sign_t.push(triplet.sign.class());
                    exp_t.push(triplet.exponent_class());
                    frac_t.push(sc::<T>(tilde_alpha(triplet.alpha, triplet.beta)));
                }
                TokenContent::Date(f) => {
                    date_pos.push(t.position);
                    day_t.push(f.day_index());
                    month_t.push(f.month_index());
                    year_t.push(f.year_index());
                }
                TokenContent::Text(v) => {
                    text_pos.push(t.position);
                    text_t.extend(v.iter().map(|&x| T::from_f32_lossy(x)));
                }
                TokenContent::Zeroed => {}
            }
        }

        let mut terms: Vec<(Var, T)> = Vec::new();
        let mut comps = [0.0f64; 7];
        let mut push = |g: &mut Graph<'_, T>, slot: usize, v: Var, w: f64, terms: &mut Vec<(Var, T)>| {
            comps[slot] = g.value(v).item().to_f64().unwrap_or(f64::NAN);
            terms.push((v, sc::<T>(w)));
        };

        if !num_pos.is_empty() {
            let n = sc::<T>(norm.number.max(1) as f64);
            let h = g.gather_rows(hidden, &num_pos);
            let s = g.linear(h, self.sign.0, self.sign.1);
            let l = g.cross_entropy(s, &sign_t, n);
            push(g, 3, l, weights.sign, &mut terms);
            let f = g.linear(h, self.fraction.0, self.fraction.1);
            let l = g.bce_with_logits(f, &frac_t, n);
            push(g, 4, l, weights.fraction, &mut terms);
            let e = g.linear(h, self.exponent.0, self.exponent.1);
            let l = g.cross_entropy(e, &exp_t, n);
            push(g, 5, l, weights.exponent, &mut terms);
        }
        if !date_pos.is_empty() {
            let n = sc::<T>(norm.date.max(1) as f64);
            let h = g.gather_rows(hidden, &date_pos);
            for (slot, head, tgt, w) in [
                (0, self.day, &day_t, weights.day),
                (1, self.month, &month_t, weights.month),
                (2, self.year, &year_t, weights.year),
            ] {
                let z = g.linear(h, head.0, head.1);
                let l = g.cross_entropy(z, tgt, n);
                push(g, slot, l, w, &mut terms);
            }
        }
        if !text_pos.is_empty() {
            let n = sc::<T>((norm.text.max(1) * self.text_dim) as f64);
            let h = g.gather_rows(hidden, &text_pos);
            let p = g.linear(h, self.text.0, self.text.1);
            let target = Matrix::from_vec(text_pos.len(), self.text_dim, text_t);
            let l = g.huber(p, target, sc::<T>(HUBER_DELTA), n);
            push(g, 6, l, weights.text, &mut terms);
        }
        let bundle = LossBundle::from_components(comps, weights);
        if terms.is_empty() {
            return (None, bundle);
        }
        (Some(g.weighted_sum(&terms)), bundle)
    }

    /// Decodes the head outputs at `position` for a token of the given kind.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<'_, T>, hidden: Var, position: usize, kind: &TokenContent) -> Prediction {
        let h = g.gather_rows(hidden, &[position]);
        let out = |g: &mut Graph<'_, T>, head: (ParamId, ParamId)| -> Vec<f64> {
            let z = g.linear(h, head.0, head.1);
            g.value(z).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
        };
        match kind {
            TokenContent::Number { .. } | TokenContent::Zeroed => {
                let sign = out(g, self.sign);
                let exponent = out(g, self.exponent);
                let frac = out(g, self.fraction)[0];
                Prediction::Number(decode_number(&sign, &exponent, frac))
            }
            TokenContent::Date(_) => {
                let day = argmax(&out(g, self.day));
                let month = argmax(&out(g, self.month));
                let year = argmax(&out(g, self.year));
                Prediction::Date(decode_date(day, month, year))
            }
            TokenContent::Text(_) => Prediction::Text(out(g, self.text)),
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Most likely number under the sign/exponent/fraction heads.
pub fn decode_number(sign_logits: &[f64], exponent_logits: &[f64], fraction_logit: f64) -> f64 {
    let p = softmax_row(sign_logits);
    if Sign::from_class(argmax(&p)) == Sign::Zero {
        return 0.0;
    }
    let pos = p[Sign::Positive.class()] / (p[Sign::Positive.class()] + p[Sign::Negative.class()]);
    let beta = (argmax(exponent_logits) as i32 + MIN_EXPONENT).clamp(MIN_EXPONENT, MAX_EXPONENT);
    invert_number(pos, sigmoid(fraction_logit), beta)
}

/// Date from class indices; the day is clamped to the month's length.
pub fn decode_date(day_class: usize, month_class: usize, year_class: usize) -> CivilDate {
    let year = YEAR_MIN + year_class as i32;
    let month = month_class as u8 + 1;
    let day = (day_class as u8 + 1).min(days_in_month(year, month));
    CivilDate::new(year, month, day).expect("clamped date is valid")
}
