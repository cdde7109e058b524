//! Regression target codecs: how a real target is presented to the head,
//! which loss trains it, and how head outputs decode back to a real value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::encoder::numeric::{decompose_number, Sign, EXPONENT_CLASSES, MIN_EXPONENT};
use crate::error::{Error, Result};
use crate::heads::{argmax, invert_number, tilde_alpha};
use crate::tensor::{sc, Matrix, Scalar};

pub const PERCENTILE_BINS: usize = 100;
pub const FRACTION_BINS: usize = 32;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodecKind {
    #[serde(rename = "scalar_L2")]
    ScalarL2,
    #[serde(rename = "triplet_tilde_XE")]
    TripletTildeXe,
    #[serde(rename = "raw_L2")]
    RawL2,
    #[serde(rename = "percentile_XE")]
    PercentileXe,
    #[serde(rename = "triplet_alpha_XE")]
    TripletAlphaXe,
    #[serde(rename = "triplet_tilde_binned_XE")]
    TripletTildeBinnedXe,
    #[serde(rename = "triplet_tilde_L2")]
    TripletTildeL2,
    #[serde(rename = "triplet_tilde_standard_XE")]
    TripletTildeStandardXe,
    #[serde(rename = "power_L2")]
    PowerL2,
    #[serde(rename = "power_tilde_XE")]
    PowerTildeXe,
}

impl CodecKind {
    pub const ALL: [CodecKind; 10] = [
        CodecKind::ScalarL2,
        CodecKind::TripletTildeXe,
        CodecKind::RawL2,
        CodecKind::PercentileXe,
        CodecKind::TripletAlphaXe,
        CodecKind::TripletTildeBinnedXe,
        CodecKind::TripletTildeL2,
        CodecKind::TripletTildeStandardXe,
        CodecKind::PowerL2,
        CodecKind::PowerTildeXe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodecKind::ScalarL2 => "scalar_L2",
            CodecKind::TripletTildeXe => "triplet_tilde_XE",
            CodecKind::RawL2 => "raw_L2",
            CodecKind::PercentileXe => "percentile_XE",
            CodecKind::TripletAlphaXe => "triplet_alpha_XE",
            CodecKind::TripletTildeBinnedXe => "triplet_tilde_binned_XE",
            CodecKind::TripletTildeL2 => "triplet_tilde_L2",
            CodecKind::TripletTildeStandardXe => "triplet_tilde_standard_XE",
            CodecKind::PowerL2 => "power_L2",
            CodecKind::PowerTildeXe => "power_tilde_XE",
        }
    }

    /// Whether decoding is only exact up to a bin.
    pub fn is_binned(self) -> bool {
        matches!(self, CodecKind::PercentileXe | CodecKind::TripletTildeBinnedXe)
    }

    fn normalization(self) -> Normalization {
        match self {
            CodecKind::ScalarL2 | CodecKind::TripletTildeStandardXe => Normalization::Standard,
            CodecKind::PowerL2 | CodecKind::PowerTildeXe => Normalization::Power,
            _ => Normalization::None,
        }
    }

    fn fraction(self) -> Option<FractionMode> {
        match self {
            CodecKind::TripletTildeXe | CodecKind::TripletTildeStandardXe | CodecKind::PowerTildeXe => {
                Some(FractionMode::TildeXe)
            }
            CodecKind::TripletAlphaXe => Some(FractionMode::AlphaXe),
            CodecKind::TripletTildeBinnedXe => Some(FractionMode::TildeBinned),
            CodecKind::TripletTildeL2 => Some(FractionMode::TildeL2),
            _ => None,
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CodecKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = CodecKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown codec `{s}`; valid codecs: {}", names.join(", ")))
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Normalization {
    None,
    Standard,
    Power,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum FractionMode {
    TildeXe,
    AlphaXe,
    TildeBinned,
    TildeL2,
}

/// Yeo-Johnson transform.
pub fn yeo_johnson(y: f64, lambda: f64) -> f64 {
    if y >= 0.0 {
        if lambda.abs() < 1e-12 {
            y.ln_1p()
        } else {
            ((y + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(-y).ln_1p()
    } else {
        -((1.0 - y).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

pub fn yeo_johnson_inverse(z: f64, lambda: f64) -> f64 {
    if z >= 0.0 {
        if lambda.abs() < 1e-12 {
            z.exp_m1()
        } else {
            (z * lambda + 1.0).powf(1.0 / lambda) - 1.0
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(-z).exp_m1()
    } else {
        1.0 - (1.0 - (2.0 - lambda) * z).powf(1.0 / (2.0 - lambda))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn yeo_johnson_log_likelihood(y: &[f64], lambda: f64) -> f64 {
    let t: Vec<f64> = y.iter().map(|&v| yeo_johnson(v, lambda)).collect();
    let (_, std) = mean_std(&t);
    let n = y.len() as f64;
    let jacobian: f64 = y.iter().map(|&v| v.signum() * v.abs().ln_1p()).sum();
    -n * std.ln() + (lambda - 1.0) * jacobian
}

/// Maximum-likelihood Yeo-Johnson exponent by golden-section search on [-5, 5].
pub fn fit_yeo_johnson(y: &[f64]) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-5.0f64, 5.0f64);
    let f = |l: f64| {
        let v = yeo_johnson_log_likelihood(y, l);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Statistics fitted on training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedCodec {
    pub kind: CodecKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub mean: f64,
    pub std: f64,
    /// Percentile bin edges and per-bin medians.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub medians: Vec<f64>,
}

/// A target in the head's representation.
#[derive(Clone, Debug, PartialEq)]
pub enum CodecTarget {
    Scalar(f64),
    Class(usize),
    Triplet { positive: bool, fraction: f64, fraction_bin: usize, exponent: usize },
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl FittedCodec {
    pub fn fit(kind: CodecKind, targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("cannot fit a codec on no targets"));
        }
        if let Some(bad) = targets.iter().find(|y| !y.is_finite()) {
            return Err(Error::invalid(format!("non-finite regression target {bad}")));
        }
        let mut codec = FittedCodec { kind, lambda: None, mean: 0.0, std: 1.0, edges: vec![], medians: vec![] };
        match kind.normalization() {
            Normalization::None => {}
            Normalization::Standard => {
                let (m, s) = mean_std(targets);
                if s == 0.0 || !s.is_finite() {
                    return Err(Error::ConstantTarget);
                }
                codec.mean = m;
                codec.std = s;
            }
            Normalization::Power => {
                let lambda = fit_yeo_johnson(targets);
                let t: Vec<f64> = targets.iter().map(|&y| yeo_johnson(y, lambda)).collect();
                let (m, s) = mean_std(&t);
                // A spread at rounding-noise scale means the transform collapsed
                // distinct targets onto one value.
                let collapsed = s <= 16.0 * f64::EPSILON * m.abs().max(f64::MIN_POSITIVE);
                if collapsed || !(s.is_finite() && m.is_finite() && t.iter().all(|v| v.is_finite())) {
                    return Err(Error::CodecFailure(format!(
                        "power transform (lambda {lambda:.4}) produced non-finite or degenerate values"
                    )));
                }
                codec.lambda = Some(lambda);
                codec.mean = m;
                codec.std = s;
            }
        }
        if kind == CodecKind::PercentileXe {
            let mut sorted = targets.to_vec();
            sorted.sort_by(f64::total_cmp);
            codec.edges = (1..PERCENTILE_BINS).map(|k| quantile(&sorted, k as f64 / PERCENTILE_BINS as f64)).collect();
            let mut members: Vec<Vec<f64>> = vec![Vec::new(); PERCENTILE_BINS];
            for &y in &sorted {
                members[codec.percentile_bin(y)].push(y);
            }
            codec.medians = (0..PERCENTILE_BINS)
                .map(|k| {
                    let m = &members[k];
                    if m.is_empty() {
                        let lo = if k == 0 { sorted[0] } else { codec.edges[k - 1] };
                        let hi = if k == PERCENTILE_BINS - 1 { sorted[sorted.len() - 1] } else { codec.edges[k] };
                        (lo + hi) / 2.0
                    } else {
                        quantile(m, 0.5)
                    }
                })
                .collect();
        }
        Ok(codec)
    }

    /// Bin index: the number of edges at or below `y`.
    pub fn percentile_bin(&self, y: f64) -> usize {
        self.edges.partition_point(|&e| e <= y)
    }

    pub fn output_dim(&self) -> usize {
        match self.kind.fraction() {
            Some(FractionMode::TildeBinned) => 1 + FRACTION_BINS + EXPONENT_CLASSES,
            Some(_) => 2 + EXPONENT_CLASSES,
            None if self.kind == CodecKind::PercentileXe => PERCENTILE_BINS,
            None => 1,
        }
    }

    fn forward_transform(&self, y: f64) -> f64 {
        match self.kind.normalization() {
            Normalization::None => y,
            Normalization::Standard => (y - self.mean) / self.std,
            Normalization::Power => (yeo_johnson(y, self.lambda.unwrap_or(1.0)) - self.mean) / self.std,
        }
    }

    fn inverse_transform(&self, z: f64) -> f64 {
        match self.kind.normalization() {
            Normalization::None => z,
            Normalization::Standard => z * self.std + self.mean,
            Normalization::Power => yeo_johnson_inverse(z * self.std + self.mean, self.lambda.unwrap_or(1.0)),
        }
    }

    pub fn encode(&self, y: f64) -> Result<CodecTarget> {
        if self.kind == CodecKind::PercentileXe {
            return Ok(CodecTarget::Class(self.percentile_bin(y)));
        }
        let z = self.forward_transform(y);
        if !z.is_finite() {
            return Err(Error::CodecFailure(format!("target {y} maps to non-finite {z}")));
        }
        let Some(mode) = self.kind.fraction() else { return Ok(CodecTarget::Scalar(z)) };
        let t = decompose_number(z)?;
        // Zero has no scientific form; it is represented by the smallest magnitude.
        let (alpha, beta) = if t.sign == Sign::Zero { (1.0, MIN_EXPONENT) } else { (t.alpha, t.beta) };
        let fraction = match mode {
            FractionMode::AlphaXe => alpha - 1.0,
            _ => tilde_alpha(alpha, beta),
        };
        let fraction_bin = ((fraction * FRACTION_BINS as f64) as usize).min(FRACTION_BINS - 1);
        Ok(CodecTarget::Triplet {
            positive: t.sign != Sign::Negative,
            fraction,
            fraction_bin,
            exponent: (beta - MIN_EXPONENT) as usize,
        })
    }

    /// Value represented by a target, up to bin resolution.
    pub fn decode_target(&self, target: &CodecTarget) -> f64 {
        match *target {
            CodecTarget::Scalar(z) => self.inverse_transform(z),
            CodecTarget::Class(k) => self.medians[k.min(self.medians.len() - 1)],
            CodecTarget::Triplet { positive, fraction, fraction_bin, exponent } => {
                let f = if self.kind.fraction() == Some(FractionMode::TildeBinned) {
                    (fraction_bin as f64 + 0.5) / FRACTION_BINS as f64
                } else {
                    fraction
                };
                self.inverse_transform(self.triplet_value(if positive { 1.0 } else { 0.0 }, f, exponent))
            }
        }
    }

    fn triplet_value(&self, sign_prob: f64, fraction: f64, exponent_class: usize) -> f64 {
        let beta = exponent_class as i32 + MIN_EXPONENT;
        let f = fraction.clamp(0.0, 1.0);
        if self.kind.fraction() == Some(FractionMode::AlphaXe) {
            let s = if sign_prob >= 0.5 { 1.0 } else { -1.0 };
            s * (1.0 + f) * 2f64.powi(beta)
        } else {
            invert_number(sign_prob, f, beta)
        }
    }

    /// Real value decoded from one row of head outputs.
    pub fn decode(&self, out: &[f64]) -> f64 {
        match self.kind.fraction() {
            None if self.kind == CodecKind::PercentileXe => self.medians[argmax(out)],
            None => self.inverse_transform(out[0]),
            Some(mode) => {
                let sign = sigmoid(out[0]);
                let (fraction, exp) = match mode {
                    FractionMode::TildeBinned => {
                        let k = argmax(&out[1..1 + FRACTION_BINS]);
                        ((k as f64 + 0.5) / FRACTION_BINS as f64, &out[1 + FRACTION_BINS..])
                    }
                    FractionMode::TildeL2 => (out[1], &out[2..]),
                    _ => (sigmoid(out[1]), &out[2..]),
                };
                self.inverse_transform(self.triplet_value(sign, fraction, argmax(exp)))
            }
        }
    }

    /// Training loss of head outputs against encoded targets, summed over
    /// rows and divided by `norm`.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, out: Var, targets: &[CodecTarget], norm: T) -> Result<Var> {
        let n = targets.len();
        match self.kind.fraction() {
            None if self.kind == CodecKind::PercentileXe => {
                let classes = targets
                    .iter()
                    .map(|t| match t {
                        CodecTarget::Class(k) => Ok(*k),
                        _ => Err(Error::invalid("percentile codec expects class targets")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.cross_entropy(out, &classes, norm))
            }
            None => {
                let values = targets
                    .iter()
                    .map(|t| match t {
                        CodecTarget::Scalar(z) => Ok(sc::<T>(*z)),
                        _ => Err(Error::invalid("scalar codec expects scalar targets")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.squared_error(out, Matrix::from_vec(n, 1, values), norm))
            }
            Some(mode) => {
                let mut signs = Vec::with_capacity(n);
                let mut fractions = Vec::with_capacity(n);
                let mut fraction_bins = Vec::with_capacity(n);
                let mut exponents = Vec::with_capacity(n);
                for t in targets {
                    let CodecTarget::Triplet { positive, fraction, fraction_bin, exponent } = *t else {
                        return Err(Error::invalid("triplet codec expects triplet targets"));
                    };
                    signs.push(if positive { T::one() } else { T::zero() });
                    fractions.push(sc::<T>(fraction));
                    fraction_bins.push(fraction_bin);
                    exponents.push(exponent);
                }
                let sign = g.slice_cols(out, 0, 1);
                let sign_loss = g.bce_with_logits(sign, &signs, norm);
                let width = g.value(out).cols();
                let (fraction_loss, exp_start) = match mode {
                    FractionMode::TildeBinned => {
                        let z = g.slice_cols(out, 1, 1 + FRACTION_BINS);
                        (g.cross_entropy(z, &fraction_bins, norm), 1 + FRACTION_BINS)
                    }
                    FractionMode::TildeL2 => {
                        let z = g.slice_cols(out, 1, 2);
                        (g.squared_error(z, Matrix::from_vec(n, 1, fractions), norm), 2)
                    }
                    FractionMode::TildeXe | FractionMode::AlphaXe => {
                        let z = g.slice_cols(out, 1, 2);
                        (g.bce_with_logits(z, &fractions, norm), 2)
                    }
                };
                let e = g.slice_cols(out, exp_start, width);
                let exp_loss = g.cross_entropy(e, &exponents, norm);
                Ok(g.weighted_sum(&[(sign_loss, T::one()), (fraction_loss, T::one()), (exp_loss, T::one())]))
            }
        }
    }
}
