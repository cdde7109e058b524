use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_EXPONENT: i32 = -127;
pub const MAX_EXPONENT: i32 = 127;
pub const EXPONENT_CLASSES: usize = 255;
pub const SIGN_CLASSES: usize = 3;
/// Fraction used when the exponent saturates at the top of the range.
pub const SATURATED_ALPHA: f64 = 1.999_999_9;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
    Zero,
}

impl Sign {
    pub fn class(self) -> usize {
        match self {
            Sign::Positive => 0,
            Sign::Negative => 1,
            Sign::Zero => 2,
        }
    }

    pub fn from_class(c: usize) -> Sign {
        match c {
            0 => Sign::Positive,
            1 => Sign::Negative,
            _ => Sign::Zero,
        }
    }
}

/// `x = sign · alpha · 2^beta` with `alpha ∈ [1, 2)` and `beta ∈ [-127, 127]`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct NumericTriplet {
    pub sign: Sign,
    pub alpha: f64,
    pub beta: i32,
}

impl NumericTriplet {
    pub fn exponent_class(&self) -> usize {
        (self.beta - MIN_EXPONENT) as usize
    }

    pub fn reconstruct(&self) -> f64 {
        let mag = self.alpha * 2f64.powi(self.beta);
        match self.sign {
            Sign::Positive => mag,
            Sign::Negative => -mag,
            Sign::Zero => 0.0,
        }
    }
}

/// Exact binary scientific decomposition of a finite value, with the
/// exponent clipped to the single-precision range.
pub fn decompose_number(x: f64) -> Result<NumericTriplet> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("cannot decompose non-finite value {x}")));
    }
    if x == 0.0 {
        return Ok(NumericTriplet { sign: Sign::Zero, alpha: 1.0, beta: 0 });
    }
    let sign = if x < 0.0 { Sign::Negative } else { Sign::Positive };
    let (alpha, beta) = frexp_unit(x.abs());
    let t = if beta < MIN_EXPONENT {
        NumericTriplet { sign, alpha: 1.0, beta: MIN_EXPONENT }
    } else if beta > MAX_EXPONENT {
        NumericTriplet { sign, alpha: SATURATED_ALPHA, beta: MAX_EXPONENT }
    } else {
        NumericTriplet { sign, alpha, beta }
    };
    Ok(t)
}

/// `m = alpha · 2^beta` with `alpha ∈ [1, 2)`, read straight off the bits.
fn frexp_unit(m: f64) -> (f64, i32) {
    const MANTISSA: u64 = (1 << 52) - 1;
    let (m, bias) = if m < f64::MIN_POSITIVE { (m * 2f64.powi(64), 64) } else { (m, 0) };
    let bits = m.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1023 - bias;
    let alpha = f64::from_bits((bits & MANTISSA) | (1023u64 << 52));
    (alpha, exp)
}

/// Triangular-kernel soft binning of `alpha` over `k` uniform bins on `[1, 2)`.
/// Centers are `1 + (j + 0.5) / k`; values outside the first or last center
/// put all weight on the end bin.
pub fn soft_bin(alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 fraction bins, got {k}")));
    }
    if !(1.0..2.0).contains(&alpha) {
        return Err(Error::invalid(format!("fraction {alpha} outside [1, 2)")));
    }
    let mut w = vec![0.0; k];
    let u = (alpha - 1.0) * k as f64 - 0.5;
    if u <= 0.0 {
        w[0] = 1.0;
    } else if u >= (k - 1) as f64 {
        w[k - 1] = 1.0;
    } else {
        let j = u.floor() as usize;
        let frac = u - j as f64;
        w[j] = 1.0 - frac;
        w[j + 1] = frac;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(decompose_number(1.0).unwrap(), NumericTriplet { sign: Sign::Positive, alpha: 1.0, beta: 0 });
        assert_eq!(decompose_number(-6.0).unwrap(), NumericTriplet { sign: Sign::Negative, alpha: 1.5, beta: 2 });
        assert_eq!(
            decompose_number(2f64.powi(200)).unwrap(),
            NumericTriplet { sign: Sign::Positive, alpha: SATURATED_ALPHA, beta: 127 }
        );
        assert_eq!(
            decompose_number(-(2f64.powi(-300))).unwrap(),
            NumericTriplet { sign: Sign::Negative, alpha: 1.0, beta: -127 }
        );
        assert_eq!(decompose_number(0.0).unwrap().sign, Sign::Zero);
        assert_eq!(decompose_number(-0.0).unwrap(), NumericTriplet { sign: Sign::Zero, alpha: 1.0, beta: 0 });
        assert!(decompose_number(f64::NAN).is_err());
        assert!(decompose_number(f64::INFINITY).is_err());
    }

    #[test]
    fn subnormals_decompose_exactly_before_clipping() {
        let (a, b) = frexp_unit(5e-324);
        assert_eq!((a, b), (1.0, -1074));
        let (a, b) = frexp_unit(3.0 * 2f64.powi(-1060));
        assert_eq!((a, b), (1.5, -1059));
    }

    #[test]
    fn clipping_is_monotone_at_the_boundary() {
        let top = decompose_number(2f64.powi(127) * 1.9999).unwrap().reconstruct();
        let sat = decompose_number(2f64.powi(128)).unwrap().reconstruct();
        assert!(sat > top);
        let bottom = decompose_number(2f64.powi(-127)).unwrap().reconstruct();
        let under = decompose_number(2f64.powi(-140)).unwrap().reconstruct();
        assert_eq!(bottom, under);
    }

    #[test]
    fn soft_bin_examples() {
        assert_eq!(soft_bin(1.125, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(soft_bin(1.5, 4).unwrap(), vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(soft_bin(1.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(soft_bin(1.99, 4).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(soft_bin(2.0, 4).is_err());
        assert!(soft_bin(0.5, 4).is_err());
        assert!(soft_bin(1.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn soft_bin_is_a_sparse_distribution(alpha in 1.0f64..2.0, k in 2usize..64) {
            let w = soft_bin(alpha, k).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().filter(|&&v| v > 0.0).count() <= 2);
        }

        #[test]
        fn soft_bin_is_continuous(alpha in 1.0f64..1.999, k in 2usize..64) {
            let a = soft_bin(alpha, k).unwrap();
            let b = soft_bin(alpha + 1e-9, k).unwrap();
            let step: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            // Slope is at most k per unit alpha on two coordinates.
            prop_assert!(step <= 2.0 * k as f64 * 1e-9 + 1e-12);
        }

        #[test]
        fn decomposition_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite() && x != 0.0);
            let t = decompose_number(x).unwrap();
            prop_assert!((1.0..2.0).contains(&t.alpha));
            prop_assert!((MIN_EXPONENT..=MAX_EXPONENT).contains(&t.beta));
            let mag = x.abs();
            if mag >= 2f64.powi(-127) && mag < 2f64.powi(128) {
                prop_assert_eq!(t.reconstruct(), x);
            }
        }
    }
}
