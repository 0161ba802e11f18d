//! Real multipliers as `m0 * 2^n0` with a Q31 mantissa, and the floor-shift
//! product used by the integer requantizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional bits of the mantissa.
pub const MANTISSA_BITS: u32 = 31;

const ONE: i64 = 1 << MANTISSA_BITS;

/// `m = (m0_code / 2^31) * 2^n0` with `0.5 <= |m0_code / 2^31| < 1`.
///
/// `m0_code == 0` encodes a dead channel (multiplier exactly zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointMultiplier {
    pub m0_code: i32,
    pub n0: i32,
}

impl FixedPointMultiplier {
    pub const DEAD: FixedPointMultiplier = FixedPointMultiplier { m0_code: 0, n0: 0 };

    /// Mantissa as a real in (-1, 1).
    pub fn mantissa(&self) -> f64 {
        self.m0_code as f64 / ONE as f64
    }

    /// The represented real value.
    pub fn to_f64(&self) -> f64 {
        self.mantissa() * 2f64.powi(self.n0)
    }

    /// `floor(m * acc)` evaluated as `(acc * m0_code) >> (31 - n0)` with an
    /// arithmetic shift. Requires `n0 <= 31` and `|acc| < 2^32`, so the
    /// product fits in 64 bits.
    pub fn apply(&self, acc: i64) -> i64 {
        debug_assert!(acc.unsigned_abs() < 1 << 32);
        let prod = acc * self.m0_code as i64;
        let shift = MANTISSA_BITS as i32 - self.n0;
        debug_assert!(shift >= 0, "n0 {} exceeds the mantissa width", self.n0);
        if shift >= 63 {
            if prod < 0 {
                -1
            } else {
                0
            }
        } else {
            prod >> shift
        }
    }
}

/// Splits a non-zero finite multiplier into mantissa and exponent.
pub fn decompose(m: f64) -> Result<FixedPointMultiplier> {
    if !m.is_finite() {
        return Err(Error::Multiplier(m, "not finite"));
    }
    if m == 0.0 {
        return Err(Error::Multiplier(m, "zero multiplier"));
    }
    let (mut mant, mut exp) = frexp(m.abs());
    let mut code = (mant * ONE as f64).round() as i64;
    if code == ONE {
        code = ONE / 2;
        exp += 1;
        mant = 0.5;
    }
    debug_assert!((0.5..1.0).contains(&mant));
    if exp.abs() > 62 {
        return Err(Error::Multiplier(m, "exponent out of range"));
    }
    let code = if m < 0.0 { -code } else { code };
    Ok(FixedPointMultiplier {
        m0_code: code as i32,
        n0: exp,
    })
}

/// `x = mant * 2^exp` with `mant` in [0.5, 1) for positive finite `x`.
fn frexp(x: f64) -> (f64, i32) {
    let mut exp = x.log2().floor() as i32 + 1;
    let mut mant = x / 2f64.powi(exp);
    while mant >= 1.0 {
        mant /= 2.0;
        exp += 1;
    }
    while mant < 0.5 {
        mant *= 2.0;
        exp -= 1;
    }
    (mant, exp)
}
