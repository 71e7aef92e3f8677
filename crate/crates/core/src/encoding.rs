//! The PSB number system: weights as sign/exponent/probability triples.
//!
//! A nonzero weight decomposes as `w = s * 2^e * (1 + p)` with
//! `s ∈ {-1,+1}`, `e = floor(log2 |w|)` and `p = |w| / 2^e - 1 ∈ [0,1)`.
//! Evaluating the weight draws a Bernoulli bit `B_p` and applies the shift
//! `e + B_p`, so the larger of the two adjacent power-of-two shifts is taken
//! with probability `p` and the representation is unbiased:
//! `E[s * 2^e * (B_p + 1)] = w`.
//!
//! Probabilities are stored on a regular dyadic grid (`prob_num / 2^prob_bits`,
//! boundary `p = 0` included, `p = 1` excluded — the right boundary would be
//! the next exponent).

use serde::{Deserialize, Serialize};

use crate::{PsbError, Result};

/// Widths accepted for the probability grid.
pub const MAX_PROB_BITS: u32 = 12;

/// Encoding parameters: probability grid width and exponent field width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Probability grid resolution in bits, `1..=12`.
    pub prob_bits: u32,
    /// Exponent field width in bits; exponents cover the signed range
    /// `[-2^(exp_bits-1), 2^(exp_bits-1) - 1]`.
    pub exp_bits: u32,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { prob_bits: 10, exp_bits: 4 }
    }
}

impl EncodingConfig {
    pub fn new(prob_bits: u32, exp_bits: u32) -> Result<Self> {
        if !(1..=MAX_PROB_BITS).contains(&prob_bits) {
            return Err(PsbError::InvalidConfig(format!(
                "prob_bits must be in 1..={MAX_PROB_BITS}, got {prob_bits}"
            )));
        }
        // The on-disk exponent field is 5 bits (one code reserved for the
        // explicit zero), which bounds what a config may ask for.
        if !(2..=5).contains(&exp_bits) {
            return Err(PsbError::InvalidConfig(format!(
                "exp_bits must be in 2..=5, got {exp_bits}"
            )));
        }
        Ok(Self { prob_bits, exp_bits })
    }

    /// Smallest representable exponent.
    pub fn e_min(&self) -> i32 {
        -(1i32 << (self.exp_bits - 1))
    }

    /// Largest representable exponent.
    pub fn e_max(&self) -> i32 {
        (1i32 << (self.exp_bits - 1)) - 1
    }
}

/// One weight in the PSB number system.
///
/// `is_zero` is an explicit flag rather than a sentinel exponent so that
/// exponent arithmetic in the kernels stays branch-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsbWeight {
    /// -1 or +1.
    pub sign: i8,
    pub exponent: i32,
    /// Numerator of `p` in units of `1 / 2^prob_bits`.
    pub prob_num: u16,
    /// Grid resolution the numerator is expressed in.
    pub prob_bits: u8,
    pub is_zero: bool,
}

impl PsbWeight {
    pub fn zero(prob_bits: u8) -> Self {
        Self { sign: 1, exponent: 0, prob_num: 0, prob_bits, is_zero: true }
    }

    /// Quantized probability as a real number.
    pub fn prob(&self) -> f64 {
        self.prob_num as f64 / (1u32 << self.prob_bits) as f64
    }
}

/// Sign, exponent and exact mantissa fraction of a finite nonzero weight,
/// before any probability quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub sign: i8,
    pub exponent: i32,
    /// Exact `|w| / 2^exponent - 1 ∈ [0,1)`; no rounding is involved because
    /// scaling by a power of two and subtracting 1 from a value in `[1,2)`
    /// are both exact in binary floating point.
    pub prob: f64,
}

impl Decomposition {
    /// Reconstructs the weight; exact for every finite nonzero input.
    pub fn value(&self) -> f64 {
        self.sign as f64 * exp2i(self.exponent) * (1.0 + self.prob)
    }
}

/// `2^e` as f64, exact over the full exponent range used here.
pub(crate) fn exp2i(e: i32) -> f64 {
    f64::powi(2.0, e)
}

/// `floor(log2 |w|)` for finite nonzero `w`, via exponent-bit extraction so
/// exact powers of two land on their own exponent.
fn floor_log2_abs(w: f64) -> i32 {
    debug_assert!(w.is_finite() && w != 0.0);
    let bits = w.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    if exp_field != 0 {
        exp_field - 1023
    } else {
        // Subnormal: renormalize. Far below any representable e_min, but keep
        // the math honest.
        let scaled = w * exp2i(64);
        let sb = scaled.to_bits();
        (((sb >> 52) & 0x7ff) as i32 - 1023) - 64
    }
}

/// Splits a finite nonzero weight into `(s, e, p)` with unbounded exponent.
pub fn decompose(w: f64) -> Result<Decomposition> {
    if !w.is_finite() {
        return Err(PsbError::InvalidInput(format!("weight must be finite, got {w}")));
    }
    if w == 0.0 {
        return Err(PsbError::InvalidInput("weight must be nonzero".into()));
    }
    let sign: i8 = if w < 0.0 { -1 } else { 1 };
    let e = floor_log2_abs(w);
    // |w| * 2^-e ∈ [1,2) exactly, and subtracting 1 is exact (Sterbenz).
    let p = w.abs() * exp2i(-e) - 1.0;
    debug_assert!((0.0..1.0).contains(&p));
    Ok(Decomposition { sign, exponent: e, prob: p })
}

/// Snaps `p ∈ [0,1)` onto the `2^prob_bits` grid: nearest grid point, ties
/// toward even numerators. `p` close to 1 clamps to the top grid point (the
/// grid excludes the right boundary).
pub fn quantize_probability(p: f64, prob_bits: u32) -> Result<u16> {
    if !(0.0..1.0).contains(&p) {
        return Err(PsbError::InvalidInput(format!("probability must be in [0,1), got {p}")));
    }
    debug_assert!((1..=MAX_PROB_BITS).contains(&prob_bits));
    let cells = 1u32 << prob_bits;
    let k = (p * cells as f64).round_ties_even() as u32;
    Ok(k.min(cells - 1) as u16)
}

/// Encodes a real weight under the given config.
///
/// The exponent is clamped to the configured range; magnitudes below
/// `2^(e_min - 1)` snap to the explicit zero (too many right shifts of an
/// integer always yield 0, so there is nothing below the smallest exponent).
pub fn encode_weight(w: f64, cfg: &EncodingConfig) -> Result<PsbWeight> {
    if !w.is_finite() {
        return Err(PsbError::InvalidInput(format!("weight must be finite, got {w}")));
    }
    let pb = cfg.prob_bits as u8;
    if w == 0.0 {
        return Ok(PsbWeight::zero(pb));
    }
    let d = decompose(w)?;
    if d.exponent < cfg.e_min() - 1 {
        return Ok(PsbWeight::zero(pb));
    }
    let e = d.exponent.clamp(cfg.e_min(), cfg.e_max());
    // Re-derive p against the clamped exponent; out-of-range magnitudes pin
    // to the nearest representable grid cell.
    let p_raw = w.abs() * exp2i(-e) - 1.0;
    let prob_num = if p_raw < 0.0 {
        0
    } else if p_raw >= 1.0 {
        (1u32 << cfg.prob_bits) as u16 - 1
    } else {
        quantize_probability(p_raw, cfg.prob_bits)?
    };
    Ok(PsbWeight { sign: d.sign, exponent: e, prob_num, prob_bits: pb, is_zero: false })
}

/// Expected value of the representation: `s * 2^e * (1 + p)`, 0 for the
/// explicit zero.
pub fn decode_mean(pw: &PsbWeight) -> f64 {
    if pw.is_zero {
        return 0.0;
    }
    pw.sign as f64 * exp2i(pw.exponent) * (1.0 + pw.prob())
}

/// Exact single-sample variance of the representation of `w`:
/// `p(1-p) * 4^e`, always at most `w^2 / 8`.
pub fn variance_single(w: f64) -> f64 {
    debug_assert!(w.is_finite());
    if w == 0.0 {
        return 0.0;
    }
    let d = decompose(w).expect("finite nonzero");
    d.prob * (1.0 - d.prob) * exp2i(2 * d.exponent)
}

/// Upper bound on the relative standard deviation after averaging `n`
/// samples: `1 / sqrt(8 n)`.
pub fn relative_std_bound(n: u32) -> f64 {
    debug_assert!(n >= 1);
    1.0 / (8.0 * n as f64).sqrt()
}
