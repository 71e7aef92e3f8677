//! Saturating Q5.10 fixed-point arithmetic for activations and intermediate
//! results: signed 16-bit raw values at scale `2^-10`, covering
//! `[-32, 32 - 2^-10]`. Layer accumulation happens in a wide signed lane;
//! saturation back to 16 bits occurs only at layer outputs.

use serde::{Deserialize, Serialize};

/// Fractional bits of the activation format.
pub const FRAC_BITS: u32 = 10;

/// `2^FRAC_BITS`.
pub const ONE_RAW: i32 = 1 << FRAC_BITS;

/// One activation scalar; value = raw / 1024.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FxValue {
    raw: i16,
}

impl std::fmt::Debug for FxValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fx({})", self.to_f64())
    }
}

impl FxValue {
    pub const ZERO: FxValue = FxValue { raw: 0 };
    pub const ONE: FxValue = FxValue { raw: ONE_RAW as i16 };
    pub const MAX: FxValue = FxValue { raw: i16::MAX };
    pub const MIN: FxValue = FxValue { raw: i16::MIN };

    pub const fn from_raw(raw: i16) -> Self {
        Self { raw }
    }

    pub const fn raw(self) -> i16 {
        self.raw
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 / ONE_RAW as f64
    }
}

/// Round-to-nearest (ties to even) of `x * 1024`, saturated to the signed
/// 16-bit range. Infinities saturate; NaN maps to zero.
pub fn quantize(x: f64) -> FxValue {
    if x.is_nan() {
        return FxValue::ZERO;
    }
    let scaled = x * ONE_RAW as f64;
    if scaled >= i16::MAX as f64 {
        return FxValue::MAX;
    }
    if scaled <= i16::MIN as f64 {
        return FxValue::MIN;
    }
    FxValue::from_raw(scaled.round_ties_even() as i16)
}

/// Saturating addition of raw values.
#[inline]
pub fn sat_add(a: FxValue, b: FxValue) -> FxValue {
    FxValue::from_raw(a.raw.saturating_add(b.raw))
}

/// Power-of-two scaling in a wide accumulator lane: left shift for `k >= 0`,
/// arithmetic (floor) right shift for `k < 0`. `|k| <= 24`.
#[inline]
pub fn shift(v: i64, k: i32) -> i64 {
    debug_assert!(k.unsigned_abs() <= 24);
    if k >= 0 {
        v << k
    } else {
        v >> (-k)
    }
}

/// `max(raw, 0)`.
#[inline]
pub fn relu(a: FxValue) -> FxValue {
    FxValue::from_raw(a.raw.max(0))
}

/// Clamps a wide lane value (already at scale `2^-10`) back to 16 bits.
#[inline]
pub fn saturate_wide(v: i64) -> FxValue {
    FxValue::from_raw(v.clamp(i16::MIN as i64, i16::MAX as i64) as i16)
}

/// Dense tensor of fixed-point activations, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxTensor {
    shape: Vec<usize>,
    data: Vec<FxValue>,
}

impl FxTensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![FxValue::ZERO; len] }
    }

    pub fn new(shape: Vec<usize>, data: Vec<FxValue>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Self { shape, data }
    }

    /// Quantizes a real-valued buffer into the Q5.10 format.
    pub fn quantize_from(shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, data: values.iter().map(|&v| quantize(v)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[FxValue] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [FxValue] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}
