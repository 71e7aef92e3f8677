//! Capacitor units: stochastic multiply-accumulate kernels for dense and
//! convolution layers.
//!
//! A weight `(s, e, p)` multiplies an activation `x` by drawing `n` Bernoulli
//! bits `b_i` and accumulating `x << (e + b_i)`; the capacitor averages the
//! `n`-fold sum with a single divisional shift before the non-linearity.
//! Accumulation is bit-exact: the `n` individual shift terms equal the single
//! expression `x * 2^e * (n + c)` with `c = sum b_i`, so the kernel computes
//! the binomial form directly.
//!
//! All accumulation happens in a wide integer lane with
//! [`ACC_GUARD_BITS`] extra fractional bits so every per-sample shift amount
//! `e + b + G` is non-negative; the only floor rounding in the whole MAC is
//! the final divisional shift. Explicit-zero weights contribute nothing and
//! consume no random draws, so stream consumption order is defined over
//! non-zero weights only.

use serde::{Deserialize, Serialize};

use crate::encoding::PsbWeight;
use crate::fixedpoint::{saturate_wide, FxTensor, FxValue, FRAC_BITS};
use crate::sampling::{binomial_direct, deterministic_count, RngStream, MAX_SAMPLES};
use crate::{PsbError, Result};

/// Extra fractional bits of the accumulator lane. Covers the most negative
/// exponent the weight format can carry, so `e + G >= 0` always.
pub const ACC_GUARD_BITS: u32 = 16;

/// Scale of a wide preactivation value: `2^-(FRAC_BITS + ACC_GUARD_BITS)`.
pub const WIDE_FRAC_BITS: u32 = FRAC_BITS + ACC_GUARD_BITS;

/// Converts a wide preactivation to a real number (for tests and reports).
pub fn wide_to_f64(v: i64) -> f64 {
    v as f64 / (1u64 << WIDE_FRAC_BITS) as f64
}

/// How per-weight binomial counts are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// One count per kernel weight per forward call, shared across all
    /// spatial positions (simulation-faithful).
    PerCallFilter,
    /// Independent counts per output position (hardware-faithful).
    PerPosition,
    /// No randomness: the larger shift is taken in exactly `prob_num` of
    /// `n = 2^prob_bits` accumulations.
    Deterministic,
    /// Expectation path: evaluates `E[w] = s * 2^e * (1 + p)` exactly on the
    /// dyadic probability grid.
    MeanOracle,
}

/// Sample budget and mode for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    n: u32,
    log2_n: u32,
    pub mode: SamplingMode,
    pub prob_bits: u32,
    pub exp_bits: u32,
}

impl SamplingConfig {
    pub fn new(n: u32, mode: SamplingMode, prob_bits: u32, exp_bits: u32) -> Result<Self> {
        if n == 0 || n > MAX_SAMPLES || !n.is_power_of_two() {
            return Err(PsbError::InvalidConfig(format!(
                "sample count must be a power of two in 1..={MAX_SAMPLES}, got {n}"
            )));
        }
        if mode == SamplingMode::Deterministic && n != (1u32 << prob_bits) {
            return Err(PsbError::InvalidConfig(format!(
                "deterministic mode requires n == 2^prob_bits (n={n}, prob_bits={prob_bits})"
            )));
        }
        Ok(Self { n, log2_n: n.trailing_zeros(), mode, prob_bits, exp_bits })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn log2_n(&self) -> u32 {
        self.log2_n
    }
}

/// Per-weight accumulation term: `sign * (n + c) << (e + G)` for the
/// sampling paths, `sign * (2^pb + prob_num) << (e + G)` for the mean path.
/// `None` for explicit zeros.
#[inline]
fn weight_term(w: &PsbWeight, q: i64) -> i64 {
    let sh = w.exponent + ACC_GUARD_BITS as i32;
    debug_assert!(sh >= 0, "exponent {} below the guard range", w.exponent);
    w.sign as i64 * (q << sh)
}

/// Draws the multiplier `q` and final shift for one weight under `cfg`.
#[inline]
fn draw_term(w: &PsbWeight, cfg: &SamplingConfig, stream: &mut RngStream) -> i64 {
    let q = match cfg.mode {
        SamplingMode::PerCallFilter | SamplingMode::PerPosition => {
            (cfg.n + binomial_direct(stream, cfg.n, w.prob_num, w.prob_bits as u32)) as i64
        }
        SamplingMode::Deterministic => {
            (cfg.n + deterministic_count(cfg.n, w.prob_num, w.prob_bits as u32)
                .expect("validated by SamplingConfig::new")) as i64
        }
        SamplingMode::MeanOracle => (1i64 << w.prob_bits) + w.prob_num as i64,
    };
    weight_term(w, q)
}

#[inline]
fn final_shift(cfg: &SamplingConfig) -> u32 {
    match cfg.mode {
        SamplingMode::MeanOracle => cfg.prob_bits,
        _ => cfg.log2_n,
    }
}

/// Stochastic dot product of one activation vector with one weight vector.
///
/// Returns the wide preactivation at scale `2^-WIDE_FRAC_BITS`, already
/// divided by the sample count (the capacitor's divisional shift). Weights
/// consume the stream sequentially, samples innermost.
pub fn stochastic_mac(
    x: &[FxValue],
    weights: &[PsbWeight],
    cfg: &SamplingConfig,
    stream: &mut RngStream,
) -> i64 {
    assert_eq!(x.len(), weights.len(), "activation/weight length mismatch");
    assert!(!x.is_empty());
    let mut acc: i128 = 0;
    for (xi, w) in x.iter().zip(weights) {
        if w.is_zero {
            continue;
        }
        let term = draw_term(w, cfg, stream);
        acc += xi.raw() as i128 * term as i128;
    }
    ((acc >> final_shift(cfg)).clamp(i64::MIN as i128, i64::MAX as i128)) as i64
}

/// Average-then-bias-then-saturate tail of a capacitor: the wide value is
/// already divided by `n`; the quantized bias is added at guard scale so the
/// guard removal is the only remaining floor.
#[inline]
pub fn finish(wide: i64, bias: FxValue) -> FxValue {
    let with_bias = wide + ((bias.raw() as i64) << ACC_GUARD_BITS);
    saturate_wide(with_bias >> ACC_GUARD_BITS)
}

/// Dense layer forward: per output unit one capacitor, then bias add and
/// saturation. The non-linearity is *not* applied here; averaging happens
/// before it by construction and the graph layer applies it.
pub fn dense_forward(
    x: &FxTensor,
    weights: &[PsbWeight],
    d_out: usize,
    d_in: usize,
    bias: &[FxValue],
    cfg: &SamplingConfig,
    stream: &mut RngStream,
) -> Result<FxTensor> {
    if x.len() != d_in || weights.len() != d_out * d_in || bias.len() != d_out {
        return Err(PsbError::ShapeMismatch(format!(
            "dense: input {} weights {} bias {} vs d_out={d_out} d_in={d_in}",
            x.len(),
            weights.len(),
            bias.len()
        )));
    }
    let mut out = Vec::with_capacity(d_out);
    for o in 0..d_out {
        let row = &weights[o * d_in..(o + 1) * d_in];
        let wide = stochastic_mac(x.data(), row, cfg, stream);
        out.push(finish(wide, bias[o]));
    }
    Ok(FxTensor::new(vec![d_out], out))
}

/// Zero-padding policy of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Static geometry of one convolution layer. Kernel layout is
/// `[kh, kw, c_in, c_out]`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }

    /// Output spatial dims plus top/left padding for the given input dims.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let s = self.stride.max(1);
        match self.padding {
            Padding::Same => {
                let ho = h.div_ceil(s);
                let wo = w.div_ceil(s);
                let pad_h = ((ho - 1) * s + self.kh).saturating_sub(h);
                let pad_w = ((wo - 1) * s + self.kw).saturating_sub(w);
                Ok((ho, wo, pad_h / 2, pad_w / 2))
            }
            Padding::Valid => {
                if h < self.kh || w < self.kw {
                    return Err(PsbError::ShapeMismatch(format!(
                        "valid conv: input {h}x{w} smaller than kernel {}x{}",
                        self.kh, self.kw
                    )));
                }
                Ok(((h - self.kh) / s + 1, (w - self.kw) / s + 1, 0, 0))
            }
        }
    }
}

fn check_conv_shapes(
    x: &FxTensor,
    weights: &[PsbWeight],
    bias: &[FxValue],
    geom: &ConvGeometry,
) -> Result<(usize, usize)> {
    let sh = x.shape();
    if sh.len() != 3 || sh[2] != geom.c_in {
        return Err(PsbError::ShapeMismatch(format!(
            "conv input shape {sh:?} incompatible with c_in={}",
            geom.c_in
        )));
    }
    if weights.len() != geom.weight_len() || bias.len() != geom.c_out {
        return Err(PsbError::ShapeMismatch(format!(
            "conv weights {} bias {} vs geometry {geom:?}",
            weights.len(),
            bias.len()
        )));
    }
    Ok((sh[0], sh[1]))
}

/// Accumulates one output position given per-weight terms; `terms[i] == 0`
/// encodes an explicit-zero weight (contributes nothing either way).
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_position(
    x: &FxTensor,
    terms: &[i64],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    y0: isize,
    x0: isize,
    acc: &mut [i128],
) {
    acc.fill(0);
    let xd = x.data();
    for ky in 0..geom.kh {
        let yy = y0 + ky as isize;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for kx in 0..geom.kw {
            let xx = x0 + kx as isize;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            let in_base = ((yy as usize * w) + xx as usize) * geom.c_in;
            let t_base = ((ky * geom.kw) + kx) * geom.c_in * geom.c_out;
            for ci in 0..geom.c_in {
                let xv = xd[in_base + ci].raw() as i128;
                if xv == 0 {
                    continue;
                }
                let row = &terms[t_base + ci * geom.c_out..t_base + (ci + 1) * geom.c_out];
                for (co, &t) in row.iter().enumerate() {
                    acc[co] += xv * t as i128;
                }
            }
        }
    }
}

fn draw_all_terms(
    weights: &[PsbWeight],
    cfg: &SamplingConfig,
    stream: &mut RngStream,
) -> Vec<i64> {
    weights
        .iter()
        .map(|w| if w.is_zero { 0 } else { draw_term(w, cfg, stream) })
        .collect()
}

/// Convolution forward. In `PerCallFilter`, `Deterministic` and `MeanOracle`
/// modes one term per kernel weight serves every output position; in
/// `PerPosition` mode fresh counts are drawn per output position (kernel
/// weights in row-major order, samples innermost, padding positions
/// included so consumption is position-independent).
pub fn conv2d_forward(
    x: &FxTensor,
    weights: &[PsbWeight],
    bias: &[FxValue],
    geom: &ConvGeometry,
    cfg: &SamplingConfig,
    stream: &mut RngStream,
) -> Result<FxTensor> {
    let (h, w) = check_conv_shapes(x, weights, bias, geom)?;
    let (ho, wo, pad_t, pad_l) = geom.output_dims(h, w)?;
    let fsh = final_shift(cfg);
    let mut out = Vec::with_capacity(ho * wo * geom.c_out);
    let mut acc = vec![0i128; geom.c_out];

    let shared_terms = match cfg.mode {
        SamplingMode::PerPosition => None,
        _ => Some(draw_all_terms(weights, cfg, stream)),
    };
    let mut pos_terms = vec![0i64; weights.len()];

    for yo in 0..ho {
        for xo in 0..wo {
            let terms: &[i64] = match &shared_terms {
                Some(t) => t,
                None => {
                    for (slot, wgt) in pos_terms.iter_mut().zip(weights) {
                        *slot = if wgt.is_zero { 0 } else { draw_term(wgt, cfg, stream) };
                    }
                    &pos_terms
                }
            };
            let y0 = (yo * geom.stride) as isize - pad_t as isize;
            let x0 = (xo * geom.stride) as isize - pad_l as isize;
            conv_position(x, terms, geom, h, w, y0, x0, &mut acc);
            for co in 0..geom.c_out {
                let wide =
                    ((acc[co] >> fsh).clamp(i64::MIN as i128, i64::MAX as i128)) as i64;
                out.push(finish(wide, bias[co]));
            }
        }
    }
    Ok(FxTensor::new(vec![ho, wo, geom.c_out], out))
}

/// Two-budget convolution for spatially adaptive sampling: output positions
/// where `mask` is true use `n_high` samples, the rest `n_low`. Counts are
/// drawn per weight per call (filter sampling); per weight the low-budget
/// count is drawn first and only if some position needs it, then the
/// high-budget count likewise, so an all-false mask consumes the stream
/// exactly like a uniform low-budget call (and all-true like high-budget).
pub fn conv2d_forward_masked(
    x: &FxTensor,
    weights: &[PsbWeight],
    bias: &[FxValue],
    geom: &ConvGeometry,
    mask: &[bool],
    cfg_low: &SamplingConfig,
    cfg_high: &SamplingConfig,
    stream: &mut RngStream,
) -> Result<FxTensor> {
    let (h, w) = check_conv_shapes(x, weights, bias, geom)?;
    let (ho, wo, pad_t, pad_l) = geom.output_dims(h, w)?;
    if mask.len() != ho * wo {
        return Err(PsbError::ShapeMismatch(format!(
            "budget mask length {} vs {ho}x{wo} output",
            mask.len()
        )));
    }
    let any_low = mask.iter().any(|&m| !m);
    let any_high = mask.iter().any(|&m| m);

    let mut terms_low = vec![0i64; weights.len()];
    let mut terms_high = vec![0i64; weights.len()];
    for (i, wgt) in weights.iter().enumerate() {
        if wgt.is_zero {
            continue;
        }
        if any_low {
            terms_low[i] = draw_term(wgt, cfg_low, stream);
        }
        if any_high {
            terms_high[i] = draw_term(wgt, cfg_high, stream);
        }
    }

    let mut out = Vec::with_capacity(ho * wo * geom.c_out);
    let mut acc = vec![0i128; geom.c_out];
    for yo in 0..ho {
        for xo in 0..wo {
            let high = mask[yo * wo + xo];
            let (terms, fsh) = if high {
                (&terms_high, final_shift(cfg_high))
            } else {
                (&terms_low, final_shift(cfg_low))
            };
            let y0 = (yo * geom.stride) as isize - pad_t as isize;
            let x0 = (xo * geom.stride) as isize - pad_l as isize;
            conv_position(x, terms, geom, h, w, y0, x0, &mut acc);
            for co in 0..geom.c_out {
                let wide =
                    ((acc[co] >> fsh).clamp(i64::MIN as i128, i64::MAX as i128)) as i64;
                out.push(finish(wide, bias[co]));
            }
        }
    }
    Ok(FxTensor::new(vec![ho, wo, geom.c_out], out))
}
