//! Reference implementations everything else is validated against: a
//! real-arithmetic forward pass for float models, an exact brute-force
//! enumeration of capacitor statistics, and the exact binomial pmf.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::encoding::PsbWeight;
use crate::graph::{LayerKind, Model, Tensor, Weights};
use crate::sampling::{ln_binomial_coeff, MAX_SAMPLES};
use crate::{PsbError, Result};

/// Real-arithmetic (f64) forward pass of a float model; the comparison
/// baseline everywhere. Returns the output shape and data.
pub fn float_forward(model: &Model, input: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    if model.is_psb() {
        return Err(PsbError::InvalidInput("float forward requires a float model".into()));
    }
    if input.shape() != model.input_shape {
        return Err(PsbError::ShapeMismatch(format!(
            "input shape {:?} vs model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    if input.data().iter().any(|v| v.is_nan()) {
        return Err(PsbError::InvalidInput("NaN in model input".into()));
    }

    let mut values: Vec<Option<(Vec<usize>, Vec<f64>)>> = vec![None; model.value_count()];
    values[0] = Some((model.input_shape.clone(), input.to_f64_vec()));

    for (i, layer) in model.layers.iter().enumerate() {
        let arg = |k: usize| -> &(Vec<usize>, Vec<f64>) {
            values[layer.inputs[k]].as_ref().expect("topological order")
        };
        let out = match &layer.kind {
            LayerKind::Dense { weights, bias } => {
                let (in_shape, x) = arg(0);
                let w = float_weights(weights)?;
                let b = float_bias(bias)?;
                let (d_out, d_in) = (weights.shape()[0], weights.shape()[1]);
                if in_shape != &[d_in] {
                    return Err(PsbError::ShapeMismatch(format!(
                        "layer {i}: dense input {in_shape:?}"
                    )));
                }
                let mut y = Vec::with_capacity(d_out);
                for o in 0..d_out {
                    let mut acc = b[o] as f64;
                    for (xi, wi) in x.iter().zip(&w[o * d_in..(o + 1) * d_in]) {
                        acc += xi * *wi as f64;
                    }
                    y.push(acc);
                }
                (vec![d_out], y)
            }
            LayerKind::Conv2D { weights, bias, geom } => {
                let (in_shape, x) = arg(0);
                let w = float_weights(weights)?;
                let b = float_bias(bias)?;
                let (h, wd) = (in_shape[0], in_shape[1]);
                let (ho, wo, pad_t, pad_l) = geom.output_dims(h, wd)?;
                let mut y = vec![0.0f64; ho * wo * geom.c_out];
                for yo in 0..ho {
                    for xo in 0..wo {
                        for co in 0..geom.c_out {
                            let mut acc = b[co] as f64;
                            for ky in 0..geom.kh {
                                let yy = (yo * geom.stride + ky) as isize - pad_t as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for kx in 0..geom.kw {
                                    let xx = (xo * geom.stride + kx) as isize - pad_l as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..geom.c_in {
                                        let xi = x[((yy as usize) * wd + xx as usize) * geom.c_in
                                            + ci];
                                        let wi = w[((ky * geom.kw + kx) * geom.c_in + ci)
                                            * geom.c_out
                                            + co];
                                        acc += xi * wi as f64;
                                    }
                                }
                            }
                            y[(yo * wo + xo) * geom.c_out + co] = acc;
                        }
                    }
                }
                (vec![ho, wo, geom.c_out], y)
            }
            LayerKind::BatchNorm { scale, offset } => {
                let (shape, x) = arg(0);
                let c = scale.len();
                let y = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| scale[k % c] as f64 * v + offset[k % c] as f64)
                    .collect();
                (shape.clone(), y)
            }
            LayerKind::ReLU => {
                let (shape, x) = arg(0);
                (shape.clone(), x.iter().map(|&v| v.max(0.0)).collect())
            }
            LayerKind::Add => {
                let (sa, a) = arg(0);
                let (sb, b) = arg(1);
                if sa != sb {
                    return Err(PsbError::ShapeMismatch(format!("layer {i}: add {sa:?}+{sb:?}")));
                }
                (sa.clone(), a.iter().zip(b).map(|(x, y)| x + y).collect())
            }
            LayerKind::MaxPool { size, stride } => pool_float(arg(0), *size, *stride, true)?,
            LayerKind::AvgPool { size, stride } => pool_float(arg(0), *size, *stride, false)?,
            LayerKind::GlobalAvgPool => {
                let (shape, x) = arg(0);
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let mut y = vec![0.0f64; c];
                for pos in 0..h * w {
                    for (ch, acc) in y.iter_mut().enumerate() {
                        *acc += x[pos * c + ch];
                    }
                }
                for acc in &mut y {
                    *acc /= (h * w) as f64;
                }
                (vec![c], y)
            }
            LayerKind::Flatten => {
                let (shape, x) = arg(0);
                (vec![shape.iter().product()], x.clone())
            }
        };
        values[i + 1] = Some(out);
    }

    let (shape, data) = values[model.output_value()].take().expect("output produced");
    if data.iter().any(|v| v.is_nan()) {
        return Err(PsbError::Data("NaN propagated to the model output".into()));
    }
    Ok((shape, data))
}

fn float_weights(w: &Weights) -> Result<&[f32]> {
    match w {
        Weights::Float(t) => Ok(t.data()),
        Weights::Psb { .. } => {
            Err(PsbError::InvalidInput("float forward hit PSB weights".into()))
        }
    }
}

fn float_bias(b: &crate::graph::Bias) -> Result<&[f32]> {
    match b {
        crate::graph::Bias::Float(v) => Ok(v),
        crate::graph::Bias::Fx(_) => {
            Err(PsbError::InvalidInput("float forward hit fixed-point bias".into()))
        }
    }
}

fn pool_float(
    input: &(Vec<usize>, Vec<f64>),
    size: usize,
    stride: usize,
    take_max: bool,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (shape, x) = input;
    if shape.len() != 3 || shape[0] < size || shape[1] < size || stride == 0 {
        return Err(PsbError::ShapeMismatch(format!("pool {size}/{stride} on {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut y = Vec::with_capacity(ho * wo * c);
    for yo in 0..ho {
        for xo in 0..wo {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                let mut s = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        let v = x[((yo * stride + ky) * w + (xo * stride + kx)) * c + ch];
                        m = m.max(v);
                        s += v;
                    }
                }
                y.push(if take_max { m } else { s / (size * size) as f64 });
            }
        }
    }
    Ok((vec![ho, wo, c], y))
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact mean and variance of a capacitor preactivation, from brute force.
#[derive(Debug, Clone)]
pub struct ExactMoments {
    pub mean: BigRational,
    pub variance: BigRational,
}

impl ExactMoments {
    pub fn mean_f64(&self) -> f64 {
        self.mean.to_f64().expect("finite rational")
    }

    pub fn variance_f64(&self) -> f64 {
        self.variance.to_f64().expect("finite rational")
    }
}

/// `(numerator, k)` with `x == numerator / 2^k`, exact.
fn dyadic_parts(x: f64) -> (BigInt, i64) {
    let r = BigRational::from_float(x).expect("finite");
    let denom = r.denom();
    let k = denom.bits() as i64 - 1; // denominators of f64 values are powers of two
    debug_assert!(denom == &(BigInt::one() << k as usize));
    (r.numer().clone(), k)
}

/// Exact mean and variance of the capacitor preactivation
/// `sum_i x_i * s_i * 2^(e_i) * (n + c_i) / n` by full enumeration of all
/// `2^(d*n)` Bernoulli outcomes, in exact rational arithmetic on the dyadic
/// probability grid. Explicit-zero weights carry no Bernoulli bits.
///
/// Refuses instances with `d * n > 20`.
pub fn enumerate_expectation(x: &[f64], weights: &[PsbWeight], n: u32) -> Result<ExactMoments> {
    if x.len() != weights.len() || x.is_empty() {
        return Err(PsbError::ShapeMismatch("x and weights must have equal nonzero length".into()));
    }
    if x.len() as u64 * n as u64 > 20 {
        return Err(PsbError::InvalidInput(format!(
            "enumeration over 2^(d*n) outcomes refused for d*n = {} > 20",
            x.len() * n as usize
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PsbError::InvalidInput("activations must be finite".into()));
    }

    let live: Vec<(usize, &PsbWeight)> =
        weights.iter().enumerate().filter(|(_, w)| !w.is_zero).collect();

    // Common denominator 2^dmax for all per-weight dyadic contributions.
    let parts: Vec<(BigInt, i64)> = live
        .iter()
        .map(|&(i, w)| {
            let (num, k) = dyadic_parts(x[i]);
            (num * BigInt::from(w.sign), k - w.exponent as i64)
        })
        .collect();
    let dmax = parts.iter().map(|&(_, k)| k).max().unwrap_or(0);

    // value_tab[j][c] = integer contribution of live weight j with count c,
    // at scale 1 / (2^dmax * n).
    let value_tab: Vec<Vec<BigInt>> = parts
        .iter()
        .map(|(num, k)| {
            (0..=n)
                .map(|c| num.clone() * (BigInt::one() << (dmax - k) as usize) * BigInt::from(n + c))
                .collect()
        })
        .collect();
    // prob_tab[j][c] = numerator of P(one fixed bit pattern with c ones) at
    // scale 1 / 2^(prob_bits * n).
    let prob_tab: Vec<Vec<BigUint>> = live
        .iter()
        .map(|&(_, w)| {
            let p = BigUint::from(w.prob_num);
            let q = BigUint::from((1u32 << w.prob_bits) - w.prob_num as u32);
            (0..=n).map(|c| p.pow(c) * q.pow(n - c)).collect()
        })
        .collect();

    let bits_total = live.len() as u32 * n;
    let mut mean_acc = BigInt::zero();
    let mut sq_acc = BigInt::zero();
    let mut prob_sum = BigUint::zero();
    for outcome in 0u64..(1u64 << bits_total) {
        let mut value = BigInt::zero();
        let mut prob = BigUint::one();
        for (j, _) in live.iter().enumerate() {
            let c = ((outcome >> (j as u32 * n)) & ((1u64 << n) - 1)).count_ones();
            value += &value_tab[j][c as usize];
            prob *= &prob_tab[j][c as usize];
        }
        let p = BigInt::from(prob.clone());
        mean_acc += &p * &value;
        sq_acc += p * (&value * &value);
        prob_sum += prob;
    }

    // Scales: probabilities sum over 2^(sum of prob_bits * n) outcomes, and
    // values carry the common dyadic factor 2^-dmax / n (dmax may be
    // negative, in which case it multiplies).
    let prob_bits_total: u64 = live.iter().map(|&(_, w)| w.prob_bits as u64 * n as u64).sum();
    debug_assert_eq!(prob_sum, BigUint::one() << prob_bits_total as usize);
    let prob_den = BigInt::one() << prob_bits_total as usize;
    let value_scale = if dmax >= 0 {
        BigRational::new(BigInt::one(), BigInt::one() << dmax as usize)
    } else {
        BigRational::from(BigInt::one() << (-dmax) as usize)
    } / BigRational::from(BigInt::from(n));
    let mean = BigRational::new(mean_acc, prob_den.clone()) * &value_scale;
    let second = BigRational::new(sq_acc, prob_den) * (&value_scale * &value_scale);
    let variance = second - &mean * &mean;
    debug_assert!(!variance.is_negative());
    Ok(ExactMoments { mean, variance })
}

/// Exact binomial pmf over `0..=n` via the log-factorial table; the result
/// is renormalized so it sums to 1 to within one ulp.
pub fn exact_binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    assert!(n >= 1 && n <= MAX_SAMPLES as usize);
    assert!((0.0..=1.0).contains(&p));
    if p == 0.0 {
        let mut v = vec![0.0; n + 1];
        v[0] = 1.0;
        return v;
    }
    if p == 1.0 {
        let mut v = vec![0.0; n + 1];
        v[n] = 1.0;
        return v;
    }
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let mut pmf: Vec<f64> = (0..=n)
        .map(|k| (ln_binomial_coeff(n, k) + k as f64 * ln_p + (n - k) as f64 * ln_q).exp())
        .collect();
    let total: f64 = pmf.iter().sum();
    for v in &mut pmf {
        *v /= total;
    }
    pmf
}

/// Streaming mean/variance accumulator (Welford) with a 4-sigma confidence
/// radius for the mean.
#[derive(Debug, Clone, Default)]
pub struct StatAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StatSummary {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
    pub ci4: f64,
}

impl StatAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn summary(&self) -> StatSummary {
        assert!(self.count >= 1);
        let variance = if self.count > 1 { self.m2 / (self.count - 1) as f64 } else { 0.0 };
        StatSummary {
            mean: self.mean,
            variance,
            count: self.count,
            ci4: 4.0 * (variance / self.count as f64).sqrt(),
        }
    }
}
