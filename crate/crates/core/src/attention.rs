//! Entropy-driven two-pass adaptive sampling.
//!
//! Pass 1 runs the whole image at a low sample budget and reads the last
//! convolution's activations; the pixelwise channel-softmax entropy of that
//! map, hard-thresholded at its mean, marks the regions worth refining.
//! Pass 2 re-runs the network spending the high budget only inside the mask
//! (resampled to every layer's spatial resolution) and the low budget
//! elsewhere. Regions of low entropy concentrate their mass in few channels
//! and are already decided; high-entropy regions are the ones that flip
//! classifications.

use crate::capacitor::{SamplingConfig, SamplingMode};
use crate::fixedpoint::FxTensor;
use crate::graph::{forward_capture, forward_masked, ForwardReport, LayerKind, Model, Tensor};
use crate::oracle::softmax;
use crate::{PsbError, Result};

/// Stream salt of the low-precision probe pass, so pass 2 consumes the same
/// streams a uniform forward would (degenerate masks then reproduce uniform
/// runs bit-exactly).
pub const PROBE_STREAM_SALT: u64 = 0x70726f6265;

/// Pixelwise channel-softmax entropy at the last convolution's resolution.
#[derive(Debug, Clone)]
pub struct EntropyMap {
    shape: (usize, usize),
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `h_xy = -sum_c softmax(a_xy.)_c * ln softmax(a_xy.)_c`, computed in float.
pub fn entropy_map(last_conv_activations: &FxTensor) -> Result<EntropyMap> {
    let sh = last_conv_activations.shape();
    if sh.len() != 3 || sh[2] < 2 {
        return Err(PsbError::ShapeMismatch(format!(
            "entropy map needs [H,W,C] activations with C >= 2, got {sh:?}"
        )));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let data = last_conv_activations.data();
    let mut values = Vec::with_capacity(h * w);
    let mut channel = vec![0.0f64; c];
    for pos in 0..h * w {
        for (ch, slot) in channel.iter_mut().enumerate() {
            *slot = data[pos * c + ch].to_f64();
        }
        let q = softmax(&channel);
        let entropy: f64 = q.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        values.push(entropy);
    }
    Ok(EntropyMap { shape: (h, w), values })
}

/// Boolean budget map: true positions receive `n_high` samples, the rest
/// `n_low`.
#[derive(Debug, Clone)]
pub struct BudgetMask {
    pub mask: Vec<bool>,
    pub shape: (usize, usize),
    pub n_low: u32,
    pub n_high: u32,
}

impl BudgetMask {
    /// Fraction of positions marked for the high budget.
    pub fn fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Hard threshold at the mean entropy: strictly greater marks a position as
/// computationally interesting. A constant map therefore selects nothing.
pub fn mask_from_entropy(em: &EntropyMap, n_low: u32, n_high: u32) -> Result<BudgetMask> {
    if n_low > n_high {
        return Err(PsbError::InvalidConfig(format!("n_low {n_low} exceeds n_high {n_high}")));
    }
    let mean = em.mean();
    Ok(BudgetMask {
        mask: em.values.iter().map(|&h| h > mean).collect(),
        shape: em.shape,
        n_low,
        n_high,
    })
}

/// Outcome of a two-pass adaptive run.
#[derive(Debug, Clone)]
pub struct AttentionReport {
    /// Pass-2 result (the classification output).
    pub report: ForwardReport,
    /// Shift-accumulate cost of the low-precision probe pass.
    pub pass1_ops: u64,
    pub mask: BudgetMask,
    /// Pass-2 ops spent in convolution layers (the quantity the cost
    /// identity is stated over; dense layers always run at the high budget).
    pub pass2_conv_ops: u64,
    /// Conv ops a uniform run at `n_high` would spend.
    pub uniform_high_conv_ops: u64,
}

impl AttentionReport {
    /// `1 - pass2_conv / uniform_high_conv`, as a percentage.
    pub fn conv_reduction_pct(&self) -> f64 {
        (1.0 - self.pass2_conv_ops as f64 / self.uniform_high_conv_ops as f64) * 100.0
    }

    /// Total cost including the probe pass (honest accounting).
    pub fn total_ops(&self) -> u64 {
        self.pass1_ops + self.report.shift_accumulate_ops
    }
}

/// Sum of per-layer op counts over convolution layers.
pub fn conv_ops(model: &Model, per_layer_ops: &[u64]) -> u64 {
    model
        .layers
        .iter()
        .zip(per_layer_ops)
        .filter(|(l, _)| matches!(l.kind, LayerKind::Conv2D { .. }))
        .map(|(_, &ops)| ops)
        .sum()
}

fn sampling_pair(model: &Model, n_low: u32, n_high: u32) -> Result<(SamplingConfig, SamplingConfig)> {
    let enc = model.encoding.ok_or_else(|| {
        PsbError::InvalidInput("two-pass forward requires a PSB model".into())
    })?;
    let low = SamplingConfig::new(n_low, SamplingMode::PerCallFilter, enc.prob_bits, enc.exp_bits)?;
    let high =
        SamplingConfig::new(n_high, SamplingMode::PerCallFilter, enc.prob_bits, enc.exp_bits)?;
    if n_low > n_high {
        return Err(PsbError::InvalidConfig(format!("n_low {n_low} exceeds n_high {n_high}")));
    }
    Ok((low, high))
}

/// Two-pass adaptive forward for one input. Pass-1 activations are
/// discarded; pass 2 re-runs the full network under the budget mask.
pub fn two_pass_forward(
    model: &Model,
    input: &Tensor,
    n_low: u32,
    n_high: u32,
    seed: u64,
) -> Result<AttentionReport> {
    two_pass_forward_item(model, input, n_low, n_high, seed, 0)
}

/// Batched variant of [`two_pass_forward`]; `batch_index` selects streams.
pub fn two_pass_forward_item(
    model: &Model,
    input: &Tensor,
    n_low: u32,
    n_high: u32,
    seed: u64,
    batch_index: u64,
) -> Result<AttentionReport> {
    let (low, high) = sampling_pair(model, n_low, n_high)?;
    let last_conv = model.last_conv_index().ok_or_else(|| {
        PsbError::Unsupported("two-pass forward needs at least one convolution layer".into())
    })?;

    let (pass1, activations) = forward_capture(
        model,
        input,
        &low,
        seed,
        batch_index,
        PROBE_STREAM_SALT,
        last_conv + 1,
    )?;
    let em = entropy_map(&activations)?;
    let mask = mask_from_entropy(&em, n_low, n_high)?;

    let report = forward_masked(
        model,
        input,
        &mask.mask,
        mask.shape,
        &low,
        &high,
        seed,
        batch_index,
    )?;
    finish_report(model, report, pass1.shift_accumulate_ops, mask, n_high)
}

/// Pass 2 under an externally supplied mask (no probe pass); used to study
/// the cost identity at controlled mask fractions.
#[allow(clippy::too_many_arguments)]
pub fn masked_forward_with(
    model: &Model,
    input: &Tensor,
    mask: BudgetMask,
    seed: u64,
    batch_index: u64,
) -> Result<AttentionReport> {
    let (low, high) = sampling_pair(model, mask.n_low, mask.n_high)?;
    let report = forward_masked(
        model,
        input,
        &mask.mask,
        mask.shape,
        &low,
        &high,
        seed,
        batch_index,
    )?;
    let n_high = mask.n_high;
    finish_report(model, report, 0, mask, n_high)
}

fn finish_report(
    model: &Model,
    report: ForwardReport,
    pass1_ops: u64,
    mask: BudgetMask,
    n_high: u32,
) -> Result<AttentionReport> {
    let (_, uniform_per_layer) = crate::graph::predicted_ops(model, n_high)?;
    let pass2_conv_ops = conv_ops(model, &report.per_layer_ops);
    let uniform_high_conv_ops = conv_ops(model, &uniform_per_layer);
    Ok(AttentionReport { report, pass1_ops, mask, pass2_conv_ops, uniform_high_conv_ops })
}

/// Binary PGM (P5) rendering of a budget mask, for visual inspection:
/// high-budget regions are white.
pub fn mask_to_pgm(mask: &BudgetMask) -> Vec<u8> {
    let (h, w) = mask.shape;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}
