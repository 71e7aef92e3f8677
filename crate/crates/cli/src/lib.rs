//! Library backing the `psb` binary: each subcommand is an ordinary function
//! so tests can drive conversions, sweeps and attention runs in-process and
//! compare their CSV output byte for byte.
//!
//! CSV files start with `#`-prefixed comment lines echoing the resolved,
//! result-affecting configuration (the worker count is an execution detail
//! and deliberately not part of it: output is invariant to it).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use psb_core::attention::two_pass_forward_item;
use psb_core::capacitor::{SamplingConfig, SamplingMode};
use psb_core::encoding::{relative_std_bound, EncodingConfig, PsbWeight};
use psb_core::graph::{
    argmax, convert_to_psb, fold_batchnorm, forward_batch, prune_magnitude, Model, Weights,
};
use psb_core::modelio::{
    gen_synthetic, load_model, resolve_data_path, save_idx_images, save_idx_labels, save_model,
    Dataset,
};
use psb_core::oracle::float_forward;
use psb_core::{PsbError, Result};

/// Maps error classes onto the stable exit codes scripted harnesses rely
/// on: 2 config, 3 data, 4 model.
pub fn exit_code(err: &PsbError) -> i32 {
    match err {
        PsbError::InvalidConfig(_) | PsbError::InvalidInput(_) => 2,
        PsbError::Data(_) | PsbError::Io(_) => 3,
        PsbError::Format(_)
        | PsbError::UnfoldableGraph(_)
        | PsbError::Unsupported(_)
        | PsbError::ShapeMismatch(_) => 4,
    }
}

fn parse_mode(s: &str) -> Result<SamplingMode> {
    match s {
        "per-call" => Ok(SamplingMode::PerCallFilter),
        "per-position" => Ok(SamplingMode::PerPosition),
        "deterministic" => Ok(SamplingMode::Deterministic),
        "mean-oracle" => Ok(SamplingMode::MeanOracle),
        other => Err(PsbError::InvalidConfig(format!(
            "unknown mode '{other}' (per-call, per-position, deterministic, mean-oracle)"
        ))),
    }
}

fn load_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let ds = Dataset::from_files(&resolve_data_path(images), &resolve_data_path(labels))?;
    if ds.is_empty() {
        return Err(PsbError::Data("dataset is empty".into()));
    }
    Ok(ds)
}

fn require_psb(model: &Model) -> Result<EncodingConfig> {
    model.encoding.ok_or_else(|| {
        PsbError::InvalidInput("this command needs a PSB model (run `psb convert` first)".into())
    })
}

// ---------------------------------------------------------------------------
// convert

pub struct ConvertRequest {
    pub input: PathBuf,
    pub output: PathBuf,
    pub fold_bn: bool,
    pub prune: Option<f64>,
    pub prob_bits: u32,
    pub exp_bits: u32,
}

pub struct ConvertSummary {
    pub weight_count: usize,
    pub zero_count: usize,
    pub file_bytes: u64,
}

/// fold -> prune (optional) -> encode -> save.
pub fn run_convert(req: &ConvertRequest) -> Result<ConvertSummary> {
    let cfg = EncodingConfig::new(req.prob_bits, req.exp_bits)?;
    let mut model = load_model(&req.input)?;
    if req.fold_bn {
        model = fold_batchnorm(&model)?;
    }
    if let Some(fraction) = req.prune {
        model = prune_magnitude(&model, fraction)?;
    }
    let psb = convert_to_psb(&model, &cfg)?;
    save_model(&psb, &req.output)?;
    let weight_count = psb.weight_count();
    let zero_count = weight_count - psb.nonzero_weight_count();
    let file_bytes = fs::metadata(&req.output)?.len();
    Ok(ConvertSummary { weight_count, zero_count, file_bytes })
}

// ---------------------------------------------------------------------------
// sweep

pub struct SweepRequest {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub samples: Vec<u32>,
    pub seed: u64,
    pub mode: String,
    pub workers: usize,
    /// Optional float model for reference logits; without it the PSB model's
    /// expectation path serves as the reference.
    pub reference: Option<PathBuf>,
}

/// One CSV row per sample count: `n,top1,median_rel_logit_err,ops`.
pub fn run_sweep(req: &SweepRequest) -> Result<String> {
    let model = load_model(&req.model)?;
    let enc = require_psb(&model)?;
    let mode = parse_mode(&req.mode)?;
    if req.samples.is_empty() {
        return Err(PsbError::InvalidConfig("no sample counts given".into()));
    }
    let ds = load_dataset(&req.images, &req.labels)?;
    let inputs = ds.inputs();

    // Reference logits, independent of n.
    let reference: Vec<Vec<f64>> = match &req.reference {
        Some(path) => {
            let float_model = load_model(path)?;
            inputs
                .iter()
                .map(|x| float_forward(&float_model, x).map(|(_, d)| d))
                .collect::<Result<_>>()?
        }
        None => {
            let cfg = SamplingConfig::new(1, SamplingMode::MeanOracle, enc.prob_bits, enc.exp_bits)?;
            forward_batch(&model, &inputs, &cfg, req.seed, req.workers)?
                .into_iter()
                .map(|r| r.logits.to_f64())
                .collect()
        }
    };

    let mut csv = String::new();
    let _ = writeln!(csv, "# psb sweep v1");
    let _ = writeln!(
        csv,
        "# model={} images={} labels={} seed={} mode={} prob_bits={} exp_bits={} reference={}",
        req.model.display(),
        req.images.display(),
        req.labels.display(),
        req.seed,
        req.mode,
        enc.prob_bits,
        enc.exp_bits,
        req.reference
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "mean-oracle".into()),
    );
    let _ = writeln!(csv, "n,top1,median_rel_logit_err,ops");
    for &n in &req.samples {
        let cfg = SamplingConfig::new(n, mode, enc.prob_bits, enc.exp_bits)?;
        let reports = forward_batch(&model, &inputs, &cfg, req.seed, req.workers)?;
        let mut hits = 0usize;
        let mut ops = 0u64;
        let mut errs = Vec::with_capacity(reports.len());
        for (i, rep) in reports.iter().enumerate() {
            let logits = rep.logits.to_f64();
            hits += (argmax(&logits) == ds.labels[i] as usize) as usize;
            ops += rep.shift_accumulate_ops;
            errs.push(relative_l2_error(&logits, &reference[i]));
        }
        let _ = writeln!(
            csv,
            "{n},{:.4},{:.6},{ops}",
            hits as f64 / reports.len() as f64,
            median(&mut errs),
        );
    }
    Ok(csv)
}

/// `||a - b||_2 / ||b||_2`.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm.max(1e-30)).sqrt()
}

/// Median with the even-count midpoint averaged; deterministic.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// attention

pub struct AttentionRequest {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub n_low: u32,
    pub n_high: u32,
    pub seed: u64,
    pub dump_masks: Option<PathBuf>,
}

/// Two-pass adaptive run over the dataset. The summary row reports the
/// pass-2 convolution cost against the uniform high-budget cost (the
/// convention the reduction figure is defined in); the probe-pass cost is
/// reported alongside so total accounting stays honest.
pub fn run_attention(req: &AttentionRequest) -> Result<String> {
    let model = load_model(&req.model)?;
    let enc = require_psb(&model)?;
    if req.n_low > req.n_high {
        return Err(PsbError::InvalidConfig(format!(
            "n_low {} exceeds n_high {}",
            req.n_low, req.n_high
        )));
    }
    let ds = load_dataset(&req.images, &req.labels)?;
    if let Some(dir) = &req.dump_masks {
        fs::create_dir_all(dir)?;
    }

    let mut hits = 0usize;
    let mut fraction_sum = 0.0f64;
    let mut pass1_ops = 0u64;
    let mut pass2_ops_total = 0u64;
    let mut pass2_conv = 0u64;
    let mut uniform_high_conv = 0u64;
    for i in 0..ds.len() {
        let input = ds.input(i);
        let rep = two_pass_forward_item(&model, &input, req.n_low, req.n_high, req.seed, i as u64)?;
        hits += (argmax(&rep.report.logits.to_f64()) == ds.labels[i] as usize) as usize;
        fraction_sum += rep.mask.fraction();
        pass1_ops += rep.pass1_ops;
        pass2_ops_total += rep.report.shift_accumulate_ops;
        pass2_conv += rep.pass2_conv_ops;
        uniform_high_conv += rep.uniform_high_conv_ops;
        if let Some(dir) = &req.dump_masks {
            fs::write(
                dir.join(format!("mask_{i:04}.pgm")),
                psb_core::attention::mask_to_pgm(&rep.mask),
            )?;
        }
    }
    let reduction_pct = (1.0 - pass2_conv as f64 / uniform_high_conv as f64) * 100.0;

    let mut csv = String::new();
    let _ = writeln!(csv, "# psb attention v1");
    let _ = writeln!(
        csv,
        "# model={} images={} labels={} seed={} n_low={} n_high={} prob_bits={} exp_bits={}",
        req.model.display(),
        req.images.display(),
        req.labels.display(),
        req.seed,
        req.n_low,
        req.n_high,
        enc.prob_bits,
        enc.exp_bits,
    );
    let _ = writeln!(
        csv,
        "top1,mask_fraction,ops_pass2,ops_uniform_high,reduction_pct,ops_pass1,ops_total"
    );
    let _ = writeln!(
        csv,
        "{:.4},{:.4},{pass2_conv},{uniform_high_conv},{reduction_pct:.4},{pass1_ops},{}",
        hits as f64 / ds.len() as f64,
        fraction_sum / ds.len() as f64,
        pass1_ops + pass2_ops_total,
    );
    Ok(csv)
}

// ---------------------------------------------------------------------------
// stats

pub struct StatsRequest {
    pub model: PathBuf,
}

/// Deterministic per-layer weight statistics, predicted variance bounds and
/// the memory footprint at the probability widths of interest.
pub fn run_stats(req: &StatsRequest) -> Result<String> {
    let model = load_model(&req.model)?;
    let enc = require_psb(&model)?;
    let mut csv = String::new();
    let _ = writeln!(csv, "# psb stats v1");
    let _ = writeln!(
        csv,
        "# model={} prob_bits={} exp_bits={} weights={} nonzero={}",
        req.model.display(),
        enc.prob_bits,
        enc.exp_bits,
        model.weight_count(),
        model.nonzero_weight_count(),
    );
    let _ = writeln!(csv, "section,layer,key,value");

    for (i, layer) in model.layers.iter().enumerate() {
        let Some(Weights::Psb { data, .. }) = layer.kind.weights() else {
            continue;
        };
        let kind = layer.kind.name();
        let zeros = data.iter().filter(|w| w.is_zero).count();
        let _ = writeln!(csv, "layer,{i},kind,{kind}");
        let _ = writeln!(csv, "layer,{i},weights,{}", data.len());
        let _ = writeln!(csv, "layer,{i},zeros,{zeros}");
        // Exponent histogram over live weights.
        let mut by_exp: std::collections::BTreeMap<i32, usize> = Default::default();
        for w in data.iter().filter(|w| !w.is_zero) {
            *by_exp.entry(w.exponent).or_default() += 1;
        }
        for (e, count) in by_exp {
            let _ = writeln!(csv, "exp_hist,{i},{e},{count}");
        }
        // Probability histogram over 16 regular bins.
        let mut by_p = [0usize; 16];
        for w in data.iter().filter(|w| !w.is_zero) {
            let bin = ((w.prob() * 16.0) as usize).min(15);
            by_p[bin] += 1;
        }
        for (bin, count) in by_p.iter().enumerate() {
            let _ = writeln!(csv, "prob_hist,{i},{:.4},{count}", bin as f64 / 16.0);
        }
    }

    for n in [1u32, 4, 16, 64, 256, 1024, 4096] {
        let _ = writeln!(csv, "bound,,{n},{:.6}", relative_std_bound(n));
    }

    // Hypothetical footprint per probability width: sign + exponent field +
    // probability numerator per weight. Widths below the packed layout use
    // the configured exponent bits; the 10-bit row is the actual packed
    // on-disk layout (5-bit exponent field for the zero sentinel).
    let count = model.weight_count() as u64;
    for pb in [1u32, 2, 3, 4, 6, 10] {
        let bits = if pb == 10 { 16 } else { (1 + enc.exp_bits + pb) as u64 };
        let total_bytes = (count * bits).div_ceil(8);
        let _ = writeln!(csv, "footprint,,{pb},{total_bytes}");
    }
    let _ = writeln!(csv, "footprint_bits,,10,16");
    Ok(csv)
}

// ---------------------------------------------------------------------------
// gen-data

pub struct GenDataRequest {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub prefix: String,
}

pub fn run_gen_data(req: &GenDataRequest) -> Result<(PathBuf, PathBuf)> {
    let ds = gen_synthetic(req.classes, req.per_class, req.size, req.seed)?;
    fs::create_dir_all(&req.out_dir)?;
    let images = req.out_dir.join(format!("{}-images.idx", req.prefix));
    let labels = req.out_dir.join(format!("{}-labels.idx", req.prefix));
    save_idx_images(&images, &ds.images)?;
    save_idx_labels(&labels, &ds.labels)?;
    Ok((images, labels))
}

/// Histogram helper for reports and tests: prob numerators of every live
/// weight in the model.
pub fn prob_numerators(model: &Model) -> Vec<u16> {
    let mut out = Vec::new();
    for layer in &model.layers {
        if let Some(Weights::Psb { data, .. }) = layer.kind.weights() {
            out.extend(data.iter().filter(|w| !w.is_zero).map(|w| w.prob_num));
        }
    }
    out
}

/// All weights of a PSB model, flattened in layer order.
pub fn all_psb_weights(model: &Model) -> Vec<PsbWeight> {
    let mut out = Vec::new();
    for layer in &model.layers {
        if let Some(Weights::Psb { data, .. }) = layer.kind.weights() {
            out.extend(data.iter().copied());
        }
    }
    out
}

/// Zero codes in a PSB model (used by prune accounting tests).
pub fn zero_code_count(model: &Model) -> usize {
    model
        .layers
        .iter()
        .filter_map(|l| match l.kind.weights() {
            Some(Weights::Psb { data, .. }) => {
                Some(data.iter().filter(|w| w.is_zero).count())
            }
            _ => None,
        })
        .sum()
}
