//! Network representation and whole-model evaluation: a topologically
//! ordered DAG of layers carrying either float or PSB weights, batch-norm
//! folding, magnitude pruning, float-to-PSB conversion, and forward passes
//! with shift-accumulate cost accounting.
//!
//! Value ids: id 0 is the model input, layer `i` produces value `i + 1`, and
//! the last layer's value is the single model output.

use rayon::prelude::*;

use crate::capacitor::{
    conv2d_forward, conv2d_forward_masked, dense_forward, ConvGeometry, SamplingConfig,
    SamplingMode,
};
use crate::encoding::{decode_mean, encode_weight, EncodingConfig, PsbWeight};
use crate::fixedpoint::{self, FxTensor, FxValue};
use crate::oracle;
use crate::sampling::RngStream;
use crate::{PsbError, Result};

/// Dense real-valued tensor, row-major. Stored and evaluated in f64; the
/// on-disk payload format is 32-bit little-endian floats, so persisting
/// rounds to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.clone()
    }
}

/// Weight storage of a linear layer.
#[derive(Debug, Clone)]
pub enum Weights {
    Float(Tensor),
    Psb { shape: Vec<usize>, data: Vec<PsbWeight> },
}

impl Weights {
    pub fn len(&self) -> usize {
        match self {
            Weights::Float(t) => t.len(),
            Weights::Psb { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Float(t) => t.shape(),
            Weights::Psb { shape, .. } => shape,
        }
    }

    pub fn is_psb(&self) -> bool {
        matches!(self, Weights::Psb { .. })
    }

    /// Number of weights that are not (explicit or float) zero.
    pub fn nonzero_count(&self) -> usize {
        match self {
            Weights::Float(t) => t.data().iter().filter(|&&w| w != 0.0).count(),
            Weights::Psb { data, .. } => data.iter().filter(|w| !w.is_zero).count(),
        }
    }
}

/// Bias storage: float models keep real biases, PSB models carry them
/// quantized to the activation format.
#[derive(Debug, Clone)]
pub enum Bias {
    Float(Vec<f64>),
    Fx(Vec<FxValue>),
}

impl Bias {
    pub fn len(&self) -> usize {
        match self {
            Bias::Float(v) => v.len(),
            Bias::Fx(v) => v.len(),
        }
    }
}

/// One node of the network DAG.
#[derive(Debug, Clone)]
pub enum LayerKind {
    /// Fully connected; weights `[d_out, d_in]`.
    Dense { weights: Weights, bias: Bias },
    /// 2-d convolution; weights `[kh, kw, c_in, c_out]`.
    Conv2D { weights: Weights, bias: Bias, geom: ConvGeometry },
    /// Inference-time affine map `y = a*x + b` per channel; float models only.
    BatchNorm { scale: Vec<f64>, offset: Vec<f64> },
    ReLU,
    /// Elementwise sum of two values; saturating on the fixed-point path.
    Add,
    MaxPool { size: usize, stride: usize },
    /// On the fixed-point path the window sum is divided by the largest
    /// power of two not exceeding the pool area; conversion folds the
    /// residual ratio into the next linear layer.
    AvgPool { size: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::ReLU => "relu",
            LayerKind::Add => "add",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn weights(&self) -> Option<&Weights> {
        match self {
            LayerKind::Dense { weights, .. } | LayerKind::Conv2D { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    /// Value ids consumed; each must be less than this layer's own value id.
    pub inputs: Vec<usize>,
}

/// A network: layers in topological order over a single input.
#[derive(Debug, Clone)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Present exactly when the model carries PSB weights.
    pub encoding: Option<EncodingConfig>,
}

impl Model {
    pub fn is_psb(&self) -> bool {
        self.encoding.is_some()
    }

    pub fn value_count(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn output_value(&self) -> usize {
        self.layers.len()
    }

    /// Total number of conv/dense weights.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.kind.weights()).map(|w| w.len()).sum()
    }

    pub fn nonzero_weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.kind.weights()).map(|w| w.nonzero_count()).sum()
    }

    /// Index of the last Conv2D layer, if any.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| matches!(l.kind, LayerKind::Conv2D { .. }))
            .map(|(i, _)| i)
    }

    /// Structural and shape validation; returns the per-value shapes.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let mut consumed = vec![false; self.value_count()];
        for (i, layer) in self.layers.iter().enumerate() {
            let arity = match layer.kind {
                LayerKind::Add => 2,
                _ => 1,
            };
            if layer.inputs.len() != arity {
                return Err(PsbError::InvalidInput(format!(
                    "layer {i} ({}) expects {arity} inputs, has {}",
                    layer.kind.name(),
                    layer.inputs.len()
                )));
            }
            for &v in &layer.inputs {
                if v > i {
                    return Err(PsbError::InvalidInput(format!(
                        "layer {i} consumes value {v} that is not yet produced"
                    )));
                }
                consumed[v] = true;
            }
            let psb_weights = layer.kind.weights().map(|w| w.is_psb());
            match (self.is_psb(), psb_weights) {
                (true, Some(false)) => {
                    return Err(PsbError::InvalidInput(format!(
                        "layer {i}: float weights inside a PSB model"
                    )))
                }
                (false, Some(true)) => {
                    return Err(PsbError::InvalidInput(format!(
                        "layer {i}: PSB weights inside a float model"
                    )))
                }
                _ => {}
            }
            if self.is_psb() && matches!(layer.kind, LayerKind::BatchNorm { .. }) {
                return Err(PsbError::InvalidInput(format!(
                    "layer {i}: batch norm present in a PSB model (must be folded)"
                )));
            }
        }
        if self.layers.is_empty() {
            return Err(PsbError::InvalidInput("model has no layers".into()));
        }
        for (v, used) in consumed.iter().enumerate().take(self.output_value()) {
            if !used {
                return Err(PsbError::InvalidInput(format!(
                    "value {v} is never consumed; the graph must have exactly one output"
                )));
            }
        }
        self.infer_shapes()
    }

    /// Shape of every value id, input first.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.value_count());
        shapes.push(self.input_shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let get = |v: usize| -> &Vec<usize> { &shapes[v] };
            let out = match &layer.kind {
                LayerKind::Dense { weights, bias } => {
                    let input = get(layer.inputs[0]);
                    let ws = weights.shape();
                    if ws.len() != 2 || input.len() != 1 || ws[1] != input[0] {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: dense weights {ws:?} on input {input:?}"
                        )));
                    }
                    if bias.len() != ws[0] {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: dense bias {} vs d_out {}",
                            bias.len(),
                            ws[0]
                        )));
                    }
                    vec![ws[0]]
                }
                LayerKind::Conv2D { weights, bias, geom } => {
                    let input = get(layer.inputs[0]);
                    let ws = weights.shape();
                    if ws != [geom.kh, geom.kw, geom.c_in, geom.c_out] {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: conv weights {ws:?} vs geometry {geom:?}"
                        )));
                    }
                    if input.len() != 3 || input[2] != geom.c_in || bias.len() != geom.c_out {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: conv input {input:?} vs geometry {geom:?}"
                        )));
                    }
                    let (ho, wo, _, _) = geom.output_dims(input[0], input[1])?;
                    vec![ho, wo, geom.c_out]
                }
                LayerKind::BatchNorm { scale, offset } => {
                    let input = get(layer.inputs[0]);
                    let channels = *input.last().unwrap_or(&0);
                    if scale.len() != channels || offset.len() != channels {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: batch norm over {} channels on input {input:?}",
                            scale.len()
                        )));
                    }
                    input.clone()
                }
                LayerKind::ReLU => get(layer.inputs[0]).clone(),
                LayerKind::Add => {
                    let a = get(layer.inputs[0]);
                    let b = get(layer.inputs[1]);
                    if a != b {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: add of {a:?} and {b:?}"
                        )));
                    }
                    a.clone()
                }
                LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                    let input = get(layer.inputs[0]);
                    if input.len() != 3 || input[0] < *size || input[1] < *size || *stride == 0 {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: pool {size}x{size}/{stride} on input {input:?}"
                        )));
                    }
                    vec![
                        (input[0] - size) / stride + 1,
                        (input[1] - size) / stride + 1,
                        input[2],
                    ]
                }
                LayerKind::GlobalAvgPool => {
                    let input = get(layer.inputs[0]);
                    if input.len() != 3 {
                        return Err(PsbError::ShapeMismatch(format!(
                            "layer {i}: global pool on input {input:?}"
                        )));
                    }
                    vec![input[2]]
                }
                LayerKind::Flatten => {
                    vec![get(layer.inputs[0]).iter().product()]
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }
}

/// Folds every batch-norm affine map into its producing dense/conv layer:
/// `w' = a * w` per output channel, `b' = a * b + b_bn`; the batch-norm node
/// disappears. Folding must happen before encoding.
///
/// A batch norm whose input is not the sole-consumer output of a dense or
/// convolution layer (e.g. one placed after an addition) is rejected rather
/// than silently degraded.
pub fn fold_batchnorm(model: &Model) -> Result<Model> {
    if model.is_psb() {
        return Err(PsbError::InvalidInput("cannot fold batch norm in a PSB model".into()));
    }
    model.validate()?;

    // consumers[v] = indices of layers reading value v
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); model.value_count()];
    for (i, layer) in model.layers.iter().enumerate() {
        for &v in &layer.inputs {
            consumers[v].push(i);
        }
    }

    let mut folded: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; model.layers.len()];
    let mut drop: Vec<bool> = vec![false; model.layers.len()];
    for (j, layer) in model.layers.iter().enumerate() {
        let LayerKind::BatchNorm { scale, offset } = &layer.kind else {
            continue;
        };
        let v = layer.inputs[0];
        if v == 0 {
            return Err(PsbError::UnfoldableGraph(format!(
                "batch norm at layer {j} reads the model input directly"
            )));
        }
        let producer = v - 1;
        let is_linear = matches!(
            model.layers[producer].kind,
            LayerKind::Dense { .. } | LayerKind::Conv2D { .. }
        );
        if !is_linear {
            return Err(PsbError::UnfoldableGraph(format!(
                "batch norm at layer {j} follows {} (only dense/conv outputs fold)",
                model.layers[producer].kind.name()
            )));
        }
        if consumers[v].as_slice() != [j] {
            return Err(PsbError::UnfoldableGraph(format!(
                "batch norm at layer {j} shares its input with other consumers"
            )));
        }
        folded[producer] = Some((scale.clone(), offset.clone()));
        drop[j] = true;
    }

    // Rebuild without the dropped nodes, remapping value ids.
    let mut value_map: Vec<usize> = vec![0; model.value_count()];
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        if drop[i] {
            value_map[i + 1] = value_map[layer.inputs[0]];
            continue;
        }
        let mut kind = layer.kind.clone();
        if let Some((a, b)) = &folded[i] {
            apply_affine_fold(&mut kind, a, b)?;
        }
        let inputs = layer.inputs.iter().map(|&v| value_map[v]).collect();
        layers.push(Layer { kind, inputs });
        value_map[i + 1] = layers.len();
    }

    let out = Model { input_shape: model.input_shape.clone(), layers, encoding: None };
    out.validate()?;
    Ok(out)
}

fn apply_affine_fold(kind: &mut LayerKind, a: &[f64], b: &[f64]) -> Result<()> {
    let (weights, bias, c_out) = match kind {
        LayerKind::Dense { weights, bias } => {
            let d_out = weights.shape()[0];
            (weights, bias, d_out)
        }
        LayerKind::Conv2D { weights, bias, geom } => {
            let c = geom.c_out;
            (weights, bias, c)
        }
        _ => unreachable!("fold target is linear"),
    };
    if a.len() != c_out {
        return Err(PsbError::ShapeMismatch(format!(
            "batch norm over {} channels folded into {c_out}-channel layer",
            a.len()
        )));
    }
    let Weights::Float(t) = weights else {
        return Err(PsbError::InvalidInput("folding requires float weights".into()));
    };
    // Output channel is the row for dense, the innermost axis for conv.
    let per_row = match t.shape().len() {
        2 => {
            let d_in = t.shape()[1];
            for (o, av) in a.iter().enumerate() {
                for w in &mut t.data_mut()[o * d_in..(o + 1) * d_in] {
                    *w *= av;
                }
            }
            true
        }
        4 => {
            let c = a.len();
            for (idx, w) in t.data_mut().iter_mut().enumerate() {
                *w *= a[idx % c];
            }
            false
        }
        _ => return Err(PsbError::ShapeMismatch("unexpected weight rank for folding".into())),
    };
    let _ = per_row;
    let Bias::Float(bv) = bias else {
        return Err(PsbError::InvalidInput("folding requires float bias".into()));
    };
    for (o, bias_v) in bv.iter_mut().enumerate() {
        *bias_v = a[o] * *bias_v + b[o];
    }
    Ok(())
}

/// Zeros the globally smallest-magnitude fraction of all conv/dense weights.
/// Exactly `floor(fraction * total)` weights are zeroed; ties break by
/// (magnitude, layer, index) so the result is deterministic.
pub fn prune_magnitude(model: &Model, fraction: f64) -> Result<Model> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PsbError::InvalidInput(format!(
            "prune fraction must be in [0,1), got {fraction}"
        )));
    }
    let mut out = model.clone();
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (i, layer) in out.layers.iter().enumerate() {
        if let Some(w) = layer.kind.weights() {
            match w {
                Weights::Float(t) => {
                    for (k, &v) in t.data().iter().enumerate() {
                        entries.push((v.abs(), i, k));
                    }
                }
                Weights::Psb { data, .. } => {
                    for (k, pw) in data.iter().enumerate() {
                        entries.push((decode_mean(pw).abs(), i, k));
                    }
                }
            }
        }
    }
    let cut = (fraction * entries.len() as f64).floor() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, layer_idx, k) in entries.iter().take(cut) {
        match &mut out.layers[layer_idx].kind {
            LayerKind::Dense { weights, .. } | LayerKind::Conv2D { weights, .. } => match weights {
                Weights::Float(t) => t.data_mut()[k] = 0.0,
                Weights::Psb { data, .. } => {
                    let pb = data[k].prob_bits;
                    data[k] = PsbWeight::zero(pb);
                }
            },
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Converts a (batch-norm-free) float model into the PSB number system:
/// weights are encoded per [`encode_weight`], biases quantized to the
/// activation format. Non-power-of-two average-pool areas leave a residual
/// scale (`area / 2^floor(log2 area)`) that is divided out of the next
/// linear layer's weights here, before encoding.
pub fn convert_to_psb(model: &Model, cfg: &EncodingConfig) -> Result<Model> {
    if model.is_psb() {
        return Err(PsbError::InvalidInput("model already carries PSB weights".into()));
    }
    if model.layers.iter().any(|l| matches!(l.kind, LayerKind::BatchNorm { .. })) {
        return Err(PsbError::UnfoldableGraph(
            "model still contains batch norm; fold before encoding".into(),
        ));
    }
    let shapes = model.validate()?;

    // pending[v]: multiplier by which the fixed-point evaluation of value v
    // exceeds the real-valued model (deferred average-pool divides).
    let mut pending: Vec<f64> = vec![1.0; model.value_count()];
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let v_out = i + 1;
        let kind = match &layer.kind {
            LayerKind::Dense { weights, bias } => {
                let scale = pending[layer.inputs[0]];
                pending[v_out] = 1.0;
                LayerKind::Dense {
                    weights: encode_weights(weights, scale, cfg)?,
                    bias: quantize_bias(bias),
                }
            }
            LayerKind::Conv2D { weights, bias, geom } => {
                let scale = pending[layer.inputs[0]];
                pending[v_out] = 1.0;
                LayerKind::Conv2D {
                    weights: encode_weights(weights, scale, cfg)?,
                    bias: quantize_bias(bias),
                    geom: *geom,
                }
            }
            LayerKind::AvgPool { size, stride } => {
                let area = size * size;
                pending[v_out] =
                    pending[layer.inputs[0]] * area as f64 / (1usize << area.ilog2()) as f64;
                LayerKind::AvgPool { size: *size, stride: *stride }
            }
            LayerKind::GlobalAvgPool => {
                let in_shape = &shapes[layer.inputs[0]];
                let area = in_shape[0] * in_shape[1];
                pending[v_out] =
                    pending[layer.inputs[0]] * area as f64 / (1usize << area.ilog2()) as f64;
                LayerKind::GlobalAvgPool
            }
            LayerKind::ReLU | LayerKind::Flatten | LayerKind::MaxPool { .. } => {
                // Positive scales commute with these.
                pending[v_out] = pending[layer.inputs[0]];
                layer.kind.clone()
            }
            LayerKind::Add => {
                let a = pending[layer.inputs[0]];
                let b = pending[layer.inputs[1]];
                if a != b {
                    return Err(PsbError::Unsupported(format!(
                        "layer {i}: add of branches with unequal pending pool scales {a} vs {b}"
                    )));
                }
                pending[v_out] = a;
                LayerKind::Add
            }
            LayerKind::BatchNorm { .. } => unreachable!("checked above"),
        };
        layers.push(Layer { kind, inputs: layer.inputs.clone() });
    }
    if pending[model.output_value()] != 1.0 {
        return Err(PsbError::Unsupported(
            "trailing average-pool scale cannot be folded (no following linear layer)".into(),
        ));
    }
    let out = Model { input_shape: model.input_shape.clone(), layers, encoding: Some(*cfg) };
    out.validate()?;
    Ok(out)
}

fn encode_weights(weights: &Weights, input_scale: f64, cfg: &EncodingConfig) -> Result<Weights> {
    let Weights::Float(t) = weights else {
        return Err(PsbError::InvalidInput("weights already encoded".into()));
    };
    let data = t
        .data()
        .iter()
        .map(|&w| encode_weight(w / input_scale, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Weights::Psb { shape: t.shape().to_vec(), data })
}

fn quantize_bias(bias: &Bias) -> Bias {
    match bias {
        Bias::Float(v) => Bias::Fx(v.iter().map(|&b| fixedpoint::quantize(b)).collect()),
        Bias::Fx(v) => Bias::Fx(v.clone()),
    }
}

/// Evaluation result: logits plus the shift-accumulate cost accounting
/// (one op per non-zero weight per sample per output position).
#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub logits: Logits,
    pub shift_accumulate_ops: u64,
    pub per_layer_ops: Vec<u64>,
}

#[derive(Debug, Clone)]
pub enum Logits {
    Fx(FxTensor),
    Float { shape: Vec<usize>, data: Vec<f64> },
}

impl Logits {
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Logits::Fx(t) => t.to_f64_vec(),
            Logits::Float { data, .. } => data.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Logits::Fx(t) => t.shape(),
            Logits::Float { shape, .. } => shape,
        }
    }
}

/// Index of the largest logit; the lowest class index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Closed-form shift-accumulate op counts at a uniform budget `n`:
/// `nonzero_weights * n * output_positions` per dense/conv layer.
pub fn predicted_ops(model: &Model, n: u32) -> Result<(u64, Vec<u64>)> {
    let shapes = model.infer_shapes()?;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let mut total = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        let ops = match &layer.kind {
            LayerKind::Dense { weights, .. } => weights.nonzero_count() as u64 * n as u64,
            LayerKind::Conv2D { weights, .. } => {
                let out = &shapes[i + 1];
                weights.nonzero_count() as u64 * n as u64 * (out[0] * out[1]) as u64
            }
            _ => 0,
        };
        total += ops;
        per_layer.push(ops);
    }
    Ok((total, per_layer))
}

/// Per-item forward pass. PSB models evaluate through the capacitor kernels
/// in fixed point; float models through the real-arithmetic oracle path.
pub fn forward(
    model: &Model,
    input: &Tensor,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<ForwardReport> {
    forward_item(model, input, cfg, seed, 0, 0)
}

/// Forward pass for one batch item; `batch_index` selects the random streams
/// so batched evaluation is independent of worker scheduling.
pub fn forward_item(
    model: &Model,
    input: &Tensor,
    cfg: &SamplingConfig,
    seed: u64,
    batch_index: u64,
    stream_salt: u64,
) -> Result<ForwardReport> {
    if model.is_psb() {
        let (report, _) =
            forward_psb(model, input, &BudgetPlan::Uniform(*cfg), seed, batch_index, stream_salt, None)?;
        Ok(report)
    } else {
        let (shape, data) = oracle::float_forward(model, input)?;
        let ops = vec![0u64; model.layers.len()];
        Ok(ForwardReport {
            logits: Logits::Float { shape, data },
            shift_accumulate_ops: 0,
            per_layer_ops: ops,
        })
    }
}

/// Batched forward under a bounded worker pool. Results are bit-identical
/// for any worker count: each (batch item, layer) pair owns its stream.
pub fn forward_batch(
    model: &Model,
    inputs: &[Tensor],
    cfg: &SamplingConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<ForwardReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PsbError::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| forward_item(model, x, cfg, seed, i as u64, 0))
            .collect()
    })
}

/// Spatially adaptive forward: conv output positions where the resampled
/// mask is true run at `cfg_high`, the rest at `cfg_low`; dense layers run
/// at the high budget when the mask has any true position.
#[allow(clippy::too_many_arguments)]
pub fn forward_masked(
    model: &Model,
    input: &Tensor,
    mask: &[bool],
    mask_dims: (usize, usize),
    cfg_low: &SamplingConfig,
    cfg_high: &SamplingConfig,
    seed: u64,
    batch_index: u64,
) -> Result<ForwardReport> {
    if cfg_low.mode != SamplingMode::PerCallFilter || cfg_high.mode != SamplingMode::PerCallFilter {
        return Err(PsbError::InvalidConfig(
            "masked forward requires the per-call filter sampling mode".into(),
        ));
    }
    if cfg_low.n() > cfg_high.n() {
        return Err(PsbError::InvalidConfig(format!(
            "n_low {} exceeds n_high {}",
            cfg_low.n(),
            cfg_high.n()
        )));
    }
    if mask.len() != mask_dims.0 * mask_dims.1 {
        return Err(PsbError::ShapeMismatch("mask length vs mask dims".into()));
    }
    let plan = BudgetPlan::Masked {
        low: *cfg_low,
        high: *cfg_high,
        mask: mask.to_vec(),
        mask_dims,
    };
    let (report, _) = forward_psb(model, input, &plan, seed, batch_index, 0, None)?;
    Ok(report)
}

/// Uniform forward that additionally returns one intermediate value (used by
/// the attention probe pass to read the last convolution's activations).
pub fn forward_capture(
    model: &Model,
    input: &Tensor,
    cfg: &SamplingConfig,
    seed: u64,
    batch_index: u64,
    stream_salt: u64,
    capture_value: usize,
) -> Result<(ForwardReport, FxTensor)> {
    let (report, captured) = forward_psb(
        model,
        input,
        &BudgetPlan::Uniform(*cfg),
        seed,
        batch_index,
        stream_salt,
        Some(capture_value),
    )?;
    Ok((report, captured.expect("capture requested")))
}

enum BudgetPlan {
    Uniform(SamplingConfig),
    Masked { low: SamplingConfig, high: SamplingConfig, mask: Vec<bool>, mask_dims: (usize, usize) },
}

impl BudgetPlan {
    fn base(&self) -> &SamplingConfig {
        match self {
            BudgetPlan::Uniform(c) => c,
            BudgetPlan::Masked { high, .. } => high,
        }
    }
}

/// Nearest-neighbor resampling of a boolean map; exact fraction-preserving
/// on integer upscales.
fn resample_mask(mask: &[bool], from: (usize, usize), to: (usize, usize)) -> Vec<bool> {
    let (fh, fw) = from;
    let (th, tw) = to;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = (y * fh / th).min(fh - 1);
        for x in 0..tw {
            let sx = (x * fw / tw).min(fw - 1);
            out.push(mask[sy * fw + sx]);
        }
    }
    out
}

fn forward_psb(
    model: &Model,
    input: &Tensor,
    plan: &BudgetPlan,
    seed: u64,
    batch_index: u64,
    stream_salt: u64,
    capture_value: Option<usize>,
) -> Result<(ForwardReport, Option<FxTensor>)> {
    let enc = model
        .encoding
        .ok_or_else(|| PsbError::InvalidInput("fixed-point forward requires a PSB model".into()))?;
    let base = plan.base();
    if base.prob_bits != enc.prob_bits {
        return Err(PsbError::InvalidConfig(format!(
            "sampling prob_bits {} does not match the model encoding ({})",
            base.prob_bits, enc.prob_bits
        )));
    }
    if input.shape() != model.input_shape {
        return Err(PsbError::ShapeMismatch(format!(
            "input shape {:?} vs model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }

    let mut values: Vec<Option<FxTensor>> = vec![None; model.value_count()];
    values[0] = Some(FxTensor::quantize_from(
        model.input_shape.clone(),
        &input.to_f64_vec(),
    ));
    let mut captured = None;
    let mut per_layer_ops = vec![0u64; model.layers.len()];

    let mask_any_true = match plan {
        BudgetPlan::Masked { mask, .. } => mask.iter().any(|&m| m),
        BudgetPlan::Uniform(_) => false,
    };

    for (i, layer) in model.layers.iter().enumerate() {
        let arg = |k: usize| -> &FxTensor {
            values[layer.inputs[k]].as_ref().expect("topological order")
        };
        let mut stream = RngStream::for_layer(seed, batch_index, i as u64, stream_salt);
        let out = match &layer.kind {
            LayerKind::Dense { weights, bias } => {
                let Weights::Psb { shape, data } = weights else { unreachable!("validated") };
                let Bias::Fx(bias) = bias else {
                    return Err(PsbError::InvalidInput("PSB dense with float bias".into()));
                };
                let cfg = match plan {
                    BudgetPlan::Uniform(c) => c,
                    BudgetPlan::Masked { low, high, .. } => {
                        if mask_any_true {
                            high
                        } else {
                            low
                        }
                    }
                };
                per_layer_ops[i] = weights.nonzero_count() as u64 * cfg.n() as u64;
                dense_forward(arg(0), data, shape[0], shape[1], bias, cfg, &mut stream)?
            }
            LayerKind::Conv2D { weights, bias, geom } => {
                let Weights::Psb { data, .. } = weights else { unreachable!("validated") };
                let Bias::Fx(bias) = bias else {
                    return Err(PsbError::InvalidInput("PSB conv with float bias".into()));
                };
                let x = arg(0);
                let (ho, wo, _, _) = geom.output_dims(x.shape()[0], x.shape()[1])?;
                let nz = weights.nonzero_count() as u64;
                match plan {
                    BudgetPlan::Uniform(cfg) => {
                        per_layer_ops[i] = nz * cfg.n() as u64 * (ho * wo) as u64;
                        conv2d_forward(x, data, bias, geom, cfg, &mut stream)?
                    }
                    BudgetPlan::Masked { low, high, mask, mask_dims } => {
                        let local = resample_mask(mask, *mask_dims, (ho, wo));
                        let trues = local.iter().filter(|&&m| m).count() as u64;
                        let falses = (ho * wo) as u64 - trues;
                        per_layer_ops[i] =
                            nz * (trues * high.n() as u64 + falses * low.n() as u64);
                        conv2d_forward_masked(x, data, bias, geom, &local, low, high, &mut stream)?
                    }
                }
            }
            LayerKind::ReLU => {
                let x = arg(0);
                FxTensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| fixedpoint::relu(v)).collect(),
                )
            }
            LayerKind::Add => {
                let a = arg(0);
                let b = arg(1);
                if a.shape() != b.shape() {
                    return Err(PsbError::ShapeMismatch(format!(
                        "layer {i}: add of {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                FxTensor::new(
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| fixedpoint::sat_add(x, y))
                        .collect(),
                )
            }
            LayerKind::MaxPool { size, stride } => pool_fx(arg(0), *size, *stride, PoolOp::Max)?,
            LayerKind::AvgPool { size, stride } => pool_fx(arg(0), *size, *stride, PoolOp::Avg)?,
            LayerKind::GlobalAvgPool => global_avg_fx(arg(0)),
            LayerKind::Flatten => {
                let x = arg(0).clone();
                let len = x.len();
                x.reshaped(vec![len])
            }
            LayerKind::BatchNorm { .. } => unreachable!("validated"),
        };
        if capture_value == Some(i + 1) {
            captured = Some(out.clone());
        }
        values[i + 1] = Some(out);
        // Inputs consumed only once can be dropped here; keeping them is
        // harmless at desk scale.
    }

    let logits = values[model.output_value()].take().expect("output produced");
    let total = per_layer_ops.iter().sum();
    Ok((
        ForwardReport { logits: Logits::Fx(logits), shift_accumulate_ops: total, per_layer_ops },
        captured,
    ))
}

enum PoolOp {
    Max,
    Avg,
}

fn pool_fx(x: &FxTensor, size: usize, stride: usize, op: PoolOp) -> Result<FxTensor> {
    let sh = x.shape();
    if sh.len() != 3 || sh[0] < size || sh[1] < size || stride == 0 {
        return Err(PsbError::ShapeMismatch(format!("pool {size}/{stride} on {sh:?}")));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let area_shift = (size * size).ilog2();
    let mut out = Vec::with_capacity(ho * wo * c);
    for yo in 0..ho {
        for xo in 0..wo {
            for ch in 0..c {
                let mut max = i16::MIN;
                let mut sum: i64 = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let v = x.data()[((yo * stride + ky) * w + (xo * stride + kx)) * c + ch]
                            .raw();
                        max = max.max(v);
                        sum += v as i64;
                    }
                }
                out.push(match op {
                    PoolOp::Max => FxValue::from_raw(max),
                    PoolOp::Avg => fixedpoint::saturate_wide(sum >> area_shift),
                });
            }
        }
    }
    Ok(FxTensor::new(vec![ho, wo, c], out))
}

fn global_avg_fx(x: &FxTensor) -> FxTensor {
    let sh = x.shape();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let shift = (h * w).ilog2();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum: i64 = 0;
        for pos in 0..h * w {
            sum += x.data()[pos * c + ch].raw() as i64;
        }
        out.push(fixedpoint::saturate_wide(sum >> shift));
    }
    FxTensor::new(vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacitor::Padding;

    pub(crate) fn dense_float(d_out: usize, d_in: usize, w: Vec<f64>, b: Vec<f64>) -> LayerKind {
        LayerKind::Dense {
            weights: Weights::Float(Tensor::new(vec![d_out, d_in], w)),
            bias: Bias::Float(b),
        }
    }

    fn tiny_float_model() -> Model {
        // input [4] -> dense(3) -> BN -> relu -> dense(2)
        Model {
            input_shape: vec![4],
            layers: vec![
                Layer {
                    kind: dense_float(
                        3,
                        4,
                        vec![0.5, -1.0, 0.25, 2.0, 1.5, 0.5, -0.5, 1.0, -2.0, 0.75, 1.25, -0.25],
                        vec![0.1, -0.2, 0.3],
                    ),
                    inputs: vec![0],
                },
                Layer {
                    kind: LayerKind::BatchNorm {
                        scale: vec![2.0, 1.0, 0.5],
                        offset: vec![1.0, 0.0, -1.0],
                    },
                    inputs: vec![1],
                },
                Layer { kind: LayerKind::ReLU, inputs: vec![2] },
                Layer {
                    kind: dense_float(2, 3, vec![1.0, 0.5, -0.5, -1.0, 0.25, 0.75], vec![0.0, 0.5]),
                    inputs: vec![3],
                },
            ],
            encoding: None,
        }
    }

    #[test]
    fn validate_and_shapes() {
        let m = tiny_float_model();
        let shapes = m.validate().unwrap();
        assert_eq!(shapes, vec![vec![4], vec![3], vec![3], vec![3], vec![2]]);
        assert_eq!(m.weight_count(), 18);
    }

    #[test]
    fn fold_identity_affine_is_noop() {
        let mut m = tiny_float_model();
        if let LayerKind::BatchNorm { scale, offset } = &mut m.layers[1].kind {
            scale.fill(1.0);
            offset.fill(0.0);
        }
        let folded = fold_batchnorm(&m).unwrap();
        assert_eq!(folded.layers.len(), 3);
        let (LayerKind::Dense { weights: wa, bias: ba }, LayerKind::Dense { weights: wb, bias: bb }) =
            (&m.layers[0].kind, &folded.layers[0].kind)
        else {
            panic!()
        };
        let (Weights::Float(ta), Weights::Float(tb)) = (wa, wb) else { panic!() };
        assert_eq!(ta.data(), tb.data());
        let (Bias::Float(fa), Bias::Float(fb)) = (ba, bb) else { panic!() };
        assert_eq!(fa, fb);
    }

    #[test]
    fn fold_direct_formula() {
        // a=2, b=1 over a 1-unit dense layer w=1.5, bias=0.5 -> w'=3, b'=2.
        let m = Model {
            input_shape: vec![1],
            layers: vec![
                Layer { kind: dense_float(1, 1, vec![1.5], vec![0.5]), inputs: vec![0] },
                Layer {
                    kind: LayerKind::BatchNorm { scale: vec![2.0], offset: vec![1.0] },
                    inputs: vec![1],
                },
            ],
            encoding: None,
        };
        let folded = fold_batchnorm(&m).unwrap();
        assert_eq!(folded.layers.len(), 1);
        let LayerKind::Dense { weights: Weights::Float(t), bias: Bias::Float(b) } =
            &folded.layers[0].kind
        else {
            panic!()
        };
        assert_eq!(t.data(), &[3.0]);
        assert_eq!(b, &[2.0]);
    }

    #[test]
    fn fold_rejects_bn_after_add() {
        let m = Model {
            input_shape: vec![2],
            layers: vec![
                Layer { kind: dense_float(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]), inputs: vec![0] },
                Layer { kind: dense_float(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]), inputs: vec![0] },
                Layer { kind: LayerKind::Add, inputs: vec![1, 2] },
                Layer {
                    kind: LayerKind::BatchNorm { scale: vec![1.0, 1.0], offset: vec![0.0, 0.0] },
                    inputs: vec![3],
                },
            ],
            encoding: None,
        };
        assert!(matches!(fold_batchnorm(&m), Err(PsbError::UnfoldableGraph(_))));
    }

    #[test]
    fn prune_examples() {
        // 10 weights with distinct magnitudes 1..=5 in a +- pattern.
        let w: Vec<f64> = vec![1.0, -2.0, 3.0, -4.0, 5.0, -1.5, 2.5, -3.5, 4.5, -5.5];
        let m = Model {
            input_shape: vec![5],
            layers: vec![Layer { kind: dense_float(2, 5, w.clone(), vec![0.0, 0.0]), inputs: vec![0] }],
            encoding: None,
        };
        let same = prune_magnitude(&m, 0.0).unwrap();
        let LayerKind::Dense { weights: Weights::Float(t), .. } = &same.layers[0].kind else {
            panic!()
        };
        assert_eq!(t.data(), w.as_slice());

        let half = prune_magnitude(&m, 0.5).unwrap();
        let LayerKind::Dense { weights: Weights::Float(t), .. } = &half.layers[0].kind else {
            panic!()
        };
        // Smallest five magnitudes (1, 1.5, 2, 2.5, 3) zeroed.
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, -4.0, 5.0, 0.0, 0.0, -3.5, 4.5, -5.5]);
        assert!(prune_magnitude(&m, 1.0).is_err());
    }

    #[test]
    fn convert_requires_fold() {
        let m = tiny_float_model();
        assert!(matches!(
            convert_to_psb(&m, &EncodingConfig::default()),
            Err(PsbError::UnfoldableGraph(_))
        ));
        let folded = fold_batchnorm(&m).unwrap();
        let psb = convert_to_psb(&folded, &EncodingConfig::default()).unwrap();
        assert!(psb.is_psb());
        psb.validate().unwrap();
    }

    #[test]
    fn convert_stores_w3_code() {
        let m = Model {
            input_shape: vec![1],
            layers: vec![Layer { kind: dense_float(1, 1, vec![3.0], vec![0.0]), inputs: vec![0] }],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::new(4, 4).unwrap()).unwrap();
        let LayerKind::Dense { weights: Weights::Psb { data, .. }, .. } = &psb.layers[0].kind
        else {
            panic!()
        };
        assert_eq!((data[0].sign, data[0].exponent, data[0].prob_num), (1, 1, 8));
    }

    #[test]
    fn decode_of_converted_weights_within_bias_bound() {
        let mut rng = RngStream::new(0x77, 0);
        let w: Vec<f64> = (0..64).map(|_| (rng.next_f64() - 0.5) * 8.0).collect();
        let m = Model {
            input_shape: vec![8],
            layers: vec![Layer { kind: dense_float(8, 8, w.clone(), vec![0.0; 8]), inputs: vec![0] }],
            encoding: None,
        };
        let cfg = EncodingConfig::default();
        let psb = convert_to_psb(&m, &cfg).unwrap();
        let LayerKind::Dense { weights: Weights::Psb { data, .. }, .. } = &psb.layers[0].kind
        else {
            panic!()
        };
        for (orig, enc) in w.iter().zip(data) {
            let err = (decode_mean(enc) - *orig).abs();
            assert!(err <= 2f64.powi(enc.exponent - cfg.prob_bits as i32) + 1e-12);
        }
    }

    #[test]
    fn psb_forward_power_of_two_weights_deterministic_across_seeds() {
        // All weights are powers of two (p = 0): logits identical across seeds.
        let m = Model {
            input_shape: vec![3],
            layers: vec![
                Layer {
                    kind: dense_float(2, 3, vec![1.0, -0.5, 2.0, 0.25, 4.0, -1.0], vec![0.1, -0.1]),
                    inputs: vec![0],
                },
                Layer { kind: LayerKind::ReLU, inputs: vec![1] },
            ],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::default()).unwrap();
        let input = Tensor::new(vec![3], vec![0.5, 1.0, -2.0]);
        let cfg = SamplingConfig::new(4, SamplingMode::PerCallFilter, 10, 4).unwrap();
        let a = forward(&psb, &input, &cfg, 1).unwrap();
        let b = forward(&psb, &input, &cfg, 999).unwrap();
        assert_eq!(a.logits.to_f64(), b.logits.to_f64());
        // And the float path agrees up to fixed-point tolerance.
        let (_, fl) = oracle::float_forward(&m, &input).unwrap();
        for (x, y) in a.logits.to_f64().iter().zip(&fl) {
            assert!((x - y).abs() < 2f64.powi(-9), "{x} vs {y}");
        }
    }

    #[test]
    fn op_count_matches_closed_form() {
        let m = Model {
            input_shape: vec![4, 4, 1],
            layers: vec![
                Layer {
                    kind: LayerKind::Conv2D {
                        weights: Weights::Float(Tensor::new(
                            vec![3, 3, 1, 2],
                            (0..18).map(|i| (i as f64 - 9.0) / 4.0).collect(),
                        )),
                        bias: Bias::Float(vec![0.0, 0.0]),
                        geom: ConvGeometry {
                            kh: 3,
                            kw: 3,
                            c_in: 1,
                            c_out: 2,
                            stride: 1,
                            padding: Padding::Same,
                        },
                    },
                    inputs: vec![0],
                },
                Layer { kind: LayerKind::ReLU, inputs: vec![1] },
                Layer { kind: LayerKind::GlobalAvgPool, inputs: vec![2] },
                Layer { kind: dense_float(3, 2, vec![0.5; 6], vec![0.0; 3]), inputs: vec![3] },
            ],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::default()).unwrap();
        let input = Tensor::new(vec![4, 4, 1], (0..16).map(|i| i as f64 / 16.0).collect());
        let cfg = SamplingConfig::new(8, SamplingMode::PerCallFilter, 10, 4).unwrap();
        let rep = forward(&psb, &input, &cfg, 3).unwrap();
        // conv: 17 nonzero (one weight is exactly 0) * 8 * 16 positions
        let nz_conv = 17u64;
        assert_eq!(rep.per_layer_ops[0], nz_conv * 8 * 16);
        assert_eq!(rep.per_layer_ops[3], 6 * 8);
        assert_eq!(rep.shift_accumulate_ops, nz_conv * 8 * 16 + 6 * 8);
        let (total, per_layer) = predicted_ops(&psb, 8).unwrap();
        assert_eq!(total, rep.shift_accumulate_ops);
        assert_eq!(per_layer, rep.per_layer_ops);
    }

    #[test]
    fn pruned_ops_drop_proportionally_when_spread_is_proportional() {
        // A single-layer model: zero weights consume no ops, so a 90% prune
        // leaves exactly 10% of the baseline count.
        let w: Vec<f64> = (1..=40).map(|i| i as f64 / 8.0).collect();
        let m = Model {
            input_shape: vec![8],
            layers: vec![Layer { kind: dense_float(5, 8, w, vec![0.0; 5]), inputs: vec![0] }],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::default()).unwrap();
        let pruned = prune_magnitude(&psb, 0.9).unwrap();
        let (base, _) = predicted_ops(&psb, 16).unwrap();
        let (after, _) = predicted_ops(&pruned, 16).unwrap();
        assert_eq!(after * 10, base);
    }

    #[test]
    fn workers_do_not_change_results() {
        let m = Model {
            input_shape: vec![4],
            layers: vec![
                Layer {
                    kind: dense_float(
                        4,
                        4,
                        vec![
                            0.7, -1.3, 0.2, 1.1, 0.9, 0.4, -0.8, 1.7, -0.3, 0.6, 1.9, -1.1, 0.5,
                            -0.2, 0.8, 1.3,
                        ],
                        vec![0.0; 4],
                    ),
                    inputs: vec![0],
                },
                Layer { kind: LayerKind::ReLU, inputs: vec![1] },
            ],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::default()).unwrap();
        let inputs: Vec<Tensor> = (0..16)
            .map(|k| Tensor::new(vec![4], (0..4).map(|j| ((k * 4 + j) as f64) / 16.0).collect()))
            .collect();
        let cfg = SamplingConfig::new(16, SamplingMode::PerCallFilter, 10, 4).unwrap();
        let a = forward_batch(&psb, &inputs, &cfg, 5, 1).unwrap();
        let b = forward_batch(&psb, &inputs, &cfg, 5, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.logits.to_f64(), y.logits.to_f64());
        }
    }

    #[test]
    fn argmax_lowest_index_wins_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn avgpool_residual_fold_matches_float() {
        // 3x3 global average (area 9, not a power of two): the residual
        // 9/8 scale folds into the dense layer; MeanOracle then tracks the
        // float oracle within fixed-point tolerance.
        let m = Model {
            input_shape: vec![3, 3, 2],
            layers: vec![
                Layer { kind: LayerKind::GlobalAvgPool, inputs: vec![0] },
                Layer {
                    kind: dense_float(2, 2, vec![1.5, -0.5, 0.75, 2.0], vec![0.25, -0.5]),
                    inputs: vec![1],
                },
            ],
            encoding: None,
        };
        let psb = convert_to_psb(&m, &EncodingConfig::default()).unwrap();
        let input = Tensor::new(
            vec![3, 3, 2],
            (0..18).map(|i| (i as f64 - 9.0) / 4.0).collect(),
        );
        let cfg = SamplingConfig::new(1, SamplingMode::MeanOracle, 10, 4).unwrap();
        let rep = forward(&psb, &input, &cfg, 0).unwrap();
        let (_, fl) = oracle::float_forward(&m, &input).unwrap();
        for (x, y) in rep.logits.to_f64().iter().zip(&fl) {
            assert!((x - y).abs() < 0.01, "{x} vs {y}");
        }
    }
}
