//! Model persistence and dataset ingestion.
//!
//! One container format serves both float and PSB models: a fixed header,
//! a JSON manifest describing the graph topology and tensor table, then the
//! raw tensor blobs. PSB weights pack to 16 bits each: sign bit, 5-bit
//! exponent field biased by 16 (value 31 is the explicit-zero sentinel) and
//! a 10-bit probability numerator, little-endian. Datasets use the IDX
//! format; a deterministic Gaussian-blob generator covers desk-scale tests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capacitor::{ConvGeometry, Padding};
use crate::encoding::{EncodingConfig, PsbWeight};
use crate::fixedpoint::FxValue;
use crate::graph::{Bias, Layer, LayerKind, Model, Tensor, Weights};
use crate::sampling::RngStream;
use crate::{FormatError, PsbError, Result};

/// Container magic bytes.
pub const MAGIC: [u8; 4] = *b"PSBM";

/// Current container format version.
pub const CONTAINER_VERSION: u32 = 1;

const EXP_BIAS: i32 = 16;
const ZERO_SENTINEL: u16 = 31;

/// Packs one PSB weight into its 16-bit on-disk code:
/// `sign << 15 | exp_field << 10 | prob_num`.
pub fn pack_psb_weight(w: &PsbWeight) -> Result<u16> {
    if w.prob_bits > 10 {
        return Err(PsbError::Unsupported(format!(
            "prob_bits {} exceeds the 10-bit packed field",
            w.prob_bits
        )));
    }
    if w.is_zero {
        return Ok(ZERO_SENTINEL << 10);
    }
    let field = w.exponent + EXP_BIAS;
    if !(0..31).contains(&field) {
        return Err(FormatError::InvalidCode(format!(
            "exponent {} outside the packable range [-16, 14]",
            w.exponent
        ))
        .into());
    }
    if w.prob_num as u32 >= 1u32 << w.prob_bits {
        return Err(FormatError::InvalidCode(format!(
            "prob_num {} at prob_bits {}",
            w.prob_num, w.prob_bits
        ))
        .into());
    }
    let sign_bit = if w.sign < 0 { 1u16 } else { 0 };
    Ok((sign_bit << 15) | ((field as u16) << 10) | w.prob_num)
}

/// Inverse of [`pack_psb_weight`].
pub fn unpack_psb_weight(code: u16, prob_bits: u8) -> Result<PsbWeight> {
    let prob_num = code & 0x3ff;
    let field = (code >> 10) & 0x1f;
    let sign = if code >> 15 == 1 { -1i8 } else { 1 };
    if field == ZERO_SENTINEL {
        return Ok(PsbWeight::zero(prob_bits));
    }
    if prob_num as u32 >= 1u32 << prob_bits {
        return Err(FormatError::InvalidCode(format!(
            "prob_num {prob_num} at prob_bits {prob_bits}"
        ))
        .into());
    }
    Ok(PsbWeight {
        sign,
        exponent: field as i32 - EXP_BIAS,
        prob_num,
        prob_bits,
        is_zero: false,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    encoding: Option<EncodingConfig>,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    prob_bits: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Dense { inputs: Vec<usize>, weights: String, bias: String },
    Conv2d {
        inputs: Vec<usize>,
        weights: String,
        bias: String,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: String,
    },
    BatchNorm { inputs: Vec<usize>, scale: String, offset: String },
    Relu { inputs: Vec<usize> },
    Add { inputs: Vec<usize> },
    MaxPool { inputs: Vec<usize>, size: usize, stride: usize },
    AvgPool { inputs: Vec<usize>, size: usize, stride: usize },
    GlobalAvgPool { inputs: Vec<usize> },
    Flatten { inputs: Vec<usize> },
}

struct BlobWriter {
    tensors: Vec<TensorDesc>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        Self { tensors: Vec::new(), bytes: Vec::new() }
    }

    fn push_f32(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(TensorDesc {
            name,
            dtype: "f32".into(),
            shape,
            offset,
            byte_len: (data.len() * 4) as u64,
            prob_bits: None,
        });
    }

    fn push_psb(
        &mut self,
        name: String,
        shape: Vec<usize>,
        data: &[PsbWeight],
        prob_bits: u8,
    ) -> Result<()> {
        let offset = self.bytes.len() as u64;
        for w in data {
            self.bytes.extend_from_slice(&pack_psb_weight(w)?.to_le_bytes());
        }
        self.tensors.push(TensorDesc {
            name,
            dtype: "psb16".into(),
            shape,
            offset,
            byte_len: (data.len() * 2) as u64,
            prob_bits: Some(prob_bits),
        });
        Ok(())
    }

    fn push_fx(&mut self, name: String, shape: Vec<usize>, data: &[FxValue]) {
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.raw().to_le_bytes());
        }
        self.tensors.push(TensorDesc {
            name,
            dtype: "fx16".into(),
            shape,
            offset,
            byte_len: (data.len() * 2) as u64,
            prob_bits: None,
        });
    }
}

fn weights_entry(writer: &mut BlobWriter, name: String, w: &Weights, enc: Option<&EncodingConfig>) -> Result<()> {
    match w {
        Weights::Float(t) => {
            writer.push_f32(name, t.shape().to_vec(), t.data());
            Ok(())
        }
        Weights::Psb { shape, data } => {
            let pb = enc
                .map(|e| e.prob_bits as u8)
                .or_else(|| data.first().map(|w| w.prob_bits))
                .unwrap_or(10);
            writer.push_psb(name, shape.clone(), data, pb)
        }
    }
}

fn bias_entry(writer: &mut BlobWriter, name: String, b: &Bias) {
    match b {
        Bias::Float(v) => writer.push_f32(name, vec![v.len()], v),
        Bias::Fx(v) => writer.push_fx(name, vec![v.len()], v),
    }
}

/// Serializes a model into the container format.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    let mut writer = BlobWriter::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let entry = match &layer.kind {
            LayerKind::Dense { weights, bias } => {
                let wname = format!("layer{i}.weights");
                let bname = format!("layer{i}.bias");
                weights_entry(&mut writer, wname.clone(), weights, model.encoding.as_ref())?;
                bias_entry(&mut writer, bname.clone(), bias);
                LayerEntry::Dense { inputs: layer.inputs.clone(), weights: wname, bias: bname }
            }
            LayerKind::Conv2D { weights, bias, geom } => {
                let wname = format!("layer{i}.weights");
                let bname = format!("layer{i}.bias");
                weights_entry(&mut writer, wname.clone(), weights, model.encoding.as_ref())?;
                bias_entry(&mut writer, bname.clone(), bias);
                LayerEntry::Conv2d {
                    inputs: layer.inputs.clone(),
                    weights: wname,
                    bias: bname,
                    kh: geom.kh,
                    kw: geom.kw,
                    c_in: geom.c_in,
                    c_out: geom.c_out,
                    stride: geom.stride,
                    padding: match geom.padding {
                        Padding::Same => "same".into(),
                        Padding::Valid => "valid".into(),
                    },
                }
            }
            LayerKind::BatchNorm { scale, offset } => {
                let sname = format!("layer{i}.scale");
                let oname = format!("layer{i}.offset");
                writer.push_f32(sname.clone(), vec![scale.len()], scale);
                writer.push_f32(oname.clone(), vec![offset.len()], offset);
                LayerEntry::BatchNorm { inputs: layer.inputs.clone(), scale: sname, offset: oname }
            }
            LayerKind::ReLU => LayerEntry::Relu { inputs: layer.inputs.clone() },
            LayerKind::Add => LayerEntry::Add { inputs: layer.inputs.clone() },
            LayerKind::MaxPool { size, stride } => LayerEntry::MaxPool {
                inputs: layer.inputs.clone(),
                size: *size,
                stride: *stride,
            },
            LayerKind::AvgPool { size, stride } => LayerEntry::AvgPool {
                inputs: layer.inputs.clone(),
                size: *size,
                stride: *stride,
            },
            LayerKind::GlobalAvgPool => {
                LayerEntry::GlobalAvgPool { inputs: layer.inputs.clone() }
            }
            LayerKind::Flatten => LayerEntry::Flatten { inputs: layer.inputs.clone() },
        };
        layers.push(entry);
    }

    let manifest = Manifest {
        format_version: CONTAINER_VERSION,
        input_shape: model.input_shape.clone(),
        encoding: model.encoding,
        layers,
        tensors: writer.tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + manifest_json.len() + writer.bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&writer.bytes);
    fs::write(path, out)?;
    Ok(())
}

struct BlobReader<'a> {
    tensors: &'a [TensorDesc],
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    fn desc(&self, name: &str) -> Result<&'a TensorDesc> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FormatError::Manifest(format!("tensor '{name}' not in table")).into())
    }

    fn raw(&self, d: &TensorDesc, elem_size: usize) -> Result<&'a [u8]> {
        let expected = d.shape.iter().product::<usize>() * elem_size;
        if expected as u64 != d.byte_len {
            return Err(FormatError::ShapeMismatch(format!(
                "tensor '{}': shape {:?} needs {expected} bytes, manifest says {}",
                d.name, d.shape, d.byte_len
            ))
            .into());
        }
        let start = d.offset as usize;
        let end = start + d.byte_len as usize;
        if end > self.bytes.len() {
            return Err(FormatError::TruncatedBlob(format!(
                "tensor '{}': needs bytes {start}..{end}, blob section has {}",
                d.name,
                self.bytes.len()
            ))
            .into());
        }
        Ok(&self.bytes[start..end])
    }

    fn f32_tensor(&self, name: &str) -> Result<Tensor> {
        let d = self.desc(name)?;
        if d.dtype != "f32" {
            return Err(FormatError::Manifest(format!(
                "tensor '{name}' has dtype {} where f32 was expected",
                d.dtype
            ))
            .into());
        }
        let raw = self.raw(d, 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(d.shape.clone(), data))
    }

    fn f32_vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.f32_tensor(name)?.data().to_vec())
    }

    fn weights(&self, name: &str) -> Result<Weights> {
        let d = self.desc(name)?;
        match d.dtype.as_str() {
            "f32" => Ok(Weights::Float(self.f32_tensor(name)?)),
            "psb16" => {
                let pb = d.prob_bits.ok_or_else(|| {
                    FormatError::Manifest(format!("tensor '{name}' lacks prob_bits"))
                })?;
                if pb == 0 || pb > 10 {
                    return Err(FormatError::Manifest(format!(
                        "tensor '{name}': prob_bits {pb} outside 1..=10"
                    ))
                    .into());
                }
                let raw = self.raw(d, 2)?;
                let data = raw
                    .chunks_exact(2)
                    .map(|c| unpack_psb_weight(u16::from_le_bytes(c.try_into().unwrap()), pb))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Weights::Psb { shape: d.shape.clone(), data })
            }
            other => {
                Err(FormatError::Manifest(format!("weights '{name}': unknown dtype {other}"))
                    .into())
            }
        }
    }

    fn bias(&self, name: &str) -> Result<Bias> {
        let d = self.desc(name)?;
        match d.dtype.as_str() {
            "f32" => Ok(Bias::Float(self.f32_vec(name)?)),
            "fx16" => {
                let raw = self.raw(d, 2)?;
                let data = raw
                    .chunks_exact(2)
                    .map(|c| FxValue::from_raw(i16::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                Ok(Bias::Fx(data))
            }
            other => {
                Err(FormatError::Manifest(format!("bias '{name}': unknown dtype {other}")).into())
            }
        }
    }
}

/// Loads a model container.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(FormatError::TruncatedBlob("file shorter than the header".into()).into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(FormatError::VersionMismatch { found: version, expected: CONTAINER_VERSION }
            .into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + manifest_len > bytes.len() {
        return Err(FormatError::TruncatedBlob("manifest overruns the file".into()).into());
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.format_version != CONTAINER_VERSION {
        return Err(FormatError::VersionMismatch {
            found: manifest.format_version,
            expected: CONTAINER_VERSION,
        }
        .into());
    }
    let reader = BlobReader { tensors: &manifest.tensors, bytes: &bytes[16 + manifest_len..] };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let (kind, inputs) = match entry {
            LayerEntry::Dense { inputs, weights, bias } => (
                LayerKind::Dense { weights: reader.weights(weights)?, bias: reader.bias(bias)? },
                inputs.clone(),
            ),
            LayerEntry::Conv2d { inputs, weights, bias, kh, kw, c_in, c_out, stride, padding } => {
                let padding = match padding.as_str() {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    other => {
                        return Err(FormatError::Manifest(format!("unknown padding '{other}'"))
                            .into())
                    }
                };
                (
                    LayerKind::Conv2D {
                        weights: reader.weights(weights)?,
                        bias: reader.bias(bias)?,
                        geom: ConvGeometry {
                            kh: *kh,
                            kw: *kw,
                            c_in: *c_in,
                            c_out: *c_out,
                            stride: *stride,
                            padding,
                        },
                    },
                    inputs.clone(),
                )
            }
            LayerEntry::BatchNorm { inputs, scale, offset } => (
                LayerKind::BatchNorm {
                    scale: reader.f32_vec(scale)?,
                    offset: reader.f32_vec(offset)?,
                },
                inputs.clone(),
            ),
            LayerEntry::Relu { inputs } => (LayerKind::ReLU, inputs.clone()),
            LayerEntry::Add { inputs } => (LayerKind::Add, inputs.clone()),
            LayerEntry::MaxPool { inputs, size, stride } => {
                (LayerKind::MaxPool { size: *size, stride: *stride }, inputs.clone())
            }
            LayerEntry::AvgPool { inputs, size, stride } => {
                (LayerKind::AvgPool { size: *size, stride: *stride }, inputs.clone())
            }
            LayerEntry::GlobalAvgPool { inputs } => (LayerKind::GlobalAvgPool, inputs.clone()),
            LayerEntry::Flatten { inputs } => (LayerKind::Flatten, inputs.clone()),
        };
        layers.push(Layer { kind, inputs });
    }
    let model = Model { input_shape: manifest.input_shape, layers, encoding: manifest.encoding };
    model.validate()?;
    Ok(model)
}

/// Resolves a dataset path, falling back to `$PSB_DATA_DIR/<path>` when the
/// given relative path does not exist.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(root) = std::env::var("PSB_DATA_DIR") {
        let candidate = Path::new(&root).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX file. Image files (magic 0x00000803) come back as
/// `[N, H, W]` with pixel bytes scaled to `[0,1]`; label files (magic
/// 0x00000801) as `[N]` with the raw class values.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(resolve_data_path(path))?;
    if bytes.len() < 4 {
        return Err(PsbError::Data("IDX file shorter than its magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(PsbError::Data(format!("bad IDX magic 0x{other:08x}"))),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(PsbError::Data("IDX header truncated".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let v = u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize;
        dims.push(v);
    }
    let count: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
        || PsbError::Data(format!("IDX dims {dims:?} overflow")),
    )?;
    if count > 1 << 30 {
        return Err(PsbError::Data(format!("IDX dims {dims:?} unreasonably large")));
    }
    if bytes.len() != header + count {
        return Err(PsbError::Data(format!(
            "IDX payload is {} bytes, dims {dims:?} require {count}",
            bytes.len() - header
        )));
    }
    let payload = &bytes[header..];
    let data: Vec<f32> = if magic == IDX_IMAGES_MAGIC {
        payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        payload.iter().map(|&b| b as f32).collect()
    };
    Ok(Tensor::new(dims, data))
}

/// Writes images `[N, H, W]` with values in `[0,1]` as an IDX3 ubyte file.
pub fn save_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let sh = images.shape();
    if sh.len() != 3 {
        return Err(PsbError::ShapeMismatch(format!("IDX images need [N,H,W], got {sh:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &d in sh {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Writes labels as an IDX1 ubyte file.
pub fn save_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// An in-memory labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, H, W]`, values in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The i-th image as a `[H, W, 1]` model input.
    pub fn input(&self, i: usize) -> Tensor {
        let sh = self.images.shape();
        let (h, w) = (sh[1], sh[2]);
        let start = i * h * w;
        Tensor::new(vec![h, w, 1], self.images.data()[start..start + h * w].to_vec())
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.input(i)).collect()
    }

    pub fn from_files(images: &Path, labels: &Path) -> Result<Self> {
        let images = load_idx(images)?;
        let labels_t = load_idx(labels)?;
        if images.shape().len() != 3 || labels_t.shape().len() != 1 {
            return Err(PsbError::Data("expected an IDX3 image file and an IDX1 label file".into()));
        }
        if images.shape()[0] != labels_t.shape()[0] {
            return Err(PsbError::Data(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels_t.shape()[0]
            )));
        }
        let labels = labels_t.data().iter().map(|&v| v as u8).collect();
        Ok(Self { images, labels })
    }
}

/// Deterministic synthetic dataset: each image carries a dominant Gaussian
/// intensity blob on its class anchor plus a weaker distractor blob on a
/// different class anchor, with positional jitter and background noise, so
/// classification requires comparing relative amplitudes rather than mere
/// presence. Classes are interleaved (`label = index % classes`). Pixels are
/// snapped to the u8 grid at generation time so IDX round-trips are
/// lossless.
pub fn gen_synthetic(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(PsbError::InvalidConfig(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || size < 8 {
        return Err(PsbError::InvalidConfig(
            "per_class must be positive and size at least 8".into(),
        ));
    }
    let n = classes * per_class;
    let center = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 3.2;
    let anchors: Vec<(f64, f64)> = (0..classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / classes as f64
                + std::f64::consts::FRAC_PI_4;
            (center + radius * angle.sin(), center + radius * angle.cos())
        })
        .collect();

    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let class = idx % classes;
        let mut rng = RngStream::new(seed, idx as u64);
        let (jy, jx) = gaussian_pair(&mut rng);
        let main = (anchors[class].0 + jy, anchors[class].1 + jx);
        let other = {
            let skip = 1 + (rng.next_bits(32) as usize) % (classes - 1);
            let (jy2, jx2) = gaussian_pair(&mut rng);
            let a = anchors[(class + skip) % classes];
            (a.0 + jy2, a.1 + jx2)
        };
        let sigma = size as f64 / 9.0 * (0.85 + 0.3 * rng.next_f64());
        let amp = 0.55 + 0.45 * rng.next_f64();
        let distractor_amp = amp * (0.40 + 0.35 * rng.next_f64());
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..size {
            for x in 0..size {
                let d_main = (y as f64 - main.0).powi(2) + (x as f64 - main.1).powi(2);
                let d_other = (y as f64 - other.0).powi(2) + (x as f64 - other.1).powi(2);
                let (g, _) = gaussian_pair(&mut rng);
                let v = amp * (-d_main * inv).exp()
                    + distractor_amp * (-d_other * inv).exp()
                    + 0.05 * g;
                pixels.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
            }
        }
        labels.push(class as u8);
    }
    Ok(Dataset { images: Tensor::new(vec![n, size, size], pixels), labels })
}

/// Box-Muller transform over the stream.
fn gaussian_pair(rng: &mut RngStream) -> (f64, f64) {
    let u1 = rng.next_open_f64();
    let u2 = rng.next_f64();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_weight;
    use crate::graph::Weights;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("psb-modelio-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pack_w3_code() {
        // w = 3 at prob_bits 10: sign 0, exp field 17, prob 512.
        let w = encode_weight(3.0, &EncodingConfig::default()).unwrap();
        let code = pack_psb_weight(&w).unwrap();
        assert_eq!(code >> 15, 0);
        assert_eq!((code >> 10) & 0x1f, 17);
        assert_eq!(code & 0x3ff, 512);
        assert_eq!(unpack_psb_weight(code, 10).unwrap(), w);
    }

    #[test]
    fn pack_round_trip_all_fields() {
        for sign in [-1i8, 1] {
            for exponent in -16..=14 {
                for &pn in &[0u16, 1, 7, 511, 1023] {
                    let w = PsbWeight { sign, exponent, prob_num: pn, prob_bits: 10, is_zero: false };
                    let code = pack_psb_weight(&w).unwrap();
                    assert_eq!(unpack_psb_weight(code, 10).unwrap(), w);
                }
            }
        }
        let z = PsbWeight::zero(4);
        let code = pack_psb_weight(&z).unwrap();
        assert_eq!((code >> 10) & 0x1f, 31);
        assert!(unpack_psb_weight(code, 4).unwrap().is_zero);
        // prob_num out of grid is rejected on read.
        assert!(unpack_psb_weight(0b0_00001_1111111111, 4).is_err());
    }

    fn sample_float_model() -> Model {
        Model {
            input_shape: vec![2],
            layers: vec![
                Layer {
                    kind: LayerKind::Dense {
                        weights: Weights::Float(Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 2.0])),
                        bias: Bias::Float(vec![0.125, -1.0]),
                    },
                    inputs: vec![0],
                },
                Layer { kind: LayerKind::ReLU, inputs: vec![1] },
            ],
            encoding: None,
        }
    }

    fn models_equal(a: &Model, b: &Model) -> bool {
        if a.input_shape != b.input_shape || a.encoding != b.encoding {
            return false;
        }
        if a.layers.len() != b.layers.len() {
            return false;
        }
        a.layers.iter().zip(&b.layers).all(|(x, y)| {
            x.inputs == y.inputs
                && match (&x.kind, &y.kind) {
                    (
                        LayerKind::Dense { weights: wa, bias: ba },
                        LayerKind::Dense { weights: wb, bias: bb },
                    ) => weights_equal(wa, wb) && bias_equal(ba, bb),
                    (
                        LayerKind::Conv2D { weights: wa, bias: ba, geom: ga },
                        LayerKind::Conv2D { weights: wb, bias: bb, geom: gb },
                    ) => ga == gb && weights_equal(wa, wb) && bias_equal(ba, bb),
                    (
                        LayerKind::BatchNorm { scale: sa, offset: oa },
                        LayerKind::BatchNorm { scale: sb, offset: ob },
                    ) => sa == sb && oa == ob,
                    (LayerKind::ReLU, LayerKind::ReLU)
                    | (LayerKind::Add, LayerKind::Add)
                    | (LayerKind::GlobalAvgPool, LayerKind::GlobalAvgPool)
                    | (LayerKind::Flatten, LayerKind::Flatten) => true,
                    (
                        LayerKind::MaxPool { size: sa, stride: ta },
                        LayerKind::MaxPool { size: sb, stride: tb },
                    )
                    | (
                        LayerKind::AvgPool { size: sa, stride: ta },
                        LayerKind::AvgPool { size: sb, stride: tb },
                    ) => sa == sb && ta == tb,
                    _ => false,
                }
        })
    }

    fn weights_equal(a: &Weights, b: &Weights) -> bool {
        match (a, b) {
            (Weights::Float(x), Weights::Float(y)) => {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            (Weights::Psb { shape: sa, data: da }, Weights::Psb { shape: sb, data: db }) => {
                sa == sb && da == db
            }
            _ => false,
        }
    }

    fn bias_equal(a: &Bias, b: &Bias) -> bool {
        match (a, b) {
            (Bias::Float(x), Bias::Float(y)) => {
                x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            (Bias::Fx(x), Bias::Fx(y)) => x == y,
            _ => false,
        }
    }

    #[test]
    fn float_model_round_trip() {
        let m = sample_float_model();
        let path = tmp("float_roundtrip.psbm");
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(models_equal(&m, &loaded));
    }

    #[test]
    fn psb_model_round_trip_bit_exact() {
        let m = sample_float_model();
        let cfg = EncodingConfig::default();
        let psb = crate::graph::convert_to_psb(&m, &cfg).unwrap();
        let path = tmp("psb_roundtrip.psbm");
        save_model(&psb, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(models_equal(&psb, &loaded));
        // save(load(x)) is byte-identical
        let path2 = tmp("psb_roundtrip2.psbm");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_containers_give_typed_errors() {
        let m = sample_float_model();
        let path = tmp("corrupt.psbm");
        save_model(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(PsbError::Format(FormatError::BadMagic { .. }))
        ));

        // Version mismatch.
        let mut bad = bytes.clone();
        bad[4] = 99;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(PsbError::Format(FormatError::VersionMismatch { found: 99, .. }))
        ));

        // Truncated blob section.
        let bad = bytes[..bytes.len() - 3].to_vec();
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(PsbError::Format(FormatError::TruncatedBlob(_)))
        ));
    }

    #[test]
    fn idx_round_trip_and_handcrafted_fixture() {
        // Hand-built IDX3: 4 images of 2x2 with bytes 0..16.
        let path = tmp("fixture.idx");
        let mut bytes = vec![0u8, 0, 8, 3];
        for d in [4u32, 2, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend(0u8..16);
        fs::write(&path, &bytes).unwrap();
        let t = load_idx(&path).unwrap();
        assert_eq!(t.shape(), &[4, 2, 2]);
        assert_eq!(t.data()[5], 5.0 / 255.0);

        let lpath = tmp("labels.idx");
        save_idx_labels(&lpath, &[0, 1, 2, 1]).unwrap();
        let l = load_idx(&lpath).unwrap();
        assert_eq!(l.shape(), &[4]);
        assert_eq!(l.data(), &[0.0, 1.0, 2.0, 1.0]);

        // Wrong magic.
        fs::write(&path, [0u8, 0, 9, 9, 0, 0, 0, 0]).unwrap();
        assert!(matches!(load_idx(&path), Err(PsbError::Data(_))));
    }

    #[test]
    fn synthetic_dataset_deterministic() {
        let a = gen_synthetic(2, 100, 16, 9).unwrap();
        let b = gen_synthetic(2, 100, 16, 9).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.data(), b.images.data());
        let c = gen_synthetic(2, 100, 16, 10).unwrap();
        assert_ne!(a.images.data(), c.images.data());
        assert!(gen_synthetic(1, 10, 16, 0).is_err());
    }

    #[test]
    fn synthetic_survives_idx_round_trip() {
        let d = gen_synthetic(4, 8, 16, 3).unwrap();
        let ipath = tmp("synth_images.idx");
        let lpath = tmp("synth_labels.idx");
        save_idx_images(&ipath, &d.images).unwrap();
        save_idx_labels(&lpath, &d.labels).unwrap();
        let back = Dataset::from_files(&ipath, &lpath).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in back.images.data().iter().zip(d.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
