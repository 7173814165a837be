//! Post-training int8 weight quantization, payload accounting, and a
//! throughput benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{count_params, ArchSpec, Checkpoint, Model, Stored};
use crate::nn::ParamMap;
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Bytes of the fixed container prefix counted by the payload formulas
/// (magic and format version).
pub const PAYLOAD_HEADER_BYTES: usize = 8;
pub const QMAX: f32 = 127.0;

/// A per-tensor symmetric int8 tensor: `w ≈ q·scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub scale: f32,
}

impl QTensor {
    /// `scale = max|w|/127`, `q = round(w/scale)` clamped to ±127. An
    /// all-zero tensor gets scale 1.
    pub fn quantize(t: &Tensor) -> Self {
        let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if max > 0.0 { max / QMAX } else { 1.0 };
        let data = t
            .data()
            .iter()
            .map(|&w| (w / scale).round().clamp(-QMAX, QMAX) as i8)
            .collect();
        Self {
            shape: t.shape().to_vec(),
            data,
            scale,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&q| f32::from(q) * self.scale).collect())
            .expect("shape matches data")
    }
}

/// Weight matrices and kernels in int8; vectors (biases, norm affines) and
/// buffers stay f32.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub spec: ArchSpec,
    pub q_weights: BTreeMap<String, QTensor>,
    pub float_params: ParamMap,
    pub buffers: ParamMap,
}

pub fn quantize(model: &Model) -> QuantizedModel {
    let mut q_weights = BTreeMap::new();
    let mut float_params = ParamMap::new();
    for (name, t) in &model.params {
        if t.rank() >= 2 {
            q_weights.insert(name.clone(), QTensor::quantize(t));
        } else {
            float_params.insert(name.clone(), t.clone());
        }
    }
    QuantizedModel {
        spec: model.spec.clone(),
        q_weights,
        float_params,
        buffers: model.buffers.clone(),
    }
}

/// `4·params + header`.
pub fn f32_payload_bytes(param_count: usize) -> usize {
    PAYLOAD_HEADER_BYTES + 4 * param_count
}

/// Payload of the f32 weights an architecture would carry.
pub fn spec_payload_bytes(spec: &ArchSpec) -> Result<usize> {
    Ok(f32_payload_bytes(count_params(spec)?))
}

pub fn payload_size(model: &Model) -> usize {
    f32_payload_bytes(model.param_count())
}

impl QuantizedModel {
    pub fn param_count(&self) -> usize {
        self.q_weights.values().map(|q| q.data.len()).sum::<usize>()
            + self.float_params.values().map(Tensor::numel).sum::<usize>()
    }

    /// One byte per quantized weight, four per scale and per float parameter.
    pub fn payload_size(&self) -> usize {
        let q: usize = self.q_weights.values().map(|q| q.data.len() + 4).sum();
        let f: usize = self.float_params.values().map(|t| 4 * t.numel()).sum();
        PAYLOAD_HEADER_BYTES + q + f
    }

    pub fn dequantize(&self) -> Model {
        let mut params = self.float_params.clone();
        for (k, q) in &self.q_weights {
            params.insert(k.clone(), q.dequantize());
        }
        Model {
            hook_layer: hook_layer(&self.spec),
            spec: self.spec.clone(),
            params,
            buffers: self.buffers.clone(),
        }
    }

    /// Container with `i8` weight payloads and a `scales.` namespace.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.spec.clone());
        ck.insert_map(None, &self.float_params);
        ck.insert_map(Some("buffers"), &self.buffers);
        for (k, q) in &self.q_weights {
            ck.tensors.insert(
                k.clone(),
                Stored::I8 {
                    shape: q.shape.clone(),
                    data: q.data.clone(),
                },
            );
            ck.tensors
                .insert(format!("scales.{k}"), Stored::F32(Tensor::full(vec![1], q.scale)));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        let scales = ck.namespace("scales");
        let mut q_weights = BTreeMap::new();
        let mut float_params = ParamMap::new();
        for (k, v) in ck.model_entries() {
            match v {
                Stored::F32(t) => {
                    float_params.insert(k.clone(), t.clone());
                }
                Stored::I8 { shape, data } => {
                    let scale = scales
                        .get(k)
                        .ok_or_else(|| Error::Checkpoint(format!("no scale for quantized `{k}`")))?
                        .item();
                    q_weights.insert(
                        k.clone(),
                        QTensor {
                            shape: shape.clone(),
                            data: data.clone(),
                            scale,
                        },
                    );
                }
            }
        }
        Ok(Self {
            spec: ck.spec.clone(),
            q_weights,
            float_params,
            buffers: ck.namespace("buffers"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn hook_layer(spec: &ArchSpec) -> String {
    if spec.depth > 0 {
        format!("blocks.{}", spec.depth - 1)
    } else {
        format!("stages.{}", spec.channel_plan.len().saturating_sub(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub fp32_accuracy: f64,
    pub int8_accuracy: f64,
    pub fp32_payload_bytes: usize,
    pub int8_payload_bytes: usize,
    pub throughput_fp32: f64,
    pub throughput_int8: f64,
    pub speedup: f64,
    pub batch_size: usize,
    pub n_warmup: usize,
    pub n_timed: usize,
}

/// Images per second over `n_timed` batches after `n_warmup` untimed ones.
pub fn throughput(model: &Model, data: &Dataset, batch_size: usize, n_warmup: usize, n_timed: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("benchmark data is empty".into()));
    }
    if n_warmup == 0 || n_timed == 0 {
        return Err(Error::invalid("benchmark needs at least one warmup and one timed batch"));
    }
    let policy = AugmentPolicy::uniform(AugmentConfig::eval(model.spec.image_size));
    let batches = data.batches(0, batch_size, false, &policy, 0)?;
    let mut cycle = batches.iter().cycle();
    for _ in 0..n_warmup {
        model.forward(&cycle.next().expect("non-empty").x, false)?;
    }
    let mut images = 0;
    let start = Instant::now();
    for _ in 0..n_timed {
        let b = cycle.next().expect("non-empty");
        model.forward(&b.x, false)?;
        images += b.y.len();
    }
    Ok(images as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Accuracy of both variants on `data` plus single-threaded throughput.
/// The int8 variant runs on its dequantized weights.
pub fn benchmark(
    model: &Model,
    quantized: &QuantizedModel,
    data: &Dataset,
    batch_size: usize,
    n_warmup: usize,
    n_timed: usize,
) -> Result<BenchReport> {
    if data.is_empty() {
        return Err(Error::Dataset("benchmark data is empty".into()));
    }
    let deq = quantized.dequantize();
    let fp32_accuracy = evaluate(model, data, batch_size)?.accuracy;
    let int8_accuracy = evaluate(&deq, data, batch_size)?.accuracy;
    let throughput_fp32 = throughput(model, data, batch_size, n_warmup, n_timed)?;
    let throughput_int8 = throughput(&deq, data, batch_size, n_warmup, n_timed)?;
    Ok(BenchReport {
        fp32_accuracy,
        int8_accuracy,
        fp32_payload_bytes: payload_size(model),
        int8_payload_bytes: quantized.payload_size(),
        throughput_fp32,
        throughput_int8,
        speedup: throughput_int8 / throughput_fp32,
        batch_size,
        n_warmup,
        n_timed,
    })
}
