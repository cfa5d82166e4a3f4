use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "leadrecon-ckpt/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn info(&self) -> Vec<ParamInfo> {
        self.params
            .iter()
            .map(|p| ParamInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Add the gradients of every parameter bound on `tape` into `grad`.
    pub fn accumulate(&mut self, tape: &Tape<S>, grads: &Grads<S>) {
        for (id, var) in tape.bindings() {
            if let Some(g) = grads.wrt(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Same parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Tensor::new(
                        p.value.shape().to_vec(),
                        p.value.data().iter().map(|v| T::of(v.as_f64())).collect(),
                    )
                    .expect("same shape"),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
        }
    }

    /// Overwrite values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.info() != other.info() {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: expected {} tensors ({} values), found {} tensors ({} values)",
                self.len(),
                self.num_parameters(),
                other.len(),
                other.num_parameters()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub fn parameter_count<S: Scalar>(store: &ParamStore<S>) -> usize {
    store.num_parameters()
}

/// Glorot/Xavier uniform on `[-a, a]`, `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Layer entry of a checkpoint's architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Relu,
    GlobalAvgPool,
    L2Normalize,
    BroadcastOverTime { steps: usize },
    Concat,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.weight"),
            xavier_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, out_ch * kernel, rng),
        )?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv1dLayer {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b, self.stride, self.padding)
    }

    pub fn spec(&self, name: &str) -> LayerSpec {
        LayerSpec::Conv1d {
            name: name.to_string(),
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl DenseLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.weight"),
            xavier_uniform(&[out_features, in_features], in_features, out_features, rng),
        )?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(DenseLayer {
            w,
            b,
            in_features,
            out_features,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(x, w, b)
    }

    pub fn spec(&self, name: &str) -> LayerSpec {
        LayerSpec::Dense {
            name: name.to_string(),
            in_features: self.in_features,
            out_features: self.out_features,
        }
    }
}

/// First line of a checkpoint file; the f32 little-endian parameter blob
/// follows the newline, tensors in `params` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub format: String,
    pub dtype: String,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamInfo>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    layers: Vec<LayerSpec>,
    meta: serde_json::Value,
) -> Result<()> {
    let desc = CheckpointDescriptor {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: "f32".to_string(),
        layers,
        params: store.info(),
        meta,
    };
    let mut bytes = serde_json::to_vec(&desc)?;
    bytes.push(b'\n');
    for p in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointDescriptor, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Dependency {
            path: path.to_path_buf(),
            msg: "checkpoint not found".into(),
        },
        _ => Error::io(path, e),
    })?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing descriptor line", path.display())))?;
    let desc: CheckpointDescriptor = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("{}: bad descriptor: {e}", path.display())))?;
    if desc.format != CHECKPOINT_FORMAT || desc.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} / dtype {}",
            path.display(),
            desc.format,
            desc.dtype
        )));
    }
    let blob = &bytes[split + 1..];
    let expected: usize = desc.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: blob holds {} bytes, descriptor needs {}",
            path.display(),
            blob.len(),
            expected * 4
        )));
    }
    let mut store = ParamStore::new();
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for info in &desc.params {
        let n: usize = info.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        store.add(&info.name, Tensor::new(info.shape.clone(), data)?)?;
    }
    Ok((desc, store))
}
