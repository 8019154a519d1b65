//! The CAM-compatible classifier: conv+relu backbone, global average pooling,
//! one linear head.
//!
//! Nothing sits between the pooled features and the head, so the logit of
//! class `c` is exactly the spatial mean of that class's activation map plus
//! the head bias. The CAM module relies on this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::ops;
use crate::tensor::{Element, Tensor, TensorError};

/// Smallest admissible side of the final feature map.
pub const MIN_FEATURE_SIDE: usize = 4;
/// Smallest admissible input side.
pub const MIN_INPUT_SIDE: usize = 16;

const KERNEL: usize = 3;
const PADDING: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {height}x{width} is too small: {reason}")]
    InputTooSmall {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("batch shape {got:?} does not match the model input [B, {channels}, {height}, {width}]")]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("models do not share an architecture: {0}")]
    ArchitectureMismatch(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Channel widths and strides of the backbone, one entry per conv layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WidthConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl WidthConfig {
    /// 3 -> 32 -> 32 -> 64 -> 64 -> 64 -> 64, downsampling at layers 3 and 5.
    pub fn desk() -> Self {
        Self {
            widths: vec![32, 32, 64, 64, 64, 64],
            strides: vec![1, 1, 2, 1, 2, 1],
        }
    }

    /// Same schedule at 1/8 width; small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            widths: vec![4, 4, 8, 8, 8, 8],
            strides: vec![1, 1, 2, 1, 2, 1],
        }
    }

    pub fn scaled(divisor: usize) -> Self {
        let desk = Self::desk();
        Self {
            widths: desk.widths.iter().map(|w| (w / divisor.max(1)).max(1)).collect(),
            strides: desk.strides,
        }
    }
}

impl Default for WidthConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
    pub width: WidthConfig,
}

impl Architecture {
    pub fn new(input_shape: [usize; 3], classes: usize, width: WidthConfig) -> Result<Self> {
        let [channels, height, width_px] = input_shape;
        let arch = Self {
            input_channels: channels,
            input_height: height,
            input_width: width_px,
            classes,
            width,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.width;
        if w.widths.is_empty() || w.widths.len() != w.strides.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "{} widths and {} strides",
                w.widths.len(),
                w.strides.len()
            )));
        }
        if w.widths.contains(&0) || w.strides.contains(&0) {
            return Err(ModelError::InvalidArchitecture(
                "widths and strides must be positive".into(),
            ));
        }
        if self.input_channels == 0 || self.classes < 2 {
            return Err(ModelError::InvalidArchitecture(format!(
                "need at least one input channel and two classes, got {} and {}",
                self.input_channels, self.classes
            )));
        }
        let (h, w_px) = (self.input_height, self.input_width);
        if h < MIN_INPUT_SIDE || w_px < MIN_INPUT_SIDE {
            return Err(ModelError::InputTooSmall {
                height: h,
                width: w_px,
                reason: format!("both sides must be at least {MIN_INPUT_SIDE}"),
            });
        }
        let (_, fh, fw) = self.feature_shape();
        if fh < MIN_FEATURE_SIDE || fw < MIN_FEATURE_SIDE {
            return Err(ModelError::InputTooSmall {
                height: h,
                width: w_px,
                reason: format!(
                    "the downsampling schedule leaves a {fh}x{fw} feature map, need at least {MIN_FEATURE_SIDE}x{MIN_FEATURE_SIDE}"
                ),
            });
        }
        Ok(())
    }

    /// `(C, H_f, W_f)` of the last backbone activation.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for &s in &self.width.strides {
            h = ops::conv_out_dim(h, KERNEL, s, PADDING).unwrap_or(0);
            w = ops::conv_out_dim(w, KERNEL, s, PADDING).unwrap_or(0);
        }
        (*self.width.widths.last().unwrap_or(&0), h, w)
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_shape().0
    }

    pub fn layers(&self) -> usize {
        self.width.widths.len()
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut in_c = self.input_channels;
        let mut shapes = Vec::new();
        for (i, &out_c) in self.width.widths.iter().enumerate() {
            shapes.push((conv_name(i), vec![out_c, in_c, KERNEL, KERNEL]));
            in_c = out_c;
        }
        shapes.push((HEAD_WEIGHT.to_string(), vec![self.classes, in_c]));
        shapes.push((HEAD_BIAS.to_string(), vec![self.classes]));
        shapes
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

fn conv_name(layer: usize) -> String {
    format!("conv{}.weight", layer + 1)
}

/// Backbone/head split of the trainable parameters, by name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub backbone: Vec<String>,
    pub head: Vec<String>,
}

/// Which parameters a tape binding tracks gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Conv weights only; the head enters the tape as constants.
    Backbone,
    /// Everything constant, e.g. the frozen reference model.
    Nothing,
}

/// Tape handles for every parameter of one model, in canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn head_weight(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamNet<E: Element = f32> {
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor<E>>,
}

/// Builds a network with He-normal conv weights and a small uniform head.
pub fn build_camnet(
    input_shape: [usize; 3],
    classes: usize,
    width: WidthConfig,
    seed: u64,
) -> Result<CamNet<f32>> {
    let arch = Architecture::new(input_shape, classes, width)?;
    Ok(CamNet::init(arch, seed))
}

impl<E: Element> CamNet<E> {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<E> = if name == HEAD_BIAS {
                vec![E::zero(); numel]
            } else if name == HEAD_WEIGHT {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("finite bound");
                (0..numel).map(|_| E::of(dist.sample(&mut rng))).collect()
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..numel).map(|_| E::of(dist.sample(&mut rng))).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data).expect("shape from architecture"));
        }
        Self {
            arch,
            names,
            params,
        }
    }

    /// Assembles a model from named tensors, e.g. after loading a checkpoint.
    pub fn from_params(arch: Architecture, named: Vec<(String, Tensor<E>)>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if named.len() != expected.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "expected {} parameters, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, shape), (got_name, tensor)) in expected.into_iter().zip(named) {
            if name != got_name || tensor.shape() != shape.as_slice() {
                return Err(ModelError::InvalidArchitecture(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            names.push(name);
            params.push(tensor);
        }
        Ok(Self {
            arch,
            names,
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<E>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        match self.names.iter().position(|n| n == name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(ModelError::UnknownParam(name.to_string())),
        }
    }

    /// Mutable views of the named parameters, in canonical order.
    pub fn params_mut<'a>(&'a mut self, which: &[String]) -> Vec<(&'a str, &'a mut Tensor<E>)> {
        self.names
            .iter()
            .zip(self.params.iter_mut())
            .filter(|(n, _)| which.contains(n))
            .map(|(n, p)| (n.as_str(), p))
            .collect()
    }

    pub fn head_weight(&self) -> &Tensor<E> {
        &self.params[self.params.len() - 2]
    }

    pub fn head_bias(&self) -> &Tensor<E> {
        &self.params[self.params.len() - 1]
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<F: Element>(&self) -> CamNet<F> {
        CamNet {
            arch: self.arch.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn check_input(&self, batch: &Tensor<E>) -> Result<()> {
        let a = &self.arch;
        let s = batch.shape();
        if s.len() != 4 || s[1] != a.input_channels || s[2] != a.input_height || s[3] != a.input_width {
            return Err(ModelError::InputShape {
                got: s.to_vec(),
                channels: a.input_channels,
                height: a.input_height,
                width: a.input_width,
            });
        }
        Ok(())
    }

    pub fn ensure_same_arch<F: Element>(&self, other: &CamNet<F>) -> Result<()> {
        if self.arch != other.arch {
            return Err(ModelError::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    /// Last backbone activation, `[B, C, H_f, W_f]`.
    pub fn features(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(batch)?;
        let mut h = ops::conv2d(batch, &self.params[0], self.arch.width.strides[0], PADDING)?;
        h = ops::relu(&h);
        for layer in 1..self.arch.layers() {
            h = ops::conv2d(&h, &self.params[layer], self.arch.width.strides[layer], PADDING)?;
            h = ops::relu(&h);
        }
        Ok(h)
    }

    /// Which units of every backbone layer are active (post-ReLU > 0), in
    /// layer order. Two parameter settings with equal patterns lie in the
    /// same linear region of the backbone.
    pub fn activation_pattern(&self, batch: &Tensor<E>) -> Result<Vec<bool>> {
        self.check_input(batch)?;
        let mut pattern = Vec::new();
        let mut h = batch.clone();
        for layer in 0..self.arch.layers() {
            h = ops::relu(&ops::conv2d(&h, &self.params[layer], self.arch.width.strides[layer], PADDING)?);
            pattern.extend(h.data().iter().map(|&v| v > E::zero()));
        }
        Ok(pattern)
    }

    /// Returns `(logits, features)` without recording anything.
    pub fn forward(&self, batch: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let features = self.features(batch)?;
        let pooled = ops::global_avg_pool(&features)?;
        let logits = ops::linear(&pooled, self.head_weight(), self.head_bias())?;
        Ok((logits, features))
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: Trainable) -> Bound {
        let layers = self.arch.layers();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let track = match trainable {
                    Trainable::All => true,
                    Trainable::Backbone => i < layers,
                    Trainable::Nothing => false,
                };
                let mut t = p.clone();
                t.zero_grad();
                tape.leaf(t.with_requires_grad(track))
            })
            .collect();
        Bound { vars }
    }

    /// Recorded forward pass; returns `(logits, features)` handles.
    pub fn forward_on_tape(&self, tape: &mut Tape<E>, bound: &Bound, batch: Var) -> Result<(Var, Var)> {
        self.check_input(tape.value(batch))?;
        let mut h = batch;
        for layer in 0..self.arch.layers() {
            h = tape.conv2d(h, bound.vars[layer], self.arch.width.strides[layer], PADDING)?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let n = bound.vars.len();
        let logits = tape.linear(pooled, bound.vars[n - 2], bound.vars[n - 1])?;
        Ok((logits, h))
    }

    /// Moves gradients accumulated on the tape into the parameters' buffers.
    pub fn absorb_grads(&mut self, tape: &mut Tape<E>, bound: &Bound) -> Result<()> {
        for (param, &var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.take_grad(var) {
                param.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the architecture and the exact parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.arch).as_bytes());
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Conv weights form the backbone; the head weight and bias form the head.
pub fn partition_params<E: Element>(model: &CamNet<E>) -> ParamPartition {
    let layers = model.arch.layers();
    ParamPartition {
        backbone: model.names[..layers].to_vec(),
        head: model.names[layers..].to_vec(),
    }
}
