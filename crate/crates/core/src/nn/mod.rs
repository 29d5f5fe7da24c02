//! A small differentiable network engine: dense and 2-D convolution layers,
//! ReLU/sigmoid/softmax, cross-entropy, hand-written backpropagation and
//! plain SGD, plus capture of pre-nonlinearity activations.
//!
//! Parameters live in one flat [`WeightVector`] laid out layer-major, each
//! layer storing its weight tensor row-major followed by its bias.

mod engine;
mod train;

pub use engine::{forward, loss_and_gradient, Forward};
pub use train::{evaluate, predict, train_local, train_local_with, TrainParams};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub const fn size(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn tuple(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    /// Valid padding, stride 1, square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Sigmoid,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { input, output } => input * output + output,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            _ => 0,
        }
    }

    /// Layers with a weighted transformation, whose outputs form activation maps.
    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match *self {
            Layer::Dense { input: n, output } => {
                if input.size() != n {
                    return Err(format!("expects {n} inputs, got {}", input.size()));
                }
                Ok(Shape::flat(output))
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if input.channels != in_channels {
                    return Err(format!(
                        "expects {in_channels} channels, got {}",
                        input.channels
                    ));
                }
                if kernel == 0 || input.height < kernel || input.width < kernel {
                    return Err(format!("kernel {kernel} does not fit the input"));
                }
                Ok(Shape::new(
                    out_channels,
                    input.height - kernel + 1,
                    input.width - kernel + 1,
                ))
            }
            Layer::MaxPool2 => {
                if input.height < 2 || input.width < 2 {
                    return Err("input smaller than the 2x2 pool window".into());
                }
                Ok(Shape::new(input.channels, input.height / 2, input.width / 2))
            }
            Layer::Flatten => Ok(Shape::flat(input.size())),
            Layer::Relu | Layer::Sigmoid | Layer::Softmax => Ok(input),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { input, output } => write!(f, "dense{{{input},{output}}}"),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv2d{{{in_channels},{out_channels},{kernel}}}"),
            Layer::Relu => f.write_str("relu"),
            Layer::Sigmoid => f.write_str("sigmoid"),
            Layer::MaxPool2 => f.write_str("maxpool2"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Softmax => f.write_str("softmax"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    pub input_shape: Shape,
    pub seed: u64,
}

impl ModelSpec {
    /// `input -> hidden (ReLU) -> classes (softmax)`.
    pub fn mlp(input_shape: Shape, hidden: usize, classes: usize, seed: u64) -> Self {
        Self {
            layers: vec![
                Layer::Dense {
                    input: input_shape.size(),
                    output: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    input: hidden,
                    output: classes,
                },
                Layer::Softmax,
            ],
            input_shape,
            seed,
        }
    }

    /// conv(1->8,3x3)-ReLU-pool-conv(8->16,3x3)-ReLU-pool-flatten-dense(classes).
    pub fn small_cnn(input_shape: Shape, classes: usize, seed: u64) -> Self {
        let s1 = Shape::new(8, (input_shape.height - 2) / 2, (input_shape.width - 2) / 2);
        let s2 = Shape::new(16, (s1.height - 2) / 2, (s1.width - 2) / 2);
        Self {
            layers: vec![
                Layer::Conv2d {
                    in_channels: input_shape.channels,
                    out_channels: 8,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv2d {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense {
                    input: s2.size(),
                    output: classes,
                },
                Layer::Softmax,
            ],
            input_shape,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks shape composition and the terminal softmax, returning the
    /// per-layer shapes and parameter offsets.
    pub fn layout(&self) -> Result<Layout> {
        if self.input_shape.size() == 0 {
            return Err(Error::InvalidSpec("input shape has zero size".into()));
        }
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Softmax))
            .count();
        if softmaxes != 1 || !matches!(self.layers.last(), Some(Layer::Softmax)) {
            return Err(Error::InvalidSpec(
                "model must end with exactly one softmax layer".into(),
            ));
        }
        let mut plans = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape;
        let mut offset = 0;
        for (index, layer) in self.layers.iter().enumerate() {
            let output = layer.output_shape(shape).map_err(|reason| {
                let prev = index
                    .checked_sub(1)
                    .map(|p| self.layers[p].to_string())
                    .unwrap_or_else(|| "input".into());
                Error::ShapeComposition {
                    index,
                    layer: format!("{prev} -> {layer}"),
                    input: shape.tuple(),
                    reason,
                }
            })?;
            plans.push(LayerPlan {
                layer: *layer,
                input: shape,
                output,
                offset,
            });
            offset += layer.param_count();
            shape = output;
        }
        if shape.height != 1 || shape.width != 1 {
            return Err(Error::InvalidSpec("softmax input must be flat".into()));
        }
        Ok(Layout {
            plans,
            param_count: offset,
            num_classes: shape.size(),
            input_shape: self.input_shape,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.param_count)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.layout()?.num_classes)
    }

    /// Length of one captured activation map under `mask`.
    pub fn activation_dim(&self, mask: &LayerMask) -> Result<usize> {
        let layout = self.layout()?;
        mask.validate(self)?;
        Ok(layout
            .plans
            .iter()
            .enumerate()
            .filter(|(i, p)| p.layer.is_parametric() && mask.selects(*i))
            .map(|(_, p)| p.output.size())
            .sum())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerPlan {
    pub layer: Layer,
    pub input: Shape,
    pub output: Shape,
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub(crate) plans: Vec<LayerPlan>,
    pub param_count: usize,
    pub num_classes: usize,
    pub input_shape: Shape,
}

/// Which parametric layers (by position in [`ModelSpec::layers`]) contribute
/// to captured activation maps.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMask {
    #[default]
    All,
    None,
    Layers(Vec<usize>),
}

impl LayerMask {
    pub fn selects(&self, layer_index: usize) -> bool {
        match self {
            LayerMask::All => true,
            LayerMask::None => false,
            LayerMask::Layers(ls) => ls.contains(&layer_index),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            LayerMask::None => true,
            LayerMask::Layers(ls) => ls.is_empty(),
            LayerMask::All => false,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if let LayerMask::Layers(ls) = self {
            for &i in ls {
                match spec.layers.get(i) {
                    Some(l) if l.is_parametric() => {}
                    Some(l) => {
                        return Err(Error::invalid(format!(
                            "layer mask selects layer {i} ({l}), which has no weights"
                        )))
                    }
                    None => {
                        return Err(Error::invalid(format!(
                            "layer mask index {i} out of range"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Flat, ordered vector of every trainable parameter of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `u64` little-endian length followed by little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the encoding from [`WeightVector::to_bytes`], returning the vector
    /// and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let truncated = |expected| Error::Truncated {
            path: "<weights>".into(),
            expected,
            found: bytes.len(),
        };
        let header: [u8; 8] = bytes.get(..8).ok_or_else(|| truncated(8))?.try_into().unwrap();
        let n = u64::from_le_bytes(header) as usize;
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(8))
            .ok_or_else(|| Error::invalid("weight vector length overflows"))?;
        let body = bytes.get(8..end).ok_or_else(|| truncated(end))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { values }, end))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<weights>", e))?;
        let (w, used) = Self::from_bytes(&bytes)?;
        if used != bytes.len() {
            return Err(Error::invalid("trailing bytes after weight vector"));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, _) = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Truncated { expected, found, .. } => Error::Truncated {
                path: path.into(),
                expected,
                found,
            },
            other => other,
        })?;
        Ok(w)
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// Pre-nonlinearity outputs of the masked layers for one input sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Vec<f64>,
    pub sample_index: usize,
    pub layer_mask: LayerMask,
}

/// Scaled uniform initialization: each weight tensor is drawn from
/// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
pub fn init_model(spec: &ModelSpec) -> Result<WeightVector> {
    let layout = spec.layout()?;
    let mut rng = crate::seed::rng(spec.seed);
    let mut values = vec![0.0; layout.param_count];
    for plan in &layout.plans {
        let (fan_in, fan_out, n_weights) = match plan.layer {
            Layer::Dense { input, output } => (input, output, input * output),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let k2 = kernel * kernel;
                (in_channels * k2, out_channels * k2, out_channels * in_channels * k2)
            }
            _ => continue,
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut values[plan.offset..plan.offset + n_weights] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(WeightVector::new(values))
}
