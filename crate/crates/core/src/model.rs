//! Layer vocabulary and statically shape-checked layer graphs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer with its parameters.
///
/// Dense weights are `[out, in]`; conv weights are `[out, in, k, k]` with
/// stride 1 and symmetric zero padding. Max pooling uses a square window with
/// stride equal to the window size and drops any trailing remainder.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor, padding: usize },
    Relu,
    MaxPool2d { size: usize },
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "dense" => LayerKind::Dense,
            "conv2d" => LayerKind::Conv2d,
            "relu" => LayerKind::Relu,
            "maxpool2d" => LayerKind::MaxPool2d,
            "global_avg_pool" => LayerKind::GlobalAvgPool,
            "flatten" => LayerKind::Flatten,
            _ => return None,
        })
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Weight and bias tensors, in storage order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        match self {
            Layer::Dense { weight, bias } => {
                let &[out, inp] = weight.shape() else {
                    return bad(format!("dense weight must be rank 2, got {:?}", weight.shape()));
                };
                if bias.shape() != [out] {
                    return bad(format!("dense bias shape {:?} != [{out}]", bias.shape()));
                }
                if input != [inp] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![inp],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![out])
            }
            Layer::Conv2d { weight, bias, padding } => {
                let &[out, cin, kh, kw] = weight.shape() else {
                    return bad(format!("conv weight must be rank 4, got {:?}", weight.shape()));
                };
                if kh != kw {
                    return bad(format!("conv kernel must be square, got {kh}x{kw}"));
                }
                if bias.shape() != [out] {
                    return bad(format!("conv bias shape {:?} != [{out}]", bias.shape()));
                }
                let &[c, h, w] = input else {
                    return bad(format!("conv2d needs a rank-3 input, got {input:?}"));
                };
                if c != cin {
                    return Err(Error::ShapeMismatch {
                        expected: vec![cin, h, w],
                        found: input.to_vec(),
                    });
                }
                if h + 2 * padding < kh || w + 2 * padding < kw {
                    return bad(format!("conv kernel {kh} larger than padded input {input:?}"));
                }
                Ok(vec![out, h + 2 * padding - kh + 1, w + 2 * padding - kw + 1])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { size } => {
                let &[c, h, w] = input else {
                    return bad(format!("maxpool2d needs a rank-3 input, got {input:?}"));
                };
                if *size == 0 || h < *size || w < *size {
                    return bad(format!("maxpool window {size} invalid for {input:?}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            Layer::GlobalAvgPool => {
                let &[c, _, _] = input else {
                    return bad(format!("global_avg_pool needs a rank-3 input, got {input:?}"));
                };
                Ok(vec![c])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Symbolic or numeric reference to a layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Index(usize),
    /// Output of the last conv layer, taken after its ReLU when one follows
    /// immediately.
    LastConv,
    /// The logits.
    Last,
}

/// An ordered, shape-checked stack of layers ending in a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    output_shapes: Vec<Vec<usize>>,
    class_names: Vec<String>,
}

impl ModelGraph {
    /// Validates the layer stack against `input_shape` (channels, height,
    /// width). The last layer must produce a rank-1 logit vector with one
    /// entry per class name; pass an empty `class_names` to get `class0..`.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, class_names: Vec<String>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("input shape {input_shape:?} has a zero dimension")));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for layer in &layers {
            for p in layer.params() {
                if !p.is_finite() {
                    return Err(Error::NonFinite("model parameters"));
                }
            }
        }
        let mut shape = input_shape.to_vec();
        let mut output_shapes = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| match e {
                Error::InvalidModel(msg) => Error::InvalidModel(format!("layer {i}: {msg}")),
                other => other,
            })?;
            output_shapes.push(shape.clone());
        }
        let &[classes] = shape.as_slice() else {
            return Err(Error::InvalidModel(format!("final output must be rank 1, got {shape:?}")));
        };
        let class_names = if class_names.is_empty() {
            (0..classes).map(|i| format!("class{i}")).collect()
        } else {
            class_names
        };
        if class_names.len() != classes {
            return Err(Error::InvalidModel(format!(
                "{} class names for {classes} outputs",
                class_names.len()
            )));
        }
        Ok(ModelGraph {
            layers,
            input_shape,
            output_shapes,
            class_names,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    /// Shape of the tensor fed into `layer`.
    pub fn input_shape_of(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[layer - 1]
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn pixel_count(&self) -> usize {
        self.input_shape[1] * self.input_shape[2]
    }

    pub fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.num_classes() {
            return Err(Error::TargetOutOfRange {
                target,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Tail is exactly `[global_avg_pool, flatten?, dense]`.
    pub fn is_cam_eligible(&self) -> bool {
        self.cam_split().is_some()
    }

    /// Index of the global pooling layer and of the classifier for
    /// CAM-eligible models.
    pub(crate) fn cam_split(&self) -> Option<(usize, usize)> {
        let kinds: Vec<LayerKind> = self.layers.iter().map(Layer::kind).collect();
        let n = kinds.len();
        if n >= 2 && kinds[n - 1] == LayerKind::Dense {
            if kinds[n - 2] == LayerKind::GlobalAvgPool {
                return Some((n - 2, n - 1));
            }
            if n >= 3 && kinds[n - 2] == LayerKind::Flatten && kinds[n - 3] == LayerKind::GlobalAvgPool {
                return Some((n - 3, n - 1));
            }
        }
        None
    }

    pub fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind() == LayerKind::Conv2d)
    }

    pub fn resolve(&self, layer: LayerRef) -> Result<usize> {
        match layer {
            LayerRef::Index(i) if i < self.layers.len() => Ok(i),
            LayerRef::Index(i) => Err(Error::LayerOutOfRange {
                layer: i,
                layers: self.layers.len(),
            }),
            LayerRef::Last => Ok(self.layers.len() - 1),
            LayerRef::LastConv => {
                let conv = self.last_conv().ok_or(Error::NoConvLayer)?;
                match self.layers.get(conv + 1) {
                    Some(Layer::Relu) => Ok(conv + 1),
                    _ => Ok(conv),
                }
            }
        }
    }

    /// Returns a copy whose classifier row for `target` (weights and bias) is
    /// multiplied by `factor`.
    pub fn with_scaled_logit(&self, target: usize, factor: f64) -> Result<ModelGraph> {
        self.check_target(target)?;
        let mut scaled = self.clone();
        match scaled.layers.last_mut() {
            Some(Layer::Dense { weight, bias }) => {
                let cols = weight.shape()[1];
                for v in &mut weight.data_mut()[target * cols..(target + 1) * cols] {
                    *v *= factor;
                }
                bias.data_mut()[target] *= factor;
                Ok(scaled)
            }
            _ => Err(Error::Unsupported("final layer is not dense".into())),
        }
    }
}
