//! Image sets, baselines and the seeded reference models.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph};
use crate::rng::{mix, Stream};
use crate::tensor::Tensor;

/// Images of one shape, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    images: Vec<Tensor>,
    labels: Vec<usize>,
    source_id: String,
}

impl ImageSet {
    /// `labels` is either empty (unlabeled) or one per image.
    pub fn new(shape: [usize; 3], images: Vec<Tensor>, labels: Vec<usize>, source_id: impl Into<String>) -> Result<Self> {
        if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                found: bad.shape().to_vec(),
            });
        }
        if !labels.is_empty() && labels.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(ImageSet {
            shape,
            images,
            labels,
            source_id: source_id.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.get(i).copied()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        if !self.labels.is_empty() {
            self.labels.truncate(n);
        }
    }
}

/// Replacement value for absent pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// One constant per channel.
    ChannelMean(Vec<f64>),
    /// A full per-pixel mean image.
    MeanImage(Tensor),
}

impl Baseline {
    pub fn zero(channels: usize) -> Self {
        Baseline::ChannelMean(vec![0.0; channels])
    }

    /// Baseline value of `(channel, y, x)`.
    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        match self {
            Baseline::ChannelMean(means) => means[c],
            Baseline::MeanImage(img) => {
                let s = img.shape();
                img.data()[(c * s[1] + y) * s[2] + x]
            }
        }
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let ok = match self {
            Baseline::ChannelMean(m) => m.len() == shape[0],
            Baseline::MeanImage(img) => img.shape() == shape,
        };
        if ok {
            Ok(())
        } else {
            let found = match self {
                Baseline::ChannelMean(m) => vec![m.len()],
                Baseline::MeanImage(img) => img.shape().to_vec(),
            };
            Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                found,
            })
        }
    }

    /// The image whose every pixel is the baseline.
    pub fn image(&self, shape: [usize; 3]) -> Tensor {
        match self {
            Baseline::MeanImage(img) => img.clone(),
            Baseline::ChannelMean(means) => {
                let [c, h, w] = shape;
                let mut data = Vec::with_capacity(c * h * w);
                for &m in means.iter().take(c) {
                    data.extend(core::iter::repeat_n(m, h * w));
                }
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }

    /// Copy of `image` with every pixel where `mask[y*w + x]` is true set to
    /// the baseline.
    pub fn apply(&self, image: &Tensor, mask: &[bool]) -> Tensor {
        let (c, h, w) = image.chw().expect("rank-3 image");
        let mut out = image.clone();
        let data = out.data_mut();
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (y, x) = (p / w, p % w);
            for ch in 0..c {
                data[(ch * h + y) * w + x] = self.value(ch, y, x);
            }
        }
        out
    }

    pub fn channel_means(&self) -> Vec<f64> {
        match self {
            Baseline::ChannelMean(m) => m.clone(),
            Baseline::MeanImage(img) => {
                let (c, h, w) = img.chw().expect("rank 3");
                (0..c)
                    .map(|ch| img.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                    .collect()
            }
        }
    }
}

/// Adds per-image partial sums in sorted order so the result does not depend
/// on the order of the images.
fn order_free_sum(mut parts: Vec<f64>) -> f64 {
    parts.sort_by(f64::total_cmp);
    parts.iter().sum()
}

/// Per-channel arithmetic mean over all pixels of all images.
pub fn compute_baseline(images: &ImageSet) -> Result<Baseline> {
    if images.is_empty() {
        return Err(Error::EmptySet);
    }
    let [c, h, w] = images.shape();
    let count = (images.len() * h * w) as f64;
    let means = (0..c)
        .map(|ch| {
            let parts = images
                .images()
                .iter()
                .map(|im| im.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>())
                .collect();
            order_free_sum(parts) / count
        })
        .collect();
    Ok(Baseline::ChannelMean(means))
}

/// Per-pixel mean image (sensitivity-check mode).
pub fn compute_mean_image(images: &ImageSet) -> Result<Baseline> {
    if images.is_empty() {
        return Err(Error::EmptySet);
    }
    let shape = images.shape();
    let n = shape.iter().product::<usize>();
    let count = images.len() as f64;
    let data = (0..n)
        .map(|i| order_free_sum(images.images().iter().map(|im| im.data()[i]).collect()) / count)
        .collect();
    Ok(Baseline::MeanImage(Tensor::from_parts(shape.to_vec(), data)))
}

/// The built-in reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceModel {
    /// `flatten(1×3×3) → dense(9→8) → relu → dense(8→4)`: nine players, small
    /// enough for exact Shapley enumeration.
    TinyMlp9,
    /// `conv(3→8, 3×3, pad 1) → relu → maxpool(2) → conv(8→16, 3×3, pad 1) →
    /// relu → global_avg_pool → dense(16→10)` on 3×32×32 inputs.
    MiniCnn32,
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

impl ReferenceModel {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceModel::TinyMlp9 => "TinyMLP-9",
            ReferenceModel::MiniCnn32 => "MiniCNN-32",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "TinyMLP-9" => Ok(ReferenceModel::TinyMlp9),
            "MiniCNN-32" => Ok(ReferenceModel::MiniCnn32),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// One parameter tensor drawn from `Stream::new(mix(seed, slot))`.
fn synth_param(seed: u64, slot: u64, shape: &[usize], fan_in: usize) -> Tensor {
    let mut s = Stream::new(mix(seed, slot));
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = f64::from(s.next_u32()) / 4_294_967_296.0;
            ((2.0 * u - 1.0) * bound) as f32 as f64
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn synth_dense(seed: u64, layer: u64, out: usize, inp: usize) -> Layer {
    Layer::Dense {
        weight: synth_param(seed, 2 * layer, &[out, inp], inp),
        bias: synth_param(seed, 2 * layer + 1, &[out], inp),
    }
}

fn synth_conv(seed: u64, layer: u64, out: usize, inp: usize) -> Layer {
    Layer::Conv2d {
        weight: synth_param(seed, 2 * layer, &[out, inp, 3, 3], inp * 9),
        bias: synth_param(seed, 2 * layer + 1, &[out], inp * 9),
        padding: 1,
    }
}

/// Builds a reference model with weights drawn deterministically from `seed`.
///
/// Parameter tensor `p` of layer `l` reads a [`Stream`] seeded with
/// `mix(seed, 2·l + p)` (weight `p = 0`, bias `p = 1`). Each value is
/// `(2u − 1)/sqrt(fan_in)` with `u = next_u32 / 2³²`, rounded to `f32` and
/// widened back, so the in-memory model is exactly what the on-disk format
/// stores.
pub fn build_reference_model(model: ReferenceModel, seed: u64) -> ModelGraph {
    match model {
        ReferenceModel::TinyMlp9 => {
            let layers = vec![Layer::Flatten, synth_dense(seed, 1, 8, 9), Layer::Relu, synth_dense(seed, 3, 4, 8)];
            ModelGraph::new([1, 3, 3], layers, Vec::new()).expect("valid reference architecture")
        }
        ReferenceModel::MiniCnn32 => {
            let layers = vec![
                synth_conv(seed, 0, 8, 3),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                synth_conv(seed, 3, 16, 8),
                Layer::Relu,
                Layer::GlobalAvgPool,
                synth_dense(seed, 6, 10, 16),
            ];
            let names = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
            ModelGraph::new([3, 32, 32], layers, names).expect("valid reference architecture")
        }
    }
}
