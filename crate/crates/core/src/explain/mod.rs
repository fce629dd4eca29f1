//! Attribution methods.
//!
//! Every explainer maps `(model, image, target)` to an [`AttributionMap`].
//! Gradient-family methods explain the pre-softmax logit of `target`.

mod cam;
mod gradient;
mod lime;
mod pert;

use alloc::format;
use alloc::string::String;
use alloc::vec;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::reference::Baseline;
use crate::shapley::{sampled_shapley_with, Permutations, PixelGame, Sequential, TaskRunner};
use crate::tensor::Tensor;

pub use cam::{cam_weighted_sum, explain_cam, explain_gradcam, gradcam_weighted_sum};
pub use gradient::{explain_gb, explain_gi, explain_grad, explain_lrp, DEFAULT_LRP_EPSILON};
pub use lime::{explain_lime, LimeConfig};
pub use pert::{explain_pert, PertConfig};

/// What an attribution map is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDomain {
    /// One value per input pixel.
    Pixel { height: usize, width: usize },
    /// One value per spatial cell of an intermediate feature map.
    Feature { layer: usize, height: usize, width: usize },
}

impl MapDomain {
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            MapDomain::Pixel { height, width } | MapDomain::Feature { height, width, .. } => (height, width),
        }
    }

    pub fn is_pixel(&self) -> bool {
        matches!(self, MapDomain::Pixel { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignInfo {
    Signed,
    Nonneg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Grad,
    GradInput,
    GuidedBackprop,
    Lrp,
    Lime,
    Pert,
    Cam,
    GradCam,
    SampledShapley,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Grad,
        Method::GradInput,
        Method::GuidedBackprop,
        Method::Lrp,
        Method::Lime,
        Method::Pert,
        Method::Cam,
        Method::GradCam,
        Method::SampledShapley,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::GradInput => "gi",
            Method::GuidedBackprop => "gb",
            Method::Lrp => "lrp",
            Method::Lime => "lime",
            Method::Pert => "pert",
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::SampledShapley => "shapley",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Sign tag of the maps this method produces.
    pub fn sign(self) -> SignInfo {
        match self {
            Method::Grad | Method::GuidedBackprop | Method::Pert | Method::Cam | Method::GradCam => SignInfo::Nonneg,
            _ => SignInfo::Signed,
        }
    }

    pub fn is_pixel_domain(self) -> bool {
        !matches!(self, Method::Cam | Method::GradCam)
    }
}

/// Signed or nonnegative attribution values over a pixel or feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    domain: MapDomain,
    values: Tensor,
    method: Method,
    target: usize,
    sign: SignInfo,
}

impl AttributionMap {
    /// Checks shape against `domain`, finiteness, and the absence of
    /// negative entries in nonneg maps.
    pub fn new(domain: MapDomain, values: Tensor, method: Method, target: usize, sign: SignInfo) -> Result<Self> {
        let (h, w) = domain.dims();
        if values.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                found: values.shape().to_vec(),
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("attribution map"));
        }
        if sign == SignInfo::Nonneg && values.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{} map is tagged nonneg but has negative entries",
                method.name()
            )));
        }
        Ok(AttributionMap {
            domain,
            values,
            method,
            target,
            sign,
        })
    }

    /// A pixel-domain map built from a flat row-major buffer.
    pub fn pixel(height: usize, width: usize, data: alloc::vec::Vec<f64>, method: Method, target: usize, sign: SignInfo) -> Result<Self> {
        let values = Tensor::new(vec![height, width], data)?;
        Self::new(MapDomain::Pixel { height, width }, values, method, target, sign)
    }

    pub fn domain(&self) -> MapDomain {
        self.domain
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn sign(&self) -> SignInfo {
        self.sign
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same metadata, every value multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {c}")));
        }
        Self::new(self.domain, self.values.scale(c), self.method, self.target, self.sign)
    }

    pub(crate) fn require_pixel(&self, what: &str) -> Result<(usize, usize)> {
        match self.domain {
            MapDomain::Pixel { height, width } => Ok((height, width)),
            MapDomain::Feature { .. } => Err(Error::DomainMismatch(format!(
                "{what} needs a pixel-domain map, {} is feature-domain",
                self.method.name()
            ))),
        }
    }
}

pub(crate) fn pixel_domain(model: &ModelGraph) -> MapDomain {
    let [_, height, width] = model.input_shape();
    MapDomain::Pixel { height, width }
}

/// Sampled-Shapley explainer: the permutation estimate of every pixel's
/// Shapley value for `logit[target]`.
pub fn explain_sampled_shapley(
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    m: usize,
    seed: u64,
) -> Result<AttributionMap> {
    explain_sampled_shapley_with(&Sequential, model, image, baseline, target, m, Permutations::Random { seed })
}

pub fn explain_sampled_shapley_with<R: TaskRunner + ?Sized>(
    runner: &R,
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    m: usize,
    source: Permutations,
) -> Result<AttributionMap> {
    let game = PixelGame::new(model, image, baseline, target)?;
    let est = sampled_shapley_with(runner, &game, m, source)?;
    let [_, h, w] = model.input_shape();
    AttributionMap::pixel(h, w, est.values, Method::SampledShapley, target, SignInfo::Signed)
}

/// A configured explainer.
#[derive(Debug, Clone, PartialEq)]
pub enum Explainer {
    Grad,
    GradInput,
    GuidedBackprop,
    Lrp { epsilon: f64 },
    Lime(LimeConfig),
    Pert(PertConfig),
    Cam,
    GradCam,
    SampledShapley { m: usize },
}

impl Explainer {
    /// Default configuration of `method`.
    pub fn default_for(method: Method) -> Explainer {
        match method {
            Method::Grad => Explainer::Grad,
            Method::GradInput => Explainer::GradInput,
            Method::GuidedBackprop => Explainer::GuidedBackprop,
            Method::Lrp => Explainer::Lrp {
                epsilon: DEFAULT_LRP_EPSILON,
            },
            Method::Lime => Explainer::Lime(LimeConfig::default()),
            Method::Pert => Explainer::Pert(PertConfig::default()),
            Method::Cam => Explainer::Cam,
            Method::GradCam => Explainer::GradCam,
            Method::SampledShapley => Explainer::SampledShapley { m: 1000 },
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Explainer::Grad => Method::Grad,
            Explainer::GradInput => Method::GradInput,
            Explainer::GuidedBackprop => Method::GuidedBackprop,
            Explainer::Lrp { .. } => Method::Lrp,
            Explainer::Lime(_) => Method::Lime,
            Explainer::Pert(_) => Method::Pert,
            Explainer::Cam => Method::Cam,
            Explainer::GradCam => Method::GradCam,
            Explainer::SampledShapley { .. } => Method::SampledShapley,
        }
    }

    /// Runs the explainer. `seed` only matters for LIME, Pert and sampled
    /// Shapley; `baseline` only for those three.
    pub fn explain(&self, model: &ModelGraph, image: &Tensor, baseline: &Baseline, target: usize, seed: u64) -> Result<AttributionMap> {
        match self {
            Explainer::Grad => explain_grad(model, image, target),
            Explainer::GradInput => explain_gi(model, image, target),
            Explainer::GuidedBackprop => explain_gb(model, image, target),
            Explainer::Lrp { epsilon } => explain_lrp(model, image, target, *epsilon),
            Explainer::Lime(cfg) => explain_lime(model, image, baseline, target, cfg, seed),
            Explainer::Pert(cfg) => explain_pert(model, image, baseline, target, cfg, seed),
            Explainer::Cam => explain_cam(model, image, target),
            Explainer::GradCam => explain_gradcam(model, image, target),
            Explainer::SampledShapley { m } => explain_sampled_shapley(model, image, baseline, target, *m, seed),
        }
    }
}

/// Human-readable label such as `lime(grid_k=4)`.
pub fn describe(explainer: &Explainer) -> String {
    match explainer {
        Explainer::Lrp { epsilon } => format!("lrp(epsilon={epsilon})"),
        Explainer::Lime(c) => format!(
            "lime(grid_k={}, n_samples={}, kernel_width={}, ridge_lambda={})",
            c.grid_k, c.n_samples, c.kernel_width, c.ridge_lambda
        ),
        Explainer::Pert(c) => format!("pert(lambda_l1={}, steps={}, lr={})", c.lambda_l1, c.steps, c.lr),
        Explainer::SampledShapley { m } => format!("shapley(m={m})"),
        other => String::from(other.method().name()),
    }
}
