//! Attribution methods for small ReLU image classifiers, a Shapley-value
//! oracle, and metrics that score attribution maps without ground truth.
//!
//! The crate is `no_std` and needs only `alloc`. Models are plain layer
//! lists evaluated in `f64`; see [`model::ModelGraph`].

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backward;
pub mod error;
pub mod explain;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod rng;
pub mod shapley;
pub mod tensor;

pub use error::{Error, Result};
pub use explain::{AttributionMap, Explainer, MapDomain, Method, SignInfo};
pub use forward::{forward, ActivationTrace, IncrementalForward};
pub use metrics::{Direction, HalfMask, PixelSelection};
pub use model::{Layer, LayerKind, LayerRef, ModelGraph};
pub use reference::{Baseline, ImageSet, ReferenceModel};
pub use shapley::{ShapleyEstimate, TaskRunner, ValueFunction};
pub use tensor::Tensor;
