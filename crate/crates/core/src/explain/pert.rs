use alloc::vec;

use super::{pixel_domain, AttributionMap, Method, SignInfo};
use crate::backward::grad_input;
use crate::error::{Error, Result};
use crate::forward::{check_input, forward};
use crate::model::ModelGraph;
use crate::reference::Baseline;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Settings of the perturbation-mask optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct PertConfig {
    pub lambda_l1: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PertConfig {
    fn default() -> Self {
        PertConfig {
            lambda_l1: 0.05,
            steps: 200,
            lr: 0.1,
        }
    }
}

/// Amplitude of the seeded jitter applied to the all-ones starting mask.
const INIT_JITTER: f64 = 0.01;

/// Learns a keep-mask `M ∈ [0,1]^{H×W}` minimising
/// `logit[target](M·I + (1−M)·B) + λ‖1−M‖₁` by projected gradient descent and
/// returns `1 − M`.
pub fn explain_pert(
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    cfg: &PertConfig,
    seed: u64,
) -> Result<AttributionMap> {
    check_input(model, image)?;
    model.check_target(target)?;
    baseline.check_shape(model.input_shape())?;
    let [c, h, w] = model.input_shape();
    let plane = h * w;
    let base = baseline.image(model.input_shape());
    let delta: alloc::vec::Vec<f64> = image.data().iter().zip(base.data()).map(|(x, b)| x - b).collect();

    let mut rng = Stream::new(seed);
    let mut mask: alloc::vec::Vec<f64> = (0..plane).map(|_| 1.0 - INIT_JITTER * rng.next_f64()).collect();
    let mut perturbed = Tensor::zeros(&[c, h, w]);
    for _ in 0..cfg.steps {
        for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
            *v = base.data()[i] + mask[i % plane] * delta[i];
        }
        let trace = forward(model, &perturbed)?;
        let removed: f64 = mask.iter().map(|m| 1.0 - m).sum();
        let loss = trace.logit(target) + cfg.lambda_l1 * removed;
        if !loss.is_finite() {
            return Err(Error::NonFinite("perturbation loss"));
        }
        let g = grad_input(&trace, target)?;
        for (p, m) in mask.iter_mut().enumerate() {
            let mut dm = -cfg.lambda_l1;
            for ch in 0..c {
                dm += g.data()[ch * plane + p] * delta[ch * plane + p];
            }
            *m = (*m - cfg.lr * dm).clamp(0.0, 1.0);
        }
    }
    let data = mask.iter().map(|m| 1.0 - m).collect();
    AttributionMap::new(
        pixel_domain(model),
        Tensor::new(vec![h, w], data)?,
        Method::Pert,
        target,
        SignInfo::Nonneg,
    )
}
