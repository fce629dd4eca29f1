use alloc::vec::Vec;

use super::{pixel_domain, AttributionMap, Method};
use crate::backward::{grad_input, guided_grad_input, lrp_epsilon};
use crate::error::Result;
use crate::forward::forward;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const DEFAULT_LRP_EPSILON: f64 = 1.0;

/// Largest magnitude across channels, per pixel.
fn channel_max_abs(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = t.chw().expect("rank-3 input gradient");
    let d = t.data();
    (0..h * w)
        .map(|p| (0..c).map(|ch| d[ch * h * w + p].abs()).fold(0.0, f64::max))
        .collect()
}

fn channel_sum(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = t.chw().expect("rank-3 input gradient");
    let d = t.data();
    (0..h * w).map(|p| (0..c).map(|ch| d[ch * h * w + p]).sum()).collect()
}

fn build(model: &ModelGraph, data: Vec<f64>, method: Method, target: usize) -> Result<AttributionMap> {
    AttributionMap::new(
        pixel_domain(model),
        Tensor::new(vec_hw(model), data)?,
        method,
        target,
        method.sign(),
    )
}

fn vec_hw(model: &ModelGraph) -> Vec<usize> {
    let [_, h, w] = model.input_shape();
    alloc::vec![h, w]
}

/// `max_c |∂logit/∂x_c|`.
pub fn explain_grad(model: &ModelGraph, image: &Tensor, target: usize) -> Result<AttributionMap> {
    let trace = forward(model, image)?;
    let g = grad_input(&trace, target)?;
    build(model, channel_max_abs(&g), Method::Grad, target)
}

/// `Σ_c x_c · ∂logit/∂x_c`.
pub fn explain_gi(model: &ModelGraph, image: &Tensor, target: usize) -> Result<AttributionMap> {
    let trace = forward(model, image)?;
    let g = grad_input(&trace, target)?;
    let prod = Tensor::new(
        image.shape().to_vec(),
        g.data().iter().zip(image.data()).map(|(a, b)| a * b).collect(),
    )?;
    build(model, channel_sum(&prod), Method::GradInput, target)
}

/// Guided backpropagation with Grad's channel rule.
pub fn explain_gb(model: &ModelGraph, image: &Tensor, target: usize) -> Result<AttributionMap> {
    let trace = forward(model, image)?;
    let g = guided_grad_input(&trace, target)?;
    build(model, channel_max_abs(&g), Method::GuidedBackprop, target)
}

/// Channel-summed LRP-ε relevance.
pub fn explain_lrp(model: &ModelGraph, image: &Tensor, target: usize, epsilon: f64) -> Result<AttributionMap> {
    let trace = forward(model, image)?;
    let r = lrp_epsilon(&trace, target, epsilon)?;
    build(model, channel_sum(&r), Method::Lrp, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::SignInfo;
    use crate::model::Layer;
    use alloc::vec;

    fn linear_rgb() -> ModelGraph {
        // 3 channels x 1 x 2 pixels, two classes.
        ModelGraph::new(
            [3, 1, 2],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![2, 6], vec![0.2, 0.3, -0.5, 0.1, 0.1, -0.9, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn grad_takes_channel_max_magnitude() {
        let m = linear_rgb();
        // Pixel 0 sees channel gradients (0.2, -0.5, 0.1).
        for x in [0.0, 0.7] {
            let map = explain_grad(&m, &Tensor::filled(&[3, 1, 2], x), 0).unwrap();
            assert_eq!(map.data(), &[0.5, 0.9]);
            assert_eq!(map.sign(), SignInfo::Nonneg);
        }
    }

    #[test]
    fn gi_sums_channels() {
        let m = ModelGraph::new(
            [3, 1, 1],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![1, 3], vec![0.2, -0.5, 9.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec![],
        )
        .unwrap();
        let map = explain_gi(&m, &Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 0.0]).unwrap(), 0).unwrap();
        assert!((map.data()[0] + 0.8).abs() < 1e-15);
        let zero = explain_gi(&m, &Tensor::zeros(&[3, 1, 1]), 0).unwrap();
        assert_eq!(zero.data(), &[0.0]);
    }

    #[test]
    fn gb_matches_grad_on_linear_model() {
        let m = linear_rgb();
        let x = Tensor::filled(&[3, 1, 2], 0.3);
        assert_eq!(explain_gb(&m, &x, 1).unwrap().data(), explain_grad(&m, &x, 1).unwrap().data());
    }

    #[test]
    fn gb_zero_when_all_units_dead() {
        let m = ModelGraph::new(
            [1, 1, 2],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap(),
                    bias: Tensor::new(vec![2], vec![-10.0, -10.0]).unwrap(),
                },
                Layer::Relu,
                Layer::Dense {
                    weight: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec![],
        )
        .unwrap();
        let map = explain_gb(&m, &Tensor::filled(&[1, 1, 2], 0.5), 0).unwrap();
        assert_eq!(map.data(), &[0.0, 0.0]);
    }
}
