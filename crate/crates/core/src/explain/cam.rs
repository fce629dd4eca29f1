use alloc::vec;
use alloc::vec::Vec;

use super::{AttributionMap, MapDomain, Method, SignInfo};
use crate::backward::grad_at;
use crate::error::{Error, Result};
use crate::forward::{forward, relu, ActivationTrace};
use crate::model::{Layer, LayerRef, ModelGraph};
use crate::tensor::Tensor;

/// `Σ_c weights[c] · feature[c]` over the spatial grid.
fn weighted_channel_sum(feature: &Tensor, weights: &[f64]) -> Vec<f64> {
    let (c, h, w) = feature.chw().expect("rank-3 feature");
    let d = feature.data();
    let mut out = vec![0.0; h * w];
    for (ch, &wc) in weights.iter().enumerate().take(c) {
        for (o, &f) in out.iter_mut().zip(&d[ch * h * w..(ch + 1) * h * w]) {
            *o += wc * f;
        }
    }
    out
}

/// Affine projection onto `[0, 1]`; a constant map becomes all zeros.
fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// CAM before normalisation: classifier weights of `target` applied to the
/// feature map entering global average pooling. Returns the feature-layer
/// index and the map.
pub fn cam_weighted_sum(trace: &ActivationTrace<'_>, target: usize) -> Result<(usize, Tensor)> {
    let model = trace.model();
    model.check_target(target)?;
    let (gap, dense) = model.cam_split().ok_or(Error::NotCamEligible)?;
    if gap == 0 {
        return Err(Error::NotCamEligible);
    }
    let Layer::Dense { weight, .. } = &model.layers()[dense] else {
        unreachable!("cam_split guarantees a dense classifier")
    };
    let cols = weight.shape()[1];
    let row = &weight.data()[target * cols..(target + 1) * cols];
    let feature = trace.layer_input(gap);
    let (_, h, w) = feature.chw().expect("rank-3 feature");
    Ok((gap - 1, Tensor::from_parts(vec![h, w], weighted_channel_sum(feature, row))))
}

/// Class activation map, min-max projected to `[0, 1]`.
pub fn explain_cam(model: &ModelGraph, image: &Tensor, target: usize) -> Result<AttributionMap> {
    if !model.is_cam_eligible() {
        return Err(Error::NotCamEligible);
    }
    let trace = forward(model, image)?;
    let (layer, raw) = cam_weighted_sum(&trace, target)?;
    let (height, width) = (raw.shape()[0], raw.shape()[1]);
    let mut data = raw.into_data();
    min_max(&mut data);
    AttributionMap::new(
        MapDomain::Feature { layer, height, width },
        Tensor::from_parts(vec![height, width], data),
        Method::Cam,
        target,
        SignInfo::Nonneg,
    )
}

/// Grad-CAM before the ReLU: channel weights are the spatial means of the
/// target logit's gradient at the last conv feature.
pub fn gradcam_weighted_sum(trace: &ActivationTrace<'_>, target: usize) -> Result<(usize, Tensor)> {
    let layer = trace.model().resolve(LayerRef::LastConv)?;
    let feature = trace.feature_at(LayerRef::Index(layer))?;
    let grad = grad_at(trace, target, LayerRef::Index(layer))?;
    let (c, h, w) = feature.chw().expect("conv output is rank 3");
    let alphas: Vec<f64> = (0..c)
        .map(|ch| grad.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    Ok((layer, Tensor::from_parts(vec![h, w], weighted_channel_sum(feature, &alphas))))
}

/// `ReLU(Σ_c α_c · feature_c)` at the last conv layer.
pub fn explain_gradcam(model: &ModelGraph, image: &Tensor, target: usize) -> Result<AttributionMap> {
    model.resolve(LayerRef::LastConv)?;
    let trace = forward(model, image)?;
    let (layer, raw) = gradcam_weighted_sum(&trace, target)?;
    let (height, width) = (raw.shape()[0], raw.shape()[1]);
    AttributionMap::new(
        MapDomain::Feature { layer, height, width },
        raw.map(relu),
        Method::GradCam,
        target,
        SignInfo::Nonneg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// conv(1→1, 1×1, weight 1) → relu → gap → dense(1→2).
    fn single_channel(dense_w: [f64; 2]) -> ModelGraph {
        ModelGraph::new(
            [1, 2, 2],
            vec![
                Layer::Conv2d {
                    weight: Tensor::filled(&[1, 1, 1, 1], 1.0),
                    bias: Tensor::zeros(&[1]),
                    padding: 0,
                },
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Dense {
                    weight: Tensor::new(vec![2, 1], dense_w.to_vec()).unwrap(),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn cam_single_channel_is_normalised_feature() {
        let m = single_channel([1.0, 0.0]);
        let img = Tensor::new(vec![1, 2, 2], vec![0.2, 0.6, 1.0, 0.4]).unwrap();
        let map = explain_cam(&m, &img, 0).unwrap();
        let expected = [0.0, 0.5, 1.0, 0.25];
        for (a, b) in map.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            map.domain(),
            MapDomain::Feature {
                layer: 1,
                height: 2,
                width: 2
            }
        );
    }

    #[test]
    fn cam_constant_feature_maps_to_zero() {
        let m = single_channel([1.0, 0.0]);
        let map = explain_cam(&m, &Tensor::filled(&[1, 2, 2], 0.7), 0).unwrap();
        assert_eq!(map.data(), &[0.0; 4]);
    }

    #[test]
    fn gradcam_zero_when_logit_ignores_features() {
        let m = single_channel([1.0, 0.0]);
        let img = Tensor::new(vec![1, 2, 2], vec![0.2, 0.6, 1.0, 0.4]).unwrap();
        assert_eq!(explain_gradcam(&m, &img, 1).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn gradcam_unit_gradients_sum_channels() {
        // Two-channel identity conv, GAP, dense weights 4 = H·W so that every
        // feature gradient equals 1.
        let m = ModelGraph::new(
            [2, 2, 2],
            vec![
                Layer::Conv2d {
                    weight: Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(&[2]),
                    padding: 0,
                },
                Layer::GlobalAvgPool,
                Layer::Dense {
                    weight: Tensor::new(vec![1, 2], vec![4.0, 4.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec![],
        )
        .unwrap();
        let img = Tensor::new(vec![2, 2, 2], vec![1.0, -2.0, 0.5, 0.0, 1.0, 1.0, -1.0, 0.25]).unwrap();
        let map = explain_gradcam(&m, &img, 0).unwrap();
        assert_eq!(map.data(), &[2.0, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn errors_on_ineligible_models() {
        let mlp = ModelGraph::new(
            [1, 1, 2],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::zeros(&[1, 2]),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec![],
        )
        .unwrap();
        let img = Tensor::zeros(&[1, 1, 2]);
        assert_eq!(explain_cam(&mlp, &img, 0), Err(Error::NotCamEligible));
        assert_eq!(explain_gradcam(&mlp, &img, 0), Err(Error::NoConvLayer));
    }
}
