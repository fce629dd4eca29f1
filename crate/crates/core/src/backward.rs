//! Backward regimes over a cached trace: true gradient, guided gradient and
//! LRP-ε relevance.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forward::{pool_winner, ActivationTrace};
use crate::model::{Layer, LayerRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Gradient,
    Guided,
}

/// ∂logit[target]/∂input.
pub fn grad_input(trace: &ActivationTrace<'_>, target: usize) -> Result<Tensor> {
    backprop(trace, target, 0, Mode::Gradient)
}

/// Guided backpropagation: ReLUs pass a signal only when both the forward
/// pre-activation and the incoming signal are positive.
pub fn guided_grad_input(trace: &ActivationTrace<'_>, target: usize) -> Result<Tensor> {
    backprop(trace, target, 0, Mode::Guided)
}

/// ∂logit[target]/∂(output of `layer`).
pub fn grad_at(trace: &ActivationTrace<'_>, target: usize, layer: LayerRef) -> Result<Tensor> {
    let idx = trace.model().resolve(layer)?;
    backprop(trace, target, idx + 1, Mode::Gradient)
}

/// Propagates from the logits down to the input of layer `stop`.
fn backprop(trace: &ActivationTrace<'_>, target: usize, stop: usize, mode: Mode) -> Result<Tensor> {
    let model = trace.model();
    model.check_target(target)?;
    let layers = model.layers();
    let mut g = Tensor::zeros(&[model.num_classes()]);
    g.data_mut()[target] = 1.0;
    for l in (stop..layers.len()).rev() {
        let x = trace.layer_input(l);
        g = match &layers[l] {
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&pre, &up)| {
                        let blocked = pre <= 0.0 || (mode == Mode::Guided && up < 0.0);
                        if blocked {
                            0.0
                        } else {
                            up
                        }
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            layer => linear_backward(layer, x, &g),
        };
    }
    Ok(g)
}

/// Transposed action of a layer that is linear given the forward input
/// (max pooling routes through the stored winner). Biases do not enter.
fn linear_backward(layer: &Layer, x: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    match layer {
        Layer::Dense { weight, .. } => {
            let cols = weight.shape()[1];
            let o = out.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                for (oi, &w) in o.iter_mut().zip(&weight.data()[j * cols..(j + 1) * cols]) {
                    *oi += w * gj;
                }
            }
        }
        Layer::Conv2d { weight, padding, .. } => {
            let &[co_n, ci_n, k, _] = weight.shape() else {
                unreachable!("validated conv weight")
            };
            let (_, h, w) = x.chw().expect("rank 3");
            let (_, oh, ow) = g.chw().expect("rank 3");
            let (wd, gd) = (weight.data(), g.data());
            let o = out.data_mut();
            let p = *padding;
            for co in 0..co_n {
                for oy in 0..oh {
                    let ky0 = p.saturating_sub(oy);
                    let ky1 = k.min(h + p - oy);
                    for ox in 0..ow {
                        let gv = gd[(co * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let kx0 = p.saturating_sub(ox);
                        let kx1 = k.min(w + p - ox);
                        for ci in 0..ci_n {
                            let wbase = (co * ci_n + ci) * k * k;
                            for ky in ky0..ky1 {
                                let orow = (ci * h + oy + ky - p) * w;
                                for kx in kx0..kx1 {
                                    o[orow + ox + kx - p] += wd[wbase + ky * k + kx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Layer::MaxPool2d { size } => {
            let (c, h, w) = x.chw().expect("rank 3");
            let (_, oh, ow) = g.chw().expect("rank 3");
            let o = out.data_mut();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (src, _) = pool_winner(x.data(), ch, h, w, oy, ox, *size);
                        o[src] += g.data()[(ch * oh + oy) * ow + ox];
                    }
                }
            }
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = x.chw().expect("rank 3");
            let area = (h * w) as f64;
            let o = out.data_mut();
            for ch in 0..c {
                let v = g.data()[ch] / area;
                o[ch * h * w..(ch + 1) * h * w].fill(v);
            }
        }
        Layer::Flatten | Layer::Relu => out.data_mut().copy_from_slice(g.data()),
    }
    out
}

/// LRP-ε relevance of every input cell for `logit[target]`.
///
/// Dense and conv layers redistribute relevance in proportion to each
/// contribution `x_i·w_ji` over the stabilised pre-activation
/// `z_j + ε·sign(z_j)` with `sign(0) = +1`. ReLU and flatten pass relevance
/// through, max pooling hands it to the window winner and global average
/// pooling splits it uniformly. A zero denominator (only possible with
/// `ε = 0`) forwards nothing.
pub fn lrp_epsilon(trace: &ActivationTrace<'_>, target: usize, epsilon: f64) -> Result<Tensor> {
    let model = trace.model();
    model.check_target(target)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "epsilon must be a finite non-negative number, got {epsilon}"
        )));
    }
    let layers = model.layers();
    let mut r = Tensor::zeros(&[model.num_classes()]);
    r.data_mut()[target] = trace.logit(target);
    for l in (0..layers.len()).rev() {
        let x = trace.layer_input(l);
        r = match &layers[l] {
            layer @ (Layer::Dense { .. } | Layer::Conv2d { .. }) => {
                let z = &trace.outputs()[l];
                let s: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&zj, &rj)| {
                        let denom = zj + if zj >= 0.0 { epsilon } else { -epsilon };
                        if denom == 0.0 {
                            0.0
                        } else {
                            rj / denom
                        }
                    })
                    .collect();
                let c = linear_backward(layer, x, &Tensor::from_parts(z.shape().to_vec(), s));
                let data = c.data().iter().zip(x.data()).map(|(ci, xi)| ci * xi).collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            layer => linear_backward(layer, x, &r),
        };
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;
    use crate::model::ModelGraph;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn dense(out: usize, inp: usize, w: &[f64], b: &[f64]) -> Layer {
        Layer::Dense {
            weight: t(&[out, inp], w),
            bias: t(&[out], b),
        }
    }

    #[test]
    fn linear_gradient_is_weights() {
        let m = ModelGraph::new([1, 1, 2], vec![Layer::Flatten, dense(1, 2, &[1.0, -2.0], &[0.5])], vec![]).unwrap();
        for x in [[3.0, 4.0], [-7.0, 0.25]] {
            let trace = forward(&m, &t(&[1, 1, 2], &x)).unwrap();
            assert_eq!(grad_input(&trace, 0).unwrap().data(), &[1.0, -2.0]);
        }
        let trace = forward(&m, &t(&[1, 1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(grad_input(&trace, 1), Err(Error::TargetOutOfRange { target: 1, classes: 1 }));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        // Hidden unit 0 sees -x0 (dead for x0 > 0), unit 1 sees x1.
        let m = ModelGraph::new(
            [1, 1, 2],
            vec![
                Layer::Flatten,
                dense(2, 2, &[-1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]),
                Layer::Relu,
                dense(1, 2, &[1.0, 1.0], &[0.0]),
            ],
            vec![],
        )
        .unwrap();
        let trace = forward(&m, &t(&[1, 1, 2], &[2.0, 3.0])).unwrap();
        assert_eq!(grad_input(&trace, 0).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn guided_clamps() {
        // Single ReLU between two scalar dense layers; the top weight sets the
        // sign of the upstream signal.
        let net = |top: f64| {
            ModelGraph::new(
                [1, 1, 1],
                vec![
                    Layer::Flatten,
                    dense(1, 1, &[1.0], &[0.0]),
                    Layer::Relu,
                    dense(1, 1, &[top], &[0.0]),
                ],
                vec![],
            )
            .unwrap()
        };
        let neg_up = net(-1.0);
        let trace = forward(&neg_up, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(grad_input(&trace, 0).unwrap().data(), &[-1.0]);
        assert_eq!(guided_grad_input(&trace, 0).unwrap().data(), &[0.0]);

        let pos_up = net(1.0);
        let dead = forward(&pos_up, &t(&[1, 1, 1], &[-2.0])).unwrap();
        assert_eq!(guided_grad_input(&dead, 0).unwrap().data(), &[0.0]);
        let live = forward(&pos_up, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(guided_grad_input(&live, 0).unwrap(), grad_input(&live, 0).unwrap());
    }

    #[test]
    fn lrp_proportional_redistribution() {
        let m = ModelGraph::new([1, 1, 2], vec![Layer::Flatten, dense(1, 2, &[2.0, 1.0], &[0.0])], vec![]).unwrap();
        let trace = forward(&m, &t(&[1, 1, 2], &[1.0, 1.0])).unwrap();
        let r = lrp_epsilon(&trace, 0, 0.0).unwrap();
        assert_eq!(r.data(), &[2.0, 1.0]);
    }

    #[test]
    fn lrp_zero_weights_give_zero_relevance() {
        let m = ModelGraph::new([1, 1, 3], vec![Layer::Flatten, dense(2, 3, &[0.0; 6], &[0.5, -1.0])], vec![]).unwrap();
        let trace = forward(&m, &t(&[1, 1, 3], &[1.0, 2.0, 3.0])).unwrap();
        for eps in [0.0, 1.0] {
            assert_eq!(lrp_epsilon(&trace, 0, eps).unwrap().data(), &[0.0; 3]);
        }
    }

    #[test]
    fn lrp_two_layer_hand_case() {
        // x = [1, 2]
        // hidden: z1 = 1·1 + 1·2 = 3, z2 = 2·1 − 1·2 + 1 = 1, both live
        // top:    y  = 1·3 + 2·1 = 5
        // ε = 1:  s = 5 / (5 + 1) = 5/6
        //         R_h1 = 3·(5/6) = 5/2, R_h2 = 1·2·(5/6) = 5/3
        //         s1 = (5/2)/(3+1) = 5/8, s2 = (5/3)/(1+1) = 5/6
        //         R_x1 = 1·(1·5/8 + 2·5/6) = 5/8 + 5/3 = 55/24
        //         R_x2 = 2·(1·5/8 − 1·5/6) = 5/4 − 5/3 = −5/12
        let m = ModelGraph::new(
            [1, 1, 2],
            vec![
                Layer::Flatten,
                dense(2, 2, &[1.0, 1.0, 2.0, -1.0], &[0.0, 1.0]),
                Layer::Relu,
                dense(1, 2, &[1.0, 2.0], &[0.0]),
            ],
            vec![],
        )
        .unwrap();
        let trace = forward(&m, &t(&[1, 1, 2], &[1.0, 2.0])).unwrap();
        assert_eq!(trace.logit(0), 5.0);
        let r = lrp_epsilon(&trace, 0, 1.0).unwrap();
        let expected = [55.0 / 24.0, -5.0 / 12.0];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lrp_rejects_negative_epsilon() {
        let m = ModelGraph::new([1, 1, 1], vec![Layer::Flatten], vec![]).unwrap();
        let trace = forward(&m, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!(matches!(lrp_epsilon(&trace, 0, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn maxpool_routes_to_lowest_tied_winner() {
        let m = ModelGraph::new([1, 2, 2], vec![Layer::MaxPool2d { size: 2 }, Layer::Flatten], vec![]).unwrap();
        let trace = forward(&m, &t(&[1, 2, 2], &[1.0, 3.0, 3.0, 0.0])).unwrap();
        assert_eq!(grad_input(&trace, 0).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(lrp_epsilon(&trace, 0, 0.0).unwrap().data(), &[0.0, 3.0, 0.0, 0.0]);
    }
}
