//! The library forward pass against a straight-line re-implementation that
//! shares no code with it, plus logits frozen from that re-implementation.

mod common;

use attrib_core::model::Layer;
use attrib_core::{forward, ModelGraph, Tensor};
use common::{cnn, random_image, tiny};

/// Naive loops over `(channel, row, column)` straight from the layer
/// definitions.
fn straight_line(model: &ModelGraph, image: &Tensor) -> Vec<f64> {
    let mut shape = image.shape().to_vec();
    let mut x = image.data().to_vec();
    for layer in model.layers() {
        match layer {
            Layer::Conv2d { weight, bias, padding } => {
                let (co, ci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let (h, w) = (shape[1], shape[2]);
                let p = *padding as isize;
                let (oh, ow) = (h + 2 * padding + 1 - k, w + 2 * padding + 1 - k);
                let mut out = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for y in 0..oh {
                        for z in 0..ow {
                            let mut s = bias.data()[o];
                            for c in 0..ci {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let (iy, ix) = (y as isize + dy as isize - p, z as isize + dx as isize - p);
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let wv = weight.data()[((o * ci + c) * k + dy) * k + dx];
                                        s += wv * x[(c * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + y) * ow + z] = s;
                        }
                    }
                }
                x = out;
                shape = vec![co, oh, ow];
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::MaxPool2d { size } => {
                let (c, h, w) = (shape[0], shape[1] / size, shape[2] / size);
                let mut out = vec![f64::NEG_INFINITY; c * h * w];
                for ch in 0..c {
                    for y in 0..h * size {
                        for z in 0..w * size {
                            let o = &mut out[(ch * h + y / size) * w + z / size];
                            *o = o.max(x[(ch * shape[1] + y) * shape[2] + z]);
                        }
                    }
                }
                x = out;
                shape = vec![c, h, w];
            }
            Layer::GlobalAvgPool => {
                let area = shape[1] * shape[2];
                x = x.chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
                shape = vec![x.len()];
            }
            Layer::Flatten => shape = vec![x.len()],
            Layer::Dense { weight, bias } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                x = (0..rows)
                    .map(|r| bias.data()[r] + (0..cols).map(|c| weight.data()[r * cols + c] * x[c]).sum::<f64>())
                    .collect();
                shape = vec![rows];
            }
        }
    }
    x
}

#[test]
fn forward_matches_the_straight_line_version() {
    for (model, seeds) in [(tiny(), 0..20), (cnn(), 0..5)] {
        for seed in seeds {
            let image = random_image(model.input_shape(), seed);
            let want = straight_line(&model, &image);
            let got = forward(&model, &image).unwrap().logits().data().to_vec();
            common::assert_close(&got, &want, 1e-12);
        }
    }
}

/// MiniCNN-32 (seed 42) on the all-zeros image, as computed by
/// `straight_line` when it was first checked against the library.
const ZERO_IMAGE_LOGITS: [f64; 10] = [
    -0.011536908315758976,
    -0.16875273577947472,
    0.1216189701318209,
    -0.0843549573844703,
    0.15340253571193743,
    0.17133846544253914,
    0.2359356039770668,
    0.077676216235132,
    -0.038350454589222545,
    -0.1543938377615324,
];

#[test]
fn mini_cnn_zero_image_logits() {
    let model = cnn();
    let zeros = Tensor::zeros(&[3, 32, 32]);
    let got = forward(&model, &zeros).unwrap().logits().data().to_vec();
    common::assert_close(&got, &ZERO_IMAGE_LOGITS, 1e-12);
}
