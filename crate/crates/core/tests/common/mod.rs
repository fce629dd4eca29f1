#![allow(dead_code)]

use attrib_core::model::Layer;
use attrib_core::reference::{build_reference_model, ReferenceModel};
use attrib_core::rng::Stream;
use attrib_core::{ModelGraph, Tensor};

pub fn random_image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = Stream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

pub fn tiny() -> ModelGraph {
    build_reference_model(ReferenceModel::TinyMlp9, 42)
}

pub fn cnn() -> ModelGraph {
    build_reference_model(ReferenceModel::MiniCnn32, 42)
}

/// `flatten → dense(n→1)` with zero bias: every additive method should
/// return `w ⊙ (x − baseline)` on it.
pub fn linear_model(weights: &[f64], shape: [usize; 3]) -> ModelGraph {
    ModelGraph::new(
        shape,
        vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
        ],
        vec![],
    )
    .unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}
