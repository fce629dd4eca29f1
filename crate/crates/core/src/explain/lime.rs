use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{pixel_domain, AttributionMap, Method, SignInfo};
use crate::error::{Error, Result};
use crate::forward::{check_input, run_logits};
use crate::model::ModelGraph;
use crate::reference::Baseline;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Settings of the grid-segment LIME surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct LimeConfig {
    /// Side length in pixels of each square segment.
    pub grid_k: usize,
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            grid_k: 4,
            n_samples: 1000,
            kernel_width: 0.25,
            ridge_lambda: 1.0,
        }
    }
}

/// Solves `a·x = b` for symmetric positive definite `a` (row-major, `n×n`).
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument("surrogate system is not positive definite".into()));
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b)
}

/// LIME over `grid_k × grid_k` pixel blocks.
///
/// Sample 0 keeps every segment; the others switch each segment on with
/// probability ½. Switched-off segments take the baseline. A weighted ridge
/// regression (intercept unpenalised) with kernel
/// `exp(−(off_fraction)² / kernel_width²)` maps the on/off pattern to
/// `logit[target]`; every pixel receives its segment's coefficient.
pub fn explain_lime(
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<AttributionMap> {
    check_input(model, image)?;
    model.check_target(target)?;
    baseline.check_shape(model.input_shape())?;
    let [_, h, w] = model.input_shape();
    let k = cfg.grid_k;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is not divisible into {k}x{k} segments"
        )));
    }
    let cols = w / k;
    let segments = (h / k) * cols;
    if cfg.n_samples < segments + 1 {
        return Err(Error::InvalidArgument(format!(
            "LIME needs at least {} samples for {segments} segments, got {}",
            segments + 1,
            cfg.n_samples
        )));
    }
    if !(cfg.kernel_width > 0.0) || !(cfg.ridge_lambda >= 0.0) {
        return Err(Error::InvalidArgument("kernel_width must be > 0 and ridge_lambda >= 0".into()));
    }
    let segment_of = |p: usize| (p / w / k) * cols + (p % w) / k;

    let mut rng = Stream::new(seed);
    let dim = segments + 1;
    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let mut on = vec![true; segments];
    let mut pixel_mask = vec![false; h * w];
    let mut row = vec![0.0; dim];
    for s in 0..cfg.n_samples {
        if s > 0 {
            for seg in on.iter_mut() {
                *seg = rng.next_bool();
            }
        }
        for (p, m) in pixel_mask.iter_mut().enumerate() {
            *m = !on[segment_of(p)];
        }
        let perturbed = baseline.apply(image, &pixel_mask);
        let y = run_logits(model, &perturbed).data()[target];
        let off = on.iter().filter(|&&b| !b).count() as f64 / segments as f64;
        let weight = libm::exp(-(off * off) / (cfg.kernel_width * cfg.kernel_width));
        row[0] = 1.0;
        for (r, &b) in row[1..].iter_mut().zip(&on) {
            *r = if b { 1.0 } else { 0.0 };
        }
        for i in 0..dim {
            if row[i] == 0.0 {
                continue;
            }
            rhs[i] += weight * row[i] * y;
            for j in 0..dim {
                gram[i * dim + j] += weight * row[i] * row[j];
            }
        }
    }
    for i in 1..dim {
        gram[i * dim + i] += cfg.ridge_lambda;
    }
    let beta = cholesky_solve(gram, rhs, dim)?;
    let data = (0..h * w).map(|p| beta[1 + segment_of(p)]).collect();
    AttributionMap::new(
        pixel_domain(model),
        Tensor::new(vec![h, w], data)?,
        Method::Lime,
        target,
        SignInfo::Signed,
    )
}
