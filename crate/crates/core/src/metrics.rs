//! Ground-truth-free evaluation metrics for attribution maps and the pixel
//! selection rules they use.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::explain::{AttributionMap, Explainer, SignInfo};
use crate::forward::{check_input, forward};
use crate::model::{LayerRef, ModelGraph};
use crate::reference::Baseline;
use crate::shapley::{sampled_shapley_with, Permutations, PixelGame, Sequential, ShapleyEstimate, TaskRunner};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    High,
    Low,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::High => "high",
            Direction::Low => "low",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "high" => Some(Direction::High),
            "low" => Some(Direction::Low),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    TopFraction { fraction: f64, direction: Direction },
    TauMass { tau: f64 },
}

/// Pixels chosen from a map, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSelection {
    pub indices: Vec<usize>,
    pub rule: SelectionRule,
}

impl PixelSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Boolean membership over `n` pixels.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

/// `round(p·n)` with halves rounded up.
pub fn selection_size(fraction: f64, n: usize) -> usize {
    (libm::floor(fraction * n as f64 + 0.5) as usize).min(n)
}

/// The `round(p·|Ω|)` pixels with the highest (or lowest) values; ties go to
/// the lower flat index.
pub fn select_top_fraction(map: &AttributionMap, fraction: f64, direction: Direction) -> Result<PixelSelection> {
    map.require_pixel("top-fraction selection")?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let a = map.data();
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| {
        let by_value = match direction {
            Direction::High => a[j].total_cmp(&a[i]),
            Direction::Low => a[i].total_cmp(&a[j]),
        };
        by_value.then(i.cmp(&j))
    });
    order.truncate(selection_size(fraction, a.len()));
    Ok(PixelSelection {
        indices: order,
        rule: SelectionRule::TopFraction { fraction, direction },
    })
}

/// Lowest-|a| pixels whose cumulative |a| stays within `τ·Σ|a|`.
///
/// Pixels are added in ascending |a| (ties by index) until the next one would
/// overshoot. `τ = 0` selects nothing; an all-zero map with `τ > 0` selects
/// every pixel.
pub fn select_tau_mass(map: &AttributionMap, tau: f64) -> Result<PixelSelection> {
    map.require_pixel("tau-mass selection")?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let rule = SelectionRule::TauMass { tau };
    if tau == 0.0 {
        return Ok(PixelSelection { indices: Vec::new(), rule });
    }
    let a = map.data();
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()).then(i.cmp(&j)));
    // Summing in selection order makes the τ = 1 bound exact.
    let total: f64 = order.iter().map(|&i| a[i].abs()).sum();
    let bound = tau * total;
    let mut mass = 0.0;
    let mut taken = 0;
    for &i in &order {
        let next = mass + a[i].abs();
        if next > bound {
            break;
        }
        mass = next;
        taken += 1;
    }
    order.truncate(taken);
    Ok(PixelSelection { indices: order, rule })
}

/// Norm used to normalise both sides of the pixel-bias metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasNorm {
    #[default]
    L1,
    L2,
}

impl BiasNorm {
    fn of(self, xs: &[f64]) -> f64 {
        match self {
            BiasNorm::L1 => xs.iter().map(|v| v.abs()).sum(),
            BiasNorm::L2 => libm::sqrt(xs.iter().map(|v| v * v).sum()),
        }
    }
}

/// Pixel-level bias of `map` against sampled Shapley values `shap`:
/// `(1/|S|)·|Σ_S A/‖A‖ − Σ_S a/‖a‖|` over the top/bottom `fraction`.
pub fn pixel_bias_against(
    map: &AttributionMap,
    shap: &ShapleyEstimate,
    fraction: f64,
    direction: Direction,
    norm: BiasNorm,
) -> Result<f64> {
    if map.sign() != SignInfo::Signed {
        return Err(Error::SignRequired);
    }
    if shap.values.len() != map.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![map.len()],
            found: vec![shap.values.len()],
        });
    }
    let sel = select_top_fraction(map, fraction, direction)?;
    if sel.is_empty() {
        return Err(Error::EmptySet);
    }
    let (a_norm, s_norm) = (norm.of(map.data()), norm.of(&shap.values));
    if a_norm == 0.0 || s_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let s_sum: f64 = sel.indices.iter().map(|&i| shap.values[i]).sum();
    let a_sum: f64 = sel.indices.iter().map(|&i| map.data()[i]).sum();
    Ok((s_sum / s_norm - a_sum / a_norm).abs() / sel.len() as f64)
}

/// One standard deviation of the Shapley side of the pixel-bias metric that
/// is due to sampling: `sqrt(Σ_S var_i) / (|S|·‖A‖)`.
pub fn pixel_bias_sampling_sd(shap: &ShapleyEstimate, selection: &PixelSelection, norm: BiasNorm) -> f64 {
    let var: f64 = selection.indices.iter().map(|&i| shap.per_player_variance[i]).sum();
    libm::sqrt(var) / (selection.len() as f64 * norm.of(&shap.values))
}

/// Pixel-bias metric with a fresh permutation-sampled Shapley estimate
/// (`m` permutations, `seed`).
#[allow(clippy::too_many_arguments)]
pub fn metric_pixel_bias(
    map: &AttributionMap,
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    fraction: f64,
    direction: Direction,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if map.sign() != SignInfo::Signed {
        return Err(Error::SignRequired);
    }
    map.require_pixel("pixel bias")?;
    let shap = shapley_reference(&Sequential, model, image, baseline, target, m, seed)?;
    pixel_bias_against(map, &shap, fraction, direction, BiasNorm::L1)
}

/// The sampled Shapley values the pixel-bias metric compares against.
pub fn shapley_reference<R: TaskRunner + ?Sized>(
    runner: &R,
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    m: usize,
    seed: u64,
) -> Result<ShapleyEstimate> {
    let game = PixelGame::new(model, image, baseline, target)?;
    sampled_shapley_with(runner, &game, m, Permutations::Random { seed })
}

/// `α = 1 / E_I‖f_I − E[f]‖₂` for the features at `layer` over `images`.
pub fn feature_normalizer(model: &ModelGraph, images: &[Tensor], layer: LayerRef) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptySet);
    }
    let idx = model.resolve(layer)?;
    let features = images
        .iter()
        .map(|im| forward(model, im).map(|t| t.outputs()[idx].clone()))
        .collect::<Result<Vec<Tensor>>>()?;
    let n = features.len() as f64;
    let dim = features[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f.data()[j]).sum::<f64>() / n).collect();
    let spread = features
        .iter()
        .map(|f| libm::sqrt(f.data().iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum()))
        .sum::<f64>()
        / n;
    if spread == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 / spread)
}

/// Unexplainable feature components: `α·‖f(Ĩ) − f(I)‖₂` where `Ĩ` replaces
/// the τ-mass selection of `map` with the baseline.
pub fn metric_unexplainable(
    map: &AttributionMap,
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    tau: f64,
    layer: LayerRef,
    alpha: f64,
) -> Result<f64> {
    let (h, w) = map.require_pixel("unexplainable features")?;
    check_input(model, image)?;
    baseline.check_shape(model.input_shape())?;
    if [h, w] != model.input_shape()[1..] {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape()[1..].to_vec(),
            found: vec![h, w],
        });
    }
    let idx = model.resolve(layer)?;
    let sel = select_tau_mass(map, tau)?;
    if sel.is_empty() {
        return Ok(0.0);
    }
    let masked = baseline.apply(image, &sel.mask(h * w));
    let f = forward(model, image)?;
    let f_masked = forward(model, &masked)?;
    let diff: f64 = f.outputs()[idx]
        .data()
        .iter()
        .zip(f_masked.outputs()[idx].data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(alpha * libm::sqrt(diff))
}

/// Which half of the image a robustness mask hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfMask {
    Right,
    Left,
    Top,
    Bottom,
}

impl HalfMask {
    pub const ALL: [HalfMask; 4] = [HalfMask::Right, HalfMask::Left, HalfMask::Top, HalfMask::Bottom];

    /// `true` marks masked pixels. The kept side has `floor(n/2)` rows or
    /// columns, so on odd sizes the middle line is masked.
    pub fn mask(self, height: usize, width: usize) -> Vec<bool> {
        let (kh, kw) = (height / 2, width / 2);
        (0..height * width)
            .map(|p| {
                let (y, x) = (p / width, p % width);
                match self {
                    HalfMask::Right => x >= kw,
                    HalfMask::Left => x < width - kw,
                    HalfMask::Top => y < height - kh,
                    HalfMask::Bottom => y >= kh,
                }
            })
            .collect()
    }
}

/// Non-robustness to spatial masking, given the original map and a way to
/// re-explain masked images (same target).
///
/// For each half mask: `sqrt(Σ_unmasked (a − â)²) / ‖a‖₂`; the result is the
/// mean over the four masks. A zero map scores 0 when every masked map also
/// agrees on the unmasked pixels and fails with `ZeroNorm` otherwise.
pub fn non_robustness<F>(original: &AttributionMap, image: &Tensor, baseline: &Baseline, mut explain: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<AttributionMap>,
{
    let (h, w) = original.require_pixel("non-robustness")?;
    let a = original.data();
    let norm = libm::sqrt(a.iter().map(|v| v * v).sum());
    let mut total = 0.0;
    for half in HalfMask::ALL {
        let mask = half.mask(h, w);
        let masked_map = explain(&baseline.apply(image, &mask))?;
        masked_map.require_pixel("non-robustness")?;
        if masked_map.len() != a.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                found: masked_map.values().shape().to_vec(),
            });
        }
        let sq: f64 = a
            .iter()
            .zip(masked_map.data())
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|((x, y), _)| (x - y) * (x - y))
            .sum();
        if sq == 0.0 {
            continue;
        }
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        total += libm::sqrt(sq) / norm;
    }
    Ok(total / HalfMask::ALL.len() as f64)
}

/// Non-robustness of a configured explainer on one image.
pub fn metric_non_robustness(
    explainer: &Explainer,
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    seed: u64,
) -> Result<f64> {
    let original = explainer.explain(model, image, baseline, target, seed)?;
    non_robustness(&original, image, baseline, |masked| {
        explainer.explain(model, masked, baseline, target, seed)
    })
}

/// Mutual verification: `‖a/‖a‖₂ − b/‖b‖₂‖₂`.
pub fn metric_mutual(a: &AttributionMap, b: &AttributionMap) -> Result<f64> {
    a.require_pixel("mutual verification")?;
    b.require_pixel("mutual verification")?;
    if a.values().shape() != b.values().shape() {
        return Err(Error::ShapeMismatch {
            expected: a.values().shape().to_vec(),
            found: b.values().shape().to_vec(),
        });
    }
    let (na, nb) = (a.values().l2_norm(), b.values().l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x / na - y / nb;
            d * d
        })
        .sum();
    Ok(libm::sqrt(sq))
}

/// Ordering used by tests and reports: the pixel permutation that sorts a map
/// descending with index tie-break.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| match values[j].total_cmp(&values[i]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::Method;

    fn map(values: &[f64]) -> AttributionMap {
        AttributionMap::pixel(1, values.len(), values.to_vec(), Method::GradInput, 0, SignInfo::Signed).unwrap()
    }

    #[test]
    fn top_fraction_examples() {
        let m = map(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(select_top_fraction(&m, 0.5, Direction::High).unwrap().indices, vec![0, 1]);
        assert_eq!(select_top_fraction(&m, 0.5, Direction::Low).unwrap().indices, vec![3, 2]);
        let flat = map(&[1.0; 4]);
        assert_eq!(select_top_fraction(&flat, 0.25, Direction::High).unwrap().indices, vec![0]);
        assert_eq!(select_top_fraction(&flat, 0.25, Direction::Low).unwrap().indices, vec![0]);
        for d in [Direction::High, Direction::Low] {
            assert_eq!(select_top_fraction(&m, 1.0, d).unwrap().len(), 4);
        }
        assert!(select_top_fraction(&m, 0.0, Direction::High).is_err());
    }

    #[test]
    fn selection_size_rounds_half_up() {
        assert_eq!(selection_size(0.1, 1024), 102);
        assert_eq!(selection_size(0.5, 9), 5);
        assert_eq!(selection_size(0.1, 5), 1);
        assert_eq!(selection_size(0.3, 9), 3);
    }

    #[test]
    fn tau_mass_examples() {
        let m = map(&[5.0, -3.0, 1.0, -1.0]);
        let sel = select_tau_mass(&m, 0.2).unwrap();
        assert_eq!(sel.indices, vec![2, 3]);
        assert!(select_tau_mass(&m, 0.0).unwrap().is_empty());
        assert_eq!(select_tau_mass(&m, 1.0).unwrap().len(), 4);
        assert_eq!(select_tau_mass(&map(&[0.0; 3]), 0.05).unwrap().len(), 3);
    }

    #[test]
    fn mutual_examples() {
        let a = map(&[1.0, 0.0]);
        let b = map(&[0.0, 1.0]);
        assert_eq!(metric_mutual(&a, &a).unwrap(), 0.0);
        assert!((metric_mutual(&a, &b).unwrap() - core::f64::consts::SQRT_2).abs() < 1e-12);
        let c = map(&[1.0, 1.0]);
        let expected = libm::sqrt(2.0 - core::f64::consts::SQRT_2);
        assert!((metric_mutual(&c, &a).unwrap() - expected).abs() < 1e-12);
        assert_eq!(metric_mutual(&a, &map(&[0.0, 0.0])), Err(Error::ZeroNorm));
        assert!(metric_mutual(&a, &map(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn half_masks_on_odd_sizes() {
        let right = HalfMask::Right.mask(1, 3);
        assert_eq!(right, vec![false, true, true]);
        assert_eq!(HalfMask::Left.mask(1, 3), vec![true, true, false]);
        assert_eq!(HalfMask::Top.mask(3, 1), vec![true, true, false]);
        assert_eq!(HalfMask::Bottom.mask(3, 1), vec![false, true, true]);
        assert_eq!(HalfMask::Right.mask(2, 2), vec![false, true, false, true]);
    }

    #[test]
    fn pixel_bias_rejects_nonneg_maps() {
        let nonneg = AttributionMap::pixel(1, 2, vec![1.0, 0.0], Method::Grad, 0, SignInfo::Nonneg).unwrap();
        let shap = ShapleyEstimate {
            values: vec![1.0, 1.0],
            m: 2,
            per_player_variance: vec![0.0; 2],
            players: vec![0, 1],
        };
        assert_eq!(
            pixel_bias_against(&nonneg, &shap, 0.5, Direction::High, BiasNorm::L1),
            Err(Error::SignRequired)
        );
        let signed = map(&[2.0, 2.0]);
        assert_eq!(pixel_bias_against(&signed, &shap, 1.0, Direction::High, BiasNorm::L1), Ok(0.0));
    }

    #[test]
    fn non_robustness_of_constant_explainer_is_zero() {
        let img = Tensor::filled(&[1, 2, 2], 0.8);
        let constant = AttributionMap::pixel(2, 2, vec![0.3; 4], Method::GradInput, 0, SignInfo::Signed).unwrap();
        let score = non_robustness(&constant, &img, &Baseline::zero(1), |_| Ok(constant.clone())).unwrap();
        assert_eq!(score, 0.0);
    }
}
