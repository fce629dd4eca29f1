//! One model, one image: attribution dumps and Shapley tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attrib_core::explain::Explainer;
use attrib_core::shapley::{exact_shapley, sampled_shapley_with, Permutations, PixelGame};
use attrib_core::{forward, AttributionMap, Baseline, ModelGraph, ShapleyEstimate, Tensor};

use crate::cifar::load_cifar_batch;
use crate::error::{Error, Result};
use crate::harness::Rayon;
use crate::maps::{map_to_csv, map_to_pgm};
use crate::ppm::load_ppm;

/// How the single-image commands pick the baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineChoice {
    /// The per-channel mean of the explained image itself.
    ImageMean,
    Zero,
    Values(Vec<f64>),
}

impl BaselineChoice {
    /// Parses `image-mean`, `zero` or comma-separated channel values.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        match text {
            "image-mean" => Ok(BaselineChoice::ImageMean),
            "zero" => Ok(BaselineChoice::Zero),
            _ => text
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad baseline value {v:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(BaselineChoice::Values),
        }
    }

    pub fn resolve(&self, image: &Tensor) -> Result<Baseline> {
        let (c, h, w) = image
            .chw()
            .ok_or_else(|| Error::Format("the image is not channels × height × width".into()))?;
        let baseline = match self {
            BaselineChoice::Zero => Baseline::zero(c),
            BaselineChoice::Values(v) => Baseline::ChannelMean(v.clone()),
            BaselineChoice::ImageMean => Baseline::ChannelMean(
                image
                    .data()
                    .chunks(h * w)
                    .map(|plane| plane.iter().sum::<f64>() / (h * w) as f64)
                    .collect(),
            ),
        };
        baseline.check_shape([c, h, w])?;
        Ok(baseline)
    }
}

/// Loads a binary PPM or PGM, or record `index` of a CIFAR-10 batch for any
/// other extension.
pub fn load_image(path: &Path, index: usize) -> Result<Tensor> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"));
    if is_ppm {
        return load_ppm(path);
    }
    let set = load_cifar_batch(path)?;
    let count = set.len();
    set.images()
        .get(index)
        .cloned()
        .ok_or_else(|| Error::Format(format!("{} holds {count} images, index {index} is out of range", path.display())))
}

/// The target when none is given: the predicted class.
pub fn resolve_target(model: &ModelGraph, image: &Tensor, target: Option<usize>) -> Result<usize> {
    match target {
        Some(t) => {
            model.check_target(t)?;
            Ok(t)
        }
        None => Ok(forward(model, image)?.logits().argmax()),
    }
}

/// Explains `image` and writes `<prefix>.csv` and `<prefix>.pgm`.
pub fn explain_single(
    model: &ModelGraph,
    image: &Tensor,
    explainer: &Explainer,
    baseline: &Baseline,
    target: usize,
    seed: u64,
    prefix: &Path,
) -> Result<(AttributionMap, [PathBuf; 2])> {
    let map = explainer.explain(model, image, baseline, target, seed)?;
    let csv = with_suffix(prefix, "csv");
    let pgm = with_suffix(prefix, "pgm");
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&csv, map_to_csv(&map)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&pgm, map_to_pgm(&map)).map_err(|e| Error::io(&pgm, e))?;
    Ok((map, [csv, pgm]))
}

// `with_extension` would eat anything after a dot in the prefix.
fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Pixel Shapley values: exact enumeration when `samples` is `None`.
pub fn pixel_shapley(
    model: &ModelGraph,
    image: &Tensor,
    baseline: &Baseline,
    target: usize,
    samples: Option<usize>,
    seed: u64,
) -> Result<ShapleyEstimate> {
    let game = PixelGame::new(model, image, baseline, target)?;
    let estimate = match samples {
        None => exact_shapley(&game)?,
        Some(m) => sampled_shapley_with(&Rayon, &game, m, Permutations::Random { seed })?,
    };
    Ok(estimate)
}

/// `row,col,value,std_error` per pixel; the error column is 0 for exact
/// values.
pub fn shapley_to_csv(estimate: &ShapleyEstimate, width: usize) -> String {
    let mut out = String::from("row,col,value,std_error\n");
    for (i, v) in estimate.values.iter().enumerate() {
        let se = if estimate.is_exact() { 0.0 } else { estimate.standard_error(i) };
        writeln!(out, "{},{},{v},{se}", i / width, i % width).expect("writing to a String cannot fail");
    }
    out
}
