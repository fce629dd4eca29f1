//! Run configuration: JSON text in, a fully resolved [`RunConfig`] or a list
//! of coded issues out.

use std::fmt;
use std::path::{Path, PathBuf};

use attrib_core::explain::{Explainer, LimeConfig, Method, PertConfig, SignInfo};
use attrib_core::metrics::{BiasNorm, Direction};
use attrib_core::{LayerRef, ReferenceModel};
use serde::Deserialize;

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_TAUS: [f64; 2] = [0.05, 0.1];
pub const DEFAULT_SHAPLEY_SAMPLES: usize = 1000;

/// One problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.code, self.message)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    models: Vec<RawModel>,
    dataset: RawDataset,
    #[serde(default)]
    n_images: Option<usize>,
    #[serde(default)]
    baseline: Option<String>,
    #[serde(default)]
    target: Option<String>,
    methods: Vec<RawMethod>,
    #[serde(default)]
    metrics: RawMetrics,
    #[serde(default)]
    master_seed: u64,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    id: String,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    format: String,
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    count: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawMethod {
    Name(String),
    Full(RawMethodParams),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethodParams {
    name: String,
    epsilon: Option<f64>,
    grid_k: Option<usize>,
    n_samples: Option<usize>,
    kernel_width: Option<f64>,
    ridge_lambda: Option<f64>,
    lambda_l1: Option<f64>,
    steps: Option<usize>,
    lr: Option<f64>,
    m: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    pixel_bias: Option<RawPixelBias>,
    unexplainable: Option<RawUnexplainable>,
    non_robust: Option<RawMethodList>,
    mutual: Option<RawMethodList>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPixelBias {
    methods: Option<Vec<String>>,
    fractions: Option<Vec<f64>>,
    directions: Option<Vec<String>>,
    m: Option<usize>,
    norm: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUnexplainable {
    methods: Option<Vec<String>>,
    taus: Option<Vec<f64>>,
    layer: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethodList {
    methods: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelLocation {
    Reference { model: ReferenceModel, seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSource {
    pub id: String,
    pub location: ModelLocation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Cifar10(PathBuf),
    /// Generated CIFAR-format scenes, see [`crate::cifar::synthetic_cifar_batch`].
    SyntheticCifar10 {
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// One mean value per channel over the evaluated images.
    ChannelMean,
    /// The per-pixel mean image.
    MeanImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// The class the model predicts for the clean image.
    Predicted,
    /// The dataset label.
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelBiasConfig {
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub directions: Vec<Direction>,
    pub m: usize,
    pub norm: BiasNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnexplainableConfig {
    pub methods: Vec<Method>,
    pub taus: Vec<f64>,
    pub layer: LayerRef,
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub models: Vec<ModelSource>,
    pub dataset: DatasetSource,
    pub n_images: Option<usize>,
    pub baseline: BaselineMode,
    pub target: TargetRule,
    pub methods: Vec<Explainer>,
    pub pixel_bias: Option<PixelBiasConfig>,
    pub unexplainable: Option<UnexplainableConfig>,
    pub non_robust: Option<Vec<Method>>,
    pub mutual: Option<Vec<Method>>,
    pub master_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn explainer(&self, method: Method) -> &Explainer {
        self.methods
            .iter()
            .find(|e| e.method() == method)
            .expect("validated configs only reference declared methods")
    }
}

/// Whether `method` can feed `metric`.
///
/// The pixel-bias metric needs signed pixel maps; the other three metrics
/// need pixel maps.
pub fn supports(method: Method, metric: &str) -> bool {
    let pixel = method.is_pixel_domain();
    match metric {
        "pixel_bias" => pixel && method.sign() == SignInfo::Signed,
        _ => pixel,
    }
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, code: &'static str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            code,
            message: message.into(),
        });
    }
}

fn build_explainer(p: &RawMethodParams, issues: &mut Issues) -> Option<Explainer> {
    let Some(method) = Method::from_name(&p.name) else {
        issues.push("unknown_method", format!("unknown method {:?}", p.name));
        return None;
    };
    let mut extra: Vec<&str> = Vec::new();
    let mut flag = |present: bool, name: &'static str, allowed: bool| {
        if present && !allowed {
            extra.push(name);
        }
    };
    let is = |m: Method| method == m;
    flag(p.epsilon.is_some(), "epsilon", is(Method::Lrp));
    flag(p.grid_k.is_some(), "grid_k", is(Method::Lime));
    flag(p.n_samples.is_some(), "n_samples", is(Method::Lime));
    flag(p.kernel_width.is_some(), "kernel_width", is(Method::Lime));
    flag(p.ridge_lambda.is_some(), "ridge_lambda", is(Method::Lime));
    flag(p.lambda_l1.is_some(), "lambda_l1", is(Method::Pert));
    flag(p.steps.is_some(), "steps", is(Method::Pert));
    flag(p.lr.is_some(), "lr", is(Method::Pert));
    flag(p.m.is_some(), "m", is(Method::SampledShapley));
    if !extra.is_empty() {
        issues.push("bad_method_param", format!("method {} does not take {}", p.name, extra.join(", ")));
    }
    let explainer = match Explainer::default_for(method) {
        Explainer::Lrp { epsilon } => {
            let epsilon = p.epsilon.unwrap_or(epsilon);
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                issues.push("bad_method_param", format!("lrp epsilon must be >= 0, got {epsilon}"));
            }
            Explainer::Lrp { epsilon }
        }
        Explainer::Lime(d) => {
            let cfg = LimeConfig {
                grid_k: p.grid_k.unwrap_or(d.grid_k),
                n_samples: p.n_samples.unwrap_or(d.n_samples),
                kernel_width: p.kernel_width.unwrap_or(d.kernel_width),
                ridge_lambda: p.ridge_lambda.unwrap_or(d.ridge_lambda),
            };
            if cfg.grid_k == 0 || !(cfg.kernel_width > 0.0) || !(cfg.ridge_lambda >= 0.0) {
                issues.push("bad_method_param", "lime needs grid_k > 0, kernel_width > 0, ridge_lambda >= 0");
            }
            // Every dataset is CIFAR-shaped, so the segment count is known
            // here; the surrogate fit needs one more sample than segments.
            if cfg.grid_k > 0 {
                let segments = crate::cifar::SIDE.div_ceil(cfg.grid_k).pow(2);
                if cfg.n_samples <= segments {
                    issues.push(
                        "bad_method_param",
                        format!(
                            "lime n_samples {} must exceed its {segments} segments on 32x32 images",
                            cfg.n_samples
                        ),
                    );
                }
            }
            Explainer::Lime(cfg)
        }
        Explainer::Pert(d) => {
            let cfg = PertConfig {
                lambda_l1: p.lambda_l1.unwrap_or(d.lambda_l1),
                steps: p.steps.unwrap_or(d.steps),
                lr: p.lr.unwrap_or(d.lr),
            };
            if !(cfg.lambda_l1 >= 0.0) || !(cfg.lr > 0.0) {
                issues.push("bad_method_param", "pert needs lambda_l1 >= 0 and lr > 0");
            }
            Explainer::Pert(cfg)
        }
        Explainer::SampledShapley { m } => {
            let m = p.m.unwrap_or(m);
            if m < 2 {
                issues.push("bad_samples", format!("shapley needs m >= 2, got {m}"));
            }
            Explainer::SampledShapley { m }
        }
        other => other,
    };
    Some(explainer)
}

/// Resolves a metric's method list (default: every declared method) and
/// checks compatibility.
fn metric_methods(metric: &'static str, listed: Option<&Vec<String>>, declared: &[Method], issues: &mut Issues) -> Vec<Method> {
    let methods: Vec<Method> = match listed {
        None => declared.to_vec(),
        Some(names) => names
            .iter()
            .filter_map(|n| match Method::from_name(n) {
                Some(m) if declared.contains(&m) => Some(m),
                Some(_) => {
                    issues.push("undeclared_method", format!("{metric} uses {n}, which is not in methods"));
                    None
                }
                None => {
                    issues.push("unknown_method", format!("{metric} lists unknown method {n:?}"));
                    None
                }
            })
            .collect(),
    };
    if methods.is_empty() {
        issues.push("empty_methods", format!("{metric} has no methods"));
    }
    for m in &methods {
        if !supports(*m, metric) {
            let why = match m.sign() {
                SignInfo::Nonneg if m.is_pixel_domain() => "produces maps without negative values",
                _ => "produces feature-level maps that are not comparable with pixel-level values",
            };
            issues.push(
                "incompatible_method_metric",
                format!("{} cannot be used with {metric}: it {why}", m.name()),
            );
        }
    }
    let mut seen = Vec::new();
    for m in &methods {
        if seen.contains(m) {
            issues.push("duplicate_method", format!("{metric} lists {} twice", m.name()));
        }
        seen.push(*m);
    }
    methods
}

fn check_fractions(values: &[f64], lo_open: bool, name: &'static str, code: &'static str, issues: &mut Issues) {
    if values.is_empty() {
        issues.push(code, format!("{name} is empty"));
    }
    for &v in values {
        let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
        if !ok {
            issues.push(code, format!("{name} value {v} is out of range"));
        }
    }
}

/// Parses and validates configuration text. Relative paths are resolved
/// against `base_dir`.
pub fn validate_config(text: &str, base_dir: &Path) -> Result<RunConfig, Vec<ConfigIssue>> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| {
        vec![ConfigIssue {
            code: "parse_error",
            message: e.to_string(),
        }]
    })?;
    let mut issues = Issues(Vec::new());
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };

    if raw.models.is_empty() {
        issues.push("empty_models", "no models configured");
    }
    let mut models = Vec::new();
    for m in &raw.models {
        if models.iter().any(|s: &ModelSource| s.id == m.id) {
            issues.push("duplicate_model", format!("model id {:?} is used twice", m.id));
        }
        if m.id.is_empty() || m.id.contains([',', '/', '\\', '"', '\n']) {
            issues.push(
                "bad_model_id",
                format!("model id {:?} must be non-empty without , / \\ or quotes", m.id),
            );
        }
        let location = match (&m.reference, &m.path) {
            (Some(name), None) => match ReferenceModel::from_name(name) {
                Ok(model) => ModelLocation::Reference {
                    model,
                    seed: m.seed.unwrap_or(0),
                },
                Err(_) => {
                    issues.push("unknown_model", format!("unknown reference model {name:?}"));
                    continue;
                }
            },
            (None, Some(path)) => {
                if m.seed.is_some() {
                    issues.push("bad_model", format!("model {:?}: seed only applies to reference models", m.id));
                }
                ModelLocation::File(resolve(path))
            }
            _ => {
                issues.push("bad_model", format!("model {:?} needs exactly one of reference or path", m.id));
                continue;
            }
        };
        models.push(ModelSource {
            id: m.id.clone(),
            location,
        });
    }

    let dataset = match (raw.dataset.format.as_str(), &raw.dataset.path) {
        ("cifar10", Some(path)) => Some(DatasetSource::Cifar10(resolve(path))),
        ("synthetic_cifar10", None) => Some(DatasetSource::SyntheticCifar10 {
            count: raw.dataset.count.unwrap_or(50),
            seed: raw.dataset.seed.unwrap_or(0),
        }),
        ("cifar10", None) => {
            issues.push("missing_dataset", "cifar10 dataset needs a path");
            None
        }
        (other, _) => {
            issues.push(
                "bad_dataset",
                format!("unsupported dataset format {other:?} (cifar10, synthetic_cifar10)"),
            );
            None
        }
    };
    for m in &models {
        if let ModelLocation::Reference { model, .. } = m.location {
            if model == ReferenceModel::TinyMlp9 {
                issues.push(
                    "shape_mismatch",
                    format!("model {:?} takes 1x3x3 inputs, the dataset has 3x32x32 images", m.id),
                );
            }
        }
    }
    if raw.n_images == Some(0) {
        issues.push("bad_n_images", "n_images must be positive");
    }

    let baseline = match raw.baseline.as_deref() {
        None | Some("channel_mean") => BaselineMode::ChannelMean,
        Some("mean_image") => BaselineMode::MeanImage,
        Some(other) => {
            issues.push(
                "bad_baseline",
                format!("baseline must be channel_mean or mean_image, got {other:?}"),
            );
            BaselineMode::ChannelMean
        }
    };
    let target = match raw.target.as_deref() {
        None | Some("predicted") => TargetRule::Predicted,
        Some("label") => TargetRule::Label,
        Some(other) => {
            issues.push("bad_target", format!("target must be predicted or label, got {other:?}"));
            TargetRule::Predicted
        }
    };

    if raw.methods.is_empty() {
        issues.push("empty_methods", "method list is empty");
    }
    let mut methods: Vec<Explainer> = Vec::new();
    for entry in &raw.methods {
        let params = match entry {
            RawMethod::Name(name) => RawMethodParams {
                name: name.clone(),
                ..Default::default()
            },
            RawMethod::Full(p) => RawMethodParams {
                name: p.name.clone(),
                ..*p
            },
        };
        if let Some(e) = build_explainer(&params, &mut issues) {
            if methods.iter().any(|d| d.method() == e.method()) {
                issues.push("duplicate_method", format!("method {} is declared twice", params.name));
            } else {
                methods.push(e);
            }
        }
    }
    let declared: Vec<Method> = methods.iter().map(Explainer::method).collect();

    let metrics = &raw.metrics;
    if metrics.pixel_bias.is_none() && metrics.unexplainable.is_none() && metrics.non_robust.is_none() && metrics.mutual.is_none() {
        issues.push("empty_metrics", "no metrics configured");
    }
    let pixel_bias = metrics.pixel_bias.as_ref().map(|p| {
        let fractions = p.fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
        check_fractions(&fractions, true, "pixel_bias fractions", "bad_fraction", &mut issues);
        let directions = match &p.directions {
            None => vec![Direction::High, Direction::Low],
            Some(names) => names
                .iter()
                .filter_map(|n| {
                    let d = Direction::from_name(n);
                    if d.is_none() {
                        issues.push("bad_direction", format!("direction must be high or low, got {n:?}"));
                    }
                    d
                })
                .collect(),
        };
        if directions.is_empty() {
            issues.push("bad_direction", "pixel_bias needs at least one direction");
        }
        let m = p.m.unwrap_or(DEFAULT_SHAPLEY_SAMPLES);
        if m < 2 {
            issues.push("bad_samples", format!("pixel_bias needs m >= 2, got {m}"));
        }
        let norm = match p.norm.as_deref() {
            None | Some("l1") => BiasNorm::L1,
            Some("l2") => BiasNorm::L2,
            Some(other) => {
                issues.push("bad_norm", format!("norm must be l1 or l2, got {other:?}"));
                BiasNorm::L1
            }
        };
        PixelBiasConfig {
            methods: metric_methods("pixel_bias", p.methods.as_ref(), &declared, &mut issues),
            fractions,
            directions,
            m,
            norm,
        }
    });
    let unexplainable = metrics.unexplainable.as_ref().map(|u| {
        let taus = u.taus.clone().unwrap_or_else(|| DEFAULT_TAUS.to_vec());
        check_fractions(&taus, false, "unexplainable taus", "bad_tau", &mut issues);
        let layer = match &u.layer {
            None => LayerRef::LastConv,
            Some(serde_json::Value::String(s)) if s == "last_conv" => LayerRef::LastConv,
            Some(serde_json::Value::String(s)) if s == "last" => LayerRef::Last,
            Some(serde_json::Value::Number(n)) if n.as_u64().is_some() => LayerRef::Index(n.as_u64().unwrap() as usize),
            Some(other) => {
                issues.push("bad_layer", format!("layer must be last_conv, last or an index, got {other}"));
                LayerRef::LastConv
            }
        };
        UnexplainableConfig {
            methods: metric_methods("unexplainable", u.methods.as_ref(), &declared, &mut issues),
            taus,
            layer,
        }
    });
    let non_robust = metrics
        .non_robust
        .as_ref()
        .map(|n| metric_methods("non_robust", n.methods.as_ref(), &declared, &mut issues));
    let mutual = metrics.mutual.as_ref().map(|n| {
        let ms = metric_methods("mutual", n.methods.as_ref(), &declared, &mut issues);
        if ms.len() == 1 {
            issues.push("mutual_needs_pair", "mutual needs at least two methods");
        }
        ms
    });

    let workers = raw.workers.unwrap_or(1);
    if workers == 0 {
        issues.push("bad_workers", "workers must be at least 1");
    }

    if !issues.0.is_empty() {
        return Err(issues.0);
    }
    Ok(RunConfig {
        models,
        dataset: dataset.expect("dataset issues are reported above"),
        n_images: raw.n_images,
        baseline,
        target,
        methods,
        pixel_bias,
        unexplainable,
        non_robust,
        mutual,
        master_seed: raw.master_seed,
        workers,
        output_dir: resolve(raw.output_dir.as_deref().unwrap_or(Path::new("out"))),
    })
}
