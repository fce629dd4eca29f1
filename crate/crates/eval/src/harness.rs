//! Grid evaluation over (model × method × metric × parameter × image).
//!
//! Work runs in three passes on a fixed-size thread pool: targets and the
//! feature normaliser, then attribution maps and Shapley references, then
//! metric cells. Every pass collects results in task order and every task
//! seeds its randomness from `mix(master_seed, fnv1a(task id))`, so output
//! files do not depend on the worker count.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use attrib_core::explain::{AttributionMap, Method};
use attrib_core::metrics::{
    feature_normalizer, metric_mutual, metric_unexplainable, non_robustness, pixel_bias_against, shapley_reference,
};
use attrib_core::reference::{build_reference_model, compute_baseline, compute_mean_image, Baseline, ImageSet};
use attrib_core::rng::{fnv1a, mix};
use attrib_core::shapley::{Sequential, ShapleyEstimate, TaskRunner};
use attrib_core::{forward, ModelGraph, Tensor};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::cifar::{load_cifar_batch, parse_cifar_batch, synthetic_cifar_batch};
use crate::config::{BaselineMode, DatasetSource, ModelLocation, RunConfig, TargetRule};
use crate::error::{Error, Result};
use crate::manifest::read_model;

/// Largest tolerated share of images with at least one failed task.
pub const FAILURE_BUDGET: f64 = 0.10;

/// Runs indexed tasks on the current rayon pool, keeping index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl TaskRunner for Rayon {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..count).into_par_iter().map(f).collect()
    }
}

/// Seed of the task named `id`.
pub fn task_seed(master: u64, id: &str) -> u64 {
    mix(master, fnv1a(id.as_bytes()))
}

/// One per-image metric value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub method: String,
    pub metric: &'static str,
    pub param_name: &'static str,
    pub param_value: String,
    pub direction: &'static str,
    pub image_id: usize,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub model: String,
    pub method: String,
    pub metric: &'static str,
    pub param_name: &'static str,
    pub param_value: String,
    pub direction: &'static str,
    pub n_images: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub id: String,
    /// Feature normaliser of the unexplainable-features metric, when used.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub master_seed: u64,
    pub dataset: String,
    pub n_images: usize,
    pub baseline: Vec<f64>,
    pub models: Vec<ModelSummary>,
    pub cells: Vec<CellSummary>,
    pub failed_tasks: usize,
    pub failed_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFailure {
    pub model: String,
    pub image_id: usize,
    pub task: String,
    pub message: String,
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<TaskFailure>,
    pub summary: RunSummary,
}

impl RunReport {
    /// Whether failed images exceed [`FAILURE_BUDGET`].
    pub fn over_budget(&self) -> bool {
        let total = self.summary.n_images * self.summary.models.len();
        total > 0 && self.summary.failed_images as f64 > FAILURE_BUDGET * total as f64
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<ImageSet> {
    match source {
        DatasetSource::Cifar10(path) => load_cifar_batch(path),
        DatasetSource::SyntheticCifar10 { count, seed } => parse_cifar_batch(
            &synthetic_cifar_batch(*count, *seed),
            &format!("synthetic_cifar10(count={count}, seed={seed})"),
        ),
    }
}

pub fn load_model_source(location: &ModelLocation) -> Result<ModelGraph> {
    match location {
        ModelLocation::Reference { model, seed } => Ok(build_reference_model(*model, *seed)),
        ModelLocation::File(path) => read_model(path),
    }
}

struct Prepared {
    id: String,
    model: ModelGraph,
    targets: Vec<usize>,
    alpha: Option<std::result::Result<f64, String>>,
}

enum Job {
    Map { model: usize, method: Method, image: usize },
    Reference { model: usize, image: usize },
}

enum JobOutput {
    Map(AttributionMap),
    Reference(ShapleyEstimate),
}

/// A metric cell evaluated on one image.
#[derive(Clone)]
enum Cell {
    PixelBias { method: Method },
    Unexplainable { method: Method, tau: f64 },
    NonRobust { method: Method },
    Mutual { a: Method, b: Method },
}

impl Cell {
    fn describe(&self) -> String {
        match self {
            Cell::PixelBias { method } => format!("pixel_bias/{}", method.name()),
            Cell::Unexplainable { method, tau } => format!("unexplainable/{}/tau={tau}", method.name()),
            Cell::NonRobust { method } => format!("non_robust/{}", method.name()),
            Cell::Mutual { a, b } => format!("mutual/{}/{}", a.name(), b.name()),
        }
    }
}

fn map_task_id(model: &str, method: Method, image: usize) -> String {
    format!("map/{model}/{}/{image}", method.name())
}

fn reference_task_id(model: &str, image: usize) -> String {
    format!("shapley_reference/{model}/{image}")
}

/// Methods whose maps some configured metric needs, in declaration order.
fn needed_methods(cfg: &RunConfig) -> Vec<Method> {
    let mut used = BTreeSet::new();
    let lists = [
        cfg.pixel_bias.as_ref().map(|p| &p.methods),
        cfg.unexplainable.as_ref().map(|u| &u.methods),
        cfg.non_robust.as_ref(),
        cfg.mutual.as_ref(),
    ];
    for list in lists.into_iter().flatten() {
        used.extend(list.iter().map(|m| m.name()));
    }
    cfg.methods.iter().map(|e| e.method()).filter(|m| used.contains(m.name())).collect()
}

/// Runs the configured grid. Fails outright only on setup errors; failed
/// tasks are reported in [`RunReport::failures`].
pub fn run_evaluation(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let mut images = load_dataset(&cfg.dataset)?;
    if let Some(n) = cfg.n_images {
        images.truncate(n);
    }
    if images.is_empty() {
        return Err(Error::Format("the dataset has no images".into()));
    }
    let baseline = match cfg.baseline {
        BaselineMode::ChannelMean => compute_baseline(&images)?,
        BaselineMode::MeanImage => compute_mean_image(&images)?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Format(format!("cannot start {} workers: {e}", cfg.workers)))?;
    info!(
        "{} images from {}, {} model(s), {} worker(s)",
        images.len(),
        images.source_id(),
        cfg.models.len(),
        cfg.workers
    );
    let report = pool.install(|| evaluate(cfg, &images, &baseline))?;
    info!(
        "{} rows, {} failed task(s) in {:.1}s",
        report.rows.len(),
        report.failures.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}

fn evaluate(cfg: &RunConfig, images: &ImageSet, baseline: &Baseline) -> Result<RunReport> {
    let n = images.len();
    let mut prepared = Vec::with_capacity(cfg.models.len());
    for source in &cfg.models {
        let model = load_model_source(&source.location)?;
        if model.input_shape() != images.shape() {
            return Err(Error::Format(format!(
                "model {} expects {:?} inputs but the images are {:?}",
                source.id,
                model.input_shape(),
                images.shape()
            )));
        }
        let targets = match cfg.target {
            TargetRule::Predicted => images
                .images()
                .par_iter()
                .map(|im| forward(&model, im).map(|t| t.logits().argmax()))
                .collect::<std::result::Result<Vec<_>, _>>()?,
            TargetRule::Label => {
                let labels = images.labels();
                if labels.len() != n || labels.iter().any(|&l| l >= model.num_classes()) {
                    return Err(Error::Format(format!("labels do not fit model {}", source.id)));
                }
                labels.to_vec()
            }
        };
        let alpha = cfg
            .unexplainable
            .as_ref()
            .map(|u| feature_normalizer(&model, images.images(), u.layer).map_err(|e| e.to_string()));
        prepared.push(Prepared {
            id: source.id.clone(),
            model,
            targets,
            alpha,
        });
    }

    // Maps and Shapley references.
    let methods = needed_methods(cfg);
    let mut jobs = Vec::new();
    for m in 0..prepared.len() {
        for &method in &methods {
            jobs.extend((0..n).map(|image| Job::Map { model: m, method, image }));
        }
        if cfg.pixel_bias.is_some() {
            jobs.extend((0..n).map(|image| Job::Reference { model: m, image }));
        }
    }
    let pass = Instant::now();
    let outputs: Vec<std::result::Result<JobOutput, String>> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Map { model, method, image } => {
                let p = &prepared[model];
                let seed = task_seed(cfg.master_seed, &map_task_id(&p.id, method, image));
                cfg.explainer(method)
                    .explain(&p.model, &images.images()[image], baseline, p.targets[image], seed)
                    .map(JobOutput::Map)
                    .map_err(|e| e.to_string())
            }
            Job::Reference { model, image } => {
                let p = &prepared[model];
                let pb = cfg.pixel_bias.as_ref().expect("references are only scheduled for pixel_bias");
                let seed = task_seed(cfg.master_seed, &reference_task_id(&p.id, image));
                shapley_reference(
                    &Sequential,
                    &p.model,
                    &images.images()[image],
                    baseline,
                    p.targets[image],
                    pb.m,
                    seed,
                )
                .map(JobOutput::Reference)
                .map_err(|e| e.to_string())
            }
        })
        .collect();
    info!("{} maps and references in {:.1}s", jobs.len(), pass.elapsed().as_secs_f64());

    let mut failures = Vec::new();
    let mut maps: Vec<Vec<Vec<Option<AttributionMap>>>> =
        prepared.iter().map(|_| methods.iter().map(|_| vec![None; n]).collect()).collect();
    let mut references: Vec<Vec<Option<ShapleyEstimate>>> = prepared.iter().map(|_| vec![None; n]).collect();
    for (job, out) in jobs.iter().zip(outputs) {
        let (model, image, task) = match *job {
            Job::Map { model, method, image } => (model, image, format!("map/{}", method.name())),
            Job::Reference { model, image } => (model, image, "shapley_reference".to_string()),
        };
        match out {
            Ok(JobOutput::Map(map)) => {
                let Job::Map { method, .. } = *job else { unreachable!() };
                let k = methods.iter().position(|&m| m == method).expect("scheduled method");
                maps[model][k][image] = Some(map);
            }
            Ok(JobOutput::Reference(r)) => references[model][image] = Some(r),
            Err(message) => failures.push(TaskFailure {
                model: prepared[model].id.clone(),
                image_id: image,
                task,
                message,
            }),
        }
    }

    // Metric cells.
    let mut cells: Vec<Cell> = Vec::new();
    if let Some(pb) = &cfg.pixel_bias {
        cells.extend(pb.methods.iter().map(|&method| Cell::PixelBias { method }));
    }
    if let Some(u) = &cfg.unexplainable {
        for &method in &u.methods {
            cells.extend(u.taus.iter().map(|&tau| Cell::Unexplainable { method, tau }));
        }
    }
    if let Some(list) = &cfg.non_robust {
        cells.extend(list.iter().map(|&method| Cell::NonRobust { method }));
    }
    if let Some(list) = &cfg.mutual {
        for (i, &a) in list.iter().enumerate() {
            cells.extend(list[i + 1..].iter().map(|&b| Cell::Mutual { a, b }));
        }
    }
    let mut tasks = Vec::new();
    for m in 0..prepared.len() {
        for c in 0..cells.len() {
            tasks.extend((0..n).map(|image| (m, c, image)));
        }
    }
    let map_of = |m: usize, method: Method, image: usize| -> std::result::Result<&AttributionMap, String> {
        let k = methods.iter().position(|&x| x == method).expect("scheduled method");
        maps[m][k][image]
            .as_ref()
            .ok_or_else(|| format!("no {} map (its task failed)", method.name()))
    };
    let pass = Instant::now();
    let results: Vec<std::result::Result<Vec<MetricRow>, String>> = tasks
        .par_iter()
        .map(|&(m, c, image)| {
            let p = &prepared[m];
            let target = p.targets[image];
            let img = &images.images()[image];
            let map_seed = |method| task_seed(cfg.master_seed, &map_task_id(&p.id, method, image));
            let row = |method: Method, metric, param_name, param_value: String, direction, value: f64, seed| MetricRow {
                model: p.id.clone(),
                method: method.name().to_string(),
                metric,
                param_name,
                param_value,
                direction,
                image_id: image,
                value,
                seed,
            };
            let err = |e: attrib_core::Error| e.to_string();
            match &cells[c] {
                Cell::PixelBias { method } => {
                    let pb = cfg.pixel_bias.as_ref().expect("pixel_bias cell");
                    let map = map_of(m, *method, image)?;
                    let reference = references[m][image].as_ref().ok_or("no Shapley reference (its task failed)")?;
                    let seed = task_seed(cfg.master_seed, &reference_task_id(&p.id, image));
                    let mut rows = Vec::new();
                    for &fraction in &pb.fractions {
                        for &direction in &pb.directions {
                            let v = pixel_bias_against(map, reference, fraction, direction, pb.norm).map_err(err)?;
                            rows.push(row(
                                *method,
                                "pixel_bias",
                                "fraction",
                                fraction.to_string(),
                                direction.name(),
                                v,
                                seed,
                            ));
                        }
                    }
                    Ok(rows)
                }
                Cell::Unexplainable { method, tau } => {
                    let u = cfg.unexplainable.as_ref().expect("unexplainable cell");
                    let alpha = match p.alpha.as_ref().expect("alpha is computed when unexplainable is configured") {
                        Ok(a) => *a,
                        Err(e) => return Err(format!("feature normaliser: {e}")),
                    };
                    let map = map_of(m, *method, image)?;
                    let v = metric_unexplainable(map, &p.model, img, baseline, *tau, u.layer, alpha).map_err(err)?;
                    Ok(vec![row(
                        *method,
                        "unexplainable",
                        "tau",
                        tau.to_string(),
                        "",
                        v,
                        map_seed(*method),
                    )])
                }
                Cell::NonRobust { method } => {
                    let map = map_of(m, *method, image)?;
                    let seed = map_seed(*method);
                    let explainer = cfg.explainer(*method);
                    let v = non_robustness(map, img, baseline, |masked: &Tensor| {
                        explainer.explain(&p.model, masked, baseline, target, seed)
                    })
                    .map_err(err)?;
                    Ok(vec![row(*method, "non_robust", "", String::new(), "", v, seed)])
                }
                Cell::Mutual { a, b } => {
                    let v = metric_mutual(map_of(m, *a, image)?, map_of(m, *b, image)?).map_err(err)?;
                    Ok(vec![row(*a, "mutual", "versus", b.name().to_string(), "", v, map_seed(*a))])
                }
            }
        })
        .collect();
    info!("{} metric tasks in {:.1}s", tasks.len(), pass.elapsed().as_secs_f64());

    let mut rows = Vec::new();
    for (&(m, c, image), result) in tasks.iter().zip(results) {
        match result {
            Ok(mut r) => rows.append(&mut r),
            Err(message) => failures.push(TaskFailure {
                model: prepared[m].id.clone(),
                image_id: image,
                task: cells[c].describe(),
                message,
            }),
        }
    }
    let mut by_task: Vec<(&str, &str, usize, &str)> = Vec::new();
    for f in &failures {
        debug!("model {} image {}: {} failed: {}", f.model, f.image_id, f.task, f.message);
        match by_task.iter_mut().find(|(m, t, _, _)| *m == f.model && *t == f.task) {
            Some(entry) => entry.2 += 1,
            None => by_task.push((&f.model, &f.task, 1, &f.message)),
        }
    }
    for (model, task, count, first) in by_task {
        warn!("model {model}: {task} failed on {count} image(s), first error: {first}");
    }
    let failed_images: BTreeSet<(&str, usize)> = failures.iter().map(|f| (f.model.as_str(), f.image_id)).collect();

    let summary = RunSummary {
        master_seed: cfg.master_seed,
        dataset: images.source_id().to_string(),
        n_images: n,
        baseline: baseline.channel_means(),
        models: prepared
            .iter()
            .map(|p| ModelSummary {
                id: p.id.clone(),
                alpha: p.alpha.as_ref().and_then(|a| a.as_ref().ok().copied()),
            })
            .collect(),
        cells: aggregate(&rows),
        failed_tasks: failures.len(),
        failed_images: failed_images.len(),
    };
    Ok(RunReport { rows, failures, summary })
}

/// Mean per cell, in first-appearance order. Rows arrive image by image, so
/// one cell's rows are interleaved with every other cell's.
fn aggregate(rows: &[MetricRow]) -> Vec<CellSummary> {
    type Key<'a> = (&'a str, &'a str, &'static str, &'static str, &'a str, &'static str);
    let mut index: HashMap<Key<'_>, usize> = HashMap::new();
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for r in rows {
        let key = (
            r.model.as_str(),
            r.method.as_str(),
            r.metric,
            r.param_name,
            r.param_value.as_str(),
            r.direction,
        );
        let i = *index.entry(key).or_insert_with(|| {
            cells.push(CellSummary {
                model: r.model.clone(),
                method: r.method.clone(),
                metric: r.metric,
                param_name: r.param_name,
                param_value: r.param_value.clone(),
                direction: r.direction,
                n_images: 0,
                mean: 0.0,
            });
            sums.push(0.0);
            cells.len() - 1
        });
        cells[i].n_images += 1;
        sums[i] += r.value;
    }
    for (c, s) in cells.iter_mut().zip(sums) {
        c.mean = s / c.n_images as f64;
    }
    cells
}

pub const CSV_HEADER: &str = "model,method,metric,param_name,param_value,direction,image_id,value,seed";

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.model, r.method, r.metric, r.param_name, r.param_value, r.direction, r.image_id, r.value, r.seed
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn failures_to_csv(failures: &[TaskFailure]) -> String {
    let mut out = String::from("model,image_id,task,message\n");
    for f in failures {
        writeln!(out, "{},{},{},{}", f.model, f.image_id, csv_field(&f.task), csv_field(&f.message))
            .expect("writing to a String cannot fail");
    }
    out
}

/// Pixel-bias curves of one model: mean value per (method, fraction) with
/// one column per direction.
pub fn pixel_bias_curve(summary: &RunSummary, model: &str) -> String {
    let mut out = String::from("method,fraction,high,low\n");
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in summary.cells.iter().filter(|c| c.model == model && c.metric == "pixel_bias") {
        let key = (c.method.clone(), c.param_value.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (method, fraction) in keys {
        let value = |dir: &str| {
            summary
                .cells
                .iter()
                .find(|c| {
                    c.model == model && c.metric == "pixel_bias" && c.method == method && c.param_value == fraction && c.direction == dir
                })
                .map(|c| c.mean.to_string())
                .unwrap_or_default()
        };
        writeln!(out, "{method},{fraction},{},{}", value("high"), value("low")).expect("writing to a String cannot fail");
    }
    out
}

/// Writes `metrics.csv`, `summary.json`, `errors.csv` and one
/// `curve_<model>_pixel_bias.csv` per model with pixel-bias results.
/// Returns the written paths.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        (dir.join("metrics.csv"), rows_to_csv(&report.rows)),
        (dir.join("summary.json"), {
            let mut s = serde_json::to_string_pretty(&report.summary)?;
            s.push('\n');
            s
        }),
        (dir.join("errors.csv"), failures_to_csv(&report.failures)),
    ];
    for m in &report.summary.models {
        if report.summary.cells.iter().any(|c| c.model == m.id && c.metric == "pixel_bias") {
            files.push((
                dir.join(format!("curve_{}_pixel_bias.csv", m.id)),
                pixel_bias_curve(&report.summary, &m.id),
            ));
        }
    }
    let mut written = Vec::new();
    for (path, text) in files {
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
