use std::collections::BTreeMap;
use std::path::Path;

use attrib_eval::config::{validate_config, RunConfig};
use attrib_eval::harness::{rows_to_csv, CSV_HEADER};
use attrib_eval::{run_evaluation, write_report};

fn small_config(workers: usize, extra_metrics: &str) -> RunConfig {
    let text = format!(
        r#"{{
  "models": [{{ "id": "cnn", "reference": "MiniCNN-32", "seed": 42 }}],
  "dataset": {{ "format": "synthetic_cifar10", "count": 3, "seed": 5 }},
  "methods": ["grad", "gi", "gb", {{ "name": "lime", "n_samples": 65 }}],
  "metrics": {{
    "pixel_bias": {{ "methods": ["gi", "lime"], "m": 8 }},
    "unexplainable": {{ "methods": ["grad", "gi"] }},
    "non_robust": {{ "methods": ["gb", "lime"] }},
    "mutual": {{ "methods": ["grad", "gi", "gb", "lime"] }}
    {extra_metrics}
  }},
  "master_seed": 11,
  "workers": {workers}
}}"#
    );
    validate_config(&text, Path::new(".")).unwrap_or_else(|issues| panic!("{issues:?}"))
}

fn written(cfg: &RunConfig) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let report = run_evaluation(cfg).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    write_report(&report, dir.path()).unwrap();
    std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn worker_count_does_not_change_any_output_byte() {
    let one = written(&small_config(1, ""));
    let three = written(&small_config(3, ""));
    assert_eq!(
        one.keys().collect::<Vec<_>>(),
        ["curve_cnn_pixel_bias.csv", "errors.csv", "metrics.csv", "summary.json"]
    );
    assert_eq!(one, three);
}

#[test]
fn row_counts_and_cell_means_line_up() {
    let report = run_evaluation(&small_config(1, "")).unwrap();
    let count = |metric: &str| report.rows.iter().filter(|r| r.metric == metric).count();
    // 5 fractions × 2 directions per method per image
    assert_eq!(count("pixel_bias"), 2 * 3 * 10);
    assert_eq!(count("unexplainable"), 2 * 3 * 2);
    assert_eq!(count("non_robust"), 2 * 3);
    // four methods give six unordered pairs
    assert_eq!(count("mutual"), 6 * 3);

    for cell in &report.summary.cells {
        let values: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| {
                r.model == cell.model
                    && r.method == cell.method
                    && r.metric == cell.metric
                    && r.param_name == cell.param_name
                    && r.param_value == cell.param_value
                    && r.direction == cell.direction
            })
            .map(|r| r.value)
            .collect();
        assert_eq!(values.len(), cell.n_images, "{cell:?}");
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - cell.mean).abs() <= 1e-12 * (1.0 + mean.abs()), "{cell:?}");
    }
    assert!(report.summary.models[0].alpha.unwrap() > 0.0);

    let csv = rows_to_csv(&report.rows);
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), report.rows.len() + 1);
}

#[test]
fn pixel_bias_rows_share_the_reference_seed() {
    let report = run_evaluation(&small_config(1, "")).unwrap();
    for image in 0..3 {
        let seeds: Vec<u64> = report
            .rows
            .iter()
            .filter(|r| r.metric == "pixel_bias" && r.image_id == image)
            .map(|r| r.seed)
            .collect();
        assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn zero_maps_are_recorded_as_failures_not_rows() {
    let text = r#"{
  "models": [{ "id": "cnn", "reference": "MiniCNN-32", "seed": 42 }],
  "dataset": { "format": "synthetic_cifar10", "count": 2, "seed": 5 },
  "methods": ["grad", { "name": "pert", "steps": 5 }],
  "metrics": { "mutual": { "methods": ["grad", "pert"] } }
}"#;
    let cfg = validate_config(text, Path::new(".")).unwrap();
    let report = run_evaluation(&cfg).unwrap();
    assert!(report.rows.is_empty());
    assert_eq!(report.failures.len(), 2);
    assert!(report.over_budget());
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    let errors = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 3);
    assert!(errors.starts_with("model,image_id,task,message\n"));
}

#[test]
fn lime_sample_count_is_checked_before_running() {
    let text = r#"{
  "models": [{ "id": "cnn", "reference": "MiniCNN-32" }],
  "dataset": { "format": "synthetic_cifar10", "count": 1 },
  "methods": [{ "name": "lime", "grid_k": 8, "n_samples": 16 }],
  "metrics": { "non_robust": { "methods": ["lime"] } }
}"#;
    let issues = validate_config(text, Path::new(".")).unwrap_err();
    assert_eq!(issues.len(), 1, "{issues:?}");
    assert_eq!(issues[0].code, "bad_method_param");
}
