use attrib_core::reference::{build_reference_model, ReferenceModel};
use attrib_core::{forward, Tensor};
use attrib_eval::cifar::{encode_cifar_batch, load_cifar_batch, parse_cifar_batch, synthetic_cifar_batch, PIXEL_BYTES};
use attrib_eval::manifest::{read_model, save_model, sibling_blob, write_model, ModelManifest};
use attrib_eval::ppm::{encode_ppm, parse_ppm};
use attrib_eval::Error;

#[test]
fn reference_models_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for which in [ReferenceModel::TinyMlp9, ReferenceModel::MiniCnn32] {
        let model = build_reference_model(which, 42);
        let path = dir.path().join(format!("{}.json", which.name()));
        write_model(&path, &model).unwrap();
        assert!(sibling_blob(&path).exists());
        let back = read_model(&path).unwrap();
        assert_eq!(back, model);
        let image = Tensor::filled(&model.input_shape(), 0.3);
        assert_eq!(forward(&back, &image).unwrap().logits(), forward(&model, &image).unwrap().logits());
    }
}

#[test]
fn manifests_are_canonical() {
    let model = build_reference_model(ReferenceModel::MiniCnn32, 7);
    let (text, blob) = save_model(&model, "w.bin").unwrap();
    let manifest = ModelManifest::parse(text.as_bytes()).unwrap();
    assert_eq!(manifest.to_canonical_string(), text);
    assert_eq!(manifest.weights_bytes, blob.len());
    assert!(text.ends_with('\n'));
    let (again, _) = save_model(&model, "w.bin").unwrap();
    assert_eq!(again, text);
}

#[test]
fn missing_blob_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    write_model(&path, &build_reference_model(ReferenceModel::TinyMlp9, 1)).unwrap();
    std::fs::remove_file(sibling_blob(&path)).unwrap();
    assert!(matches!(read_model(&path), Err(Error::Io { .. })));
}

#[test]
fn cifar_batches_round_trip() {
    let bytes = synthetic_cifar_batch(3, 9);
    assert_eq!(bytes.len(), 3 * 3073);
    let set = parse_cifar_batch(&bytes, "synthetic").unwrap();
    let records: Vec<(u8, Vec<u8>)> = set
        .images()
        .iter()
        .zip(set.labels())
        .map(|(im, &l)| (l as u8, im.data().iter().map(|v| (v * 255.0).round() as u8).collect()))
        .collect();
    assert_eq!(encode_cifar_batch(&records).unwrap(), bytes);
    assert_eq!(records[0].1.len(), PIXEL_BYTES);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_cifar_batch(&path).unwrap().images(), set.images());
    assert!(matches!(
        parse_cifar_batch(&bytes[..3000], "short"),
        Err(Error::Format(_) | Error::Truncated { .. })
    ));
}

#[test]
fn synthetic_batches_depend_on_the_seed_only() {
    assert_eq!(synthetic_cifar_batch(2, 5), synthetic_cifar_batch(2, 5));
    assert_ne!(synthetic_cifar_batch(2, 5), synthetic_cifar_batch(2, 6));
    assert_eq!(&synthetic_cifar_batch(3, 5)[..2 * 3073], &synthetic_cifar_batch(2, 5)[..]);
}

#[test]
fn ppm_round_trip() {
    let set = parse_cifar_batch(&synthetic_cifar_batch(1, 2), "s").unwrap();
    let bytes = encode_ppm(&set.images()[0]).unwrap();
    assert_eq!(parse_ppm(&bytes).unwrap(), set.images()[0]);
}

/// A real CIFAR-10 batch, when one is available: point `CIFAR10_TEST_BATCH`
/// at `data_batch_1.bin`.
#[test]
fn real_cifar_batch_when_available() {
    let Some(path) = std::env::var_os("CIFAR10_TEST_BATCH") else {
        eprintln!("CIFAR10_TEST_BATCH not set; skipping");
        return;
    };
    let set = load_cifar_batch(std::path::Path::new(&path)).unwrap();
    assert_eq!(set.len(), 10_000);
    assert_eq!(set.labels()[0], 6);
    let mean: f64 = set.images()[..100]
        .iter()
        .map(|im| im.data().iter().sum::<f64>() / 3072.0)
        .sum::<f64>()
        / 100.0;
    assert!((0.3..0.6).contains(&mean), "mean pixel {mean}");
}
