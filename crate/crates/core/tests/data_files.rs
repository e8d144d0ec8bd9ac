//! Synthetic datasets written to disk load back as the same samples.

use gmscenet::data::{
    load_annotations, load_image, save_image, synthetic_samples, write_synthetic_dataset, Split,
};
use gmscenet::Error;

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path(), 6, 40, 32, 9).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    let loaded = load_annotations(dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(loaded.entries, manifest.entries);

    let generated = synthetic_samples(6, 40, 32, 9).unwrap();
    let samples = loaded.load_all().unwrap();
    for (a, b) in samples.iter().zip(&generated) {
        assert_eq!(a.keypoints, b.keypoints);
        // Images are stored as 8-bit PGM.
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
    }
    let per_split: usize = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| loaded.count(s))
        .sum();
    assert_eq!(per_split, 6);
}

#[test]
fn image_paths_resolve_against_the_annotation_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nested");
    write_synthetic_dataset(&data, 2, 32, 32, 1).unwrap();
    let m = load_annotations(data.join("annotations.jsonl")).unwrap();
    for e in &m.entries {
        assert!(m.image_path(e).starts_with(&data));
        let img = load_image(m.image_path(e)).unwrap();
        assert_eq!((img.shape().h, img.shape().w), (32, 32));
    }
}

#[test]
fn saved_images_round_trip_through_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let s = &synthetic_samples(1, 32, 48, 4).unwrap()[0];
    let path = dir.path().join("a.pgm");
    save_image(&path, &s.image).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.shape(), s.image.shape());
    assert!(back.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
    save_image(&path, &back).unwrap();
    assert_eq!(load_image(&path).unwrap(), back);
}

#[test]
fn out_of_bounds_annotation_names_the_part() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 1, 32, 32, 2).unwrap();
    let path = dir.path().join("annotations.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut record: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    record["kps"][3] = serde_json::json!([99.0, 5.0, 1]);
    std::fs::write(&path, format!("{record}\n")).unwrap();
    let err = load_annotations(&path)
        .and_then(|m| m.load_all())
        .unwrap_err();
    assert!(matches!(err, Error::KeypointOutOfBounds { .. }), "{err}");
    assert!(err.to_string().contains("tail_base"), "{err}");
}

#[test]
fn missing_image_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 1, 32, 32, 3).unwrap();
    let m = load_annotations(dir.path().join("annotations.jsonl")).unwrap();
    std::fs::remove_file(m.image_path(&m.entries[0])).unwrap();
    assert!(matches!(m.load_all(), Err(Error::Io { .. })));
}
