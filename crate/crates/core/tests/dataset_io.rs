use std::fs;

use polyp_audit::synthgen::{
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetConfig, SynthError,
    MANIFEST_FILE, PAYLOAD_FILE,
};

fn small() -> Dataset {
    let mut cfg = DatasetConfig::default();
    cfg.cohort.n_patients = 2;
    cfg.cohort.n_polyps = 2;
    cfg.confound.frames_per_polyp = 3;
    generate_dataset(&cfg, 5).unwrap()
}

#[test]
fn two_polyp_dataset_round_trips_exactly() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);

    // Rewriting what was read gives the same bytes.
    let again = tempfile::tempdir().unwrap();
    write_dataset(&back, again.path()).unwrap();
    for file in [MANIFEST_FILE, PAYLOAD_FILE] {
        assert_eq!(
            fs::read(dir.path().join(file)).unwrap(),
            fs::read(again.path().join(file)).unwrap()
        );
    }
}

#[test]
fn truncated_payload_is_a_dimension_error() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let payload = dir.path().join(PAYLOAD_FILE);
    let bytes = fs::read(&payload).unwrap();
    fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(SynthError::DimensionMismatch(_))
    ));
}

#[test]
fn empty_dataset_round_trips() {
    let empty = Dataset::new(Vec::new(), Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&empty, dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join(PAYLOAD_FILE)).unwrap().len(), 0);
    let back = read_dataset(dir.path()).unwrap();
    assert!(back.cohort.is_empty() && back.frames.is_empty());
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(SynthError::Io { .. })
    ));
}

#[test]
fn corrupt_manifest_line_is_reported() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"polyp\"", "\"polip\"", 1)).unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(SynthError::Manifest { .. })
    ));
}
