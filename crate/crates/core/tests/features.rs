use mmt_core::features::*;
use mmt_core::Error;

fn records() -> Vec<FeatureRecord> {
    let ids: Vec<String> = (0..3).map(|i| example_key(i, "2391240")).collect();
    synthetic_records(&ids, 3, 2, 11)
}

#[test]
fn write_then_open_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.mmtf");
    let recs = records();
    write_feature_file(&path, 3, 2, &recs).unwrap();
    let store = FeatureStore::open(&path).unwrap();
    assert_eq!((store.len(), store.regions(), store.dim()), (3, 3, 2));
    assert_eq!(store.ids()[1], "1_2391240");
    for rec in &recs {
        assert_eq!(store.get(&rec.id).unwrap(), rec.features);
    }
    assert!(matches!(store.get("9_x"), Err(Error::MissingFeature(id)) if id == "9_x"));
}

#[test]
fn header_layout_is_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.mmtf");
    write_feature_file(&path, 3, 2, &records()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MMTF");
    assert_eq!(
        &bytes[4..20],
        &[1, 0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]
    );
    assert_eq!(&bytes[20..24], &[9, 0, 0, 0]);
    assert_eq!(&bytes[24..33], b"0_2391240");
    assert_eq!(bytes.len(), 20 + 3 * (4 + 9 + 24));
}

#[test]
fn rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.mmtf");
    write_feature_file(&path, 3, 2, &records()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let bad = dir.path().join("bad.mmtf");
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(
        matches!(FeatureStore::open(&bad), Err(Error::FeatureFile(m)) if m.contains("truncated"))
    );

    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&bad, &wrong).unwrap();
    assert!(FeatureStore::open(&bad).is_err());

    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&bad, &extra).unwrap();
    assert!(FeatureStore::open(&bad).is_err());
}

#[test]
fn synthetic_records_are_seeded() {
    assert_eq!(records(), records());
    let ids = vec!["a".to_string()];
    assert_ne!(
        synthetic_records(&ids, 2, 2, 1),
        synthetic_records(&ids, 2, 2, 2)
    );
}
