mod common;

use std::fs;

use common::*;
use oodeval::arraystore::{self, load_bundle, save_bundle, write_matrix, MatrixFile, HEADER_LEN};
use oodeval::Error;

#[test]
fn saved_bundle_reloads_with_f32_precision() {
    let bundle = SyntheticSpec::new(1, 6, 3).build();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_bundle(dir.path(), &bundle).unwrap();
    let back = load_bundle(&manifest).unwrap();
    assert_eq!(back.num_classes(), 3);
    assert_eq!(back.feature_dim(), Some(6));
    assert_eq!(back.id_train().labels, bundle.id_train().labels);
    let (a, b) = (&bundle.id_test().logits, &back.id_test().logits);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(*y, *x as f32 as f64);
    }
    // a second save of the reloaded bundle is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    save_bundle(dir2.path(), &back).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if name != "manifest.json" {
            assert_eq!(
                fs::read(dir.path().join(&name)).unwrap(),
                fs::read(dir2.path().join(&name)).unwrap(),
                "{name:?}"
            );
        }
    }
}

#[test]
fn header_layout_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.oodm");
    write_matrix(&path, &MatrixFile::from_f32(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 6 * 4);
    assert_eq!(&bytes[..4], b"OODM");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(bytes[6], 0);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
    assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.0);
    assert_eq!(f32::from_le_bytes(bytes[44..48].try_into().unwrap()), 6.0);
}

fn saved(seed: u64) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_bundle(dir.path(), &SyntheticSpec::new(seed, 4, 3).build()).unwrap();
    (dir, manifest)
}

#[test]
fn manifest_problems_are_data_errors() {
    let (_dir, manifest) = saved(2);
    let text = fs::read_to_string(&manifest).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();

    json["id_train"].as_object_mut().unwrap().remove("labels");
    fs::write(&manifest, json.to_string()).unwrap();
    let err = load_bundle(&manifest).unwrap_err();
    assert!(matches!(err, Error::Data(_)) && err.to_string().contains("labels"), "{err}");
    assert_eq!(err.exit_code(), 3);

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["surprise"] = serde_json::json!(1);
    fs::write(&manifest, json.to_string()).unwrap();
    assert!(matches!(load_bundle(&manifest), Err(Error::Data(_))));

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["ood"] = serde_json::json!({});
    fs::write(&manifest, json.to_string()).unwrap();
    let err = load_bundle(&manifest).unwrap_err();
    assert!(err.to_string().contains("OOD"), "{err}");
}

#[test]
fn damaged_matrix_files_are_rejected() {
    let (dir, manifest) = saved(3);
    let path = dir.path().join("id_test_logits.oodm");
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_bundle(&manifest), Err(Error::Format { .. })));

    fs::write(&path, &good[..good.len() - 1]).unwrap();
    assert!(matches!(load_bundle(&manifest), Err(Error::Format { .. })));

    let mut nan = good.clone();
    nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &nan).unwrap();
    let err = load_bundle(&manifest).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    fs::remove_file(&path).unwrap();
    assert!(matches!(load_bundle(&manifest), Err(Error::Io { .. })));
}

#[test]
fn tampered_train_logits_name_the_worst_sample() {
    let (dir, manifest) = saved(4);
    let path = dir.path().join("id_train_logits.oodm");
    let m = arraystore::read_matrix(&path).unwrap();
    let mut a = m.to_f64().unwrap();
    a[[17, 1]] += 5.0;
    a[[30, 0]] += 0.5;
    write_matrix(&path, &MatrixFile::from_array(a.view()).unwrap()).unwrap();
    let err = load_bundle(&manifest).unwrap_err();
    assert!(err.to_string().contains("index 17"), "{err}");
}
