mod common;

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use purity_core::tensorio::{
    read_header, read_tensor, write_tensor, EptTensor, FeatureStore, Manifest, Pooling, SampleEntry,
};
use purity_core::{Error, FeatureTensor};

fn dims_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    prop::collection::vec(1usize..6, 1..=3).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        (
            Just(dims),
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn write_then_read_is_bit_exact((dims, data) in dims_and_data()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ept");
        let t = EptTensor::new(dims.clone(), data.clone()).unwrap();
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        prop_assert_eq!(back.dims(), &dims[..]);
        let same = back.data().iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!(read_header(&path).unwrap(), dims);
    }
}

#[test]
fn header_layout_is_little_endian() {
    let t = EptTensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
    let bytes = t.to_bytes();
    assert_eq!(&bytes[..4], b"EPT1");
    assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
    assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
    assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
    assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
    assert_eq!(bytes.len(), 20 + 6 * 4);
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ept");
    let t = EptTensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut bytes = t.to_bytes();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    let err = read_tensor(&path).unwrap_err();
    assert!(matches!(err, Error::Format { field: "payload", .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_tensor(Path::new("/nonexistent/nowhere.ept")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 2);
}

struct Fixture {
    dir: tempfile::TempDir,
    manifest: Manifest,
}

/// Three 2×2×`d` samples with ids written out of order and an `n × d` head.
fn fixture(n: usize, d: usize, head_dims: (usize, usize)) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let head = EptTensor::new(vec![head_dims.0, head_dims.1], vec![0.5; head_dims.0 * head_dims.1]).unwrap();
    write_tensor(&head, &dir.path().join("head.ept")).unwrap();
    let mut samples = Vec::new();
    for (i, id) in ["c", "a", "b"].iter().enumerate() {
        let z = FeatureTensor::from_fn(2, 2, d, |h, w, k| (i * 100 + h * 10 + w + k) as f64);
        let rel = PathBuf::from(format!("{id}.ept"));
        write_tensor(&z.to_ept(), &dir.path().join(&rel)).unwrap();
        samples.push(SampleEntry {
            id: id.to_string(),
            feature_path: rel,
            label: i % n,
            source_image: None,
        });
    }
    let manifest = Manifest::new("unit", n, d, "head.ept", None, samples);
    Fixture { dir, manifest }
}

fn save_and_load(f: &Fixture) -> purity_core::Result<Manifest> {
    let path = f.dir.path().join("manifest.toml");
    f.manifest.save(&path).unwrap();
    Manifest::load(&path)
}

fn validation_messages(r: purity_core::Result<Manifest>) -> Vec<String> {
    match r {
        Err(Error::Validation(v)) => v,
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn valid_manifest_streams_in_id_order() {
    let f = fixture(2, 3, (2, 3));
    let m = save_and_load(&f).unwrap();
    let ids: Vec<&str> = (0..m.len()).map(|i| m.sample_id(i)).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    let first = m.load(0).unwrap();
    assert_eq!(first.get(0, 0, 0), 100.0);
    assert_eq!(m.index_of("c"), Some(2));
    assert_eq!(m.index_of("zz"), None);
    let head = m.load_head().unwrap();
    assert_eq!((head.num_classes(), head.channels()), (2, 3));
}

#[test]
fn label_equal_to_class_count_is_out_of_range() {
    let mut f = fixture(2, 3, (2, 3));
    f.manifest.samples[0].label = 2;
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("label out of range")), "{msgs:?}");
}

#[test]
fn head_with_wrong_width_is_a_channel_mismatch() {
    let f = fixture(3, 4, (3, 5));
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("channel mismatch")), "{msgs:?}");
}

#[test]
fn head_with_wrong_height_is_a_class_mismatch() {
    let f = fixture(3, 4, (2, 4));
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("class mismatch")), "{msgs:?}");
}

#[test]
fn duplicate_ids_and_bad_labels_are_all_reported() {
    let mut f = fixture(2, 3, (2, 3));
    f.manifest.samples[1].id = "c".into();
    f.manifest.samples[2].label = 9;
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("duplicate id")), "{msgs:?}");
    assert!(msgs.iter().any(|m| m.contains("label out of range")), "{msgs:?}");
}

#[test]
fn max_pooling_is_rejected() {
    let mut f = fixture(2, 3, (2, 3));
    f.manifest.pooling = Pooling::Max;
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("pooling")), "{msgs:?}");
}

#[test]
fn empty_sample_list_is_rejected() {
    let mut f = fixture(2, 3, (2, 3));
    f.manifest.samples.clear();
    let err = save_and_load(&f).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("empty dataset"), "{err}");
}

#[test]
fn mixed_spatial_dims_need_opt_in() {
    let mut f = fixture(2, 3, (2, 3));
    let odd = FeatureTensor::zeros(3, 1, 3);
    write_tensor(&odd.to_ept(), &f.dir.path().join("b.ept")).unwrap();
    let msgs = validation_messages(save_and_load(&f));
    assert!(msgs.iter().any(|m| m.contains("spatial dims")), "{msgs:?}");
    f.manifest.uniform_spatial = false;
    let m = save_and_load(&f).unwrap();
    assert_eq!(m.load(1).unwrap().spatial(), (3, 1));
}

#[test]
fn manifest_toml_round_trips() {
    let mut f = fixture(2, 3, (2, 3));
    f.manifest.provenance.insert("backbone".into(), "resnet-ish".into());
    let text = f.manifest.to_toml();
    let back = Manifest::parse(&text, Path::new("mem"), f.dir.path()).unwrap();
    assert_eq!(back.provenance.get("backbone").map(String::as_str), Some("resnet-ish"));
    assert_eq!(back.samples, f.manifest.samples);
}
