mod common;

use std::collections::BTreeMap;
use std::path::Path;

use purity_core::headmodel::{DisentanglementTransform, TransformMode};
use purity_core::permutation_score;
use purity_core::protobank::build_bank;
use purity_core::synthlab::{
    baseline_accuracy, generate, generate_in_memory, planted_purity, random_orthogonal, GroundTruth, SynthSpec,
};
use purity_core::tensorio::{FeatureStore, Manifest};

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn transform_from(m: &nalgebra::DMatrix<f64>) -> DisentanglementTransform {
    let d = m.nrows();
    let params = (0..d * d).map(|i| m[(i / d, i % d)]).collect();
    DisentanglementTransform::from_params(TransformMode::Free, d, params).unwrap()
}

#[test]
fn same_seed_writes_identical_files() {
    let spec = SynthSpec {
        samples_per_class: 6,
        seed: 11,
        ..SynthSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 30 + 4);
    assert_eq!(ta, tb);

    let other = tempfile::tempdir().unwrap();
    generate(&SynthSpec { seed: 12, ..spec }, other.path()).unwrap();
    assert_ne!(read_tree(other.path()), ta);
}

#[test]
fn written_fixture_loads_and_classifies_perfectly() {
    let spec = SynthSpec {
        seed: 7,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let fixture = generate(&spec, dir.path()).unwrap();
    let manifest = Manifest::load(&fixture.manifest_path).unwrap();
    assert_eq!(manifest.len(), 200);
    let head = manifest.load_head().unwrap();
    assert_eq!(baseline_accuracy(&manifest, &head).unwrap(), 1.0);
    assert_eq!(GroundTruth::load(&fixture.truth_path).unwrap(), fixture.truth);
}

#[test]
fn disk_and_memory_fixtures_agree() {
    let spec = SynthSpec {
        samples_per_class: 4,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let fixture = generate(&spec, dir.path()).unwrap();
    let manifest = Manifest::load(&fixture.manifest_path).unwrap();
    let mem = generate_in_memory(&spec).unwrap();
    for i in 0..manifest.len() {
        assert_eq!(manifest.sample_id(i), mem.store.sample_id(i));
        assert_eq!(manifest.label(i), mem.store.label(i));
        let (a, b) = (manifest.load(i).unwrap(), mem.store.load(i).unwrap());
        assert_eq!(a.as_slice(), b.as_slice());
    }
}

#[test]
fn identity_mixing_is_pure_without_training() {
    let spec = SynthSpec {
        identity_mixing: true,
        ..SynthSpec::default()
    };
    let data = generate_in_memory(&spec).unwrap();
    let u = DisentanglementTransform::identity(8, TransformMode::Orthogonal);
    let bank = build_bank(&data.store, &u, 5).unwrap();
    let p = planted_purity(&bank, u.matrix(), &data.truth, 5);
    assert!(p >= 0.9, "planted purity {p}");
}

#[test]
fn ground_truth_transform_unmixes_the_fixture() {
    let data = generate_in_memory(&SynthSpec::default()).unwrap();
    let m = data.truth.mixing_matrix();
    let u = transform_from(&m);
    let bank = build_bank(&data.store, &u, 5).unwrap();
    let p = planted_purity(&bank, u.matrix(), &data.truth, 5);
    assert!(p >= 0.9, "planted purity at the truth {p}");
    assert!((permutation_score(&m, &m).unwrap() - 1.0).abs() <= 1e-12);

    let identity = DisentanglementTransform::identity(8, TransformMode::Orthogonal);
    let mixed = build_bank(&data.store, &identity, 5).unwrap();
    assert!(planted_purity(&mixed, identity.matrix(), &data.truth, 5) < p - 0.2);
}

#[test]
fn random_rotations_score_low() {
    let mut rng = common::rng(40);
    for (d, bound) in [(16, 0.6), (8, 0.8)] {
        let truth = random_orthogonal(d, &mut rng);
        let guess = random_orthogonal(d, &mut rng);
        let s = permutation_score(&guess, &truth).unwrap();
        assert!(s < bound, "D={d}: score {s}");
    }
}

#[test]
fn too_few_channels_for_the_classes_is_rejected() {
    let spec = SynthSpec {
        num_classes: 9,
        channels: 8,
        ..SynthSpec::default()
    };
    assert_eq!(generate_in_memory(&spec).unwrap_err().exit_code(), 1);
}
