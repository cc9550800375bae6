use std::path::{Path, PathBuf};

use ndarray::Array3;
use proptest::prelude::*;
use tafnet::cohort::{manifest_load, manifest_parse, Cohort, PairRecord};
use tafnet::volume::HEADER_LEN;
use tafnet::{IntensityTag, TafError, Volume};

fn ramp(n: usize) -> Volume {
    let d = Array3::from_shape_fn((n, n, n), |(z, y, x)| (z * n * n + y * n + x) as f32);
    Volume::new(d, [1.0, 1.25, 2.0], IntensityTag::Raw).unwrap()
}

#[test]
fn ramp_round_trip_and_layout() {
    let v = ramp(4);
    let bytes = v.to_bytes();
    assert_eq!(HEADER_LEN, 32);
    assert_eq!(bytes.len(), 32 + 4 * 64);
    assert_eq!(&bytes[..8], b"TAFVOL01");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
    assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.25);
    // voxel (1,2,3) sits at row-major offset 16+8+3
    let off = 32 + 4 * 27;
    assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 27.0);
    let back = Volume::from_bytes(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.tafvol");
    ramp(3).write(&p).unwrap();
    assert_eq!(Volume::read(&p).unwrap(), ramp(3));
    assert!(matches!(Volume::read(dir.path().join("missing")), Err(TafError::Io { .. })));
}

#[test]
fn malformed_inputs_are_format_errors() {
    let mut bytes = ramp(2).to_bytes();
    assert!(matches!(Volume::from_bytes(&bytes[..20]), Err(TafError::Format(_))));
    assert!(matches!(Volume::from_bytes(&bytes[..bytes.len() - 1]), Err(TafError::Format(_))));
    bytes[0] = b'X';
    assert!(matches!(Volume::from_bytes(&bytes), Err(TafError::Format(_))));
}

#[test]
fn unit_tag_is_inferred_and_enforced() {
    let u = Volume::new(Array3::from_elem((2, 2, 2), 0.5), [1.0; 3], IntensityTag::Unit).unwrap();
    assert_eq!(Volume::from_bytes(&u.to_bytes()).unwrap().tag(), IntensityTag::Unit);
    assert_eq!(Volume::from_bytes(&ramp(2).to_bytes()).unwrap().tag(), IntensityTag::Raw);
    assert!(Volume::new(Array3::from_elem((2, 2, 2), 1.5), [1.0; 3], IntensityTag::Unit).is_err());
    assert!(Volume::raw(Array3::from_elem((2, 2, 2), f32::NAN)).is_err());
    assert!(Volume::raw(Array3::zeros((0, 2, 2))).is_err());
}

fn pair(s: &str, b: &str, f: &str, months: u32, label: u8) -> PairRecord {
    PairRecord { subject_id: s.into(), baseline: b.into(), followup: f.into(), interval_months: months, label }
}

#[test]
fn cohort_validation() {
    assert!(matches!(
        Cohort::new(vec![pair("s1", "a", "b", 12, 1), pair("s1", "a", "c", 24, 0)]),
        Err(TafError::Schema(_))
    ));
    assert!(Cohort::new(vec![pair("s1", "a", "a", 12, 1)]).is_err());
    assert!(Cohort::new(vec![pair("s1", "a", "b", 18, 1)]).is_err());
    assert!(Cohort::new(vec![pair("", "a", "b", 6, 1)]).is_err());
    let c = Cohort::new(vec![pair("s1", "a", "b", 12, 1), pair("s1", "a", "c", 24, 1), pair("s2", "d", "e", 6, 0)]).unwrap();
    assert_eq!(c.class_counts(), (1, 2));
    assert_eq!(c.subject_class_counts(), (1, 1));
    assert_eq!(c.filter_interval(24).len(), 1);
    assert_eq!(c.restrict(["s2"]).pairs()[0].subject_id, "s2");
}

#[test]
fn missing_column_is_schema_error() {
    let text = "subject_id,baseline,followup,label\ns1,a,b,1\n";
    assert!(matches!(manifest_parse(text, Path::new("")), Err(TafError::Schema(_))));
}

#[test]
fn manifest_round_trip_uses_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let c = Cohort::new(vec![
        pair("s1", base.join("v/a.tafvol").to_str().unwrap(), base.join("v/b.tafvol").to_str().unwrap(), 12, 1),
        pair("s2", "/elsewhere/c.tafvol", "/elsewhere/d.tafvol", 6, 0),
    ])
    .unwrap();
    let path = base.join("manifest.csv");
    c.write_manifest(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("s1,v/a.tafvol,v/b.tafvol,12,1"), "{text}");
    assert!(text.contains("/elsewhere/c.tafvol"));
    assert_eq!(manifest_load(&path).unwrap(), c);
    assert_eq!(manifest_load(&path).unwrap().pairs()[0].baseline, PathBuf::from(base.join("v/a.tafvol")));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn arbitrary_volumes_round_trip(shape in prop::array::uniform3(1usize..6), seed in any::<u32>(), sp in prop::array::uniform3(0.1f32..4.0)) {
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6 - 2000.0).collect();
        let v = Volume::new(Array3::from_shape_vec(shape, vals).unwrap(), sp, IntensityTag::Raw).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        prop_assert_eq!(back.data(), v.data());
        prop_assert_eq!(back.spacing(), sp);
    }
}
