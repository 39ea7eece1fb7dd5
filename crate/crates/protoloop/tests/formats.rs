use std::fs;
use std::path::Path;

use proptest::prelude::*;
use protoloop::array_io::{
    load_array, load_features, load_intensity, load_labels, load_params, save_features, save_intensity,
    save_labels, save_params, Array, ParamsMeta, MAGIC,
};
use protoloop::core::encoder::{extract_feature_grid, EncoderParams};
use protoloop::core::specialist::SpecialistParams;
use protoloop::core::volume::{IntensityVolume, LabelVolume, Shape3};
use protoloop::manifest::Manifest;
use protoloop::Error;

fn write_raw(path: &Path, header: &str, payload: &[u8]) {
    let mut bytes = MAGIC.to_vec();
    bytes.extend((header.len() as u32).to_le_bytes());
    bytes.extend(header.as_bytes());
    bytes.extend(payload);
    fs::write(path, bytes).unwrap();
}

#[test]
fn eight_ones_load_as_intensity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ones.img");
    let payload: Vec<u8> = (0..8).flat_map(|_| 1.0f32.to_le_bytes()).collect();
    write_raw(&p, r#"{"dtype":"f32","shape":[2,2,2],"order":"row-major"}"#, &payload);
    let v = load_intensity(&p).unwrap();
    assert_eq!(v.shape(), Shape3::cube(2));
    assert!(v.data().iter().all(|&x| x == 1.0));
}

#[test]
fn shape_payload_disagreement_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.img");
    write_raw(&p, r#"{"dtype":"f32","shape":[2,2,2],"order":"row-major"}"#, &[0u8; 12]);
    let err = load_array(&p).unwrap_err();
    assert!(err.to_string().contains("shape/payload mismatch"), "{err}");

    write_raw(&p, r#"{"dtype":"f32","shape":[0,2,2],"order":"row-major"}"#, &[]);
    assert!(load_array(&p).is_err());

    write_raw(&p, r#"{"dtype":"u8","shape":[1,1,2],"order":"row-major","num_classes":2}"#, &[0, 2]);
    assert!(load_array(&p).is_err(), "label value >= class count must be rejected");
}

#[test]
fn typed_loaders_reject_other_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.label");
    save_labels(&LabelVolume::filled(Shape3::cube(2), 3, 1).unwrap(), &p).unwrap();
    let err = load_intensity(&p).unwrap_err();
    assert!(err.to_string().contains("dtype mismatch"));
    assert!(load_labels(&p, Some(4)).is_err());
    assert_eq!(load_labels(&p, Some(3)).unwrap().num_classes(), 3);
}

#[test]
fn feature_grid_and_params_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vol = IntensityVolume::from_fn(Shape3::new(9, 8, 7).unwrap(), |[i, j, k]| (i * j) as f32 - k as f32 * 0.5).unwrap();
    let grid = extract_feature_grid(&vol, &EncoderParams { patch_size: 4, ..Default::default() }).unwrap();
    let p = dir.path().join("g.feat");
    save_features(&grid, &p).unwrap();
    assert_eq!(load_features(&p).unwrap(), grid);

    // values exactly representable in f32 survive the f32 payload
    let params = SpecialistParams::from_parts(2, 3, vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75], vec![0.125, -4.0]).unwrap();
    let meta = ParamsMeta {
        num_features: 3,
        num_classes: 2,
        round: Some(1),
        iteration: Some(10),
    };
    let p = dir.path().join("params.arr");
    save_params(&params, &meta, &p).unwrap();
    assert_eq!(load_params(&p).unwrap(), (params, meta));
}

#[test]
fn files_start_with_magic_and_json_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.label");
    save_labels(&LabelVolume::filled(Shape3::new(1, 2, 3).unwrap(), 2, 1).unwrap(), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..6], MAGIC);
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + n]).unwrap();
    assert_eq!(header["dtype"], "u8");
    assert_eq!(header["shape"], serde_json::json!([1, 2, 3]));
    assert_eq!(bytes.len(), 10 + n + 6);
}

fn write_manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    let ok = r#"{"num_classes":2,"exactly_one_labeled":true,"volumes":[
        {"id":"a","intensity":"a.img","label":"a.label"},
        {"id":"b","intensity":"b.img"},
        {"id":"t","intensity":"t.img","split":"test","truth":"t.label"}]}"#;
    let m = Manifest::load(&write_manifest(dir.path(), ok)).unwrap();
    assert_eq!(m.template().unwrap().id, "a");
    assert_eq!(m.train().count(), 2);
    assert_eq!(m.test().count(), 1);
    assert_eq!(m.resolve(Path::new("a.img")), dir.path().join("a.img"));

    let cases = [
        r#"{"num_classes":2,"volumes":[{"id":"a","intensity":"a"},{"id":"a","intensity":"b"}]}"#,
        r#"{"num_classes":2,"exactly_one_labeled":true,"volumes":[{"id":"a","intensity":"a"},{"id":"b","intensity":"b"}]}"#,
        r#"{"num_classes":2,"exactly_one_labeled":true,"volumes":[{"id":"a","intensity":"a","label":"x"},{"id":"b","intensity":"b","label":"y"}]}"#,
        r#"{"num_classes":1,"volumes":[{"id":"a","intensity":"a"}]}"#,
        r#"{"num_classes":2,"volumes":[]}"#,
        r#"{"num_classes":2,"volumes":[{"id":"a b","intensity":"a"}]}"#,
        r#"{"num_classes":2,"volumes":[{"id":"a","intensity":"a","label":"l","split":"test"}]}"#,
    ];
    for (i, body) in cases.iter().enumerate() {
        let err = Manifest::load(&write_manifest(dir.path(), body)).unwrap_err();
        assert!(matches!(err, Error::Validation(_) | Error::Json { .. }), "case {i}: {err}");
    }
}

fn volume_case() -> impl Strategy<Value = (Shape3, Vec<f32>, usize, Vec<u8>)> {
    (1usize..6, 1usize..6, 1usize..6, 2usize..9).prop_flat_map(|(d, h, w, c)| {
        let n = d * h * w;
        (
            Just(Shape3::new(d, h, w).unwrap()),
            prop::collection::vec(-1e6f32..1e6, n),
            Just(c),
            prop::collection::vec(0..c as u8, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arrays_round_trip_bit_identical((shape, values, classes, labels) in volume_case()) {
        let dir = tempfile::tempdir().unwrap();
        let vol = IntensityVolume::new(shape, values).unwrap();
        let p = dir.path().join("v.img");
        save_intensity(&vol, &p).unwrap();
        let back = load_intensity(&p).unwrap();
        prop_assert!(vol.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let labels = LabelVolume::new(shape, classes, labels).unwrap();
        let p = dir.path().join("l.label");
        save_labels(&labels, &p).unwrap();
        prop_assert_eq!(load_array(&p).unwrap(), Array::Labels(labels));
    }
}
