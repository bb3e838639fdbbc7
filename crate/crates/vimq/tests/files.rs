use std::fs;

use proptest::prelude::*;
use vimq::files::{
    config_bytes, load_model, read_config, read_qten, save_model, sha256_hex, write_config, write_qten, MANIFEST_FILE,
};
use vimq::Error;
use vimq_core::model::{build_synthetic, calibrate_from_taps, CalibrationOptions, OutlierProfile, Policy, VimDims};
use vimq_core::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
        let n = dims.iter().product::<usize>();
        prop_oneof![
            prop::collection::vec(any::<f32>(), n).prop_map({
                let d = dims.clone();
                move |v| Tensor::from_f32(&d, v).unwrap()
            }),
            prop::collection::vec(any::<i8>(), n).prop_map({
                let d = dims.clone();
                move |v| Tensor::from_i8(&d, v).unwrap()
            }),
            prop::collection::vec(any::<i32>(), n).prop_map(move |v| Tensor::from_i32(&dims, v).unwrap()),
        ]
    })
}

fn bit_eq(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && a.dtype() == b.dtype() && a.to_qten_bytes() == b.to_qten_bytes()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qten_files_round_trip(t in tensor()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qten");
        let sha = write_qten(&path, &t).unwrap();
        prop_assert_eq!(sha, sha256_hex(&fs::read(&path).unwrap()));
        prop_assert!(bit_eq(&read_qten(&path).unwrap(), &t));
    }

    #[test]
    fn truncated_qten_is_rejected(t in tensor(), cut in 1usize..8) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qten");
        write_qten(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len().saturating_sub(cut)]).unwrap();
        let err = read_qten(&path).unwrap_err();
        prop_assert_eq!(err.exit_code(), 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn models_round_trip_and_detect_tampering(
        seed in any::<u64>(),
        c in 2usize..5,
        l in 4usize..12,
        d in 1usize..4,
        profile in prop::sample::select(OutlierProfile::ALL.to_vec()),
        flip in any::<prop::sample::Index>(),
    ) {
        let m = build_synthetic(seed, VimDims::new(c, l, d).unwrap(), profile).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digest = save_model(dir.path(), &m).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        prop_assert_eq!(&loaded.model, &m);
        prop_assert_eq!(&loaded.manifest_sha256, &digest);
        prop_assert_eq!(digest, sha256_hex(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()));

        let victim = dir.path().join("in_proj.weight.qten");
        let mut bytes = fs::read(&victim).unwrap();
        let i = flip.index(bytes.len());
        bytes[i] ^= 0x01;
        fs::write(&victim, &bytes).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        prop_assert_eq!(err.exit_code(), 3, "{}", err);
    }
}

#[test]
fn configs_round_trip_for_every_policy() {
    let m = build_synthetic(2, VimDims::new(4, 8, 4).unwrap(), OutlierProfile::MiddleTokens).unwrap();
    let taps = vimq::experiments::calibration_taps(&m, 8, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for policy in Policy::ALL {
        let qc = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(policy)).unwrap();
        let path = dir.path().join(format!("{policy}.json"));
        let digest = write_config(&path, &qc).unwrap();
        let (back, back_digest) = read_config(&path).unwrap();
        assert_eq!(back, qc, "{policy}");
        assert_eq!(back_digest, digest);
        assert_eq!(config_bytes(&back), fs::read(&path).unwrap());
    }
}

#[test]
fn truncated_config_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, b"{\"version\": 1, \"policy\": \"baseline\"").unwrap();
    assert!(matches!(read_config(&path), Err(Error::Json { .. })));
}
