use std::collections::BTreeSet;

use vimq_core::model::{
    build_synthetic, calibrate, calibrate_from_taps, collect_taps, synthetic_inputs, CalibrationOptions,
    CalibrationSet, Direction, OutlierProfile, Policy, QuantConfig, SiteParams, VimBlock, VimDims,
    ACTIVATION_SITES, SITE_CONV1D, SITE_OUT_PROJ, WEIGHT_SITES,
};
use vimq_core::Tensor;

fn small() -> VimDims {
    VimDims::new(4, 16, 4).unwrap()
}

fn setup(profile: OutlierProfile) -> (VimBlock, Vec<std::collections::BTreeMap<String, Tensor>>) {
    let m = build_synthetic(11, small(), profile).unwrap();
    let cs = CalibrationSet::synthetic(small(), 12, 5).unwrap();
    let taps = collect_taps(&m, &cs).unwrap();
    (m, taps)
}

#[test]
fn taps_cover_every_config_site() {
    let (m, taps) = setup(OutlierProfile::MiddleTokens);
    let tap_keys: BTreeSet<&str> = taps[0].keys().map(String::as_str).collect();
    assert_eq!(tap_keys, ACTIVATION_SITES.iter().copied().collect());
    for policy in Policy::ALL {
        let qc = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(policy)).unwrap();
        let keys: BTreeSet<&str> = qc.sites.keys().map(String::as_str).collect();
        assert_eq!(keys, tap_keys, "{policy}");
        let wkeys: BTreeSet<&str> = qc.weights.keys().map(String::as_str).collect();
        assert_eq!(wkeys, WEIGHT_SITES.iter().copied().collect());
        qc.check(&m).unwrap();
        let (_, qtaps) = m.forward_quant_taps(&qc, &synthetic_inputs(small(), 1, 99)[0]).unwrap();
        assert_eq!(qtaps.keys().collect::<Vec<_>>(), taps[0].keys().collect::<Vec<_>>());
    }
}

#[test]
fn site_quantizers_are_idempotent() {
    let (m, taps) = setup(OutlierProfile::MiddleTokens);
    let x = &synthetic_inputs(small(), 1, 123)[0];
    for policy in [Policy::Baseline, Policy::Similarity, Policy::KScaled, Policy::Ours] {
        let qc = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(policy)).unwrap();
        let (_, qtaps) = m.forward_quant_taps(&qc, x).unwrap();
        for (site, p) in &qc.sites {
            if matches!(p, SiteParams::HiddenState { .. }) {
                continue;
            }
            let mut once = qtaps[site].clone();
            p.apply(site, &mut once).unwrap();
            assert_eq!(once.to_qten_bytes(), qtaps[site].to_qten_bytes(), "{policy} {site}");
        }
        for (site, p) in &qc.weights {
            let mut w = m.weight(site).unwrap().clone();
            p.apply(site, &mut w).unwrap();
            let mut twice = w.clone();
            p.apply(site, &mut twice).unwrap();
            assert_eq!(w.to_qten_bytes(), twice.to_qten_bytes(), "{policy} {site}");
        }
    }
}

#[test]
fn config_json_round_trip() {
    let (m, taps) = setup(OutlierProfile::MiddleTokens);
    for policy in Policy::ALL {
        let qc = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(policy)).unwrap();
        let json = serde_json::to_string_pretty(&qc).unwrap();
        let back: QuantConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, qc, "{policy}");
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
    }
}

#[test]
fn baseline_and_ours_differ_only_at_assigned_sites() {
    let (m, taps) = setup(OutlierProfile::MiddleTokens);
    let base = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(Policy::Baseline)).unwrap();
    let ours = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(Policy::Ours)).unwrap();
    let mut expected: BTreeSet<String> = [SITE_CONV1D, SITE_OUT_PROJ].iter().map(|s| s.to_string()).collect();
    for dir in Direction::BOTH {
        let s = dir.sites();
        for site in [s.h, s.b, s.c] {
            expected.insert(site.to_string());
        }
    }
    let differ: BTreeSet<String> = base
        .sites
        .iter()
        .filter(|(k, v)| ours.sites[*k] != **v)
        .map(|(k, _)| k.clone())
        .collect();
    assert_eq!(differ, expected);

    let mut folded = BTreeSet::new();
    for dir in Direction::BOTH {
        folded.insert(dir.sites().w_b.to_string());
        folded.insert(dir.sites().w_c.to_string());
    }
    let wdiffer: BTreeSet<String> = base
        .weights
        .iter()
        .filter(|(k, v)| ours.weights[*k] != **v)
        .map(|(k, _)| k.clone())
        .collect();
    assert_eq!(wdiffer, folded);
}

#[test]
fn pass_through_matches_full_precision() {
    let m = build_synthetic(4, small(), OutlierProfile::HeavyChannels).unwrap();
    let qc = QuantConfig::pass_through();
    for x in synthetic_inputs(small(), 3, 8) {
        let (fp, _) = m.forward_fp(&x).unwrap();
        let q = m.forward_quant(&qc, &x).unwrap();
        assert_eq!(fp.to_qten_bytes(), q.to_qten_bytes());
    }
}

#[test]
fn model_rebuilds_from_its_tensors() {
    let m = build_synthetic(21, small(), OutlierProfile::MiddleTokens).unwrap();
    let named: Vec<(String, Tensor)> = m.tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let back = VimBlock::from_tensors(m.dims, m.seed, m.profile, m.discretization, |name| {
        named.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    })
    .unwrap();
    assert_eq!(back, m);
}

#[test]
fn calibration_is_deterministic() {
    let m = build_synthetic(2, small(), OutlierProfile::MiddleTokens).unwrap();
    let cs = CalibrationSet::synthetic(small(), 8, 3).unwrap();
    let a = calibrate(&m, &cs, &CalibrationOptions::default()).unwrap();
    let b = calibrate(&m, &cs, &CalibrationOptions::default()).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
}

#[test]
fn config_coords_fold_only_reparameterized_projections() {
    use vimq_core::reparam::fold_weights;
    let (m, taps) = setup(OutlierProfile::MiddleTokens);
    let base = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(Policy::Baseline)).unwrap();
    let ours = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(Policy::Ours)).unwrap();
    for site in WEIGHT_SITES {
        let w = m.weight(site).unwrap();
        assert_eq!(&base.to_config_coords(site, w).unwrap(), w, "{site}");
    }
    for dir in Direction::BOTH {
        let s = dir.sites();
        let p = m.ssm_params(dir);
        let r_d = &ours.factors(dir).unwrap().r_d;
        let (w_b, w_c) = fold_weights(&p.w_b, &p.w_c, r_d).unwrap();
        assert_eq!(ours.to_config_coords(s.w_b, &p.w_b).unwrap(), w_b);
        assert_eq!(ours.to_config_coords(s.w_c, &p.w_c).unwrap(), w_c);
        let h = &taps[0][s.h];
        assert_eq!(&ours.to_config_coords(s.h, h).unwrap(), h);
    }
    let w = m.weight(vimq_core::model::WEIGHT_IN_PROJ).unwrap();
    assert_eq!(&ours.to_config_coords(vimq_core::model::WEIGHT_IN_PROJ, w).unwrap(), w);
}

#[test]
fn policy_names_agree_between_json_and_text() {
    for policy in Policy::ALL {
        let json = serde_json::to_string(&policy).unwrap();
        assert_eq!(json, format!("\"{policy}\""));
        assert_eq!(policy.as_str().parse::<Policy>().unwrap(), policy);
    }
}
