use std::ffi::{CStr, CString};
use std::ptr;

use ratiovr_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn small_params() -> RvrGbdtParams {
    RvrGbdtParams {
        n_trees: 10,
        max_depth: 2,
        min_samples_leaf: 20,
        ..rvr_gbdt_params_default()
    }
}

unsafe fn build_experiment(n: usize) -> *mut RvrExperiment {
    let mut exp = ptr::null_mut();
    assert_eq!(rvr_experiment_new(c("control").as_ptr(), &mut exp), RvrStatus::Ok);
    for i in 0..n {
        let variant = if i % 2 == 0 { "control" } else { "treatment" };
        let x = (i % 17) as f64 / 17.0;
        let den = 1.0 + (i % 5) as f64;
        let num = (den * (0.3 + 0.4 * x + if i % 2 == 1 { 0.1 } else { 0.0 })).floor();
        let features = [x, ((i * 7) % 11) as f64];
        let pre_n = if i % 10 == 0 { f64::NAN } else { (den * x).floor() };
        let status = rvr_experiment_add_unit(
            exp,
            c(&format!("u{i:05}")).as_ptr(),
            c(variant).as_ptr(),
            num,
            den,
            pre_n,
            den,
            features.as_ptr(),
            features.len(),
        );
        assert_eq!(status, RvrStatus::Ok);
    }
    exp
}

#[test]
fn scalar_functions() {
    unsafe {
        assert_eq!(CStr::from_ptr(rvr_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        assert_eq!(rvr_std_normal_cdf(0.0), 0.5);
        assert_eq!(rvr_p_value(0.0), 1.0);
        let mut out = 0.0;
        assert_eq!(rvr_sample_size_reduction(1.19, &mut out), RvrStatus::Ok);
        assert!((0.29..=0.30).contains(&out));
        assert_eq!(rvr_delta_variance(0.5, 0.25, 1.0, 0.0, 0.0, &mut out), RvrStatus::Ok);
        assert_eq!(out, 0.25);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(rvr_sample_size_reduction(-1.0, &mut out), RvrStatus::Validation);
        let msg = CStr::from_ptr(rvr_last_error()).to_str().unwrap();
        assert!(msg.contains("positive"), "{msg}");
        assert_eq!(rvr_delta_variance(0.0, 1.0, 1.0, 1.0, 0.0, &mut out), RvrStatus::Validation);
        assert_eq!(rvr_sample_size_reduction(1.5, ptr::null_mut()), RvrStatus::NullPointer);
        assert_eq!(rvr_sample_size_reduction(1.5, &mut out), RvrStatus::Ok);
        assert!(rvr_last_error().is_null());

        let mut exp = ptr::null_mut();
        assert_eq!(rvr_experiment_new(ptr::null(), &mut exp), RvrStatus::NullPointer);
        assert!(exp.is_null());
        let bad = [0xffu8, 0];
        assert_eq!(rvr_experiment_new(bad.as_ptr().cast(), &mut exp), RvrStatus::InvalidUtf8);
    }
}

#[test]
fn unit_bound_is_enforced() {
    unsafe {
        let exp = build_experiment(0);
        let status = rvr_experiment_add_unit(
            exp,
            c("u").as_ptr(),
            c("control").as_ptr(),
            3.0,
            2.0,
            f64::NAN,
            f64::NAN,
            ptr::null(),
            0,
        );
        assert_eq!(status, RvrStatus::Validation);
        assert_eq!(
            CStr::from_ptr(rvr_last_error()).to_str().unwrap(),
            "component bound violated"
        );
        assert_eq!(rvr_experiment_len(exp), 0);
        rvr_experiment_free(exp);
    }
}

#[test]
fn analyze_through_handles() {
    unsafe {
        let exp = build_experiment(2000);
        assert_eq!(rvr_experiment_len(exp), 2000);
        let mut raw = RvrAnalysis::default();
        let params = small_params();
        assert_eq!(rvr_analyze(exp, c("raw").as_ptr(), 5, &params, 0.05, &mut raw), RvrStatus::Ok);
        assert_eq!(raw.z_raw, raw.z_reduced);
        assert_eq!((raw.n_control, raw.n_treatment), (1000, 1000));

        let mut union = RvrAnalysis::default();
        assert_eq!(rvr_analyze(exp, c("union").as_ptr(), 5, &params, 0.05, &mut union), RvrStatus::Ok);
        assert_eq!(union.z_raw, raw.z_raw);
        assert!(union.variance_reduction_pct <= 0.0);

        assert_eq!(rvr_analyze(exp, c("bogus").as_ptr(), 5, &params, 0.05, &mut union), RvrStatus::Validation);
        assert_eq!(rvr_analyze(exp, c("pre").as_ptr(), 1, &params, 0.05, &mut union), RvrStatus::Validation);
        rvr_experiment_free(exp);
        rvr_experiment_free(ptr::null_mut());
    }
}

#[test]
fn load_matches_manual_build() {
    use ratiovr::io::{write_units, Format};
    use ratiovr::UnitRecord;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("units.csv");
    let records: Vec<UnitRecord> = (0..400)
        .map(|i| UnitRecord {
            unit_id: format!("u{i:04}"),
            variant: if i % 2 == 0 { "a" } else { "b" }.into(),
            numerator: (i % 3) as f64,
            denominator: 3.0,
            pre_numerator: Some((i % 2) as f64),
            pre_denominator: Some(2.0),
            features: vec![(i % 13) as f64],
        })
        .collect();
    write_units(&path, &records, Format::Csv).unwrap();
    unsafe {
        let mut exp = ptr::null_mut();
        let p = c(path.to_str().unwrap());
        assert_eq!(rvr_experiment_load(p.as_ptr(), ptr::null(), c("a").as_ptr(), &mut exp), RvrStatus::Ok);
        assert_eq!(rvr_experiment_len(exp), 400);
        let mut out = RvrAnalysis::default();
        assert_eq!(rvr_analyze(exp, c("pre").as_ptr(), 0, ptr::null(), 0.05, &mut out), RvrStatus::Ok);
        assert_eq!(out.n_control, 200);
        rvr_experiment_free(exp);

        let missing = c(dir.path().join("none.csv").to_str().unwrap());
        assert_eq!(
            rvr_experiment_load(missing.as_ptr(), ptr::null(), c("a").as_ptr(), &mut exp),
            RvrStatus::Io
        );
    }
}

#[test]
fn gbdt_round_trip() {
    let n = 500;
    let x: Vec<f64> = (0..n).flat_map(|i| [(i % 50) as f64, ((i * 3) % 7) as f64]).collect();
    let y: Vec<f64> = (0..n).map(|i| if i % 50 > 24 { 2.0 } else { -1.0 }).collect();
    unsafe {
        let mut model = ptr::null_mut();
        let params = RvrGbdtParams {
            learning_rate: 0.5,
            ..small_params()
        };
        assert_eq!(rvr_gbdt_fit(x.as_ptr(), n, 2, y.as_ptr(), &params, &mut model), RvrStatus::Ok);
        let mut pred = vec![0.0; n];
        assert_eq!(rvr_gbdt_predict(model, x.as_ptr(), n, 2, pred.as_mut_ptr()), RvrStatus::Ok);
        assert!((pred[0] - -1.0).abs() < 0.5 && (pred[30] - 2.0).abs() < 0.5);

        let mut json = ptr::null_mut();
        assert_eq!(rvr_gbdt_to_json(model, &mut json), RvrStatus::Ok);
        let mut restored = ptr::null_mut();
        assert_eq!(rvr_gbdt_from_json(json, &mut restored), RvrStatus::Ok);
        let mut again = vec![0.0; n];
        assert_eq!(rvr_gbdt_predict(restored, x.as_ptr(), n, 2, again.as_mut_ptr()), RvrStatus::Ok);
        assert_eq!(
            pred.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(rvr_gbdt_predict(model, x.as_ptr(), n, 3, pred.as_mut_ptr()), RvrStatus::Validation);
        assert_eq!(rvr_gbdt_from_json(c("{}").as_ptr(), &mut restored), RvrStatus::Validation);

        rvr_string_free(json);
        rvr_gbdt_free(model);
        rvr_gbdt_free(restored);
        rvr_gbdt_free(ptr::null_mut());
    }
}
