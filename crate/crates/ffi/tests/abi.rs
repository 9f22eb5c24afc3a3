use std::ffi::{CStr, CString};
use std::ptr;

use urbanctx::boosting::{lss_fit, BoostParams, FeatureTable, ModelCheckpoint};
use urbanctx::conformal::cps_fit;
use urbanctx_ffi::*;

fn last_error() -> String {
    let p = uc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn training_data() -> (FeatureTable, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 4) as f64, (i % 7) as f64]).collect();
    let y = rows.iter().map(|r| 60.0 * (1.0 + r[0]) + 5.0 * r[1] + 1.0).collect();
    (FeatureTable::from_rows(&rows).unwrap(), y)
}

fn params() -> BoostParams {
    BoostParams {
        n_trees: 20,
        ..BoostParams::default()
    }
}

#[test]
fn lognormal_roundtrip_through_abi() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(uc_lognormal_new(5.0, 0.5, &mut d), UcStatus::Ok);
        let mut q = 0.0;
        assert_eq!(uc_dist_quantile(d, 0.5, &mut q), UcStatus::Ok);
        assert!((q - 5f64.exp()).abs() < 1e-9 * q);
        let mut c = 0.0;
        assert_eq!(uc_dist_cdf(d, q, &mut c), UcStatus::Ok);
        assert!((c - 0.5).abs() < 1e-9);
        let (mut lo, mut hi) = (0.0, 0.0);
        assert_eq!(uc_dist_interval(d, 0.9, &mut lo, &mut hi), UcStatus::Ok);
        assert!(lo < q && q < hi);
        let mut s = 0.0;
        assert_eq!(uc_dist_crps(d, 150.0, &mut s), UcStatus::Ok);
        assert!(s > 0.0);
        assert_eq!(uc_dist_quantile(d, 1.0, &mut q), UcStatus::InvalidArgument);
        assert!(last_error().contains("tau"));
        uc_dist_free(d);
    }
}

#[test]
fn invalid_inputs_report_status_and_message() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(uc_lognormal_new(0.0, -1.0, &mut d), UcStatus::InvalidArgument);
        assert!(d.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(uc_lognormal_new(0.0, 1.0, ptr::null_mut()), UcStatus::NullPointer);
        let mut v = 0.0;
        assert_eq!(uc_dist_cdf(ptr::null(), 1.0, &mut v), UcStatus::NullPointer);
        assert_eq!(uc_pinball(1.0, 2.0, 1.5, &mut v), UcStatus::InvalidArgument);
        let path = CString::new("/nonexistent/model.json").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(uc_lss_load(path.as_ptr(), &mut m), UcStatus::Io);
        uc_dist_free(ptr::null_mut());
        uc_lss_free(ptr::null_mut());
        uc_cps_free(ptr::null_mut());
    }
}

#[test]
fn pinball_and_cells() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(uc_pinball(10.0, 4.0, 0.9, &mut v), UcStatus::Ok);
        assert!((v - 5.4).abs() < 1e-12);
        let (mut q, mut r) = (9, 9);
        assert_eq!(
            uc_point_to_cell(52.5, 13.4, 174.4, 52.5, 13.4, &mut q, &mut r),
            UcStatus::Ok
        );
        assert_eq!((q, r), (0, 0));
        assert_eq!(
            uc_point_to_cell(52.5, 13.4, 174.4, 95.0, 13.4, &mut q, &mut r),
            UcStatus::InvalidArgument
        );
    }
    let v = unsafe { CStr::from_ptr(uc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn lss_checkpoint_matches_native_prediction() {
    let (x, y) = training_data();
    let fit = lss_fit(&x, &y, &params()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bare = dir.path().join("ck.json");
    ModelCheckpoint::from(&fit.model).save(&bare).unwrap();
    let wrapped = dir.path().join("model.json");
    let body = serde_json::json!({"model": "lss", "checkpoint": ModelCheckpoint::from(&fit.model)});
    std::fs::write(&wrapped, body.to_string()).unwrap();

    for path in [bare, wrapped] {
        let c = CString::new(path.to_str().unwrap()).unwrap();
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(uc_lss_load(c.as_ptr(), &mut m), UcStatus::Ok);
            assert_eq!(uc_lss_n_features(m), 2);
            let row = [2.0, 3.0];
            let mut d = ptr::null_mut();
            assert_eq!(uc_lss_predict(m, row.as_ptr(), 2, &mut d), UcStatus::Ok);
            let mut med = 0.0;
            assert_eq!(uc_dist_quantile(d, 0.5, &mut med), UcStatus::Ok);
            let native = fit.model.predict_row(&row).unwrap();
            assert!((med - native.mu.exp()).abs() < 1e-9 * med);
            let mut bad = ptr::null_mut();
            assert_eq!(uc_lss_predict(m, row.as_ptr(), 1, &mut bad), UcStatus::InvalidArgument);
            uc_dist_free(d);
            uc_lss_free(m);
        }
    }
}

#[test]
fn cps_export_loads_and_predicts() {
    let (x, y) = training_data();
    let strata: Vec<usize> = (0..x.rows).map(|i| i % 4).collect();
    let model = cps_fit(&x, &y, &strata, &params(), 2, 10, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, serde_json::json!({"model": "cps", "cps": model}).to_string()).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(uc_cps_load(c.as_ptr(), &mut m), UcStatus::Ok);
        let row = [1.0, 0.0];
        let mut d = ptr::null_mut();
        assert_eq!(uc_cps_predict(m, row.as_ptr(), 2, &mut d), UcStatus::Ok);
        let native = model.predict_row(&row).unwrap();
        let mut q = 0.0;
        assert_eq!(uc_dist_quantile(d, 0.5, &mut q), UcStatus::Ok);
        assert_eq!(q, urbanctx::PredictiveDistribution::quantile(&native, 0.5));
        let mut cdf = 0.0;
        assert_eq!(uc_dist_cdf(d, 1e9, &mut cdf), UcStatus::Ok);
        assert_eq!(cdf, 1.0);
        uc_dist_free(d);
        uc_cps_free(m);
    }
    std::fs::write(&path, r#"{"cps": {"base": null}}"#).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(uc_cps_load(c.as_ptr(), &mut m), UcStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/urbanctx.h")).unwrap();
    for f in [
        "uc_last_error_message",
        "uc_version",
        "uc_lss_load",
        "uc_lss_predict",
        "uc_lss_free",
        "uc_cps_load",
        "uc_cps_predict",
        "uc_cps_free",
        "uc_lognormal_new",
        "uc_dist_cdf",
        "uc_dist_quantile",
        "uc_dist_crps",
        "uc_dist_interval",
        "uc_dist_free",
        "uc_point_to_cell",
        "uc_pinball",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}
