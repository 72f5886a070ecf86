use std::ffi::{c_char, CString};
use std::fs::File;
use std::path::Path;
use std::process::Command;
use std::ptr;

use nalgebra::{DMatrix, DVector};

use avdrec::cf::{self, Feedback, Hyperparams};
use avdrec::features::{self, FactorArtifact, RotationOptions};
use avdrec_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { avdrec_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn tiny_model(content: bool) -> cf::FactorModel {
    let r = DMatrix::from_row_slice(3, 4, &[1., 0., 1., 0., 0., 1., 0., 0., 1., 1., 0., 1.]);
    let c = r.map(|v| if v > 0.0 { 5.0 } else { 1.0 });
    let fb = Feedback::from_dense(&r, &c, 1.0).unwrap();
    let z = DMatrix::from_row_slice(2, 4, &[0.5, -1.0, 0.3, 2.0, 1.0, 0.2, -0.7, 0.1]);
    let hp = Hyperparams {
        rank: 2,
        n_iters: 5,
        base_confidence: 1.0,
        ..Hyperparams::default()
    };
    cf::train(&fb, content.then_some(&z), &hp, 3).unwrap()
}

#[test]
fn model_round_trip_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = tiny_model(true);
    model.write(File::create(&path).unwrap(), "abc").unwrap();

    let mut handle = ptr::null_mut();
    let p = cpath(&path);
    assert_eq!(
        unsafe { avdrec_model_load(p.as_ptr(), &mut handle) },
        AvdrecStatus::Ok
    );
    let (mut nu, mut ni, mut k, mut l) = (0, 0, 0, 0);
    let st = unsafe { avdrec_model_dims(handle, &mut nu, &mut ni, &mut k, &mut l) };
    assert_eq!(st, AvdrecStatus::Ok);
    assert_eq!((nu, ni, k, l), (3, 4, 2, 2));

    let mut out = 0.0;
    assert_eq!(
        unsafe { avdrec_predict_in_matrix(handle, 2, 3, &mut out) },
        AvdrecStatus::Ok
    );
    assert_eq!(out, cf::predict_in_matrix(&model, 2, 3).unwrap());

    let z = [0.4, -0.2];
    let st = unsafe { avdrec_predict_out_of_matrix(handle, 1, z.as_ptr(), 2, &mut out) };
    assert_eq!(st, AvdrecStatus::Ok);
    let expected = cf::predict_out_of_matrix(&model, 1, &DVector::from_column_slice(&z)).unwrap();
    assert_eq!(out, expected);

    assert_eq!(
        unsafe { avdrec_predict_in_matrix(handle, 9, 0, &mut out) },
        AvdrecStatus::Data
    );
    assert!(last_error().contains("outside"));
    let st = unsafe { avdrec_predict_out_of_matrix(handle, 0, z.as_ptr(), 1, &mut out) };
    assert_eq!(st, AvdrecStatus::Numeric);
    unsafe { avdrec_model_free(handle) };
}

#[test]
fn content_free_model_refuses_cold_start() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    tiny_model(false)
        .write(File::create(&path).unwrap(), "abc")
        .unwrap();
    let mut handle = ptr::null_mut();
    let p = cpath(&path);
    assert_eq!(
        unsafe { avdrec_model_load(p.as_ptr(), &mut handle) },
        AvdrecStatus::Ok
    );
    let mut l = 99;
    unsafe {
        avdrec_model_dims(
            handle,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            &mut l,
        )
    };
    assert_eq!(l, 0);
    let (z, mut out) = ([1.0, 1.0], 0.0);
    let st = unsafe { avdrec_predict_out_of_matrix(handle, 0, z.as_ptr(), 2, &mut out) };
    assert_eq!(st, AvdrecStatus::Capability);
    unsafe { avdrec_model_free(handle) };
}

#[test]
fn load_errors_and_null_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = cpath(&dir.path().join("nope.json"));
    assert_eq!(
        unsafe { avdrec_model_load(missing.as_ptr(), &mut handle) },
        AvdrecStatus::Io
    );
    assert!(handle.is_null());
    assert!(last_error().contains("nope.json"));

    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"format\": 1}").unwrap();
    let junk = cpath(&junk);
    assert_eq!(
        unsafe { avdrec_model_load(junk.as_ptr(), &mut handle) },
        AvdrecStatus::Parse
    );
    let mut f = ptr::null_mut();
    assert_eq!(
        unsafe { avdrec_factors_load(junk.as_ptr(), &mut f) },
        AvdrecStatus::Parse
    );

    assert_eq!(
        unsafe { avdrec_model_load(ptr::null(), &mut handle) },
        AvdrecStatus::NullArgument
    );
    let mut out = 0.0;
    assert_eq!(
        unsafe { avdrec_predict_in_matrix(ptr::null(), 0, 0, &mut out) },
        AvdrecStatus::NullArgument
    );
    unsafe {
        avdrec_model_free(ptr::null_mut());
        avdrec_factors_free(ptr::null_mut());
    }
    // truncation keeps the terminator and reports the full length
    let mut small = [1 as c_char; 4];
    let n = unsafe { avdrec_last_error(small.as_mut_ptr(), small.len()) };
    assert!(n > 3);
    assert_eq!(small[3], 0);
}

#[test]
fn factor_artifact_scoring_matches_library() {
    let x = DMatrix::from_fn(40, 5, |r, c| {
        ((r * 7 + c * 3) % 11) as f64 + (r as f64 * 0.37 + c as f64).sin()
    });
    let names: Vec<String> = (0..5).map(|c| format!("f{c}")).collect();
    let (x_std, stats) = features::standardize(&x, &names).unwrap();
    let result = features::fit_factors(&x_std, 2, &RotationOptions::default()).unwrap();
    let artifact = FactorArtifact {
        feature_names: names,
        standardization: stats,
        result,
        config_hash: "h".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("factors.json");
    artifact.write(File::create(&path).unwrap()).unwrap();

    let mut handle = ptr::null_mut();
    let p = cpath(&path);
    assert_eq!(
        unsafe { avdrec_factors_load(p.as_ptr(), &mut handle) },
        AvdrecStatus::Ok
    );
    let (mut nf, mut nk) = (0, 0);
    assert_eq!(
        unsafe { avdrec_factors_dims(handle, &mut nf, &mut nk) },
        AvdrecStatus::Ok
    );
    assert_eq!((nf, nk), (5, 2));

    let row: Vec<f64> = x.row(7).iter().copied().collect();
    let mut z = [0.0; 2];
    let st = unsafe { avdrec_factors_score(handle, row.as_ptr(), 5, z.as_mut_ptr(), 2) };
    assert_eq!(st, AvdrecStatus::Ok);
    let expected = artifact.score_raw(&x).unwrap();
    assert_eq!(
        z.to_vec(),
        expected.row(7).iter().copied().collect::<Vec<_>>()
    );

    let st = unsafe { avdrec_factors_score(handle, row.as_ptr(), 4, z.as_mut_ptr(), 2) };
    assert_eq!(st, AvdrecStatus::Numeric);
    let st = unsafe { avdrec_factors_score(handle, row.as_ptr(), 5, z.as_mut_ptr(), 3) };
    assert_eq!(st, AvdrecStatus::Data);
    unsafe { avdrec_factors_free(handle) };
}

#[test]
fn ndcg_through_the_c_abi() {
    let mut out = 0.0;
    let rel = [0u8, 1, 0, 1];
    assert_eq!(
        unsafe { avdrec_ndcg(rel.as_ptr(), 4, &mut out) },
        AvdrecStatus::Ok
    );
    assert_eq!(
        out,
        avdrec::eval::ndcg(&[false, true, false, true]).unwrap()
    );
    let none = [0u8, 0];
    unsafe { avdrec_ndcg(none.as_ptr(), 2, &mut out) };
    assert!(out.is_nan());
    assert_eq!(
        unsafe { avdrec_ndcg(ptr::null(), 0, &mut out) },
        AvdrecStatus::Ok
    );
    assert!(out.is_nan());
    assert_eq!(
        unsafe { avdrec_ndcg(ptr::null(), 3, &mut out) },
        AvdrecStatus::NullArgument
    );
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/avdrec.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "avdrec_model_load",
        "avdrec_factors_score",
        "avdrec_ndcg",
        "AVDREC_STATUS_CAPABILITY",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
