use std::ffi::{CStr, CString};
use std::ptr;

use neurodecode_ffi::*;

fn last_error() -> String {
    let p = nd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn config_roundtrip_and_hash() {
    let cfg = nd_config_default();
    let mut a = [0 as std::ffi::c_char; 65];
    let mut b = [0 as std::ffi::c_char; 65];
    unsafe {
        assert_eq!(nd_config_hash(cfg, a.as_mut_ptr(), a.len()), NdStatus::Ok);
        let set = CString::new("seed=7").unwrap();
        assert_eq!(nd_config_set(cfg, set.as_ptr()), NdStatus::Ok);
        assert_eq!(nd_config_hash(cfg, b.as_mut_ptr(), b.len()), NdStatus::Ok);
        let (ha, hb) = (CStr::from_ptr(a.as_ptr()), CStr::from_ptr(b.as_ptr()));
        assert_eq!(ha.to_bytes().len(), 64);
        assert_ne!(ha, hb);

        let bad = CString::new("no_such.key=1").unwrap();
        assert_eq!(nd_config_set(cfg, bad.as_ptr()), NdStatus::Config);
        assert!(!last_error().is_empty());

        let mut small = [0 as std::ffi::c_char; 8];
        assert_eq!(nd_config_hash(cfg, small.as_mut_ptr(), small.len()), NdStatus::InvalidArgument);
        nd_config_free(cfg);
    }
}

#[test]
fn null_pointers_are_rejected() {
    unsafe {
        assert_eq!(nd_config_set(ptr::null_mut(), ptr::null()), NdStatus::NullPointer);
        assert_eq!(nd_clip_loss(ptr::null(), ptr::null(), 2, 2, 1.0, ptr::null_mut()), NdStatus::NullPointer);
        nd_config_free(ptr::null_mut());
        nd_run_free(ptr::null_mut());
    }
}

#[test]
fn missing_artifact_and_unknown_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cfg = nd_config_default();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(nd_run_open(path.as_ptr(), &mut run), NdStatus::Ok);
        let name = CString::new("top1").unwrap();
        let mut v = 0.0;
        assert_eq!(nd_run_metric(run, name.as_ptr(), &mut v), NdStatus::MissingArtifact);

        let stage = CString::new("evaluate").unwrap();
        assert_eq!(nd_run_stage(run, cfg, stage.as_ptr(), ptr::null_mut()), NdStatus::MissingArtifact);
        let stage = CString::new("bogus").unwrap();
        assert_eq!(nd_run_stage(run, cfg, stage.as_ptr(), ptr::null_mut()), NdStatus::InvalidArgument);
        assert!(last_error().contains("bogus"));

        let synth = CString::new("synth").unwrap();
        let mut cached = -1;
        assert_eq!(nd_run_stage(run, cfg, synth.as_ptr(), &mut cached), NdStatus::Ok);
        assert_eq!(cached, 0);
        assert_eq!(nd_run_stage(run, cfg, synth.as_ptr(), &mut cached), NdStatus::Ok);
        assert_eq!(cached, 1);
        nd_run_free(run);
        nd_config_free(cfg);
    }
}

#[test]
fn clip_loss_orthogonal_pair() {
    // Matched orthogonal unit pairs at tau = 1: loss = ln(1 + e^-1).
    let z = [1.0, 0.0, 0.0, 1.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(nd_clip_loss(z.as_ptr(), z.as_ptr(), 2, 2, 1.0, &mut out), NdStatus::Ok);
    }
    assert!((out - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn identical_images_are_perfectly_similar() {
    let (h, w) = (16, 16);
    let img: Vec<f64> = (0..h * w * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let (mut pc, mut ss) = (0.0, 0.0);
    let mut cos = 1.0;
    unsafe {
        assert_eq!(nd_image_similarity(img.as_ptr(), img.as_ptr(), h, w, &mut pc, &mut ss), NdStatus::Ok);
        assert_eq!(nd_mean_cosine_distance(img.as_ptr(), 1, img.as_ptr(), 1, h * w * 3, &mut cos), NdStatus::Ok);
    }
    assert!((pc - 1.0).abs() < 1e-12 && (ss - 1.0).abs() < 1e-12);
    assert!(cos.abs() < 1e-12);
}

#[test]
fn header_declares_entry_points() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/neurodecode.h")).unwrap();
    for sym in ["nd_config_default", "nd_run_stage", "nd_clip_loss", "nd_last_error", "ND_STATUS_MISSING_ARTIFACT"] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
