use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use canf_ffi::*;

const CONFIG: &str = "width = 16\ndepth = 2\nheads = 2\ncond_dim = 8\n";

fn new_model(seed: u64) -> *mut CanfModel {
    let cfg = CString::new(CONFIG).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { canf_model_new(cfg.as_ptr(), seed, &mut m) }, CanfStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = canf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predict_and_sample_are_deterministic() {
    let m = new_model(1);
    let (mut c, mut s, mut k) = (0, 0, 0);
    assert_eq!(unsafe { canf_model_geometry(m, &mut c, &mut s, &mut k) }, CanfStatus::Ok);
    let per = (c * s * s) as usize;
    let x: Vec<f32> = (0..2 * per).map(|i| (i as f32 * 0.1).sin()).collect();
    let labels = [0u32, k];
    let ts = [3u32, 700];
    let run = || {
        let mut y = vec![0f32; 2 * per];
        let st = unsafe { canf_model_predict(m, x.as_ptr(), 2, labels.as_ptr(), ts.as_ptr(), y.as_mut_ptr(), y.len()) };
        assert_eq!(st, CanfStatus::Ok);
        y
    };
    assert_eq!(run(), run());
    let sample = |seed| {
        let mut y = vec![0f32; per];
        let st = unsafe { canf_model_sample(m, labels.as_ptr(), 1, 5, 1.5, seed, y.as_mut_ptr(), y.len()) };
        assert_eq!(st, CanfStatus::Ok);
        y
    };
    assert_eq!(sample(9), sample(9));
    assert_ne!(sample(9), sample(10));
    unsafe { canf_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    let bad = CString::new("widht = 3").unwrap();
    assert_eq!(unsafe { canf_model_new(bad.as_ptr(), 0, &mut m) }, CanfStatus::Config);
    assert!(last_error().contains("width"), "{}", last_error());
    assert!(m.is_null());

    assert_eq!(unsafe { canf_model_param_count(ptr::null(), &mut 0) }, CanfStatus::NullPointer);

    let m = new_model(0);
    let mut y = vec![0f32; 3];
    let labels = [0u32];
    let st = unsafe { canf_model_sample(m, labels.as_ptr(), 1, 5, 1.0, 0, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, CanfStatus::BufferSize);

    let missing = CString::new("/nonexistent/model.canf").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { canf_model_load(missing.as_ptr(), &mut out) }, CanfStatus::Io);

    let mut n = 0;
    assert_eq!(unsafe { canf_model_param_count(m, &mut n) }, CanfStatus::Ok);
    assert!(canf_last_error().is_null());
    unsafe { canf_model_free(m) };
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.canf").to_str().unwrap()).unwrap();
    let m = new_model(4);
    assert_eq!(unsafe { canf_model_save(m, path.as_ptr()) }, CanfStatus::Ok);
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { canf_model_load(path.as_ptr(), &mut l) }, CanfStatus::Ok);
    let (mut a, mut b) = (0, 0);
    unsafe {
        canf_model_param_count(m, &mut a);
        canf_model_param_count(l, &mut b);
    }
    assert_eq!(a, b);

    std::fs::write(dir.path().join("m.canf"), b"NOPE").unwrap();
    let mut l2 = ptr::null_mut();
    assert_eq!(unsafe { canf_model_load(path.as_ptr(), &mut l2) }, CanfStatus::Format);
    unsafe {
        canf_model_free(m);
        canf_model_free(l);
        canf_model_free(ptr::null_mut());
    }
}

/// Compiles the C smoke program against the generated header and the
/// static library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/canf.h");
    assert!(std::fs::read_to_string(&header).unwrap().contains("canf_model_sample"));
    // test binaries live in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libcanf_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&bin).arg(dir.path().join("c.canf")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("params "));
}
