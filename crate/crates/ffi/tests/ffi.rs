use std::ffi::{CStr, CString};
use std::ptr;

use lrvi_ffi::*;

const MODEL: &str = "\
ATOMS
attends binary 6
hot binary 2
PARFACTORS
phi attends hot : ground-table 1.2 0.4 0.7 1.6
";

fn last_error() -> String {
    let p = lrvi_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> *mut LrviModel {
    let text = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lrvi_model_parse(text.as_ptr(), &mut m) }, LrviStatus::Ok);
    m
}

#[test]
fn parse_and_query() {
    let m = parse(MODEL);
    let mut n = 0usize;
    assert_eq!(unsafe { lrvi_model_atom_count(m, &mut n) }, LrviStatus::Ok);
    assert_eq!(n, 2);
    assert!(lrvi_last_error_message().is_null());

    let q = CString::new("pmf:attends").unwrap();
    let obs = CString::new("hot\n1\n").unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(
        unsafe { lrvi_infer(m, obs.as_ptr(), q.as_ptr(), LrviMethod::Elimination, 3, &mut r) },
        LrviStatus::Ok
    );
    let mut len = 0usize;
    assert_eq!(unsafe { lrvi_result_estimate(r, ptr::null_mut(), &mut len) }, LrviStatus::BufferTooSmall);
    assert_eq!(len, 2);
    let mut buf = [0.0f64; 2];
    assert_eq!(unsafe { lrvi_result_estimate(r, buf.as_mut_ptr(), &mut len) }, LrviStatus::Ok);
    assert!((buf[0] + buf[1] - 1.0).abs() < 1e-9);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { lrvi_result_to_json(r, &mut json) }, LrviStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    assert!(text.contains("\"estimate\""));
    unsafe {
        lrvi_string_free(json);
        lrvi_result_free(r);
        lrvi_model_free(m);
    }
}

#[test]
fn model_json_reparses() {
    let m = parse(MODEL);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { lrvi_model_to_json(m, &mut json) }, LrviStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    let again = parse(&text);
    let mut n = 0;
    assert_eq!(unsafe { lrvi_model_atom_count(again, &mut n) }, LrviStatus::Ok);
    assert_eq!(n, 2);
    unsafe {
        lrvi_string_free(json);
        lrvi_model_free(m);
        lrvi_model_free(again);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lrvi_model_parse(ptr::null(), &mut m) }, LrviStatus::NullArgument);
    assert!(last_error().contains("text"));

    let bad = CString::new("ATOMS\nx binary 3\nPARFACTORS\ng y : gaussian 0 1\n").unwrap();
    assert_eq!(unsafe { lrvi_model_parse(bad.as_ptr(), &mut m) }, LrviStatus::Parse);
    assert!(m.is_null());
    assert!(last_error().contains("line 4"), "{}", last_error());

    let model = parse(MODEL);
    let q = CString::new("pmf:nobody").unwrap();
    let mut r = ptr::null_mut();
    let s = unsafe { lrvi_infer(model, ptr::null(), q.as_ptr(), LrviMethod::Elimination, 0, &mut r) };
    assert_eq!(s, LrviStatus::InvalidArgument);
    assert!(last_error().contains("nobody"));

    let q = CString::new("what").unwrap();
    let s = unsafe { lrvi_infer(model, ptr::null(), q.as_ptr(), LrviMethod::Sampling, 0, &mut r) };
    assert_eq!(s, LrviStatus::InvalidArgument);

    let invalid = [0xffu8, 0];
    let s = unsafe { lrvi_model_parse(invalid.as_ptr().cast(), &mut m) };
    assert_eq!(s, LrviStatus::InvalidUtf8);

    let mut n = 0;
    assert_eq!(unsafe { lrvi_model_atom_count(ptr::null(), &mut n) }, LrviStatus::NullArgument);
    unsafe { lrvi_model_free(model) };
}

#[test]
fn last_error_is_per_thread() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lrvi_model_parse(ptr::null(), &mut m) }, LrviStatus::NullArgument);
    std::thread::spawn(|| assert!(lrvi_last_error_message().is_null())).join().unwrap();
    assert!(!lrvi_last_error_message().is_null());
}

#[test]
fn sampling_matches_elimination() {
    let m = parse(MODEL);
    let q = CString::new("pmf:attends").unwrap();
    let mut est = Vec::new();
    for method in [LrviMethod::Elimination, LrviMethod::Sampling] {
        let mut r = ptr::null_mut();
        assert_eq!(unsafe { lrvi_infer(m, ptr::null(), q.as_ptr(), method, 1, &mut r) }, LrviStatus::Ok);
        let mut buf = [0.0; 2];
        let mut len = 2;
        assert_eq!(unsafe { lrvi_result_estimate(r, buf.as_mut_ptr(), &mut len) }, LrviStatus::Ok);
        est.push(buf);
        unsafe { lrvi_result_free(r) };
    }
    assert!((est[0][1] - est[1][1]).abs() < 0.02, "{est:?}");
    unsafe { lrvi_model_free(m) };
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lrvi.h")).unwrap();
    for f in [
        "lrvi_last_error_message",
        "lrvi_version",
        "lrvi_model_parse",
        "lrvi_model_free",
        "lrvi_model_atom_count",
        "lrvi_model_to_json",
        "lrvi_infer",
        "lrvi_result_free",
        "lrvi_result_estimate",
        "lrvi_result_to_json",
        "lrvi_string_free",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f}");
    }
    let v = unsafe { CStr::from_ptr(lrvi_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Builds the C example against the static library when a C compiler exists.
#[test]
fn c_example_links_and_runs() {
    use std::path::Path;
    use std::process::Command;
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("liblrvi_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("query");
    let status = Command::new("cc")
        .arg(root.join("examples/query.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let pmf: Vec<f64> = lines.next().unwrap().split(' ').map(|x| x.parse().unwrap()).collect();
    assert!((pmf[0] + pmf[1] - 1.0).abs() < 1e-5);
    assert!(lines.next().unwrap().contains("nobody"));
}
