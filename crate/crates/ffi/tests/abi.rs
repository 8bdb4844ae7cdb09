use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cafe_lab_ffi::*;

fn last_error() -> String {
    let p = cafe_lab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn preset(name: &str) -> *mut CafeLabConfig {
    let mut cfg = ptr::null_mut();
    let name = CString::new(name).unwrap();
    assert_eq!(unsafe { cafe_lab_config_from_preset(name.as_ptr(), &mut cfg) }, CafeLabStatus::Ok);
    cfg
}

fn run(cfg: *const CafeLabConfig) -> (CafeLabSummary, Vec<f64>) {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(cafe_lab_attack_run(cfg, &mut out), CafeLabStatus::Ok);
        let mut s = CafeLabSummary { psnr_db: 0.0, mse: 0.0, rounds: 0, target_reached_at: 0, warnings: 0 };
        assert_eq!(cafe_lab_outcome_summary(out, &mut s), CafeLabStatus::Ok);
        let mut n = 0;
        assert_eq!(cafe_lab_outcome_fake_data(out, ptr::null_mut(), 0, &mut n), CafeLabStatus::BufferTooSmall);
        let mut data = vec![0.0; n];
        assert_eq!(cafe_lab_outcome_fake_data(out, data.as_mut_ptr(), n, &mut n), CafeLabStatus::Ok);
        assert!(cafe_lab_last_error().is_null());
        cafe_lab_outcome_free(out);
        (s, data)
    }
}

#[test]
fn attack_through_handles_is_deterministic() {
    let cfg = preset("desk-cafe");
    let (a, da) = run(cfg);
    let (b, db) = run(cfg);
    assert_eq!(a, b);
    assert_eq!(da, db);
    assert!(a.psnr_db >= 40.0, "{a:?}");
    assert!(a.rounds > 0);
    assert_eq!(da.len(), 16 * 64);

    // Seed changes reach the run, and TOML round-trips through the buffer API.
    unsafe {
        assert_eq!(cafe_lab_config_set_seed(cfg, 9), CafeLabStatus::Ok);
        let mut need = 0;
        assert_eq!(cafe_lab_config_to_toml(cfg, ptr::null_mut(), 0, &mut need), CafeLabStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; need];
        assert_eq!(cafe_lab_config_to_toml(cfg, buf.as_mut_ptr(), need, &mut need), CafeLabStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(cafe_lab_config_from_toml(buf.as_ptr(), &mut again), CafeLabStatus::Ok);
        let (c, _) = run(again);
        let (d, _) = run(cfg);
        assert_eq!(c, d);
        assert_ne!(c.mse, a.mse);
        cafe_lab_config_free(again);
        cafe_lab_config_free(cfg);
    }
}

#[test]
fn failures_report_codes_and_messages() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new("no-such-preset").unwrap();
        assert_eq!(cafe_lab_config_from_preset(bad.as_ptr(), &mut cfg), CafeLabStatus::Config);
        assert!(last_error().contains("no-such-preset"));
        assert!(cfg.is_null());

        let text = CString::new("seed = \"x\"").unwrap();
        assert_eq!(cafe_lab_config_from_toml(text.as_ptr(), &mut cfg), CafeLabStatus::Config);

        assert_eq!(cafe_lab_config_from_preset(ptr::null(), &mut cfg), CafeLabStatus::NullPointer);
        let invalid = [0xffu8 as std::ffi::c_char, 0];
        assert_eq!(cafe_lab_config_from_preset(invalid.as_ptr(), &mut cfg), CafeLabStatus::Utf8);
        assert_eq!(cafe_lab_attack_run(ptr::null(), &mut ptr::null_mut()), CafeLabStatus::NullPointer);

        // A file where a directory is needed surfaces as an io error.
        let cfg = preset("theory-grid");
        let tmp = tempfile::NamedTempFile::new().unwrap();
        let dir = CString::new(tmp.path().join("sub").to_str().unwrap()).unwrap();
        assert_eq!(cafe_lab_attack_to_dir(cfg, dir.as_ptr()), CafeLabStatus::Io);
        cafe_lab_config_free(cfg);
        cafe_lab_config_free(ptr::null_mut());
        cafe_lab_outcome_free(ptr::null_mut());
    }
}

#[test]
fn attack_to_dir_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("desk-cafe");
    let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cafe_lab_attack_to_dir(cfg, dir.as_ptr()) }, CafeLabStatus::Ok);
    for f in ["metrics.csv", "trace.csv", "manifest.json", "recovered.png"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    unsafe { cafe_lab_config_free(cfg) };
}

/// `target/<profile>`, found from this test binary's location.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = profile_dir().join("libcafe_lab_ffi.a");
    assert!(include.join("cafe_lab.h").exists());
    assert!(lib.exists(), "{}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "cafe_lab.h"
int main(void) {
    CafeLabConfig *cfg = NULL;
    if (cafe_lab_config_from_preset("nope", &cfg) != CAFE_LAB_STATUS_CONFIG) return 1;
    if (cafe_lab_last_error() == NULL) return 2;
    if (cafe_lab_config_from_preset("desk-cafe", &cfg) != CAFE_LAB_STATUS_OK) return 3;
    size_t need = 0;
    cafe_lab_config_to_toml(cfg, NULL, 0, &need);
    cafe_lab_config_free(cfg);
    printf("%zu\n", need);
    return need > 1 ? 0 : 4;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler is on PATH");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
}
