use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use clusterhom_ffi::*;

fn last_error() -> String {
    let p = ch_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn header_is_generated_and_compiles_as_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include").join("clusterhom.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ch_sample_poisson",
        "ch_delta_k",
        "ch_run_experiment_json",
        "CH_STATUS_NON_CONVERGENCE",
        "typedef struct ChSample ChSample",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let src = std::env::temp_dir().join("clusterhom_header_check.c");
    std::fs::write(&src, "#include \"clusterhom.h\"\nint main(void) { ChSample *s = 0; return ch_sample_len(s) == 0 ? CH_STATUS_OK : 1; }\n").unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
        .expect("C compiler available");
    assert!(status.success());
}

#[test]
fn sample_marks_and_points_round_trip() {
    unsafe {
        let coords = [4.0, 5.0, 20.0, 21.0, 10.0, 30.0];
        let mut s = ptr::null_mut();
        assert_eq!(
            ch_sample_from_points(2, 32.0, coords.as_ptr(), 3, &mut s),
            ChStatus::Ok
        );
        assert_eq!(ch_sample_len(s), 3);
        let mut pts = [0.0; 9];
        assert_eq!(ch_sample_points(s, pts.as_mut_ptr(), 9), ChStatus::Ok);
        assert_eq!(&pts[..3], &[4.0, 5.0, 0.0]);
        assert_eq!(
            ch_sample_points(s, pts.as_mut_ptr(), 8),
            ChStatus::InvalidArgument
        );

        let mut c = ptr::null_mut();
        assert_eq!(ch_attach_marks(s, 3.0, 0.0, 7, &mut c), ChStatus::Ok);
        assert_eq!(ch_configuration_len(c), 3);
        let mut flags = [9u8; 3];
        assert_eq!(
            ch_configuration_marked(c, 1.0, flags.as_mut_ptr(), 3),
            ChStatus::Ok
        );
        assert_eq!(flags, [1, 1, 1]);
        assert_eq!(
            ch_configuration_marked(c, 0.0, flags.as_mut_ptr(), 3),
            ChStatus::Ok
        );
        assert_eq!(flags, [0, 0, 0]);
        ch_configuration_free(c);
        ch_sample_free(s);
    }
}

#[test]
fn samplers_report_invalid_arguments() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ch_sample_poisson(0.01, 2, 32.0, 1, &mut s), ChStatus::Ok);
        ch_sample_free(s);
        assert_eq!(
            ch_sample_hardcore_poisson(0.01, 4.0, 2, 32.0, 1, &mut s),
            ChStatus::Ok
        );
        ch_sample_free(s);
        assert_eq!(
            ch_sample_random_parking(4.0, 2, 32.0, 1, &mut s),
            ChStatus::Ok
        );
        assert!(ch_sample_len(s) > 0);
        ch_sample_free(s);
        assert_eq!(
            ch_sample_poisson(-1.0, 2, 32.0, 1, &mut s),
            ChStatus::InvalidArgument
        );
        assert!(last_error().contains("intensity"));
        assert_eq!(
            ch_sample_poisson(0.01, 2, 32.0, 1, ptr::null_mut()),
            ChStatus::NullPointer
        );
        assert_eq!(ch_sample_len(ptr::null()), 0);
        ch_sample_free(ptr::null_mut());
    }
}

#[test]
fn entries_and_derivatives_through_handles() {
    unsafe {
        let coords = [8.0, 8.0, 20.0, 22.0];
        let mut s = ptr::null_mut();
        assert_eq!(
            ch_sample_from_points(2, 32.0, coords.as_ptr(), 2, &mut s),
            ChStatus::Ok
        );
        let mut c = ptr::null_mut();
        assert_eq!(ch_attach_marks(s, 4.0, 0.0, 3, &mut c), ChStatus::Ok);
        let xi = [1.0, 0.0];
        let mut st = ptr::null_mut();
        assert_eq!(
            ch_setup_new(2, 32.0, 32, 1.0, 2.0, 64.0, xi.as_ptr(), 1e-10, &mut st),
            ChStatus::Ok
        );

        let (mut f0, mut f1) = (0.0, 0.0);
        assert_eq!(ch_homogenized_entry(c, st, 0.0, &mut f0), ChStatus::Ok);
        assert_eq!(ch_homogenized_entry(c, st, 1.0, &mut f1), ChStatus::Ok);
        assert!((f0 - 1.0).abs() < 1e-12);
        assert!(f1 > f0);

        let mut forms = [0.0; 3];
        for (j, v) in forms.iter_mut().enumerate() {
            assert_eq!(ch_delta_k(c, st, 1, j as i32, 0.0, 16.0, v), ChStatus::Ok);
        }
        assert!((forms[0] - forms[2]).abs() <= 1e-6 * forms[2].abs());
        assert!((forms[1] - forms[2]).abs() <= 1e-6 * forms[2].abs());
        assert_eq!(
            ch_delta_k(c, st, 1, 5, 0.0, 16.0, &mut forms[0]),
            ChStatus::InvalidArgument
        );
        assert_eq!(
            ch_delta_k(c, st, 1, 1, 0.0, 40.0, &mut forms[0]),
            ChStatus::InvalidArgument
        );
        assert!(last_error().contains("r_cut"));
        assert_eq!(
            ch_delta_k(ptr::null(), st, 1, 1, 0.0, 16.0, &mut forms[0]),
            ChStatus::NullPointer
        );

        ch_setup_free(st);
        ch_configuration_free(c);
        ch_sample_free(s);
    }
}

#[test]
fn closed_forms() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(ch_electric_cm_slope(1.0, 2.0, 2, &mut v), ChStatus::Ok);
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(
            ch_elastic_cm(1.0, 2.0, 1.0, 2.0, 3, &mut a, &mut b),
            ChStatus::Ok
        );
        assert!((a - 17.0 / 18.0).abs() < 1e-14 && (b - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(
            ch_elastic_cm(1.0, 2.0, 0.0, 2.0, 3, &mut a, &mut b),
            ChStatus::InvalidArgument
        );
        assert!(!ch_version().is_null());
    }
}

#[test]
fn experiments_run_from_json() {
    unsafe {
        let cfg = CString::new(r#"{"experiment": "identities", "samples": 4}"#).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(ch_run_experiment_json(cfg.as_ptr(), &mut out), ChStatus::Ok);
        let json = CStr::from_ptr(out).to_str().unwrap().to_owned();
        ch_string_free(out);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["passed"], true);
        assert_eq!(v["config"]["samples"], 4);

        let bad = CString::new(r#"{"experiment": "cm-verify", "p_grid": [1.5]}"#).unwrap();
        assert_eq!(
            ch_run_experiment_json(bad.as_ptr(), &mut out),
            ChStatus::InvalidArgument
        );
        assert!(out.is_null());
        assert!(last_error().contains("p_grid"));
    }
}
