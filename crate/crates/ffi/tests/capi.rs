use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use graphlora::graphio::{gen_synth, save_graph, SynthSpec};
use graphlora_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        gl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn synth_dir(dir: &Path, seed: u64) -> std::path::PathBuf {
    let g = gen_synth(&SynthSpec {
        nodes_per_class: 30,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let path = dir.join(format!("g{seed}"));
    save_graph(&g, &path).unwrap();
    path
}

#[test]
fn null_and_missing_inputs_report_codes() {
    unsafe {
        assert_eq!(gl_graph_load(ptr::null(), ptr::null_mut()), GlStatus::NullPointer);
        let mut g = ptr::null_mut();
        let missing = CString::new("/nonexistent/graph").unwrap();
        let status = gl_graph_load(missing.as_ptr(), &mut g);
        assert_eq!(status, GlStatus::Io);
        assert!(g.is_null());
        assert!(last_error().contains("/nonexistent/graph"));
        gl_graph_free(ptr::null_mut());
        gl_matrix_free(ptr::null_mut());
        assert!(!CStr::from_ptr(gl_version()).to_bytes().is_empty());
    }
}

#[test]
fn graph_handle_and_diffusion() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&synth_dir(dir.path(), 3));
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(gl_graph_load(path.as_ptr(), &mut g), GlStatus::Ok);
        let (mut n, mut d, mut c) = (0, 0, 0);
        assert_eq!(gl_graph_shape(g, &mut n, &mut d, &mut c), GlStatus::Ok);
        assert_eq!((n, d, c), (60, 16, 2));

        let mut m = ptr::null_mut();
        assert_eq!(gl_ppr_diffusion(g, 0.15, &mut m), GlStatus::Ok);
        let (mut r, mut k) = (0, 0);
        gl_matrix_shape(m, &mut r, &mut k);
        assert_eq!((r, k), (60, 60));
        let mut small = vec![0.0; 10];
        assert_eq!(gl_matrix_copy(m, small.as_mut_ptr(), small.len()), GlStatus::BufferTooSmall);
        let mut buf = vec![0.0; r * k];
        assert_eq!(gl_matrix_copy(m, buf.as_mut_ptr(), buf.len()), GlStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite() && *v >= 0.0));

        let mut bad = ptr::null_mut();
        assert_eq!(gl_ppr_diffusion(g, 1.5, &mut bad), GlStatus::Config);
        gl_matrix_free(m);
        gl_graph_free(g);
    }
}

#[test]
fn mmd_of_identical_sets_is_zero() {
    let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + 2.0).collect();
    unsafe {
        let mut v = f64::NAN;
        assert_eq!(gl_mmd(x.as_ptr(), 8, x.as_ptr(), 8, 3, &mut v), GlStatus::Ok);
        assert!(v.abs() <= 1e-12);
        assert_eq!(gl_mmd(x.as_ptr(), 8, y.as_ptr(), 8, 3, &mut v), GlStatus::Ok);
        assert!(v > 0.0);
        assert_eq!(gl_mmd(x.as_ptr(), 8, ptr::null(), 8, 3, &mut v), GlStatus::NullPointer);
    }
}

#[test]
fn run_pipeline_and_use_model() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = (synth_dir(dir.path(), 1), synth_dir(dir.path(), 2));
    let cfg = serde_json::json!({
        "source": src,
        "target": tgt,
        "checkpoint": dir.path().join("ckpt"),
        "model": dir.path().join("model"),
        "output_dir": dir.path().join("out"),
        "pretrain": {"epochs": 5, "hidden_dims": [16, 8]},
        "lora": {"rank": 2},
        "epochs": 5,
        "seeds": [0],
    });
    let cfg = CString::new(cfg.to_string()).unwrap();
    unsafe {
        for cmd in ["pretrain", "finetune"] {
            let cmd = CString::new(cmd).unwrap();
            let mut report = ptr::null_mut();
            let status = gl_run(cmd.as_ptr(), cfg.as_ptr(), &mut report);
            assert_eq!(status, GlStatus::Ok, "{}", last_error());
            let json: serde_json::Value =
                serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
            assert!(json.is_object());
            gl_string_free(report);
        }

        let unknown = CString::new("bogus").unwrap();
        let mut report = ptr::null_mut();
        assert_eq!(gl_run(unknown.as_ptr(), cfg.as_ptr(), &mut report), GlStatus::InvalidArgument);
        assert!(report.is_null());

        let model_dir = cstr(&dir.path().join("model"));
        let mut model = ptr::null_mut();
        assert_eq!(gl_model_load(model_dir.as_ptr(), &mut model), GlStatus::Ok, "{}", last_error());
        let tgt = cstr(&tgt);
        let mut g = ptr::null_mut();
        gl_graph_load(tgt.as_ptr(), &mut g);

        let mut labels = vec![u32::MAX; 60];
        assert_eq!(gl_model_predict(model, g, labels.as_mut_ptr(), 59), GlStatus::BufferTooSmall);
        assert_eq!(gl_model_predict(model, g, labels.as_mut_ptr(), 60), GlStatus::Ok);
        assert!(labels.iter().all(|&l| l < 2));

        let mut emb = ptr::null_mut();
        assert_eq!(gl_model_embed(model, g, &mut emb), GlStatus::Ok);
        let mut rows = 0;
        gl_matrix_shape(emb, &mut rows, ptr::null_mut());
        assert_eq!(rows, 60);

        gl_matrix_free(emb);
        gl_graph_free(g);
        gl_model_free(model);
    }
}

#[test]
fn failed_check_returns_verification_with_report() {
    let out = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "output_dir": out.path(),
        "theory": {
            "corrupt_bound": -1.0,
            "suites": [{"name": "bound", "ranks": [1], "count": 1, "eval_samples": 10}],
        },
    });
    let cfg = CString::new(cfg.to_string()).unwrap();
    let cmd = CString::new("theory").unwrap();
    unsafe {
        let mut report = ptr::null_mut();
        let status = gl_run(cmd.as_ptr(), cfg.as_ptr(), &mut report);
        assert_eq!(status, GlStatus::Verification, "{}", last_error());
        assert!(!report.is_null());
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert_eq!(json["all_pass"], false);
        gl_string_free(report);
    }
}
