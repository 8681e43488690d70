use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mmadapt_ffi::*;

fn last_error() -> String {
    let p = arc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_json(out: &Path) -> CString {
    let mut c = mmadapt::config::ExperimentConfig::tiny();
    c.train.pretrain.steps = 3;
    c.train.finetune.steps = 3;
    c.train.pretrain.batch_size = 2;
    c.train.finetune.batch_size = 2;
    c.train.eval_samples = 8;
    c.output.directory = out.to_path_buf();
    CString::new(c.to_json()).unwrap()
}

#[test]
fn default_model_counts_match_the_core() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { arc_model_new(ptr::null(), &mut m) }, ArcStatus::Ok);
    let (mut t, mut f) = (0u64, 0u64);
    assert_eq!(unsafe { arc_model_param_counts(m, &mut t, &mut f) }, ArcStatus::Ok);
    let cfg = mmadapt::config::ExperimentConfig::default();
    let core = mmadapt::model::Model::build(&cfg.model, &cfg.vision, cfg.seed).unwrap();
    assert_eq!((t as usize, f as usize), core.param_counts());
    let mut n = 0u64;
    assert_eq!(unsafe { arc_model_visual_tokens(m, &mut n) }, ArcStatus::Ok);
    assert_eq!(n as usize, cfg.vision.n_visual_tokens());
    unsafe { arc_model_free(m) };
}

#[test]
fn bad_config_maps_to_the_config_code() {
    let mut m = ptr::null_mut();
    let json = CString::new(r#"{"model": {"lora": {"rank": 10, "beta": 0.25, "gamma": 0.75}}}"#).unwrap();
    assert_eq!(unsafe { arc_model_new(json.as_ptr(), &mut m) }, ArcStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("model.lora"), "{}", last_error());
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(unsafe { arc_model_new(ptr::null(), ptr::null_mut()) }, ArcStatus::NullArgument);
    assert!(last_error().contains("out"));
    let mut t = 0u64;
    assert_eq!(
        unsafe { arc_model_param_counts(ptr::null(), &mut t, &mut t) },
        ArcStatus::NullArgument
    );
    unsafe { arc_model_free(ptr::null_mut()) };
}

#[test]
fn train_save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let json = tiny_json(dir.path());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { arc_model_new(json.as_ptr(), &mut m) }, ArcStatus::Ok);
    let mut acc = -1.0;
    assert_eq!(unsafe { arc_model_train(m, &mut acc) }, ArcStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&acc));
    assert!(dir.path().join("results.json").exists());

    let ckpt = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { arc_model_save(m, ckpt.as_ptr()) }, ArcStatus::Ok);
    let mut fresh = ptr::null_mut();
    assert_eq!(unsafe { arc_model_new(json.as_ptr(), &mut fresh) }, ArcStatus::Ok);
    assert_eq!(unsafe { arc_model_load(fresh, ckpt.as_ptr()) }, ArcStatus::Ok);
    let again = CString::new(dir.path().join("again.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { arc_model_save(fresh, again.as_ptr()) }, ArcStatus::Ok);
    assert_eq!(
        std::fs::read(dir.path().join("m.ckpt")).unwrap(),
        std::fs::read(dir.path().join("again.ckpt")).unwrap()
    );

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { arc_model_load(fresh, missing.as_ptr()) }, ArcStatus::Io);
    unsafe {
        arc_model_free(m);
        arc_model_free(fresh);
    }
}

#[test]
fn grad_check_passes_on_the_tiny_model() {
    let mut err = f64::NAN;
    assert_eq!(unsafe { arc_grad_check(ptr::null(), &mut err) }, ArcStatus::Ok, "{}", last_error());
    assert!(err < 1e-5);
}

#[test]
fn header_declares_the_exports_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("mmadapt.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "arc_last_error",
        "arc_model_new",
        "arc_model_free",
        "arc_model_param_counts",
        "arc_model_visual_tokens",
        "arc_model_save",
        "arc_model_load",
        "arc_model_train",
        "arc_grad_check",
        "ARC_STATUS_CONFIG = 2",
        "typedef struct ArcModel ArcModel",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    if let Ok(o) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
