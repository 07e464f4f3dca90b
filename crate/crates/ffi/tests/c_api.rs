use std::ffi::{CStr, CString};
use std::ptr;

use videopure::attack::AttackConfig;
use videopure::nn::{ClassifierConfig, EpsilonModel, EpsilonModelConfig, Model, VideoClassifier};
use videopure_ffi::*;

const F: usize = 4;
const H: usize = 16;
const W: usize = 16;

struct Fixture {
    _dir: tempfile::TempDir,
    config: CString,
    classifier: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let clf = dir.path().join("clf.vpt");
    let eps = dir.path().join("eps.vpt");
    let report = serde_json::json!({});
    VideoClassifier::random(&ClassifierConfig { widths: vec![4, 8], ..Default::default() }, 1)
        .unwrap()
        .save(&clf, &report)
        .unwrap();
    EpsilonModel::random(&EpsilonModelConfig { base_width: 8, emb_dim: 16, groups: 4, ..Default::default() }, 2)
        .unwrap()
        .save(&eps, &report)
        .unwrap();
    let cfg = serde_json::json!({
        "checkpoints": { "classifier": clf, "epsilon_model": eps },
        "defenses": [{ "name": "none" }, { "name": "videopure" }],
        "output_dir": dir.path().join("out"),
    });
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    Fixture {
        config: CString::new(path.to_str().unwrap()).unwrap(),
        classifier: CString::new(clf.to_str().unwrap()).unwrap(),
        _dir: dir,
    }
}

fn video() -> Vec<f32> {
    (0..F * H * W).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

fn last_error() -> String {
    let n = vp_last_error_length();
    let mut buf = vec![0 as std::ffi::c_char; n + 1];
    unsafe {
        vp_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_and_missing_inputs_report_codes() {
    let mut stack = ptr::null_mut();
    assert_eq!(unsafe { vp_stack_load(ptr::null(), &mut stack) }, VpStatus::NullPointer);
    assert!(last_error().contains("config_path"));
    let missing = CString::new("/nonexistent/config.json").unwrap();
    assert_eq!(unsafe { vp_stack_load(missing.as_ptr(), &mut stack) }, VpStatus::Io);
    assert!(stack.is_null());
    unsafe {
        vp_stack_free(ptr::null_mut());
        vp_defense_free(ptr::null_mut());
        vp_classifier_free(ptr::null_mut());
    }
}

#[test]
fn truncated_error_message_is_terminated() {
    let mut stack = ptr::null_mut();
    unsafe { vp_stack_load(ptr::null(), &mut stack) };
    let mut buf = [1 as std::ffi::c_char; 4];
    let n = unsafe { vp_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn stack_defenses_and_attacks_round_trip() {
    let fx = fixture();
    let x = video();
    unsafe {
        let mut stack = ptr::null_mut();
        assert_eq!(vp_stack_load(fx.config.as_ptr(), &mut stack), VpStatus::Ok, "{}", last_error());

        let bad = CString::new(r#"{"name":"nope"}"#).unwrap();
        let mut d = ptr::null_mut();
        assert_eq!(vp_defense_new(stack, bad.as_ptr(), &mut d), VpStatus::Config);

        let none = CString::new(r#"{"name":"none"}"#).unwrap();
        assert_eq!(vp_defense_new(stack, none.as_ptr(), &mut d), VpStatus::Ok);
        let mut out = vec![0f32; x.len()];
        let st = vp_defense_purify(d, x.as_ptr(), F, H, W, 1, ptr::null(), 0, out.as_mut_ptr());
        assert_eq!(st, VpStatus::Ok);
        assert_eq!(out, x);

        let mut clf = ptr::null_mut();
        assert_eq!(vp_classifier_load(fx.classifier.as_ptr(), &mut clf), VpStatus::Ok);
        let (mut plain, mut defended, mut k) = (usize::MAX, usize::MAX, 0usize);
        let mut logits = [0f32; 8];
        let st = vp_classifier_predict(clf, x.as_ptr(), F, H, W, 1, &mut plain, logits.as_mut_ptr(), 8, &mut k);
        assert_eq!(st, VpStatus::Ok);
        assert_eq!(k, 8);
        let st = vp_defense_predict(stack, d, x.as_ptr(), F, H, W, 1, ptr::null(), 0, &mut defended);
        assert_eq!(st, VpStatus::Ok);
        assert_eq!(plain, defended);

        let cfg = AttackConfig { iterations: 2, eot_reps: 1, ..Default::default() };
        let spec = CString::new(serde_json::json!({ "kind": "bpda", "config": cfg }).to_string()).unwrap();
        let mut adv = vec![0f32; x.len()];
        let st = vp_attack(stack, d, spec.as_ptr(), x.as_ptr(), F, H, W, 1, ptr::null(), 3, adv.as_mut_ptr());
        assert_eq!(st, VpStatus::Ok, "{}", last_error());
        let dmax = x.iter().zip(&adv).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(dmax <= cfg.epsilon as f32 + 1e-6 && dmax > 0.0);
        let st = vp_attack(stack, ptr::null(), spec.as_ptr(), x.as_ptr(), F, H, W, 1, ptr::null(), 3, adv.as_mut_ptr());
        assert_eq!(st, VpStatus::NullPointer);

        let vp = CString::new(r#"{"name":"videopure","t_star":2}"#).unwrap();
        let mut v = ptr::null_mut();
        assert_eq!(vp_defense_new(stack, vp.as_ptr(), &mut v), VpStatus::Ok, "{}", last_error());
        let flow = vec![0f32; (F - 1) * H * W * 2];
        let (mut a, mut b) = (vec![0f32; x.len()], vec![0f32; x.len()]);
        assert_eq!(vp_defense_purify(v, x.as_ptr(), F, H, W, 1, ptr::null(), 9, a.as_mut_ptr()), VpStatus::Config);
        let st = vp_defense_purify(v, x.as_ptr(), F, H, W, 1, flow.as_ptr(), 9, a.as_mut_ptr());
        assert_eq!(st, VpStatus::Ok, "{}", last_error());
        assert_eq!(vp_defense_purify(v, x.as_ptr(), F, H, W, 1, flow.as_ptr(), 9, b.as_mut_ptr()), VpStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.is_finite()));
        assert_ne!(a, x);

        let st = vp_defense_purify(v, x.as_ptr(), 1, H, W, 1, ptr::null(), 9, a.as_mut_ptr());
        assert_eq!(st, VpStatus::InvalidArgument);

        vp_defense_free(v);
        vp_defense_free(d);
        vp_classifier_free(clf);
        vp_stack_free(stack);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/videopure.h")).unwrap();
    for sym in ["vp_stack_load", "vp_defense_new", "vp_defense_purify", "vp_attack", "vp_last_error_message", "VP_STATUS_OK"] {
        assert!(h.contains(sym), "{sym} missing from header");
    }
}
