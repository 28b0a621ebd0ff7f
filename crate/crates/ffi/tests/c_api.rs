use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::OnceLock;

use ttac::bench::{default_protocol, prepare, DomainSpec, Prepared, TrainConfig};
use ttac::data::Batch;
use ttac::engine::{Method, Protocol, ProtocolConfig, Session};
use ttac::nalgebra::DMatrix;
use ttac_ffi::*;

fn fixture() -> &'static Prepared {
    static PREPARED: OnceLock<Prepared> = OnceLock::new();
    PREPARED.get_or_init(|| {
        let spec = DomainSpec {
            samples_per_class: 200,
            val_per_class: 50,
            target_samples: 512,
            ..DomainSpec::default()
        };
        prepare(&spec, &TrainConfig::default()).unwrap()
    })
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        ttac_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

struct Files {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    bank: PathBuf,
}

fn write_files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let p = fixture();
    let model = root.join("model.json");
    let bank = root.join("bank.json");
    p.source.params.save_json(&model).unwrap();
    p.source.bank.save_json(&bank).unwrap();
    Files {
        _dir: dir,
        root,
        model,
        bank,
    }
}

fn small_config() -> ProtocolConfig {
    ProtocolConfig {
        n_b: 128,
        ..default_protocol()
    }
}

fn load_model(path: &Path) -> *mut TtacModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ttac_model_load(cstr(path).as_ptr(), &mut m) }, TtacStatus::Ok);
    m
}

fn load_bank(path: &Path) -> *mut TtacSourceBank {
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { ttac_source_bank_load(cstr(path).as_ptr(), &mut b) }, TtacStatus::Ok);
    b
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ttac_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut m = ptr::null_mut();
    let status = unsafe { ttac_model_load(ptr::null(), &mut m) };
    assert_eq!(status, TtacStatus::NullPointer);
    assert!(m.is_null());
    assert!(last_error().contains("path"));
    let status = unsafe { ttac_session_process(ptr::null_mut(), ptr::null(), 1, 1, ptr::null(), ptr::null_mut()) };
    assert_eq!(status, TtacStatus::NullPointer);
    unsafe {
        ttac_model_free(ptr::null_mut());
        ttac_source_bank_free(ptr::null_mut());
        ttac_session_free(ptr::null_mut());
    }
}

#[test]
fn error_message_is_truncated_and_cleared() {
    let missing = CString::new("/nonexistent/model.json").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ttac_model_load(missing.as_ptr(), &mut m) }, TtacStatus::Io);
    let full = unsafe { ttac_last_error_message(ptr::null_mut(), 0) };
    assert!(full > 8);
    let mut small = [0 as c_char; 8];
    let n = unsafe { ttac_last_error_message(small.as_mut_ptr(), small.len()) };
    assert_eq!(n, full);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 7);

    let mut shape = 0usize;
    let files = write_files();
    let model = load_model(&files.model);
    assert_eq!(unsafe { ttac_model_shape(model, &mut shape, ptr::null_mut()) }, TtacStatus::Ok);
    assert_eq!(unsafe { ttac_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { ttac_model_free(model) };
}

#[test]
fn session_matches_rust_engine() {
    let files = write_files();
    let p = fixture();
    let cfg = small_config();
    let config_json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let method = CString::new("TTAC++").unwrap();

    let model = load_model(&files.model);
    let bank = load_bank(&files.bank);
    let (mut dim, mut k) = (0usize, 0usize);
    assert_eq!(unsafe { ttac_model_shape(model, &mut dim, &mut k) }, TtacStatus::Ok);
    assert_eq!((dim, k), (p.source.params.input_dim(), p.source.params.classes()));

    let mut session = ptr::null_mut();
    let status = unsafe { ttac_session_new(model, bank, method.as_ptr(), config_json.as_ptr(), &mut session) };
    assert_eq!(status, TtacStatus::Ok, "{}", last_error());
    // The session owns copies.
    unsafe {
        ttac_model_free(model);
        ttac_source_bank_free(bank);
    }

    let mut reference = Session::new(
        Method::TtacPlusPlus,
        cfg.clone(),
        p.source.params.clone(),
        Some(p.source.bank.clone()),
    )
    .unwrap();

    let target = &p.domain.target;
    let truth = target.labels.as_ref().unwrap();
    let n = target.len();
    let mut start = 0;
    while start < n {
        let rows = cfg.n_b.min(n - start);
        let x = target.inputs.rows(start, rows).into_owned();
        let y: Vec<u32> = truth[start..start + rows].iter().map(|&l| l as u32).collect();
        let mut labels = vec![0u32; rows];
        let status = unsafe {
            ttac_session_process(session, row_major(&x).as_ptr(), rows, dim, y.as_ptr(), labels.as_mut_ptr())
        };
        assert_eq!(status, TtacStatus::Ok, "{}", last_error());
        let expected = reference
            .process(&Batch {
                ids: (start as u64..(start + rows) as u64).collect(),
                inputs: x,
                labels: Some(truth[start..start + rows].to_vec()),
            })
            .unwrap();
        let got: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert_eq!(got, expected, "batch at {start}");
        start += rows;
    }

    let (report, _) = reference.finish();
    let mut err = f64::NAN;
    assert_eq!(unsafe { ttac_session_error_rate(session, &mut err) }, TtacStatus::Ok);
    assert_eq!(err, report.final_error.unwrap());

    let out = files.root.join("report");
    assert_eq!(unsafe { ttac_session_write_report(session, cstr(&out).as_ptr()) }, TtacStatus::Ok);
    for f in ["report.json", "cumulative_error.csv", "predictions.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let written = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(written.lines().count(), n + 1);

    let adapted = files.root.join("adapted.json");
    assert_eq!(unsafe { ttac_session_save_model(session, cstr(&adapted).as_ptr()) }, TtacStatus::Ok);
    let reloaded = load_model(&adapted);
    unsafe {
        ttac_model_free(reloaded);
        ttac_session_free(session);
    }
}

#[test]
fn session_errors_map_to_status_codes() {
    let files = write_files();
    let model = load_model(&files.model);
    let method = CString::new("TTAC++").unwrap();
    let mut session = ptr::null_mut();

    // TTAC++ without a bank.
    let status = unsafe { ttac_session_new(model, ptr::null(), method.as_ptr(), ptr::null(), &mut session) };
    assert_eq!(status, TtacStatus::InvalidArgument);
    assert!(session.is_null());

    // An inferred bank under a source-labelled protocol.
    let mut inferred = ptr::null_mut();
    assert_eq!(unsafe { ttac_source_bank_infer(model, 0, &mut inferred) }, TtacStatus::Ok);
    let sl = CString::new(serde_json::to_string(&small_config()).unwrap()).unwrap();
    let status = unsafe { ttac_session_new(model, inferred, method.as_ptr(), sl.as_ptr(), &mut session) };
    assert_eq!(status, TtacStatus::Provenance, "{}", last_error());

    let saved = files.root.join("inferred.json");
    assert_eq!(unsafe { ttac_source_bank_save(inferred, cstr(&saved).as_ptr()) }, TtacStatus::Ok);
    let sf = ProtocolConfig {
        protocol: Protocol::NOSF,
        ..small_config()
    };
    let sf = CString::new(serde_json::to_string(&sf).unwrap()).unwrap();
    let status = unsafe { ttac_session_new(model, inferred, method.as_ptr(), sf.as_ptr(), &mut session) };
    assert_eq!(status, TtacStatus::Ok, "{}", last_error());

    let wrong = [0.0; 4 * 3];
    let mut labels = [0u32; 4];
    let status = unsafe { ttac_session_process(session, wrong.as_ptr(), 4, 3, ptr::null(), labels.as_mut_ptr()) };
    assert_eq!(status, TtacStatus::DimensionMismatch, "{}", last_error());

    let mut err = 0.0;
    assert_eq!(unsafe { ttac_session_error_rate(session, &mut err) }, TtacStatus::InvalidArgument);

    let bad_method = CString::new("SGD").unwrap();
    let mut other = ptr::null_mut();
    let status = unsafe { ttac_session_new(model, ptr::null(), bad_method.as_ptr(), ptr::null(), &mut other) };
    assert_eq!(status, TtacStatus::InvalidArgument);

    let bad_json = CString::new("{\"n_b\": ").unwrap();
    let test = CString::new("TEST").unwrap();
    let status = unsafe { ttac_session_new(model, ptr::null(), test.as_ptr(), bad_json.as_ptr(), &mut other) };
    assert_eq!(status, TtacStatus::Format);

    unsafe {
        ttac_session_free(session);
        ttac_source_bank_free(inferred);
        ttac_model_free(model);
    }
}

#[test]
fn model_predict_agrees_with_rust() {
    let files = write_files();
    let p = fixture();
    let model = load_model(&files.model);
    let x = p.domain.target.inputs.rows(0, 50).into_owned();
    let mut labels = vec![0u32; 50];
    let status = unsafe { ttac_model_predict(model, row_major(&x).as_ptr(), 50, x.ncols(), labels.as_mut_ptr()) };
    assert_eq!(status, TtacStatus::Ok);
    let expected = p.source.params.predict(&x).unwrap();
    assert_eq!(labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), expected);
    unsafe { ttac_model_free(model) };
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let lib = target_dir().join("libttac_ffi.a");
    assert!(lib.is_file(), "static library not built at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let files = write_files();
    let source = files.root.join("smoke.c");
    std::fs::write(
        &source,
        r#"#include <stdio.h>
#include <string.h>
#include "ttac.h"

int main(int argc, char **argv) {
    TtacModel *model = NULL;
    if (ttac_model_load(argv[1], &model) != TTAC_STATUS_OK) return 2;
    size_t dim = 0, k = 0;
    ttac_model_shape(model, &dim, &k);
    TtacSession *s = NULL;
    if (ttac_session_new(model, NULL, "ENTROPY_MIN", NULL, &s) != TTAC_STATUS_OK) return 3;
    double x[4 * 64];
    uint32_t labels[4];
    for (size_t i = 0; i < 4 * dim; i++) x[i] = 0.01 * (double)i;
    if (ttac_session_process(s, x, 4, dim, NULL, labels) != TTAC_STATUS_OK) return 4;
    for (int i = 0; i < 4; i++) if (labels[i] >= k) return 5;
    TtacStatus st = ttac_session_process(s, x, 4, dim + 1, NULL, labels);
    char msg[256];
    ttac_last_error_message(msg, sizeof msg);
    if (st != TTAC_STATUS_DIMENSION_MISMATCH || strlen(msg) == 0) return 6;
    printf("%s %zu %zu\n", ttac_version(), dim, k);
    ttac_session_free(s);
    ttac_model_free(model);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = files.root.join("smoke");
    let out = std::process::Command::new(cc)
        .arg(&source)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::process::Command::new(&exe).arg(&files.model).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8_lossy(&run.stdout);
    let dims = fixture().source.params.input_dim();
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")), "{stdout}");
    assert!(stdout.contains(&format!(" {dims} ")), "{stdout}");
}
