//! The generated header declares the whole ABI and works from C.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const EXPORTS: &[&str] = &[
    "fca_version",
    "fca_last_error_message",
    "fca_layer_new_preset",
    "fca_layer_new_custom",
    "fca_layer_set_bias",
    "fca_layer_free",
    "fca_simulate",
    "fca_report_summary",
    "fca_report_json",
    "fca_report_free",
    "fca_peak_gops",
    "fca_quantize",
    "fca_requantize",
    "fca_run_inference",
    "fca_reference_serial",
];

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fcaccel.h")
}

#[test]
fn header_declares_every_export() {
    let h = fs::read_to_string(header_path()).unwrap();
    assert!(h.contains("#ifndef FCACCEL_H"));
    assert!(h.contains("typedef struct FcaLayer FcaLayer;"));
    assert!(h.contains("typedef struct FcaReport FcaReport;"));
    for code in ["FCA_STATUS_OK = 0", "FCA_STATUS_NULL_POINTER = 1", "FCA_STATUS_PANIC = 6"] {
        assert!(h.contains(code), "missing {code}");
    }
    for f in EXPORTS {
        assert!(h.contains(&format!("{f}(")), "missing {f}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fcaccel.h"

int main(void) {
    FcaLayer *layer = NULL;
    if (fca_layer_new_preset("fc8-alex", &layer) != FCA_STATUS_OK) return 1;
    FcaReport *report = NULL;
    if (fca_simulate(layer, FCA_MODE_DETAILED, 0.0, &report) != FCA_STATUS_OK) return 2;
    FcaSummary s;
    if (fca_report_summary(report, &s) != FCA_STATUS_OK) return 3;
    printf("%llu %d %.5f\n", (unsigned long long)s.total_cycles, s.feasible, s.latency_s * 1e6);
    fca_report_free(report);
    fca_layer_free(layer);

    char msg[128];
    if (fca_layer_new_custom(10, 10, 12, 4, false, &layer) != FCA_STATUS_INVALID_CONFIG) return 4;
    fca_last_error_message(msg, sizeof msg);
    printf("%s\n", msg);
    return 0;
}
"#;

/// Compile and run a C client against the static library when a C
/// compiler is on the path.
#[test]
fn c_client_links_and_runs() {
    let target_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target_dir.join("libfcaccel_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let exe = dir.path().join("client");
    fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("5632 1 56.32000"));
    assert!(lines.next().unwrap().contains("tile size must be 8 or 16"));
}
