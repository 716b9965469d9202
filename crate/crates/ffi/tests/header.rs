//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on the PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "ratiovr.h"

int main(void) {
    double out = 0.0;
    if (rvr_sample_size_reduction(1.19, &out) != RVR_STATUS_OK) return 1;
    if (out < 0.29 || out > 0.30) return 2;
    if (fabs(rvr_std_normal_cdf(1.96) - 0.9750021) > 1e-6) return 3;
    if (rvr_sample_size_reduction(0.0, &out) != RVR_STATUS_VALIDATION) return 4;
    if (rvr_last_error() == NULL) return 5;

    RvrExperiment *exp = NULL;
    if (rvr_experiment_new("control", &exp) != RVR_STATUS_OK) return 6;
    char id[16];
    for (int i = 0; i < 400; i++) {
        double f = (double)(i % 9);
        snprintf(id, sizeof id, "u%04d", i);
        rvr_experiment_add_unit(exp, id, i % 2 ? "treatment" : "control",
                                (double)(i % 3 == 0), 1.0, NAN, NAN, &f, 1);
    }
    RvrAnalysis a;
    if (rvr_analyze(exp, "raw", 0, NULL, 0.05, &a) != RVR_STATUS_OK) return 7;
    if (a.n_control != 200 || a.n_treatment != 200) return 8;
    rvr_experiment_free(exp);
    printf("%s\n", rvr_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libratiovr_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
