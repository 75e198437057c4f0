//! Compiles a small C program against the generated header and the static
//! library, then runs it on a saved checkpoint.

use std::path::PathBuf;
use std::process::Command;

use pwrf_core::harness::{checkpoint, Model};
use pwrf_core::{PipelineConfig, Task};

const PROGRAM: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "pwrf.h"

int main(int argc, char **argv) {
    PwrfModel *model = NULL;
    if (pwrf_model_load(argv[1], &model) != PWRF_STATUS_OK) {
        fprintf(stderr, "load: %s\n", pwrf_last_error());
        return 1;
    }
    PwrfModelInfo info;
    pwrf_model_info(model, &info);
    size_t n_in = info.modalities * info.size * info.size * info.input_channels;
    size_t n_out = info.size * info.size * info.output_channels;
    double *in = calloc(n_in, sizeof(double));
    double *out = calloc(n_out, sizeof(double));
    for (size_t i = 0; i < n_in; i++) in[i] = (double)(i % 7) / 7.0;
    if (pwrf_model_predict(model, in, n_in, out, n_out) != PWRF_STATUS_OK) {
        fprintf(stderr, "predict: %s\n", pwrf_last_error());
        return 2;
    }
    PwrfStatus bad = pwrf_model_predict(model, in, n_in - 1, out, n_out);
    printf("task=%u size=%zu out=%zu bad=%d first=%.17g\n", info.task, info.size, n_out, (int)bad, out[0]);
    pwrf_model_free(model);
    free(in);
    free(out);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_predicts() {
    let lib = target_dir().join("libpwrf_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");

    let mut cfg = PipelineConfig::new(Task::Vdt, 5);
    cfg.channels = 3;
    cfg.part_types = 2;
    cfg.size = Some(8);
    let (_, store) = Model::build(&cfg).unwrap();
    let ckpt = dir.path().join("ckpt");
    checkpoint::save(&ckpt, &cfg, &store).unwrap();

    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout} {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("task=1 size=8 out=64 bad=10 first=0."), "{stdout}");
}
