use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pwrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwrf")).args(args).output().unwrap()
}

fn tiny<'a>(task: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--seed", "4", "--task", task, "--channels", "3", "--capsule-types", "2", "--scenes", "2", "--size", "8",
        "--epochs", "2", "--out", out,
    ]
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = pwrf(&[&["gen"][..], &tiny("smm", out)].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["dataset.json", "scene_0000.tensors", "scene_0001_labels.pgm", "palette.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn train_is_reproducible_and_checkpoint_feeds_eval_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let args = [&["train"][..], &tiny("vdt", out_s)].concat();
    let first = pwrf(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let before = read_tree(&out);
    let second = pwrf(&args);
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(before, read_tree(&out));

    let ckpt = out.join("checkpoint");
    let ckpt_s = ckpt.to_str().unwrap();
    let eval_dir = dir.path().join("eval");
    let o = pwrf(&["eval", "--checkpoint", ckpt_s, "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["aggregate"]["s_measure"].as_f64().is_some());
    assert!(eval_dir.join("pred_0001.pgm").exists());

    let o = pwrf(&["explain", "--checkpoint", ckpt_s, "--stage", "2", "--row", "1", "--col", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for axis in ["horizontal", "vertical"] {
        for row in e[axis]["raw"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    let o = pwrf(&["explain", "--checkpoint", ckpt_s, "--stage", "4"]);
    assert_eq!(o.status.code(), Some(11));
    assert!(stderr(&o).starts_with("error code=E_CONTRACT"));
}

#[test]
fn errors_carry_codes() {
    let o = pwrf(&["train", "--task", "smm"]);
    assert_eq!(o.status.code(), Some(13));
    assert!(stderr(&o).starts_with("error code=E_CONFIG"));

    let o = pwrf(&["train", "--seed", "1", "--task", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error code=E_USAGE"));

    let o = pwrf(&["eval", "--checkpoint", "/nonexistent/ckpt", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(16));

    let o = pwrf(&["sweep", "--seed", "1", "--axis", "colour"]);
    assert_eq!(o.status.code(), Some(13));
}

#[test]
fn gradcheck_command_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gradcheck", "--max-entries", "2"];
    args.extend(tiny("smm", dir.path().to_str().unwrap()));
    let o = pwrf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
}
