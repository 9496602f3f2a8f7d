use std::path::Path;
use std::process::{Command, Output};

fn mixerlab(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mixerlab")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const TINY: [&str; 6] = ["--set", "steps=5", "--set", "windows=120", "--set", "calibration_windows=4"];

#[test]
fn gen_train_compare_analyze_export() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    mixerlab(&[&["gen", "--out", "g"][..], &TINY].concat(), dir);
    let data = std::fs::read_to_string(dir.join("g/data.csv")).unwrap();
    assert!(data.starts_with("step,ch0,ch1"));
    assert!(dir.join("g/config.cfg").exists());

    mixerlab(&[&["train", "--out", "t", "--template", "moderntcn"][..], &TINY].concat(), dir);
    assert!(dir.join("t/report.json").exists() && dir.join("t/orig.ckpt").exists());

    let out = mixerlab(&[&["compare", "--out", "c", "--template", "transformer"][..], &TINY].concat(), dir);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean JSD"));
    for f in ["report.json", "orig.ckpt", "jd.ckpt", "snapshots_orig.json", "snapshots_jd.json"] {
        assert!(dir.join("c").join(f).exists(), "{f}");
    }

    mixerlab(&["analyze", "--orig", "c/snapshots_orig.json", "--dense", "c/snapshots_jd.json", "--out", "a"], dir);
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("a/analysis.json")).unwrap()).unwrap();
    assert!(a["mean_jsd"].as_f64().unwrap() >= 0.0);

    let out = mixerlab(&["export", "--snapshots", "c/snapshots_orig.json", "--out", "h"], dir);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let first = stdout.lines().next().expect("export lists its files");
    assert!(std::fs::read(dir.join(first)).unwrap().starts_with(b"P5"));
    assert!(dir.join(first).with_extension("csv").exists());
}

#[test]
fn bad_override_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mixerlab"))
        .args(["train", "--set", "no_such_key=1"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
