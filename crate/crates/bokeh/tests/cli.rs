//! Exit codes and end-to-end runs of the `bokeh` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bokeh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bokeh")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&bokeh(&[])), 1);
    assert_eq!(code(&bokeh(&["train", "--stage", "3", "--data", "x", "--out", "y"])), 1);
    assert_eq!(code(&bokeh(&["eval", "--ckpt", "a"])), 1);
    assert_eq!(code(&bokeh(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = bokeh(&["infer", "--ckpt", p(&missing), "--input", "x.png", "--output", "y.png"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"bggan-ckpt-9\nend\n").unwrap();
    let out = bokeh(&["eval", "--ckpt", p(&bad), "--data", p(dir.path()), "--report", p(&dir.path().join("r.json"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for split in ["train", "test"] {
        let out = bokeh(&["synth", "--out", p(root), "--count", "2", "--height", "32", "--width", "32", "--split", split]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let config = root.join("tiny.toml");
    std::fs::write(
        &config,
        "preset = \"desk\"\nstage1_base_channels = 4\nstage1_max_channels = 32\nstage2_base_channels = 4\n\
         stage2_max_channels = 32\nn_resblocks = 1\ncritic_depths = [2]\ncritic_base_channels = 4\n\
         crop_height = 32\ncrop_width = 32\nstage1_epochs = 1\nextractor = \"identity\"\n",
    )
    .unwrap();
    let ckpt = root.join("s1.ckpt");
    let out = bokeh(&["train", "--stage", "1", "--config", p(&config), "--data", p(root), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let image = root.join("test/source/synth_0000.png");
    let rendered = root.join("out.png");
    assert_eq!(code(&bokeh(&["infer", "--ckpt", p(&ckpt), "--input", p(&image), "--output", p(&rendered)])), 0);
    assert!(rendered.exists());

    let report = root.join("report.json");
    let out = bokeh(&["eval", "--ckpt", p(&ckpt), "--data", p(root), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["count"], 2);

    // Stage 1 cannot continue a stage-2 checkpoint.
    let s2 = root.join("s2.ckpt");
    let out = bokeh(&["train", "--stage", "2", "--resume", p(&ckpt), "--data", p(root), "--out", p(&s2)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = bokeh(&["train", "--stage", "1", "--resume", p(&s2), "--data", p(root), "--out", p(&root.join("s3.ckpt"))]);
    assert_eq!(code(&out), 1);
}
