use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "grid": [8, 8, 4],
  "model": {"channels": 8, "dist_channels": 4, "heads": 4, "unet_base": 4,
            "backbone_widths": [4, 8], "map_channels": 4, "nerf_hidden": 8},
  "train": {"views_per_iter": 2, "rays_per_iter": 32, "samples_per_ray": 8,
            "checkpoint_every": 3, "eval_every": 0},
  "eval": {"views": 2}
}"#;

fn voxdet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdet"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn events(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not a JSON line {l:?}: {e}")))
        .collect()
}

#[test]
fn generate_train_evaluate_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let common = ["--config", cfg, "--scenes", "3", "--views", "2", "--iterations", "4"];

    let o = voxdet(dir.path(), &[&["gen-data"][..], &common].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("dataset/manifest.json").exists());

    let o = voxdet(dir.path(), &[&["train"][..], &common, &["--set", "train.optim.lr=0.001"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let steps = events(&o).into_iter().filter(|v| v["event"] == "train_step").count();
    assert_eq!(steps, 4);

    // The checkpoint carries its config, so eval needs no flags.
    let o = voxdet(dir.path(), &["eval"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["train"]["optim"]["lr"], 0.001);
    assert!(metrics["mAP25"].as_f64().is_some());

    let o = voxdet(dir.path(), &["render", "--view", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ppm = std::fs::read(dir.path().join("render/scene_0002_view_001_rgb.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
    let pfm = std::fs::read(dir.path().join("render/scene_0002_view_001_depth.pfm")).unwrap();
    assert!(pfm.starts_with(b"Pf\n"));
}

#[test]
fn failures_exit_non_zero_with_an_error_event() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxdet(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    let ev = events(&o);
    assert_eq!(ev.last().unwrap()["event"], "error");
    assert!(ev.last().unwrap()["message"].as_str().unwrap().contains("gen-data"));

    let o = voxdet(dir.path(), &["gen-data", "--set", "model.nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = voxdet(dir.path(), &["eval", "--checkpoint", "/nonexistent/checkpoint"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxdet(dir.path(), &["render", "--view", "0", "--pose", "1,1,1,2,2,1"]);
    assert!(!o.status.success());
    let o = voxdet(dir.path(), &["train", "--grid", "8x8"]);
    assert!(!o.status.success());
}
