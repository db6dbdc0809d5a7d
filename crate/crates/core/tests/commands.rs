use std::fs;
use std::path::Path;

use serde_json::Value;
use voxdet_core::commands::{self, checkpoint_id, RenderTarget};
use voxdet_core::config::{AblationCell, RunConfig};
use voxdet_core::dataset::{load_dataset, read_pfm, read_ppm};
use voxdet_core::msan::{FusionMode, OffsetMode};

/// One small scene family with a tiny model.
fn small_config(scenes: usize, views: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.num_scenes = scenes;
    c.data.num_eval = if scenes > 1 { 1 } else { 0 };
    c.data.views_min = views;
    c.data.views_max = views;
    c.grid = [8, 8, 4];
    c.model.channels = 8;
    c.model.dist_channels = 4;
    c.model.heads = 4;
    c.model.unet_base = 4;
    c.model.backbone_widths = [4, 8];
    c.model.map_channels = 4;
    c.model.nerf_hidden = 8;
    c.train.iterations = 10;
    c.train.views_per_iter = views.min(3);
    c.train.rays_per_iter = 32;
    c.train.samples_per_ray = 8;
    c.train.checkpoint_every = 5;
    c.train.eval_every = 0;
    c.eval.views = views.min(3);
    c
}

fn run_logged<F: FnOnce(&mut dyn FnMut(Value))>(f: F) -> Vec<Value> {
    let mut logs = Vec::new();
    let mut sink = |v: Value| logs.push(v);
    f(&mut sink);
    logs
}

fn without_timing(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("elapsed_s");
    }
    v
}

#[test]
fn minimal_dataset_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1, 1);
    let mut quiet = |_: Value| {};
    let manifest = commands::gen_data(&cfg, dir.path(), &mut quiet).unwrap();
    assert_eq!(manifest.splits.train.len(), 1);
    assert_eq!(manifest.images.len(), 1);
    let ds = load_dataset(&dir.path().join("dataset")).unwrap();
    assert_eq!(ds.train[0].views.len(), 1);

    let logs = run_logged(|log| {
        let s = commands::train(&cfg, dir.path(), log).unwrap();
        assert_eq!(s.losses.len(), 10);
        assert!(s.losses.iter().all(|l| l.is_finite()));
    });
    let steps: Vec<&Value> = logs.iter().filter(|v| v["event"] == "train_step").collect();
    assert_eq!(steps.len(), 10);
    for key in ["total", "nerf_rgb", "nerf_depth", "levels"] {
        assert!(steps[0]["loss"].get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("checkpoints/iter_000005/weights.bin").exists());
    assert!(dir.path().join("checkpoint/manifest.json").exists());
    let run: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"], cfg.to_value());
}

#[test]
fn untrained_checkpoint_gives_finite_metrics_and_repeatable_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(3, 3);
    cfg.train.iterations = 1;
    let mut quiet = |_: Value| {};
    commands::gen_data(&cfg, dir.path(), &mut quiet).unwrap();
    let s = commands::train(&cfg, dir.path(), &mut quiet).unwrap();
    let a = commands::eval(&cfg, dir.path(), &s.checkpoint, &mut quiet).unwrap();
    let first = fs::read(dir.path().join("metrics.json")).unwrap();
    let b = commands::eval(&cfg, dir.path(), &s.checkpoint, &mut quiet).unwrap();
    assert_eq!(a, b);
    assert_eq!(first, fs::read(dir.path().join("metrics.json")).unwrap());
    for k in ["mAP25", "mAP50", "mAP70", "mAR25", "mAR50", "mAR70"] {
        let v = a[k].as_f64().unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(a["diagnostics"]["levels"].as_array().unwrap().len(), 3);
    assert_eq!(a["checkpoint_id"], Value::from(checkpoint_id(&s.checkpoint).unwrap()));
    assert_eq!(a["config"], cfg.to_value());
    assert!(a["per_class"].get("crate").is_some());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2, 2);
    cfg.train.iterations = 1;
    let mut quiet = |_: Value| {};
    commands::gen_data(&cfg, dir.path(), &mut quiet).unwrap();
    let s = commands::train(&cfg, dir.path(), &mut quiet).unwrap();
    let mut other = cfg.clone();
    other.model.channels = 12;
    other.model.heads = 4;
    assert!(commands::eval(&other, dir.path(), &s.checkpoint, &mut quiet).is_err());
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn fixed_seed_runs_are_bitwise_repeatable() {
    let cfg = small_config(3, 3);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let logs = run_logged(|log| {
            commands::gen_data(&cfg, dir.path(), log).unwrap();
            let s = commands::train(&cfg, dir.path(), log).unwrap();
            commands::eval(&cfg, dir.path(), &s.checkpoint, log).unwrap();
        });
        let logs: Vec<String> = logs
            .into_iter()
            .map(without_timing)
            .map(|v| {
                // Paths differ between temporary directories.
                let s = v.to_string();
                s.replace(&dir.path().display().to_string(), "<out>")
            })
            .collect();
        runs.push((tree_bytes(dir.path()), logs));
    }
    assert_eq!(runs[0].1, runs[1].1);
    let (a, b) = (&runs[0].0, &runs[1].0);
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(b) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{pa} differs");
    }
}

#[test]
fn ablation_grid_resumes_and_reruns_corrupt_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(3, 3);
    cfg.ablate.seeds = vec![0];
    cfg.ablate.iterations = Some(2);
    cfg.ablate.fusion = vec![FusionMode::Mean, FusionMode::Mwf];
    cfg.ablate.levels = vec![0, 1];
    cfg.ablate.flip = vec![true];
    cfg.ablate.offsets = vec![OffsetMode::Learned];
    let mut quiet = |_: Value| {};
    commands::gen_data(&cfg, dir.path(), &mut quiet).unwrap();
    let table = commands::ablate(&cfg, dir.path(), &mut quiet).unwrap();
    assert_eq!(table.len(), 2 * 2);
    let report = fs::read(dir.path().join("ablation.json")).unwrap();

    let cell = AblationCell {
        fusion: FusionMode::Mwf,
        levels: 1,
        flip: true,
        offsets: OffsetMode::Learned,
    };
    let stored = dir.path().join("ablate").join(cell.key()).join("seed_0/metrics.json");
    fs::write(&stored, b"{ not json").unwrap();
    let logs = run_logged(|log| {
        commands::ablate(&cfg, dir.path(), log).unwrap();
    });
    let cells: Vec<&Value> = logs.iter().filter(|v| v["event"] == "ablate_cell").collect();
    assert_eq!(cells.len(), 4);
    let fresh: Vec<&&Value> = cells.iter().filter(|v| v["cached"] == false).collect();
    assert_eq!(fresh.len(), 1);
    assert_eq!(fresh[0]["key"], Value::from(cell.key()));
    assert_eq!(report, fs::read(dir.path().join("ablation.json")).unwrap());
}

#[test]
fn render_writes_images_with_bounded_opacity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2, 2);
    cfg.train.iterations = 2;
    let mut quiet = |_: Value| {};
    commands::gen_data(&cfg, dir.path(), &mut quiet).unwrap();
    let s = commands::train(&cfg, dir.path(), &mut quiet).unwrap();
    let a = commands::render(&cfg, dir.path(), &s.checkpoint, None, &RenderTarget::View(1), &mut quiet).unwrap();
    assert!(a.acc.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(a.rgb_mae.unwrap().is_finite());
    let b = commands::render(&cfg, dir.path(), &s.checkpoint, None, &RenderTarget::View(1), &mut quiet).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.depth, b.depth);
    let stem = dir.path().join("render/scene_0001_view_001");
    let (w, h, rgb) = read_ppm(&stem.with_file_name("scene_0001_view_001_rgb.ppm")).unwrap();
    assert_eq!((w, h), (a.width, a.height));
    assert_eq!(rgb.len(), w * h * 3);
    let (_, _, depth) = read_pfm(&stem.with_file_name("scene_0001_view_001_depth.pfm")).unwrap();
    assert_eq!(depth, a.depth);

    let logs = run_logged(|log| {
        commands::render(&cfg, dir.path(), &s.checkpoint, None, &RenderTarget::LookAt([50.0, 3.0, 1.5], [3.0, 3.0, 1.0]), log).unwrap();
    });
    assert!(logs.iter().any(|v| v["event"] == "warning"));
}
