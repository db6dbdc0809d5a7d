//! Command implementations behind the CLI. Each takes a resolved config,
//! an output directory and a sink for JSON log records.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use voxdet_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore};

use crate::check::{gradient_suite, invariant_suite, CheckResult};
use crate::config::{AblationCell, RunConfig};
use crate::dataset::{export_dataset, generate, load_dataset, write_pfm, write_ppm, Dataset, Manifest, SceneData};
use crate::error::{io_err, json_err};
use crate::eval::Metrics;
use crate::geometry::{generate_rays, Intrinsics, Pose};
use crate::msan::{backbone_forward, Model};
use crate::nerf::{render_rays, sample_along_rays};
use crate::train::{build_model, eval_view_indices, evaluate_scenes, loss_log, make_batch, Trainer, BUILD_ID};
use crate::{Error, Result};

pub type Log<'a> = &'a mut dyn FnMut(Value);

/// Relative dataset paths live under the output directory.
pub fn dataset_root(cfg: &RunConfig, out_dir: &Path) -> PathBuf {
    let p = Path::new(&cfg.dataset_dir);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut s = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// FNV-1a over the checkpoint's weight file.
pub fn checkpoint_id(dir: &Path) -> Result<String> {
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Metadata stored next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub iteration: usize,
    pub config: Value,
    pub build_id: String,
}

pub fn save_run_checkpoint(store: &ParamStore<f32>, cfg: &RunConfig, iteration: usize, dir: &Path) -> Result<()> {
    save_checkpoint(store, dir)?;
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            iteration,
            config: cfg.to_value(),
            build_id: BUILD_ID.into(),
        },
    )
}

/// The config a checkpoint was trained with, if recorded.
pub fn checkpoint_config(dir: &Path) -> Result<Option<RunConfig>> {
    let path = dir.join("run.json");
    if !path.exists() {
        return Ok(None);
    }
    let info: RunInfo = crate::dataset::read_json(&path)?;
    RunConfig::from_value(info.config).map(Some)
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = build_model(cfg, cfg.train.seed)?;
    load_checkpoint(&mut store, checkpoint)?;
    Ok((model, store))
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path, log: Log) -> Result<Manifest> {
    cfg.validate()?;
    let t0 = Instant::now();
    let root = dataset_root(cfg, out_dir);
    let scenes = generate(&cfg.data)?;
    let (n_train, _) = cfg.data.split_sizes();
    let manifest = export_dataset(&scenes, n_train, &root, cfg.data.seed, cfg.to_value(), BUILD_ID)?;
    log(json!({
        "event": "gen_data",
        "dataset": root.display().to_string(),
        "train": manifest.splits.train.len(),
        "eval": manifest.splits.eval.len(),
        "images": manifest.images.len(),
        "elapsed_s": t0.elapsed().as_secs_f64(),
    }));
    Ok(manifest)
}

fn open_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<Dataset> {
    let root = dataset_root(cfg, out_dir);
    if !root.join("manifest.json").exists() {
        return Err(Error::Invalid(format!("no dataset at {}; run gen-data first", root.display())));
    }
    load_dataset(&root)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    /// Total loss of every iteration, in order.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub checkpoint: PathBuf,
}

/// Trains on in-memory scenes, checkpointing under `out_dir`.
pub fn train_scenes(cfg: &RunConfig, train: &[SceneData], eval: &[SceneData], out_dir: &Path, log: Log) -> Result<(TrainSummary, Trainer)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let t = &cfg.train;
    let t0 = Instant::now();
    let mut losses = Vec::with_capacity(t.iterations);
    let mut evals = Vec::new();
    for it in 1..=t.iterations {
        let o = trainer.step(train)?;
        losses.push(o.report.total);
        if t.log_every > 0 && (it == 1 || it % t.log_every == 0) {
            log(loss_log(it, &o, t0.elapsed().as_secs_f64()));
        }
        if t.checkpoint_every > 0 && it % t.checkpoint_every == 0 && it < t.iterations {
            let dir = out_dir.join("checkpoints").join(format!("iter_{it:06}"));
            save_run_checkpoint(&trainer.store, cfg, it, &dir)?;
            log(json!({"event": "checkpoint", "iteration": it, "path": dir.display().to_string()}));
        }
        if t.eval_every > 0 && !eval.is_empty() && it % t.eval_every == 0 {
            let e = evaluate_scenes(&trainer.store, &trainer.model, cfg, eval)?;
            log(json!({"event": "eval", "iteration": it, "metrics": e.metrics}));
            evals.push(EvalPoint {
                iteration: it,
                metrics: e.metrics,
            });
        }
    }
    let dir = out_dir.join("checkpoint");
    save_run_checkpoint(&trainer.store, cfg, t.iterations, &dir)?;
    log(json!({"event": "checkpoint", "iteration": t.iterations, "path": dir.display().to_string()}));
    Ok((
        TrainSummary {
            losses,
            evals,
            checkpoint: dir,
        },
        trainer,
    ))
}

pub fn train(cfg: &RunConfig, out_dir: &Path, log: Log) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = open_dataset(cfg, out_dir)?;
    log(json!({
        "event": "train_start",
        "train_scenes": ds.train.len(),
        "eval_scenes": ds.eval.len(),
        "config": cfg.to_value(),
        "build_id": BUILD_ID,
    }));
    let (summary, _) = train_scenes(cfg, &ds.train, &ds.eval, out_dir, log)?;
    write_json(
        &out_dir.join("run.json"),
        &json!({
            "config": cfg.to_value(),
            "build_id": BUILD_ID,
            "losses": summary.losses,
            "evals": summary.evals,
            "checkpoint_id": checkpoint_id(&summary.checkpoint)?,
        }),
    )?;
    Ok(summary)
}

/// Scores the final level and reports the earlier levels as diagnostics.
pub fn eval_report(store: &ParamStore<f32>, model: &Model, cfg: &RunConfig, scenes: &[SceneData], checkpoint: &str) -> Result<Value> {
    let e = evaluate_scenes(store, model, cfg, scenes)?;
    let mut v = serde_json::to_value(&e.metrics).expect("metrics serialize");
    let obj = v.as_object_mut().expect("metrics object");
    obj.insert("diagnostics".into(), json!({ "levels": e.per_level }));
    obj.insert("num_scenes".into(), json!(scenes.len()));
    obj.insert("config".into(), cfg.to_value());
    obj.insert("build_id".into(), json!(BUILD_ID));
    obj.insert("checkpoint_id".into(), json!(checkpoint));
    Ok(v)
}

pub fn eval(cfg: &RunConfig, out_dir: &Path, checkpoint: &Path, log: Log) -> Result<Value> {
    cfg.validate()?;
    let ds = open_dataset(cfg, out_dir)?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let report = eval_report(&store, &model, cfg, &ds.eval, &checkpoint_id(checkpoint)?)?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    log(json!({
        "event": "eval",
        "scenes": ds.eval.len(),
        "mAP25": report["mAP25"],
        "mAP50": report["mAP50"],
        "mAR25": report["mAR25"],
    }));
    Ok(report)
}

/// Stored result of one ablation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: AblationCell,
    pub seed: u64,
    pub metrics: Metrics,
    pub config: Value,
    pub build_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: String,
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    /// Per-seed values of each headline metric.
    pub runs: Vec<Metrics>,
    /// Medians keyed like the metrics file.
    pub median: Value,
}

pub fn cell_config(cfg: &RunConfig, cell: &AblationCell, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.model.fusion = cell.fusion;
    c.model.levels = cell.levels;
    c.model.offsets = cell.offsets;
    c.train.flip_augment = cell.flip;
    c.train.seed = seed;
    c.train.eval_every = 0;
    if let Some(n) = cfg.ablate.iterations {
        c.train.iterations = n;
    }
    c
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn headline(m: &Metrics) -> [(&'static str, f64); 6] {
    [
        ("mAP25", m.map25),
        ("mAP50", m.map50),
        ("mAP70", m.map70),
        ("mAR25", m.mar25),
        ("mAR50", m.mar50),
        ("mAR70", m.mar70),
    ]
}

pub fn median_metrics(runs: &[Metrics]) -> Value {
    let mut out = serde_json::Map::new();
    for (i, (name, _)) in headline(&Metrics::default()).iter().enumerate() {
        out.insert((*name).into(), json!(median(runs.iter().map(|m| headline(m)[i].1).collect())));
    }
    Value::Object(out)
}

/// A finished run whose stored config matches; anything else is re-run.
fn cached_run(path: &Path, config: &Value) -> Option<CellRun> {
    let s = fs::read_to_string(path).ok()?;
    let run: CellRun = serde_json::from_str(&s).ok()?;
    (run.config == *config).then_some(run)
}

/// Trains and evaluates one ablation run, reusing a stored result.
pub fn run_cell(cfg: &RunConfig, ds: &Dataset, cell: &AblationCell, seed: u64, out_dir: &Path, log: Log) -> Result<CellRun> {
    let c = cell_config(cfg, cell, seed);
    c.validate()?;
    let dir = out_dir.join("ablate").join(cell.key()).join(format!("seed_{seed}"));
    let path = dir.join("metrics.json");
    let config = c.to_value();
    if let Some(run) = cached_run(&path, &config) {
        log(json!({"event": "ablate_cell", "key": cell.key(), "seed": seed, "cached": true, "mAP50": run.metrics.map50}));
        return Ok(run);
    }
    if path.exists() {
        log(json!({"event": "warning", "message": format!("re-running stale or corrupt cell {}", path.display())}));
    }
    let mut quiet = |_: Value| {};
    let (_, trainer) = train_scenes(&c, &ds.train, &[], &dir, &mut quiet)?;
    let e = evaluate_scenes(&trainer.store, &trainer.model, &c, &ds.eval)?;
    let run = CellRun {
        cell: cell.clone(),
        seed,
        metrics: e.metrics,
        config,
        build_id: BUILD_ID.into(),
    };
    write_json(&path, &run)?;
    log(json!({"event": "ablate_cell", "key": cell.key(), "seed": seed, "cached": false, "mAP25": run.metrics.map25, "mAP50": run.metrics.map50, "mAR25": run.metrics.mar25}));
    Ok(run)
}

pub fn ablate(cfg: &RunConfig, out_dir: &Path, log: Log) -> Result<Vec<CellSummary>> {
    cfg.validate()?;
    let ds = open_dataset(cfg, out_dir)?;
    let cells = cfg.ablate.grid();
    log(json!({"event": "ablate_start", "cells": cells.len(), "seeds": cfg.ablate.seeds, "runs": cells.len() * cfg.ablate.seeds.len()}));
    let mut table = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut runs = Vec::new();
        for &seed in &cfg.ablate.seeds {
            runs.push(run_cell(cfg, &ds, cell, seed, out_dir, log)?.metrics);
        }
        table.push(CellSummary {
            key: cell.key(),
            cell: cell.clone(),
            seeds: cfg.ablate.seeds.clone(),
            median: median_metrics(&runs),
            runs,
        });
    }
    write_json(
        &out_dir.join("ablation.json"),
        &json!({"cells": table, "config": cfg.to_value(), "build_id": BUILD_ID}),
    )?;
    Ok(table)
}

/// Which camera to render from.
#[derive(Clone, Debug)]
pub enum RenderTarget {
    /// A stored view of the scene; ground truth is available.
    View(usize),
    /// Camera at `eye` looking at `target`, with the scene's intrinsics.
    LookAt([f64; 3], [f64; 3]),
}

pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub acc: Vec<f32>,
    /// Mean absolute RGB error against the stored view.
    pub rgb_mae: Option<f64>,
}

/// Renders the radiance branch from `target`, conditioned on the scene's
/// evaluation views.
pub fn render_scene(store: &ParamStore<f32>, model: &Model, cfg: &RunConfig, scene: &SceneData, target: &RenderTarget) -> Result<RenderOutput> {
    let field = model.field.as_ref().ok_or_else(|| Error::Config("render needs model.nerf = true".into()))?;
    let idx = eval_view_indices(scene.views.len(), cfg.eval.views);
    let batch = make_batch(idx.iter().map(|&i| scene.views[i].clone()).collect(), vec![])?;
    let fm = {
        let mut g = Graph::<f32>::new();
        let images = g.constant(batch.images.clone());
        let f = backbone_forward(&mut g, store, model, images)?;
        g.value(f).clone()
    };
    let (pose, intr, gt): (Pose, Intrinsics, Option<&[f32]>) = match target {
        RenderTarget::View(i) => {
            let v = scene
                .views
                .get(*i)
                .ok_or_else(|| Error::Invalid(format!("{} has {} views, asked for {i}", scene.id, scene.views.len())))?;
            (v.pose, v.intrinsics, Some(&v.rgb[..]))
        }
        RenderTarget::LookAt(eye, at) => (
            Pose::look_at(Vector3::from(*eye), Vector3::from(*at)),
            scene.views[0].intrinsics,
            None,
        ),
    };
    let (w, h) = (intr.width, intr.height);
    let far = scene.room_diagonal();
    let pixels: Vec<(f64, f64)> = (0..h).flat_map(|y| (0..w).map(move |x| (x as f64, y as f64))).collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut acc = Vec::with_capacity(w * h);
    // Midpoint samples, so the output is a pure function of the inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in pixels.chunks(512) {
        let rays = generate_rays(&pose, &intr, chunk);
        let rb = sample_along_rays(&rays, cfg.train.near, far, cfg.train.samples_per_ray, false, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let f = g.constant(fm.clone());
        let out = render_rays(&mut g, store, field, f, &batch.views, &rb)?;
        for row in g.value(out).data().chunks_exact(5) {
            rgb.extend_from_slice(&row[..3]);
            depth.push(row[3]);
            acc.push(row[4]);
        }
    }
    let rgb_mae = gt.map(|gt| rgb.iter().zip(gt).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / rgb.len() as f64);
    Ok(RenderOutput {
        width: w,
        height: h,
        rgb,
        depth,
        acc,
        rgb_mae,
    })
}

fn inside_room(scene: &SceneData, p: &[f64; 3]) -> bool {
    (0..3).all(|a| p[a] > scene.room_min[a] && p[a] < scene.room_max[a])
}

pub fn render(cfg: &RunConfig, out_dir: &Path, checkpoint: &Path, scene_id: Option<&str>, target: &RenderTarget, log: Log) -> Result<RenderOutput> {
    cfg.validate()?;
    let ds = open_dataset(cfg, out_dir)?;
    let scene = match scene_id {
        Some(id) => ds
            .train
            .iter()
            .chain(&ds.eval)
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Invalid(format!("scene {id} not in dataset")))?,
        None => ds.eval.first().or(ds.train.first()).ok_or_else(|| Error::Invalid("dataset is empty".into()))?,
    };
    if let RenderTarget::LookAt(eye, _) = target {
        if !inside_room(scene, eye) {
            log(json!({"event": "warning", "message": format!("camera {eye:?} is outside the room of {}", scene.id)}));
        }
    }
    let (model, store) = load_model(cfg, checkpoint)?;
    let out = render_scene(&store, &model, cfg, scene, target)?;
    let dir = out_dir.join("render");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let stem = match target {
        RenderTarget::View(i) => format!("{}_view_{i:03}", scene.id),
        RenderTarget::LookAt(..) => format!("{}_pose", scene.id),
    };
    write_ppm(&dir.join(format!("{stem}_rgb.ppm")), out.width, out.height, &out.rgb)?;
    write_pfm(&dir.join(format!("{stem}_depth.pfm")), out.width, out.height, &out.depth)?;
    write_pfm(&dir.join(format!("{stem}_acc.pfm")), out.width, out.height, &out.acc)?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &json!({
            "scene": scene.id,
            "rgb_mae": out.rgb_mae,
            "config": cfg.to_value(),
            "build_id": BUILD_ID,
            "checkpoint_id": checkpoint_id(checkpoint)?,
        }),
    )?;
    log(json!({"event": "render", "scene": scene.id, "output": dir.join(&stem).display().to_string(), "rgb_mae": out.rgb_mae}));
    Ok(out)
}

/// Runs both suites; true when every check passed.
pub fn check(cfg: &RunConfig, out_dir: &Path, log: Log) -> Result<bool> {
    let t0 = Instant::now();
    let mut results: Vec<CheckResult> = gradient_suite();
    results.extend(invariant_suite());
    for r in &results {
        log(json!({"event": "check", "name": r.name, "passed": r.passed, "value": r.value, "limit": r.limit}));
    }
    let passed = results.iter().all(|r| r.passed);
    let failed = results.iter().filter(|r| !r.passed).count();
    log(json!({"event": "check_done", "checks": results.len(), "failed": failed, "elapsed_s": t0.elapsed().as_secs_f64()}));
    write_json(
        &out_dir.join("check.json"),
        &json!({"passed": passed, "results": results, "config": cfg.to_value(), "build_id": BUILD_ID}),
    )?;
    Ok(passed)
}

