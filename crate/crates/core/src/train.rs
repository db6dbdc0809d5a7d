//! Training loop, inference and evaluation over a loaded dataset.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use voxdet_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

use crate::boxes::Box3D;
use crate::config::RunConfig;
use crate::dataset::{mix_seed, SceneData, ViewData};
use crate::eval::{evaluate, Metrics};
use crate::geometry::{generate_rays, mirror_view, CameraView, MirrorPlane, VoxelGrid};
use crate::losses::{assign_targets, detection_loss, nerf_losses, total_loss, LossReport};
use crate::msan::{decode_boxes, msan_forward, nms_3d, Model};
use crate::nerf::{render_rays, sample_along_rays};
use crate::scene::CLASS_NAMES;
use crate::{Error, Result};

pub const BUILD_ID: &str = env!("VOXDET_BUILD_ID");

pub fn scene_grid(scene: &SceneData, resolution: [usize; 3]) -> Result<VoxelGrid> {
    let extent = std::array::from_fn(|a| scene.room_max[a] - scene.room_min[a]);
    VoxelGrid::new(scene.room_min, extent, resolution)
}

/// Views prepared for one forward pass.
pub struct Batch {
    pub images: Tensor<f32>,
    pub views: Vec<CameraView>,
    pub source: Vec<ViewData>,
    pub boxes: Vec<Box3D>,
}

/// Stacks views into `[N, h, w, 3]` and attaches feature-map sizes.
pub fn make_batch(views: Vec<ViewData>, boxes: Vec<Box3D>) -> Result<Batch> {
    let first = views.first().ok_or_else(|| Error::Invalid("empty view batch".into()))?;
    let (w, h) = (first.intrinsics.width, first.intrinsics.height);
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::Invalid(format!("image size {w}x{h} must be divisible by 4")));
    }
    let mut data = Vec::with_capacity(views.len() * w * h * 3);
    let mut cams = Vec::with_capacity(views.len());
    for v in &views {
        if (v.intrinsics.width, v.intrinsics.height) != (w, h) {
            return Err(Error::Invalid("views in a batch must share image size".into()));
        }
        data.extend_from_slice(&v.rgb);
        cams.push(CameraView::new(v.pose, v.intrinsics, w / 4, h / 4));
    }
    Ok(Batch {
        images: Tensor::new(vec![views.len(), h, w, 3], data)?,
        views: cams,
        source: views,
        boxes,
    })
}

/// Mirrors a scene's views and boxes across the plane through the room
/// centre perpendicular to y.
pub fn mirror_scene_views(scene: &SceneData, views: &[ViewData], boxes: &[Box3D]) -> (Vec<ViewData>, Vec<Box3D>) {
    let plane = MirrorPlane { y0: scene.room_center()[1] };
    let v = views
        .iter()
        .map(|v| {
            let (pose, intrinsics, rgb, depth) = mirror_view(&v.pose, &v.intrinsics, &v.rgb, &v.depth, &plane);
            ViewData {
                pose,
                intrinsics,
                rgb,
                depth,
            }
        })
        .collect();
    let b = boxes
        .iter()
        .map(|b| {
            let mut m = *b;
            m.center[1] = 2.0 * plane.y0 - b.center[1];
            m
        })
        .collect();
    (v, b)
}

pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::<f32>::new(seed);
    let model = Model::new(cfg.model.clone(), &mut store)?;
    Ok((model, store))
}

pub struct StepOutcome {
    pub report: LossReport,
    pub scene: String,
    pub flipped: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = build_model(&cfg, cfg.train.seed)?;
        let o = &cfg.train.optim;
        let mut adam = Adam::new(
            AdamConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            &store,
        );
        for id in model.offset_params() {
            adam.set_lr_scale(id, o.offset_lr_scale);
        }
        let rng = if cfg.deterministic {
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, 0x7a1b))
        } else {
            ChaCha8Rng::from_entropy()
        };
        Ok(Trainer {
            cfg,
            model,
            store,
            adam,
            rng,
            iteration: 0,
        })
    }

    /// One optimisation step on a random scene and view subset.
    pub fn step(&mut self, scenes: &[SceneData]) -> Result<StepOutcome> {
        if scenes.is_empty() {
            return Err(Error::Invalid("no training scenes".into()));
        }
        let t = &self.cfg.train;
        let scene = &scenes[self.rng.gen_range(0..scenes.len())];
        let n = t.views_per_iter.min(scene.views.len());
        let mut idx = sample_indices(&mut self.rng, scene.views.len(), n).into_vec();
        idx.sort_unstable();
        let mut views: Vec<ViewData> = idx.iter().map(|&i| scene.views[i].clone()).collect();
        let mut boxes = scene.boxes.clone();
        let flipped = t.flip_augment && self.rng.gen::<f64>() < t.flip_prob;
        if flipped {
            (views, boxes) = mirror_scene_views(scene, &views, &boxes);
        }
        let batch = make_batch(views, boxes)?;
        let grid = scene_grid(scene, self.cfg.grid)?;

        let ray_seed = self.rng.gen::<u64>();
        let report = self.train_on(&batch, &grid, scene.room_diagonal(), ray_seed)?;
        self.iteration += 1;
        Ok(StepOutcome {
            report,
            scene: scene.id.clone(),
            flipped,
        })
    }

    fn train_on(&mut self, batch: &Batch, grid: &VoxelGrid, far: f64, ray_seed: u64) -> Result<LossReport> {
        let (report, grads) = {
            let mut g = Graph::<f32>::new();
            let (loss, report) = forward_loss(&mut g, &self.store, &self.model, &self.cfg, batch, grid, far, ray_seed)?;
            if !report.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite loss at iteration {}: {}",
                    self.iteration + 1,
                    serde_json::to_string(&report).unwrap_or_default()
                )));
            }
            let grads = g.backward(loss)?.param_grads(&self.store);
            (report, grads)
        };
        self.adam.config.lr = lr_at(&self.cfg.train.optim, self.iteration, self.cfg.train.iterations);
        self.adam.step(&mut self.store, grads);
        Ok(report)
    }
}

/// Learning rate for the step following `iteration` completed steps of a
/// `total`-step run: linear warmup, then a cosine from `lr` down to
/// `lr * final_lr_ratio` at the last step.
pub fn lr_at(o: &crate::config::OptimConfig, iteration: usize, total: usize) -> f64 {
    let warm = if o.warmup_iters == 0 {
        1.0
    } else {
        ((iteration + 1) as f64 / o.warmup_iters as f64).min(1.0)
    };
    let span = total.saturating_sub(1).max(1) as f64;
    let progress = (iteration as f64 / span).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    o.lr * warm * (o.final_lr_ratio + (1.0 - o.final_lr_ratio) * cosine)
}

/// Samples `n` pixel rays spread over the batch's views, with RGB and depth
/// targets.
pub fn sample_training_rays<R: Rng>(batch: &Batch, n: usize, k: usize, near: f64, far: f64, rng: &mut R) -> Result<crate::nerf::RayBatch> {
    let mut rays = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(n * 3);
    let mut depth = Vec::with_capacity(n);
    for _ in 0..n {
        let vi = rng.gen_range(0..batch.source.len());
        let v = &batch.source[vi];
        let (w, h) = (v.intrinsics.width, v.intrinsics.height);
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        rays.extend(generate_rays(&v.pose, &v.intrinsics, &[(x as f64, y as f64)]));
        let p = y * w + x;
        rgb.extend(v.rgb[3 * p..3 * p + 3].iter().map(|&c| c as f64));
        depth.push(v.depth[p] as f64);
    }
    let mut rb = sample_along_rays(&rays, near, far, k, true, rng)?;
    rb.gt_rgb = rgb;
    rb.gt_depth = depth;
    Ok(rb)
}

/// Builds the full training objective on `g`.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    model: &Model,
    cfg: &RunConfig,
    batch: &Batch,
    grid: &VoxelGrid,
    far: f64,
    ray_seed: u64,
) -> Result<(voxdet_tensor::Var, LossReport)> {
    let images = g.constant(batch.images.clone());
    let out = msan_forward(g, store, model, images, &batch.views, grid)?;
    let anchors = grid.centers();
    let targets = assign_targets(&anchors, &batch.boxes);
    let mut det = Vec::with_capacity(out.levels.len());
    for lvl in &out.levels {
        det.push(detection_loss(g, lvl.cls, lvl.reg, lvl.cntr, &targets, &anchors, &batch.boxes, model.config.num_classes)?);
    }
    let nerf = match &model.field {
        Some(field) if cfg.train.rays_per_iter > 0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed);
            let rb = sample_training_rays(batch, cfg.train.rays_per_iter, cfg.train.samples_per_ray, cfg.train.near, far, &mut rng)?;
            let render = render_rays(g, store, field, out.feature_maps, &batch.views, &rb)?;
            Some(nerf_losses(g, render, &rb)?)
        }
        _ => None,
    };
    total_loss(g, &det, nerf)
}

/// Evenly spaced view indices.
pub fn eval_view_indices(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    (0..n).map(|i| i * total / n).collect()
}

/// Post-processed predictions per level for one scene.
pub fn predict_scene(store: &ParamStore<f32>, model: &Model, cfg: &RunConfig, scene: &SceneData) -> Result<Vec<Vec<Box3D>>> {
    let idx = eval_view_indices(scene.views.len(), cfg.eval.views);
    let views = idx.iter().map(|&i| scene.views[i].clone()).collect();
    let batch = make_batch(views, scene.boxes.clone())?;
    let grid = scene_grid(scene, cfg.grid)?;
    let mut g = Graph::<f32>::new();
    let images = g.constant(batch.images.clone());
    let out = msan_forward(&mut g, store, model, images, &batch.views, &grid)?;
    let anchors = g.value(out.anchors).to_f64_vec();
    let e = &cfg.eval;
    Ok(out
        .levels
        .iter()
        .map(|l| {
            let mut boxes = decode_boxes(
                &g.value(l.cls).to_f64_vec(),
                &g.value(l.reg).to_f64_vec(),
                &g.value(l.cntr).to_f64_vec(),
                &anchors,
                model.config.num_classes,
            );
            boxes.retain(|b| b.score.unwrap_or(0.0) >= e.score_thresh && b.size.iter().all(|s| s.is_finite()));
            boxes.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
            boxes.truncate(e.pre_nms_top);
            nms_3d(&boxes, e.nms_iou, e.score_thresh, e.max_boxes)
        })
        .collect())
}

pub struct EvalOutcome {
    /// Metrics of the final level.
    pub metrics: Metrics,
    /// Metrics of every level, final included.
    pub per_level: Vec<Metrics>,
    pub predictions: Vec<Vec<Box3D>>,
}

pub fn evaluate_scenes(store: &ParamStore<f32>, model: &Model, cfg: &RunConfig, scenes: &[SceneData]) -> Result<EvalOutcome> {
    let per_scene: Vec<Vec<Vec<Box3D>>> = scenes.iter().map(|s| predict_scene(store, model, cfg, s)).collect::<Result<_>>()?;
    let gts: Vec<Vec<Box3D>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let names = &CLASS_NAMES[..model.config.num_classes];
    let nl = model.levels.len();
    let per_level: Vec<Metrics> = (0..nl)
        .map(|l| {
            let preds: Vec<Vec<Box3D>> = per_scene.iter().map(|p| p[l].clone()).collect();
            evaluate(&preds, &gts, names)
        })
        .collect();
    let predictions: Vec<Vec<Box3D>> = per_scene.into_iter().map(|mut p| p.pop().unwrap()).collect();
    Ok(EvalOutcome {
        metrics: per_level[nl - 1].clone(),
        per_level,
        predictions,
    })
}

pub fn loss_log(iteration: usize, outcome: &StepOutcome, elapsed_s: f64) -> Value {
    json!({
        "event": "train_step",
        "iteration": iteration,
        "scene": outcome.scene,
        "flipped": outcome.flipped,
        "loss": outcome.report,
        "elapsed_s": elapsed_s,
    })
}
