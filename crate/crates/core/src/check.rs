//! Self-checks run by the `check` command: central-difference gradient
//! checks for every differentiable operation and composite path, and the
//! structural invariants of fusion, the multi-level loop and rendering.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use voxdet_tensor::{gradient_check, param_gradient_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};

use crate::geometry::{project_points, CameraView, Intrinsics, Pose, VoxelGrid};
use crate::msan::{backbone_forward, msan_forward, Model, ModelConfig};
use crate::nerf::{render_rays, sample_along_rays, volume_render, FieldParams, RayBatch};
use crate::volume::{build_multiview_volume, encode_distance, mean_fuse, mwf_fuse, view_softmax, view_sum, MultiViewVolume, MwfParams};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: value <= limit,
            value,
            limit,
        }
    }

    fn holds(name: &str, ok: bool) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: ok,
            value: if ok { 0.0 } else { 1.0 },
            limit: 0.0,
        }
    }
}

pub const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &d).unwrap()
}

/// Contracts with a fixed random tensor so every output entry gets a
/// distinct upstream gradient.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> voxdet_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn opts(max_entries: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        h: 1e-5,
        max_entries,
        seed: 11,
        floor: 1e-6,
    }
}

fn op<F>(out: &mut Vec<CheckResult>, name: &str, inputs: &[Tensor<f64>], seed: u64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> voxdet_tensor::Result<Var>,
{
    let r = gradient_check(
        |g, v| {
            let y = f(g, v)?;
            contract(g, y, seed)
        },
        inputs,
        opts(Some(48)),
    );
    out.push(match r {
        Ok(r) => CheckResult::at_most(&format!("grad/{name}"), r.worst(), GRAD_TOL),
        Err(_) => CheckResult::holds(&format!("grad/{name}"), false),
    });
}

/// Small ring of cameras around `(1, 1, 0.5)`.
pub fn ring_views(n: usize, feat: (usize, usize)) -> Vec<CameraView> {
    let intr = Intrinsics {
        fx: 12.0,
        fy: 12.0,
        cx: 7.5,
        cy: 5.5,
        width: 16,
        height: 12,
    };
    (0..n)
        .map(|i| {
            let a = 0.7 + 2.1 * i as f64;
            let eye = Vector3::new(1.0 + 1.6 * a.cos(), 1.0 + 1.6 * a.sin(), 1.3);
            CameraView::new(Pose::look_at(eye, Vector3::new(1.0, 1.0, 0.5)), intr, feat.0, feat.1)
        })
        .collect()
}

/// Points spread inside the region the ring views look at.
fn probe_points(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    rand_tensor(rng, &[n, 3], 0.6, 1.4)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        dist_channels: 3,
        heads: 2,
        unet_base: 2,
        backbone_widths: [3, 3],
        map_channels: 2,
        nerf_hidden: 5,
        levels: 2,
        ..ModelConfig::default()
    }
}

pub fn gradient_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for s in 0..3u64 {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let col = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
        let nz = away_from_zero(&mut rng, &[3, 4]);
        let pos = rand_tensor(&mut rng, &[3, 4], 0.2, 3.0);
        op(&mut out, "add", &[a.clone(), b.clone()], s, |g, v| g.add(v[0], v[1]));
        op(&mut out, "sub", &[a.clone(), b.clone()], s, |g, v| g.sub(v[0], v[1]));
        op(&mut out, "mul", &[a.clone(), col.clone()], s, |g, v| g.mul(v[0], v[1]));
        op(&mut out, "div", &[a.clone(), col.clone()], s, |g, v| g.div(v[0], v[1]));
        let shifted = a.map(|x| x + 0.3);
        op(&mut out, "minimum", &[a.clone(), shifted.clone()], s, |g, v| g.minimum(v[0], v[1]));
        op(&mut out, "maximum", &[a.clone(), shifted], s, |g, v| g.maximum(v[0], v[1]));
        op(&mut out, "neg", &[a.clone()], s, |g, v| Ok(g.neg(v[0])));
        op(&mut out, "scale", &[a.clone()], s, |g, v| Ok(g.scale(v[0], 1.3)));
        op(&mut out, "add_scalar", &[a.clone()], s, |g, v| Ok(g.add_scalar(v[0], -0.2)));
        op(&mut out, "relu", &[nz.clone()], s, |g, v| Ok(g.relu(v[0])));
        op(&mut out, "sin", &[a.clone()], s, |g, v| Ok(g.sin(v[0])));
        op(&mut out, "cos", &[a.clone()], s, |g, v| Ok(g.unary(voxdet_tensor::UnaryKind::Cos, v[0])));
        op(&mut out, "exp", &[a.clone()], s, |g, v| Ok(g.exp(v[0])));
        op(&mut out, "ln", &[pos.clone()], s, |g, v| Ok(g.ln(v[0])));
        op(&mut out, "sigmoid", &[a.clone()], s, |g, v| Ok(g.sigmoid(v[0])));
        op(&mut out, "softplus", &[a.clone()], s, |g, v| Ok(g.softplus(v[0])));
        op(&mut out, "log_sigmoid", &[a.clone()], s, |g, v| Ok(g.log_sigmoid(v[0])));
        op(&mut out, "abs", &[nz.clone()], s, |g, v| Ok(g.abs(v[0])));
        op(&mut out, "sqrt", &[pos.clone()], s, |g, v| Ok(g.sqrt(v[0])));
        op(&mut out, "square", &[a.clone()], s, |g, v| Ok(g.square(v[0])));
        let inside = nz.map(|x| x * 0.6);
        op(&mut out, "clamp", &[inside], s, |g, v| Ok(g.clamp(v[0], -1.0, 1.0)));
        let mask: Vec<bool> = (0..12).map(|i| (i + s as usize) % 4 == 0).collect();
        op(&mut out, "masked_fill", &[a.clone()], s, |g, v| g.masked_fill(v[0], &mask, 0.5));

        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        op(&mut out, "matmul", &[x.clone(), w.clone()], s, |g, v| g.matmul(v[0], v[1]));
        op(&mut out, "linear", &[x.clone(), w, bias], s, |g, v| g.linear(v[0], v[1], v[2]));

        let vol = rand_tensor(&mut rng, &[4, 4, 4, 2], -1.0, 1.0);
        let k3 = rand_tensor(&mut rng, &[3, 3, 3, 2, 3], -0.5, 0.5);
        let b3 = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let stride = 1 + (s as usize % 2);
        op(&mut out, "conv3d", &[vol.clone(), k3, b3], s, move |g, v| g.conv(v[0], v[1], v[2], 3, stride, 1));
        let img = rand_tensor(&mut rng, &[2, 6, 5, 2], -1.0, 1.0);
        let k2 = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
        let b2 = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        op(&mut out, "conv2d", &[img, k2, b2], s, move |g, v| g.conv(v[0], v[1], v[2], 2, stride, 1));
        let small = rand_tensor(&mut rng, &[2, 2, 1, 3], -1.0, 1.0);
        op(&mut out, "upsample_nearest", &[small], s, |g, v| g.upsample_nearest(v[0], [2, 2, 2]));

        op(&mut out, "softmax", &[x.clone()], s, |g, v| Ok(g.softmax(v[0], 1)?.0));
        op(&mut out, "reshape", &[x.clone()], s, |g, v| g.reshape(v[0], &[6, 4]));
        op(&mut out, "concat", &[x.clone(), x.clone()], s, |g, v| g.concat(&[v[0], v[1]], 2));
        op(&mut out, "slice", &[x.clone()], s, |g, v| g.slice(v[0], 2, 1, 2));
        op(&mut out, "split", &[x.clone()], s, |g, v| {
            let p = g.split(v[0], 1, &[1, 2])?;
            let a = g.sum_all(p[0]);
            let b = g.square(p[1]);
            let b = g.sum_all(b);
            g.add(a, b)
        });
        op(&mut out, "sum_axis", &[x.clone()], s, |g, v| g.sum_axis(v[0], 1));
        op(&mut out, "mean_axis", &[x.clone()], s, |g, v| g.mean_axis(v[0], 0));
        op(&mut out, "max_axis", &[x.clone()], s, |g, v| g.max_axis(v[0], 2));
        op(&mut out, "sum_all", &[x.clone()], s, |g, v| {
            let t = g.sum_all(v[0]);
            Ok(g.sin(t))
        });
        op(&mut out, "mean_all", &[x.clone()], s, |g, v| {
            let t = g.mean_all(v[0]);
            Ok(g.exp(t))
        });
        op(&mut out, "gather_rows", &[x.clone()], s, |g, v| g.gather_rows(v[0], &[1, 0, 1]));

        let feat = rand_tensor(&mut rng, &[2, 5, 6, 3], -1.0, 1.0);
        let coords: Vec<f64> = (0..2 * 5)
            .flat_map(|_| {
                let u = rng.gen_range(0..5) as f64 + rng.gen_range(0.05..0.95);
                let v = rng.gen_range(0..4) as f64 + rng.gen_range(0.05..0.95);
                [u, v]
            })
            .collect();
        let coords = Tensor::from_f64(vec![2, 5, 2], &coords).unwrap();
        op(&mut out, "grid_sample_2d", &[feat, coords], s, |g, v| Ok(g.grid_sample_2d(v[0], v[1], None)?.0));

        // Operations defined by the pipeline.
        let views = ring_views(3, (4, 3));
        let pts = probe_points(&mut rng, 5);
        let vs = views.clone();
        op(&mut out, "project_points", &[pts.clone()], s, move |g, v| Ok(project_points(g, v[0], &vs)?.0));
        let vm_in = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
        op(&mut out, "view_sum", &[vm_in.clone()], s, |g, v| view_sum(g, v[0]).map_err(to_tensor_err));
        let vmask: Vec<bool> = (0..24).map(|i| (i * 5 + s as usize) % 3 != 0).collect();
        op(&mut out, "view_softmax", &[vm_in], s, |g, v| view_softmax(g, v[0], &vmask).map_err(to_tensor_err));
        let fm = rand_tensor(&mut rng, &[3, 3, 4, 2], -1.0, 1.0);
        let vs = views.clone();
        op(&mut out, "build_multiview_volume", &[fm, pts], s, move |g, v| {
            let vm = build_multiview_volume(g, v[0], &vs, v[1]).map_err(to_tensor_err)?;
            Ok(vm.features)
        });
        let batch = ray_batch_for(&views, 3, 4, s);
        let sigma = rand_tensor(&mut rng, &[12, 1], 0.0, 3.0);
        let colors = rand_tensor(&mut rng, &[12, 3], 0.0, 1.0);
        op(&mut out, "volume_render", &[sigma, colors], s, move |g, v| volume_render(g, &batch, v[0], v[1]).map_err(to_tensor_err));
    }
    out.extend(encode_distance_check());
    out.extend(composite_suite());
    out
}

fn to_tensor_err(e: crate::Error) -> voxdet_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => voxdet_tensor::TensorError::Invalid(other.to_string()),
    }
}

fn ray_batch_for(views: &[CameraView], rays: usize, k: usize, seed: u64) -> RayBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rs = Vec::new();
    for i in 0..rays {
        let v = &views[i % views.len()];
        rs.extend(crate::geometry::generate_rays(&v.pose, &v.intrinsics, &[(rng.gen_range(2.0..13.0), rng.gen_range(2.0..9.0))]));
    }
    let mut b = sample_along_rays(&rs, 0.8, 2.6, k, true, &mut rng).unwrap();
    b.gt_rgb = (0..rays * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    b.gt_depth = (0..rays).map(|_| rng.gen_range(1.0..2.0)).collect();
    b
}

fn encode_distance_check() -> Vec<CheckResult> {
    let mut store = ParamStore::<f64>::new(5);
    let p = MwfParams::register(&mut store, "m", 4, 3, 2, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = rand_tensor(&mut rng, &[2, 3, 1], 0.5, 3.0);
    let r = gradient_check(
        |g, v| {
            let z = encode_distance(g, &store, v[0], p.dist_w, p.dist_b, 1.0).map_err(to_tensor_err)?;
            contract(g, z, 1)
        },
        &[dist],
        GradCheckOptions { h: 1e-5, ..opts(None) },
    )
    .map(|r| r.worst())
    .unwrap_or(f64::INFINITY);
    vec![CheckResult::at_most("grad/encode_distance", r, 1e-6)]
}

/// End-to-end paths through several modules.
pub fn composite_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let views = ring_views(3, (4, 3));

    // Rendering loss back to the 2D feature maps.
    let mut store = ParamStore::<f64>::new(3);
    let field = FieldParams::register(&mut store, "f", 2, 6).unwrap();
    let batch = ray_batch_for(&views, 4, 6, 1);
    let fm = rand_tensor(&mut rng, &[3, 3, 4, 2], -1.0, 1.0);
    let r = gradient_check(
        |g, v| {
            let render = render_rays(g, &store, &field, v[0], &views, &batch).map_err(to_tensor_err)?;
            contract(g, render, 2)
        },
        &[fm],
        opts(Some(24)),
    )
    .map(|r| r.worst())
    .unwrap_or(f64::INFINITY);
    out.push(CheckResult::at_most("grad/composite/render_to_feature_maps", r, GRAD_TOL));

    // Fused volume back to the distance encoder through the weighted fusion.
    let mut store = ParamStore::<f64>::new(4);
    let p = MwfParams::register(&mut store, "m", 4, 3, 2, 1.0).unwrap();
    let feats = rand_tensor(&mut rng, &[3, 5, 4], -1.0, 1.0);
    let dist = rand_tensor(&mut rng, &[3, 5, 1], 0.5, 3.0);
    let valid: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    let r = param_gradient_check(
        |g, st| {
            let vm = MultiViewVolume {
                features: g.constant(feats.clone()),
                valid: valid.clone(),
                dist: g.constant(dist.clone()),
                num_views: 3,
                num_points: 5,
                channels: 4,
            };
            let f = mwf_fuse(g, st, &vm, &p).map_err(to_tensor_err)?;
            contract(g, f.features, 3)
        },
        &store,
        &[p.dist_w, p.dist_b],
        opts(None),
    )
    .map(|r| r.worst())
    .unwrap_or(f64::INFINITY);
    out.push(CheckResult::at_most("grad/composite/fusion_to_dist_linear", r, GRAD_TOL));

    // Detection output back to the offset convolution through resampling.
    let mut store = ParamStore::<f64>::new(6);
    let cfg = tiny_model_config();
    let model = Model::new(cfg, &mut store).unwrap();
    let off = model.levels[0].offset.unwrap();
    {
        let w = &mut store.get_mut(off.0).value;
        let n = w.numel();
        *w = rand_tensor(&mut rng, &w.shape().to_vec(), -0.05, 0.05);
        debug_assert_eq!(w.numel(), n);
    }
    let grid = VoxelGrid::new([0.5, 0.5, 0.2], [1.0, 1.0, 0.6], [4, 4, 4]).unwrap();
    let mviews = ring_views(3, (4, 3));
    let img = rand_tensor(&mut rng, &[3, 12, 16, 3], 0.0, 1.0);
    let r = param_gradient_check(
        |g, st| {
            let images = g.constant(img.clone());
            let o = msan_forward(g, st, &model, images, &mviews, &grid).map_err(to_tensor_err)?;
            contract(g, o.levels[1].fused, 4)
        },
        &store,
        &[off.0, off.1],
        GradCheckOptions {
            h: 1e-6,
            ..opts(Some(40))
        },
    )
    .map(|r| r.worst())
    .unwrap_or(f64::INFINITY);
    out.push(CheckResult::at_most("grad/composite/detection_to_offset_conv", r, GRAD_TOL));

    // Backbone on a tiny input.
    let bb_img = rand_tensor(&mut rng, &[1, 8, 8, 3], 0.0, 1.0);
    let ids: Vec<_> = model.backbone.iter().flat_map(|&(w, b)| [w, b]).collect();
    let r = param_gradient_check(
        |g, st| {
            let images = g.constant(bb_img.clone());
            let f = backbone_forward(g, st, &model, images).map_err(to_tensor_err)?;
            contract(g, f, 5)
        },
        &store,
        &ids,
        opts(Some(24)),
    )
    .map(|r| r.worst())
    .unwrap_or(f64::INFINITY);
    out.push(CheckResult::at_most("grad/composite/backbone", r, GRAD_TOL));
    out
}

/// Fusion properties on random volumes: constant-logit mean, weight
/// normalisation, view-permutation invariance and zero output on uncovered
/// points.
pub fn fusion_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, p, c, heads) = (4, 6, 8, 4);
    let feats = rand_tensor(&mut rng, &[n, p, c], -1.0, 1.0);
    let dist = rand_tensor(&mut rng, &[n, p, 1], 0.5, 4.0);
    let mut valid: Vec<bool> = (0..n * p).map(|_| rng.gen_bool(0.7)).collect();
    // Point 0 uncovered, point 1 seen once.
    for v in 0..n {
        valid[v * p] = false;
        valid[v * p + 1] = v == 2;
    }
    let mut fdata = feats.data().to_vec();
    for (k, &ok) in valid.iter().enumerate() {
        if !ok {
            fdata[k * c..(k + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let feats = Tensor::new(vec![n, p, c], fdata).unwrap();
    let mut store = ParamStore::<f64>::new(9);
    let params = MwfParams::register(&mut store, "m", c, 4, heads, 1.0).unwrap();

    let run = |store: &ParamStore<f64>, order: &[usize]| {
        let mut g = Graph::<f64>::new();
        let mut fd = Vec::new();
        let mut dd = Vec::new();
        let mut vv = Vec::new();
        for &v in order {
            fd.extend_from_slice(&feats.data()[v * p * c..(v + 1) * p * c]);
            dd.extend_from_slice(&dist.data()[v * p..(v + 1) * p]);
            vv.extend_from_slice(&valid[v * p..(v + 1) * p]);
        }
        let vm = MultiViewVolume {
            features: g.constant(Tensor::new(vec![n, p, c], fd).unwrap()),
            valid: vv,
            dist: g.constant(Tensor::new(vec![n, p, 1], dd).unwrap()),
            num_views: n,
            num_points: p,
            channels: c,
        };
        let mwf = mwf_fuse(&mut g, store, &vm, &params).unwrap();
        let mean = mean_fuse(&mut g, &vm, false).unwrap();
        let w = g.value(mwf.weights.unwrap()).data().to_vec();
        (g.value(mwf.features).data().to_vec(), g.value(mean.features).data().to_vec(), w, vm.valid)
    };

    // (b) weights over valid views sum to one.
    let (fused, mean, w, vv) = run(&store, &[0, 1, 2, 3]);
    let mut worst: f64 = 0.0;
    for pt in 0..p {
        let covered = (0..n).any(|v| vv[v * p + pt]);
        for h in 0..heads {
            let s: f64 = (0..n).map(|v| w[(v * p + pt) * heads + h]).sum();
            let want = if covered { 1.0 } else { 0.0 };
            worst = worst.max((s - want).abs());
        }
    }
    out.push(CheckResult::at_most("fusion/weights_sum_to_one", worst, 1e-6));

    // (c) permuting views leaves both fusers bitwise unchanged.
    let (fused_p, mean_p, _, _) = run(&store, &[2, 0, 3, 1]);
    out.push(CheckResult::holds("fusion/view_permutation_bitwise", fused == fused_p && mean == mean_p));

    // (d) uncovered point yields exact zeros.
    out.push(CheckResult::holds(
        "fusion/coverage_zero_exact",
        fused[..c].iter().all(|&x| x == 0.0) && mean[..c].iter().all(|&x| x == 0.0),
    ));

    // (a) constant logits: zero the logit columns of the fusion linear.
    let mut cst = store.clone();
    {
        let w = &mut cst.get_mut(params.fuse_w).value;
        let cols = c + heads;
        let rows = w.shape()[0];
        for r in 0..rows {
            for k in c..cols {
                w.data_mut()[r * cols + k] = 0.0;
            }
        }
        let b = &mut cst.get_mut(params.fuse_b).value;
        for k in c..cols {
            b.data_mut()[k] = 0.25;
        }
    }
    let mut g = Graph::<f64>::new();
    let vm = MultiViewVolume {
        features: g.constant(feats.clone()),
        valid: valid.clone(),
        dist: g.constant(dist.clone()),
        num_views: n,
        num_points: p,
        channels: c,
    };
    let fused = mwf_fuse(&mut g, &cst, &vm, &params).unwrap();
    let z = encode_distance(&mut g, &cst, vm.dist, params.dist_w, params.dist_b, 1.0).unwrap();
    let x = g.concat(&[vm.features, z], 2).unwrap();
    let fw = g.constant(cst.get(params.fuse_w).value.clone());
    let fb = g.constant(cst.get(params.fuse_b).value.clone());
    let y = g.linear(x, fw, fb).unwrap();
    let vals = g.value(y).data().to_vec();
    let got = g.value(fused.features).data();
    let mut worst: f64 = 0.0;
    for pt in 0..p {
        let vs: Vec<usize> = (0..n).filter(|&v| valid[v * p + pt]).collect();
        for ch in 0..c {
            let want = if vs.is_empty() {
                0.0
            } else {
                vs.iter().map(|&v| vals[(v * p + pt) * (c + heads) + ch]).sum::<f64>() / vs.len() as f64
            };
            worst = worst.max((got[pt * c + ch] - want).abs());
        }
    }
    out.push(CheckResult::at_most("fusion/constant_logits_is_valid_mean", worst, 1e-6));
    out
}

/// Zero-initialised offsets keep every level on the original grid and
/// reproduce the first fused volume bitwise; offsets respect the clamp.
pub fn msan_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut store = ParamStore::<f32>::new(13);
    let model = Model::new(tiny_model_config(), &mut store).unwrap();
    let grid = VoxelGrid::new([0.5, 0.5, 0.2], [1.0, 1.0, 0.6], [4, 4, 4]).unwrap();
    let views = ring_views(3, (4, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img: Tensor<f32> = rand_tensor(&mut rng, &[3, 12, 16, 3], 0.0, 1.0).cast();

    let mut g = Graph::<f32>::new();
    let images = g.constant(img.clone());
    let o = msan_forward(&mut g, &store, &model, images, &views, &grid).unwrap();
    let p0 = g.value(o.anchors).data().to_vec();
    let v0 = g.value(o.levels[0].fused).data().to_vec();
    let same_points = o.levels.iter().all(|l| g.value(l.points).data() == &p0[..]);
    let same_fused = o.levels.iter().all(|l| g.value(l.fused).data() == &v0[..]);
    out.push(CheckResult::holds("msan/identity_points", same_points));
    out.push(CheckResult::holds("msan/identity_fused_bitwise", same_fused));

    // Large offset weights drive the raw output far beyond the clamp.
    let mut wild = store.clone();
    for lp in &model.levels {
        if let Some((w, b)) = lp.offset {
            let t = &mut wild.get_mut(w).value;
            *t = rand_tensor(&mut rng, &t.shape().to_vec(), -50.0, 50.0).cast();
            let t = &mut wild.get_mut(b).value;
            *t = rand_tensor(&mut rng, &t.shape().to_vec(), -50.0, 50.0).cast();
        }
    }
    let mut g = Graph::<f32>::new();
    let images = g.constant(img);
    let o = msan_forward(&mut g, &wild, &model, images, &views, &grid).unwrap();
    let pitch = grid.pitch();
    let k = model.config.offset_clamp;
    let mut excess: f64 = 0.0;
    let mut moved = false;
    for l in &o.levels {
        if let Some(off) = l.offsets {
            for (i, &d) in g.value(off).data().iter().enumerate() {
                let lim = k * pitch[i % 3];
                excess = excess.max(d.abs() as f64 - lim * (1.0 + 1e-6));
                moved |= d != 0.0;
            }
        }
    }
    out.push(CheckResult::holds("msan/offsets_within_clamp", excess <= 0.0 && moved));
    out
}

/// Compositing identities: accumulated opacity range, the half-opacity
/// sample, and depth of an opaque slab.
pub fn render_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rays: Vec<_> = (0..64)
        .map(|_| crate::geometry::Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize(),
        })
        .collect();
    let batch = sample_along_rays(&rays, 0.1, 6.0, 16, true, &mut rng).unwrap();
    let m = batch.t.len();
    let mut g = Graph::<f64>::new();
    let sigma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0f64).powi(3) * 40.0).collect();
    let s = g.constant(Tensor::from_f64(vec![m, 1], &sigma).unwrap());
    let c = g.constant(rand_tensor(&mut rng, &[m, 3], 0.0, 1.0));
    let r = volume_render(&mut g, &batch, s, c).unwrap();
    let acc_ok = g.value(r).data().chunks_exact(5).all(|row| (0.0..=1.0).contains(&row[4]));
    out.push(CheckResult::holds("render/acc_in_unit_interval", acc_ok));

    let one = RayBatch {
        origins: vec![[0.0; 3]],
        directions: vec![[0.0, 0.0, 1.0]],
        t: vec![1.0],
        deltas: vec![0.5],
        gt_rgb: vec![0.0; 3],
        gt_depth: vec![0.0],
        samples_per_ray: 1,
    };
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::from_f64(vec![1, 1], &[std::f64::consts::LN_2 / 0.5]).unwrap());
    let c = g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 1.0, 1.0]).unwrap());
    let r = volume_render(&mut g, &one, s, c).unwrap();
    out.push(CheckResult::at_most("render/half_alpha", (g.value(r).data()[4] - 0.5).abs(), 1e-7));

    // Oracle field: infinite density inside a slab z in [2.3, 2.8].
    let slab = (2.3, 2.8);
    let hits: Vec<_> = (0..32)
        .map(|_| crate::geometry::Ray {
            origin: Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0),
            direction: Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0).normalize(),
        })
        .collect();
    let k = 64;
    let b = sample_along_rays(&hits, 0.05, 5.0, k, true, &mut rng).unwrap();
    let pts = b.points();
    let sigma: Vec<f64> = pts.chunks_exact(3).map(|p| if p[2] >= slab.0 && p[2] <= slab.1 { 1e9 } else { 0.0 }).collect();
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::from_f64(vec![b.t.len(), 1], &sigma).unwrap());
    let c = g.constant(Tensor::full(vec![b.t.len(), 3], 0.5));
    let r = volume_render(&mut g, &b, s, c).unwrap();
    let mut worst: f64 = 0.0;
    for (i, row) in g.value(r).data().chunks_exact(5).enumerate() {
        let d = b.directions[i];
        let truth = (slab.0 - b.origins[i][2]) / d[2];
        // Stratified samples are unevenly spaced; measure against the gap
        // in front of the first sample inside the slab.
        let ts = &b.t[i * k..(i + 1) * k];
        let first = (0..k).find(|&j| sigma[i * k + j] > 0.0).expect("every ray crosses the slab");
        let spacing = if first == 0 { ts[0] - 0.05 } else { ts[first] - ts[first - 1] };
        worst = worst.max((row[3] - truth).abs() / spacing);
    }
    out.push(CheckResult::at_most("render/opaque_slab_depth_in_spacings", worst, 1.0));
    out
}

pub fn invariant_suite() -> Vec<CheckResult> {
    let mut out = fusion_suite();
    out.extend(msan_suite());
    out.extend(render_suite());
    out
}
