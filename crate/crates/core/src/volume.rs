//! Multi-view feature volumes and their fusion across views.
//!
//! Reductions over the view axis sum their terms in sorted order, so fused
//! values do not depend on the order in which views are supplied.

use voxdet_tensor::{CustomOp, Graph, InitSpec, ParamId, ParamStore, Real, Tensor, Var};

use crate::geometry::{project_points, CameraView};
use crate::{Error, Result};

/// Per-view samples for a flattened set of points.
pub struct MultiViewVolume {
    /// `[N, P, c]`, exactly zero where invalid.
    pub features: Var,
    /// `[N * P]`, view-major.
    pub valid: Vec<bool>,
    /// `[N, P, 1]` meters.
    pub dist: Var,
    pub num_views: usize,
    pub num_points: usize,
    pub channels: usize,
}

impl MultiViewVolume {
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.num_points];
        for (k, &v) in self.valid.iter().enumerate() {
            if v {
                cov[k % self.num_points] += 1;
            }
        }
        cov
    }
}

pub struct FusedVolume {
    /// `[P, c]`.
    pub features: Var,
    pub coverage: Vec<usize>,
    /// Per-view weights `[N, P, heads]` when the fuser learns them.
    pub weights: Option<Var>,
}

/// Projects `points` (`[P, 3]`) into every view and bilinearly samples the
/// matching feature map (`[N, h_f, w_f, c]`).
pub fn build_multiview_volume<T: Real>(
    g: &mut Graph<T>,
    feature_maps: Var,
    views: &[CameraView],
    points: Var,
) -> Result<MultiViewVolume> {
    let fs = g.shape(feature_maps).to_vec();
    if fs.len() != 4 || fs[0] != views.len() {
        return Err(Error::Invalid(format!("{} views but feature maps shaped {fs:?}", views.len())));
    }
    let ps = g.shape(points).to_vec();
    if ps.len() != 2 || ps[1] != 3 {
        return Err(Error::Invalid(format!("points must be [P, 3], got {ps:?}")));
    }
    for v in views {
        if (v.feat_h, v.feat_w) != (fs[1], fs[2]) {
            return Err(Error::Invalid(format!("view expects {}x{} feature map, got {}x{}", v.feat_w, v.feat_h, fs[2], fs[1])));
        }
    }
    let (proj, in_front) = project_points(g, points, views)?;
    let uv = g.slice(proj, 2, 0, 2)?;
    let dist = g.slice(proj, 2, 2, 1)?;
    let (features, valid) = g.grid_sample_2d(feature_maps, uv, Some(&in_front))?;
    Ok(MultiViewVolume {
        features,
        valid,
        dist,
        num_views: views.len(),
        num_points: ps[0],
        channels: fs[3],
    })
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

/// `[N, M] -> [M]` sum over the leading axis.
struct ViewSum;

impl<T: Real> CustomOp<T> for ViewSum {
    fn name(&self) -> &'static str {
        "view_sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = inputs[0].shape()[0];
        let m = output.numel();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(grad.data());
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).unwrap())]
    }
}

/// Sums `x` over axis 0 independently of the order along that axis.
pub fn view_sum<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.is_empty() {
        return Err(Error::Invalid("view_sum needs rank >= 1".into()));
    }
    let n = s[0];
    let m: usize = s[1..].iter().product();
    let d = g.value(x).data();
    let mut buf = vec![0.0; n];
    let out: Vec<f64> = (0..m)
        .map(|j| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = d[i * m + j].f64();
            }
            sorted_sum(&mut buf)
        })
        .collect();
    let value = Tensor::from_f64(s[1..].to_vec(), &out)?;
    Ok(g.custom(&[x], value, Box::new(ViewSum), (n * m) as u64))
}

/// Softmax over axis 0 of `[N, M]` logits restricted to `valid` entries.
struct ViewSoftmax;

impl<T: Real> CustomOp<T> for ViewSoftmax {
    fn name(&self) -> &'static str {
        "view_softmax"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = inputs[0].shape()[0];
        let m = output.numel() / n.max(1);
        let (y, gd) = (output.data(), grad.data());
        let mut out = vec![0.0; n * m];
        let mut buf = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                buf[i] = y[i * m + j].f64() * gd[i * m + j].f64();
            }
            let dot = sorted_sum(&mut buf);
            for i in 0..n {
                let k = i * m + j;
                out[k] = y[k].f64() * (gd[k].f64() - dot);
            }
        }
        vec![Some(Tensor::from_f64(inputs[0].shape().to_vec(), &out).unwrap())]
    }
}

/// Softmax across views for `logits` shaped `[N, ...]`. `valid` has one
/// flag per logit; invalid entries get weight exactly zero and no gradient.
/// A column with no valid entry yields all zeros.
pub fn view_softmax<T: Real>(g: &mut Graph<T>, logits: Var, valid: &[bool]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let n = *s.first().ok_or_else(|| Error::Invalid("view_softmax needs rank >= 1".into()))?;
    let total: usize = s.iter().product();
    if valid.len() != total {
        return Err(Error::Invalid(format!("mask length {} for logits {s:?}", valid.len())));
    }
    let m = total / n.max(1);
    let d = g.value(logits).data();
    let mut out = vec![0.0; total];
    let mut buf = Vec::with_capacity(n);
    for j in 0..m {
        let mx = (0..n)
            .filter(|&i| valid[i * m + j])
            .map(|i| d[i * m + j].f64())
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        buf.clear();
        for i in 0..n {
            let k = i * m + j;
            if valid[k] {
                out[k] = (d[k].f64() - mx).exp();
                buf.push(out[k]);
            }
        }
        let z = sorted_sum(&mut buf);
        for i in 0..n {
            out[i * m + j] /= z;
        }
    }
    let value = Tensor::from_f64(s, &out)?;
    Ok(g.custom(&[logits], value, Box::new(ViewSoftmax), (4 * total) as u64))
}

#[derive(Clone, Debug)]
pub struct MwfParams {
    pub dist_w: ParamId,
    pub dist_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub channels: usize,
    pub dist_channels: usize,
    pub heads: usize,
    pub frequency: f64,
}

impl MwfParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        dist_channels: usize,
        heads: usize,
        frequency: f64,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide channels {channels}")));
        }
        if frequency <= 0.0 {
            return Err(Error::Config(format!("distance frequency must be positive, got {frequency}")));
        }
        let cin = channels + dist_channels;
        Ok(MwfParams {
            dist_w: store.add(&format!("{prefix}.dist_w"), &[1, dist_channels], InitSpec::Uniform { low: -1.0, high: 1.0 })?,
            dist_b: store.add(
                &format!("{prefix}.dist_b"),
                &[dist_channels],
                InitSpec::Uniform {
                    low: -std::f64::consts::PI,
                    high: std::f64::consts::PI,
                },
            )?,
            fuse_w: store.add(&format!("{prefix}.fuse_w"), &[cin, channels + heads], InitSpec::HeUniform { fan_in: cin })?,
            fuse_b: store.add(&format!("{prefix}.fuse_b"), &[channels + heads], InitSpec::Zeros)?,
            channels,
            dist_channels,
            heads,
            frequency,
        })
    }
}

/// `sin(A * (dist W + b))`.
pub fn encode_distance<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, dist: Var, dist_w: ParamId, dist_b: ParamId, frequency: f64) -> Result<Var> {
    let w = g.param(store, dist_w);
    let b = g.param(store, dist_b);
    let z = g.linear(dist, w, b)?;
    let z = g.scale(z, frequency);
    Ok(g.sin(z))
}

fn expand_mask(valid: &[bool], width: usize) -> Vec<bool> {
    valid.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect()
}

/// Multi-head weighted fusion: one linear layer over `[features, Z']`
/// yields per-view values and per-head logits; logits are softmaxed across
/// valid views and weight the values.
pub fn mwf_fuse<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, vm: &MultiViewVolume, params: &MwfParams) -> Result<FusedVolume> {
    let (n, p, c, heads) = (vm.num_views, vm.num_points, params.channels, params.heads);
    if vm.channels != c {
        return Err(Error::Invalid(format!("volume has {} channels, fusion expects {c}", vm.channels)));
    }
    let z = encode_distance(g, store, vm.dist, params.dist_w, params.dist_b, params.frequency)?;
    let x = g.concat(&[vm.features, z], 2)?;
    let w = g.param(store, params.fuse_w);
    let b = g.param(store, params.fuse_b);
    let y = g.linear(x, w, b)?;
    let parts = g.split(y, 2, &[c, heads])?;
    let weights = view_softmax(g, parts[1], &expand_mask(&vm.valid, heads))?;
    let values = g.reshape(parts[0], &[n, p, heads, c / heads])?;
    let wexp = g.reshape(weights, &[n, p, heads, 1])?;
    let weighted = g.mul(values, wexp)?;
    let fused = view_sum(g, weighted)?;
    let features = g.reshape(fused, &[p, c])?;
    Ok(FusedVolume {
        features,
        coverage: vm.coverage(),
        weights: Some(weights),
    })
}

/// `1 / coverage` per point (0 where uncovered), or `1 / N` when strict.
fn mean_scale<T: Real>(g: &mut Graph<T>, vm: &MultiViewVolume, strict: bool) -> Result<Var> {
    let cov = vm.coverage();
    let s: Vec<f64> = cov
        .iter()
        .map(|&k| {
            if strict {
                1.0 / vm.num_views as f64
            } else if k == 0 {
                0.0
            } else {
                1.0 / k as f64
            }
        })
        .collect();
    Ok(g.constant(Tensor::from_f64(vec![vm.num_points, 1], &s)?))
}

/// Arithmetic mean across views; over valid views only unless `strict`,
/// in which case the sum is divided by the total view count.
pub fn mean_fuse<T: Real>(g: &mut Graph<T>, vm: &MultiViewVolume, strict: bool) -> Result<FusedVolume> {
    let sum = view_sum(g, vm.features)?;
    let scale = mean_scale(g, vm, strict)?;
    let features = g.mul(sum, scale)?;
    Ok(FusedVolume {
        features,
        coverage: vm.coverage(),
        weights: None,
    })
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dist_w: ParamId,
    pub dist_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub query: ParamId,
    pub channels: usize,
    pub key_channels: usize,
    pub frequency: f64,
    /// Largest accepted `N * P`.
    pub budget: usize,
}

impl AttentionParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, dist_channels: usize, frequency: f64, budget: usize) -> Result<Self> {
        let cin = channels + dist_channels;
        let d = channels;
        Ok(AttentionParams {
            dist_w: store.add(&format!("{prefix}.dist_w"), &[1, dist_channels], InitSpec::Uniform { low: -1.0, high: 1.0 })?,
            dist_b: store.add(
                &format!("{prefix}.dist_b"),
                &[dist_channels],
                InitSpec::Uniform {
                    low: -std::f64::consts::PI,
                    high: std::f64::consts::PI,
                },
            )?,
            key_w: store.add(&format!("{prefix}.key_w"), &[cin, d], InitSpec::HeUniform { fan_in: cin })?,
            key_b: store.add(&format!("{prefix}.key_b"), &[d], InitSpec::Zeros)?,
            value_w: store.add(&format!("{prefix}.value_w"), &[cin, channels], InitSpec::HeUniform { fan_in: cin })?,
            value_b: store.add(&format!("{prefix}.value_b"), &[channels], InitSpec::Zeros)?,
            query: store.add(&format!("{prefix}.query"), &[d, 1], InitSpec::HeUniform { fan_in: d })?,
            channels,
            key_channels: d,
            frequency,
            budget,
        })
    }
}

/// Single-head scaled dot-product attention across views with a learned
/// query, per point.
pub fn attention_fuse<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, vm: &MultiViewVolume, params: &AttentionParams) -> Result<FusedVolume> {
    let (n, p) = (vm.num_views, vm.num_points);
    if n * p > params.budget {
        return Err(Error::Budget(format!("attention over {n} views x {p} points exceeds budget {}", params.budget)));
    }
    let z = encode_distance(g, store, vm.dist, params.dist_w, params.dist_b, params.frequency)?;
    let x = g.concat(&[vm.features, z], 2)?;
    let (kw, kb) = (g.param(store, params.key_w), g.param(store, params.key_b));
    let keys = g.linear(x, kw, kb)?;
    let (vw, vb) = (g.param(store, params.value_w), g.param(store, params.value_b));
    let values = g.linear(x, vw, vb)?;
    let q = g.param(store, params.query);
    let scores = g.matmul(keys, q)?;
    let scores = g.scale(scores, 1.0 / (params.key_channels as f64).sqrt());
    let weights = view_softmax(g, scores, &vm.valid)?;
    let weighted = g.mul(values, weights)?;
    let features = view_sum(g, weighted)?;
    Ok(FusedVolume {
        features,
        coverage: vm.coverage(),
        weights: Some(weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use nalgebra::Vector3;

    fn view_at(eye: [f64; 3], target: [f64; 3]) -> CameraView {
        let intr = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 7.5,
            cy: 5.5,
            width: 16,
            height: 12,
        };
        CameraView::new(Pose::look_at(Vector3::from(eye), Vector3::from(target)), intr, 8, 6)
    }

    #[test]
    fn constant_map_samples_constant() {
        let mut g = Graph::<f64>::new();
        let views = [view_at([0.0, 0.0, 1.0], [3.0, 0.0, 1.0]), view_at([0.0, 1.0, 1.0], [3.0, 0.0, 1.0])];
        let fm = g.constant(Tensor::full(vec![2, 6, 8, 3], 0.7));
        let pts = g.constant(Tensor::from_f64(vec![1, 3], &[3.0, 0.0, 1.0]).unwrap());
        let vm = build_multiview_volume(&mut g, fm, &views, pts).unwrap();
        assert_eq!(vm.valid, vec![true, true]);
        assert!(g.value(vm.features).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn point_behind_every_camera_is_zero() {
        let mut g = Graph::<f64>::new();
        let views = [view_at([0.0, 0.0, 1.0], [3.0, 0.0, 1.0]), view_at([0.0, 1.0, 1.0], [3.0, 1.0, 1.0])];
        let fm = g.constant(Tensor::full(vec![2, 6, 8, 3], 0.7));
        let pts = g.constant(Tensor::from_f64(vec![1, 3], &[-3.0, 0.5, 1.0]).unwrap());
        let vm = build_multiview_volume(&mut g, fm, &views, pts).unwrap();
        assert_eq!(vm.coverage(), vec![0]);
        let fused = mean_fuse(&mut g, &vm, false).unwrap();
        assert!(g.value(fused.features).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_fuse_valid_and_strict() {
        let mut g = Graph::<f64>::new();
        let feats = g.constant(Tensor::from_f64(vec![2, 1, 2], &[1.0, 3.0, 0.0, 0.0]).unwrap());
        let dist = g.constant(Tensor::full(vec![2, 1, 1], 1.0));
        let vm = MultiViewVolume {
            features: feats,
            valid: vec![true, false],
            dist,
            num_views: 2,
            num_points: 1,
            channels: 2,
        };
        let a = mean_fuse(&mut g, &vm, false).unwrap();
        assert_eq!(g.value(a.features).data(), &[1.0, 3.0]);
        let b = mean_fuse(&mut g, &vm, true).unwrap();
        assert_eq!(g.value(b.features).data(), &[0.5, 1.5]);
    }

    #[test]
    fn zero_dist_linear_encodes_zero() {
        let mut store = ParamStore::<f64>::new(0);
        let p = MwfParams::register(&mut store, "m", 8, 4, 2, 1.0).unwrap();
        store.get_mut(p.dist_w).value = Tensor::zeros(vec![1, 4]);
        store.get_mut(p.dist_b).value = Tensor::zeros(vec![4]);
        let mut g = Graph::new();
        let d = g.constant(Tensor::full(vec![2, 3, 1], 2.5));
        let z = encode_distance(&mut g, &store, d, p.dist_w, p.dist_b, 1.0).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::<f32>::new(0);
        assert!(MwfParams::register(&mut store, "m", 10, 4, 8, 1.0).is_err());
    }

    #[test]
    fn view_softmax_masks_and_normalizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![3, 2], &[0.0, 5.0, 1.0, -1.0, 2.0, 0.0]).unwrap());
        let y = view_softmax(&mut g, x, &[true, false, true, false, false, false]).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert_eq!(d[4], 0.0);
        assert_eq!([d[1], d[3], d[5]], [0.0; 3]);
    }

    #[test]
    fn attention_budget_enforced() {
        let mut store = ParamStore::<f64>::new(0);
        let p = AttentionParams::register(&mut store, "a", 4, 2, 1.0, 3).unwrap();
        let mut g = Graph::new();
        let vm = MultiViewVolume {
            features: g.constant(Tensor::zeros(vec![2, 2, 4])),
            valid: vec![true; 4],
            dist: g.constant(Tensor::zeros(vec![2, 2, 1])),
            num_views: 2,
            num_points: 2,
            channels: 4,
        };
        assert!(matches!(attention_fuse(&mut g, &store, &vm, &p), Err(Error::Budget(_))));
    }
}
