//! Detection trunk: 2D backbone, fused and opacity-modulated voxel volume,
//! per-level 3D U-Net with dense heads, and the multi-level loop that
//! relocates sample points by learned offsets.

use serde::{Deserialize, Serialize};
use voxdet_tensor::{Graph, InitSpec, ParamId, ParamStore, Real, Tensor, Var};

use crate::boxes::{iou_3d, Box3D};
use crate::geometry::{voxel_centers, CameraView, VoxelGrid};
use crate::nerf::{opacity_at, FieldParams};
use crate::volume::{attention_fuse, build_multiview_volume, mean_fuse, mwf_fuse, AttentionParams, FusedVolume, MwfParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Mwf,
    Mean,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetMode {
    Learned,
    /// Offset heads kept at zero and excluded from training.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetAnchor {
    /// `P_l = P_0 + offsets_{l-1}`.
    Original,
    /// `P_l = P_{l-1} + offsets_{l-1}`.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub dist_channels: usize,
    pub heads: usize,
    pub dist_frequency: f64,
    /// Extra levels after the first.
    pub levels: usize,
    pub unet_base: usize,
    pub backbone_widths: [usize; 2],
    pub fusion: FusionMode,
    pub strict_mean: bool,
    pub offsets: OffsetMode,
    pub offset_anchor: OffsetAnchor,
    /// Clamp on raw offsets, in voxel pitches.
    pub offset_clamp: f64,
    pub map_channels: usize,
    pub num_classes: usize,
    pub nerf: bool,
    pub nerf_hidden: usize,
    pub detach_opacity: bool,
    pub attention_budget: usize,
    /// Per-channel normalisation over the volume after each U-Net
    /// encoder and decoder convolution.
    #[serde(default = "yes")]
    pub unet_norm: bool,
    /// Per-image, per-channel normalisation after the hidden backbone
    /// convolutions.
    #[serde(default = "yes")]
    pub backbone_norm: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            dist_channels: 16,
            heads: 8,
            dist_frequency: 1.0,
            levels: 2,
            unet_base: 16,
            backbone_widths: [16, 32],
            fusion: FusionMode::Mwf,
            strict_mean: false,
            offsets: OffsetMode::Learned,
            offset_anchor: OffsetAnchor::Original,
            offset_clamp: 2.0,
            map_channels: 16,
            num_classes: 3,
            nerf: true,
            nerf_hidden: 32,
            detach_opacity: false,
            attention_budget: 200_000,
            unet_norm: true,
            backbone_norm: true,
        }
    }
}

type Layer = (ParamId, ParamId);

/// Small weights so every head starts near its bias.
const HEAD_INIT: InitSpec = InitSpec::Uniform { low: -0.01, high: 0.01 };

fn layer<T: Real>(store: &mut ParamStore<T>, name: &str, shape: &[usize], fan_in: usize, bias: InitSpec) -> Result<Layer> {
    let cout = *shape.last().unwrap();
    Ok((
        store.add(&format!("{name}.w"), shape, InitSpec::HeUniform { fan_in })?,
        store.add(&format!("{name}.b"), &[cout], bias)?,
    ))
}

fn conv3<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize) -> Result<Layer> {
    layer(store, name, &[k, k, k, cin, cout], k * k * k * cin, InitSpec::Zeros)
}

#[derive(Clone, Debug)]
pub struct UnetParams {
    pub enc: Layer,
    pub down1: Layer,
    pub down2: Layer,
    pub up2_proj: Layer,
    pub up2: Layer,
    pub up1_proj: Layer,
    pub up1: Layer,
}

impl UnetParams {
    fn register<T: Real>(store: &mut ParamStore<T>, p: &str, cin: usize, base: usize, cout: usize) -> Result<Self> {
        Ok(UnetParams {
            enc: conv3(store, &format!("{p}.enc"), 3, cin, base)?,
            down1: conv3(store, &format!("{p}.down1"), 3, base, 2 * base)?,
            down2: conv3(store, &format!("{p}.down2"), 3, 2 * base, 4 * base)?,
            up2_proj: conv3(store, &format!("{p}.up2_proj"), 1, 4 * base, 2 * base)?,
            up2: conv3(store, &format!("{p}.up2"), 3, 2 * base, 2 * base)?,
            up1_proj: conv3(store, &format!("{p}.up1_proj"), 1, 2 * base, base)?,
            up1: conv3(store, &format!("{p}.up1"), 3, base, cout)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LevelParams {
    /// Merges the resampled volume with the previous level's features.
    pub fusion: Option<Layer>,
    pub unet: UnetParams,
    pub cls: Layer,
    pub reg: Layer,
    pub cntr: Layer,
    pub reg_map: Layer,
    pub cntr_map: Layer,
    /// Absent on the last level, whose offsets would never be used.
    pub offset: Option<Layer>,
}

#[derive(Clone, Debug)]
pub enum FusionParams {
    Mwf(MwfParams),
    Mean { strict: bool },
    Attention(AttentionParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Vec<Layer>,
    pub fusion: FusionParams,
    pub field: Option<FieldParams>,
    pub levels: Vec<LevelParams>,
}

/// Prior probability for the classification bias.
const CLS_PRIOR: f64 = 0.01;

impl Model {
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let c = config.channels;
        if c == 0 || config.num_classes == 0 || config.unet_base == 0 {
            return Err(Error::Config("channels, unet_base and num_classes must be positive".into()));
        }
        let [b1, b2] = config.backbone_widths;
        let backbone = vec![
            layer(store, "backbone.s1", &[3, 3, 3, b1], 27, InitSpec::Zeros)?,
            layer(store, "backbone.s2", &[3, 3, b1, b2], 9 * b1, InitSpec::Zeros)?,
            layer(store, "backbone.s3", &[3, 3, b2, c], 9 * b2, InitSpec::Zeros)?,
        ];
        let fusion = match config.fusion {
            FusionMode::Mwf => FusionParams::Mwf(MwfParams::register(store, "mwf", c, config.dist_channels, config.heads, config.dist_frequency)?),
            FusionMode::Mean => FusionParams::Mean { strict: config.strict_mean },
            FusionMode::Attention => FusionParams::Attention(AttentionParams::register(
                store,
                "attn",
                c,
                config.dist_channels,
                config.dist_frequency,
                config.attention_budget,
            )?),
        };
        let field = if config.nerf {
            Some(FieldParams::register(store, "field", c, config.nerf_hidden)?)
        } else {
            None
        };
        let m = config.map_channels;
        let mut levels = Vec::new();
        for l in 0..=config.levels {
            let p = format!("level{l}");
            let fusion = if l > 0 { Some(conv3(store, &format!("{p}.fusion"), 3, 2 * c, c)?) } else { None };
            let offset = if l < config.levels {
                let cin = c + 2 * m;
                Some((
                    store.add(&format!("{p}.offset.w"), &[3, 3, 3, cin, 3], InitSpec::Zeros)?,
                    store.add(&format!("{p}.offset.b"), &[3], InitSpec::Zeros)?,
                ))
            } else {
                None
            };
            levels.push(LevelParams {
                fusion,
                unet: UnetParams::register(store, &format!("{p}.unet"), c, config.unet_base, c)?,
                cls: (
                    store.add(&format!("{p}.cls.w"), &[c, config.num_classes], HEAD_INIT)?,
                    store.add(
                        &format!("{p}.cls.b"),
                        &[config.num_classes],
                        InitSpec::Constant(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()),
                    )?,
                ),
                reg: (
                    store.add(&format!("{p}.reg.w"), &[c, 6], HEAD_INIT)?,
                    store.add(&format!("{p}.reg.b"), &[6], InitSpec::Zeros)?,
                ),
                cntr: (
                    store.add(&format!("{p}.cntr.w"), &[c, 1], HEAD_INIT)?,
                    store.add(&format!("{p}.cntr.b"), &[1], InitSpec::Zeros)?,
                ),
                reg_map: layer(store, &format!("{p}.reg_map"), &[6, m], 6, InitSpec::Zeros)?,
                cntr_map: layer(store, &format!("{p}.cntr_map"), &[1, m], 1, InitSpec::Zeros)?,
                offset,
            });
        }
        Ok(Model {
            config,
            backbone,
            fusion,
            field,
            levels,
        })
    }

    /// Weights and biases of the sampling-offset convolutions.
    pub fn offset_params(&self) -> Vec<ParamId> {
        self.levels.iter().filter_map(|l| l.offset).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Parameters that must not be trained under the current config.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        if self.config.offsets == OffsetMode::Frozen {
            self.offset_params()
        } else {
            vec![]
        }
    }
}

fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId, frozen: bool) -> Var {
    if frozen {
        g.frozen_param(store, id)
    } else {
        g.param(store, id)
    }
}

fn conv<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: Layer, dims: usize, stride: usize) -> Result<Var> {
    let (w, b) = (g.param(store, l.0), g.param(store, l.1));
    let k = g.shape(w)[0];
    Ok(g.conv(x, w, b, dims, stride, k / 2)?)
}

fn dense<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: Layer) -> Result<Var> {
    let (w, b) = (g.param(store, l.0), g.param(store, l.1));
    Ok(g.linear(x, w, b)?)
}

/// `[N, h, w, 3] -> [N, h/4, w/4, c]`.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, model: &Model, images: Var) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[3] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::Invalid(format!("backbone expects [N, h, w, 3] with h, w divisible by 4, got {s:?}")));
    }
    let strides = [2, 2, 1];
    let mut x = images;
    for (i, (&l, &st)) in model.backbone.iter().zip(&strides).enumerate() {
        x = conv(g, store, x, l, 2, st)?;
        if i + 1 < strides.len() {
            if model.config.backbone_norm {
                x = image_norm(g, x)?;
            }
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Zero mean, unit variance per channel over all leading axes.
pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().expect("rank >= 1");
    let flat = g.reshape(x, &[shape.iter().product::<usize>() / c, c])?;
    let mu = g.mean_axis(flat, 0)?;
    let d = g.sub(flat, mu)?;
    let sq = g.square(d);
    let var = g.mean_axis(sq, 0)?;
    let var = g.add_scalar(var, 1e-5);
    let sd = g.sqrt(var);
    let y = g.div(d, sd)?;
    Ok(g.reshape(y, &shape)?)
}

/// Instance normalisation of an `[N, h, w, c]` batch, per image.
pub fn image_norm<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, c) = (shape[0], shape[3]);
    let flat = g.reshape(x, &[n, shape[1] * shape[2], c])?;
    let mu = g.mean_axis(flat, 1)?;
    let mu = g.reshape(mu, &[n, 1, c])?;
    let d = g.sub(flat, mu)?;
    let sq = g.square(d);
    let var = g.mean_axis(sq, 1)?;
    let var = g.reshape(var, &[n, 1, c])?;
    let var = g.add_scalar(var, 1e-5);
    let sd = g.sqrt(var);
    let y = g.div(d, sd)?;
    Ok(g.reshape(y, &shape)?)
}

/// Encoder-decoder over a `[W, L, H, cin]` volume with additive skips.
pub fn unet_forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, p: &UnetParams, norm: bool, x: Var) -> Result<Var> {
    let block = |g: &mut Graph<T>, x: Var, l: Layer, stride: usize| -> Result<Var> {
        let y = conv(g, store, x, l, 3, stride)?;
        let y = if norm { instance_norm(g, y)? } else { y };
        Ok(g.relu(y))
    };
    let e = block(g, x, p.enc, 1)?;
    let d1 = block(g, e, p.down1, 2)?;
    let d2 = block(g, d1, p.down2, 2)?;
    let u2 = g.upsample_nearest(d2, [2; 3])?;
    let u2 = conv(g, store, u2, p.up2_proj, 3, 1)?;
    let u2 = g.add(u2, d1)?;
    let u2 = block(g, u2, p.up2, 1)?;
    let u1 = g.upsample_nearest(u2, [2; 3])?;
    let u1 = conv(g, store, u1, p.up1_proj, 3, 1)?;
    let u1 = g.add(u1, e)?;
    let out = conv(g, store, u1, p.up1, 3, 1)?;
    Ok(g.relu(out))
}

pub struct LevelOutput {
    /// `[P, num_classes]`.
    pub cls: Var,
    /// `[P, 6]`.
    pub reg: Var,
    /// `[P, 1]`.
    pub cntr: Var,
    /// `[P, 3]` meters; `None` on the last level.
    pub offsets: Option<Var>,
    /// `[P, 3]` points this level sampled at.
    pub points: Var,
    /// Fused, opacity-modulated volume `[P, c]` before the U-Net.
    pub fused: Var,
    /// Opacity `[P, 1]` at `points` when the radiance branch is on.
    pub opacity: Option<Var>,
    pub coverage: Vec<usize>,
}

/// Heads on the level features `v_s` (`[P, c]` flattened from the grid).
#[allow(clippy::too_many_arguments)]
pub fn level_heads<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &Model,
    lp: &LevelParams,
    v_s: Var,
    grid: &VoxelGrid,
) -> Result<(Var, Var, Var, Option<Var>)> {
    let cls = dense(g, store, v_s, lp.cls)?;
    let reg = dense(g, store, v_s, lp.reg)?;
    let cntr = dense(g, store, v_s, lp.cntr)?;
    let offsets = match lp.offset {
        None => None,
        Some((ow, ob)) => {
            let rm = dense(g, store, reg, lp.reg_map)?;
            let cm = dense(g, store, cntr, lp.cntr_map)?;
            let x = g.concat(&[v_s, rm, cm], 1)?;
            let [w, l, h] = grid.resolution;
            let c = g.shape(x)[1];
            let x = g.reshape(x, &[w, l, h, c])?;
            let frozen = model.config.offsets == OffsetMode::Frozen;
            let (wv, bv) = (bind(g, store, ow, frozen), bind(g, store, ob, frozen));
            let raw = g.conv(x, wv, bv, 3, 1, 1)?;
            let raw = g.reshape(raw, &[w * l * h, 3])?;
            let k = model.config.offset_clamp;
            let raw = g.clamp(raw, -k, k);
            let pitch = g.constant(Tensor::from_f64(vec![3], &grid.pitch())?);
            Some(g.mul(raw, pitch)?)
        }
    };
    Ok((cls, reg, cntr, offsets))
}

fn fuse<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, model: &Model, vm: &crate::volume::MultiViewVolume) -> Result<FusedVolume> {
    match &model.fusion {
        FusionParams::Mwf(p) => mwf_fuse(g, store, vm, p),
        FusionParams::Mean { strict } => mean_fuse(g, vm, *strict),
        FusionParams::Attention(p) => attention_fuse(g, store, vm, p),
    }
}

pub struct ForwardOutput {
    pub feature_maps: Var,
    pub levels: Vec<LevelOutput>,
    /// Original voxel centres `[P, 3]`.
    pub anchors: Var,
}

/// Runs backbone and every level. `views` must describe feature maps of
/// size `h/4 x w/4`.
pub fn msan_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &Model,
    images: Var,
    views: &[CameraView],
    grid: &VoxelGrid,
) -> Result<ForwardOutput> {
    if grid.resolution.iter().any(|r| r % 4 != 0) {
        return Err(Error::Config(format!("grid resolution {:?} must be divisible by 4", grid.resolution)));
    }
    let feature_maps = backbone_forward(g, store, model, images)?;
    let np = grid.num_points();
    let [w, l, h] = grid.resolution;
    let c = model.config.channels;
    let anchors = g.constant(voxel_centers::<T>(grid).reshaped(vec![np, 3])?);
    let mut levels: Vec<LevelOutput> = Vec::with_capacity(model.levels.len());
    let mut prev_vs: Option<Var> = None;
    for lp in &model.levels {
        let points = match levels.last() {
            None => anchors,
            Some(prev) => {
                let off = prev.offsets.expect("non-final level predicts offsets");
                let base = match model.config.offset_anchor {
                    OffsetAnchor::Original => anchors,
                    OffsetAnchor::Previous => prev.points,
                };
                g.add(base, off)?
            }
        };
        let vm = build_multiview_volume(g, feature_maps, views, points)?;
        let fused = fuse(g, store, model, &vm)?;
        let (v_o, opacity) = match &model.field {
            Some(field) => {
                let mut alpha = opacity_at(g, store, field, &vm, grid.mean_pitch())?;
                if model.config.detach_opacity {
                    alpha = g.constant(g.value(alpha).clone());
                }
                (g.mul(fused.features, alpha)?, Some(alpha))
            }
            None => (fused.features, None),
        };
        let mut x = g.reshape(v_o, &[w, l, h, c])?;
        if let (Some(prev), Some(fl)) = (prev_vs, lp.fusion) {
            let prev = g.reshape(prev, &[w, l, h, c])?;
            let cat = g.concat(&[x, prev], 3)?;
            x = conv(g, store, cat, fl, 3, 1)?;
            x = g.relu(x);
        }
        let v_s = unet_forward(g, store, &lp.unet, model.config.unet_norm, x)?;
        let v_s = g.reshape(v_s, &[np, c])?;
        let (cls, reg, cntr, offsets) = level_heads(g, store, model, lp, v_s, grid)?;
        prev_vs = Some(v_s);
        levels.push(LevelOutput {
            cls,
            reg,
            cntr,
            offsets,
            points,
            fused: v_o,
            opacity,
            coverage: fused.coverage,
        });
    }
    Ok(ForwardOutput {
        feature_maps,
        levels,
        anchors,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Boxes for every anchor: centre `anchor + delta`, size `exp(log size)`,
/// score `sigmoid(cls) * sigmoid(centerness)` of the best class.
pub fn decode_boxes(cls: &[f64], reg: &[f64], cntr: &[f64], anchors: &[f64], num_classes: usize) -> Vec<Box3D> {
    let np = anchors.len() / 3;
    (0..np)
        .map(|p| {
            let row = &cls[p * num_classes..(p + 1) * num_classes];
            let (best, logit) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            let a = [anchors[3 * p], anchors[3 * p + 1], anchors[3 * p + 2]];
            let mut b = Box3D::decode(&reg[6 * p..6 * p + 6], &a, best);
            b.score = Some(sigmoid(logit) * sigmoid(cntr[p]));
            b
        })
        .collect()
}

/// Greedy class-wise suppression in descending score order; equal scores
/// keep input order.
pub fn nms_3d(boxes: &[Box3D], iou_thresh: f64, score_thresh: f64, max_out: usize) -> Vec<Box3D> {
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].score.unwrap_or(0.0) >= score_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (boxes[a].score.unwrap_or(0.0), boxes[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut keep: Vec<Box3D> = Vec::new();
    for i in order {
        if keep.len() >= max_out {
            break;
        }
        let b = &boxes[i];
        if keep.iter().all(|k| k.class_id != b.class_id || iou_3d(k, b) <= iou_thresh) {
            keep.push(*b);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use nalgebra::Vector3;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            dist_channels: 4,
            heads: 4,
            unet_base: 4,
            backbone_widths: [4, 4],
            map_channels: 4,
            nerf_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn views(n: usize) -> Vec<CameraView> {
        let intr = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 7.5,
            cy: 5.5,
            width: 16,
            height: 12,
        };
        (0..n)
            .map(|i| {
                let a = i as f64;
                let eye = Vector3::new(1.0 + 0.8 * a.cos(), 1.0 + 0.8 * a.sin(), 1.2);
                CameraView::new(Pose::look_at(eye, Vector3::new(1.0, 1.0, 0.4)), intr, 4, 3)
            })
            .collect()
    }

    #[test]
    fn backbone_quarter_resolution_and_zero_input() {
        let mut store = ParamStore::<f64>::new(1);
        let model = Model::new(tiny_config(), &mut store).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(vec![2, 12, 16, 3]));
        let f = backbone_forward(&mut g, &store, &model, img).unwrap();
        assert_eq!(g.shape(f), &[2, 3, 4, 8]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(vec![1, 10, 16, 3]));
        assert!(backbone_forward(&mut g, &store, &model, bad).is_err());
    }

    #[test]
    fn identity_at_init() {
        let mut store = ParamStore::<f64>::new(3);
        let model = Model::new(tiny_config(), &mut store).unwrap();
        let grid = VoxelGrid::new([0.0; 3], [2.0, 2.0, 1.0], [4, 4, 4]).unwrap();
        let mut g = Graph::new();
        let img: Vec<f64> = (0..3 * 12 * 16 * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let img = g.constant(Tensor::from_f64(vec![3, 12, 16, 3], &img).unwrap());
        let out = msan_forward(&mut g, &store, &model, img, &views(3), &grid).unwrap();
        assert_eq!(out.levels.len(), 3);
        let p0 = g.value(out.anchors).data().to_vec();
        let v0 = g.value(out.levels[0].fused).data().to_vec();
        for lvl in &out.levels {
            assert_eq!(g.value(lvl.points).data(), &p0[..]);
            assert_eq!(g.value(lvl.fused).data(), &v0[..]);
        }
        assert!(out.levels[2].offsets.is_none());
    }

    #[test]
    fn decode_zero_regression() {
        let b = decode_boxes(&[0.0, 1.0], &[0.0; 6], &[0.0], &[1.0, 2.0, 3.0], 2);
        assert_eq!(b[0].center, [1.0, 2.0, 3.0]);
        assert_eq!(b[0].size, [1.0; 3]);
        assert_eq!(b[0].class_id, 1);
        let s = b[0].score.unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn nms_identical_and_disjoint() {
        let mut a = Box3D::new([0.0; 3], [1.0; 3], 0);
        a.score = Some(0.9);
        let mut b = a;
        b.score = Some(0.8);
        let mut c = Box3D::new([5.0, 0.0, 0.0], [1.0; 3], 0);
        c.score = Some(0.7);
        let kept = nms_3d(&[b, a, c], 0.25, 0.0, 10);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, Some(0.9));
        let mut other_class = a;
        other_class.class_id = 1;
        assert_eq!(nms_3d(&[a, other_class], 0.25, 0.0, 10).len(), 2);
    }
}
