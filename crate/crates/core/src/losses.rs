//! Target assignment and training objectives.

use serde::{Deserialize, Serialize};
use voxdet_tensor::{Graph, Real, Tensor, Var};

use crate::boxes::Box3D;
use crate::nerf::RayBatch;
use crate::{Error, Result};

/// Per-point supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    /// Class of the assigned box, `None` for background.
    pub labels: Vec<Option<usize>>,
    pub assigned: Vec<Option<usize>>,
    /// Zero for background.
    pub reg: Vec<[f64; 6]>,
    /// Zero for background.
    pub centerness: Vec<f64>,
}

impl TargetMap {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Cube root of the product of per-axis `min/max` face-distance ratios.
pub fn centerness(b: &Box3D, p: &[f64; 3]) -> f64 {
    let (lo, hi) = (b.min(), b.max());
    let mut prod = 1.0;
    for a in 0..3 {
        let (dm, dp) = (p[a] - lo[a], hi[a] - p[a]);
        if dm <= 0.0 || dp <= 0.0 {
            return 0.0;
        }
        prod *= dm.min(dp) / dm.max(dp);
    }
    prod.cbrt()
}

/// A point strictly inside one or more boxes is assigned to the smallest of
/// them (lowest index on ties).
pub fn assign_targets(points: &[[f64; 3]], gt: &[Box3D]) -> TargetMap {
    let n = points.len();
    let mut t = TargetMap {
        labels: vec![None; n],
        assigned: vec![None; n],
        reg: vec![[0.0; 6]; n],
        centerness: vec![0.0; n],
    };
    for (i, p) in points.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(_, b)| b.contains_strict(p))
            .fold(None::<(usize, f64)>, |acc, (k, b)| match acc {
                Some((_, v)) if v <= b.volume() => acc,
                _ => Some((k, b.volume())),
            });
        if let Some((k, _)) = best {
            let b = &gt[k];
            t.labels[i] = Some(b.class_id);
            t.assigned[i] = Some(k);
            t.reg[i] = b.encode(p);
            t.centerness[i] = centerness(b, p);
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

/// Graph handles of one level's three detection losses.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub cls: Var,
    pub cntr: Var,
    pub loc: Var,
}

fn pow_gamma<T: Real>(g: &mut Graph<T>, x: Var, gamma: f64) -> Result<Var> {
    Ok(if gamma == 2.0 {
        g.square(x)
    } else {
        let l = g.ln(x);
        let s = g.scale(l, gamma);
        g.exp(s)
    })
}

/// Sigmoid focal loss summed over points and classes, divided by
/// `max(num_pos, 1)`.
pub fn focal_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &TargetMap, num_classes: usize, fp: FocalParams) -> Result<Var> {
    let np = targets.labels.len();
    if g.shape(logits) != [np, num_classes] {
        return Err(Error::Invalid(format!("cls logits {:?} vs {np} points x {num_classes} classes", g.shape(logits))));
    }
    let mut onehot = vec![0.0; np * num_classes];
    for (i, l) in targets.labels.iter().enumerate() {
        if let Some(k) = l {
            onehot[i * num_classes + k] = 1.0;
        }
    }
    let pos_w: Vec<f64> = onehot.iter().map(|&t| t * fp.alpha).collect();
    let neg_w: Vec<f64> = onehot.iter().map(|&t| (1.0 - t) * (1.0 - fp.alpha)).collect();
    let shape = vec![np, num_classes];
    let pos_w = g.constant(Tensor::from_f64(shape.clone(), &pos_w)?);
    let neg_w = g.constant(Tensor::from_f64(shape, &neg_w)?);

    let p = g.sigmoid(logits);
    let neg_logits = g.neg(logits);
    let q = g.sigmoid(neg_logits);
    let log_p = g.log_sigmoid(logits);
    let log_q = g.log_sigmoid(neg_logits);
    let qg = pow_gamma(g, q, fp.gamma)?;
    let pg = pow_gamma(g, p, fp.gamma)?;
    let a = g.mul(qg, log_p)?;
    let a = g.mul(a, pos_w)?;
    let b = g.mul(pg, log_q)?;
    let b = g.mul(b, neg_w)?;
    let s = g.add(a, b)?;
    let s = g.sum_all(s);
    let npos = targets.labels.iter().filter(|l| l.is_some()).count().max(1);
    Ok(g.scale(s, -1.0 / npos as f64))
}

/// Mean binary cross-entropy of centerness logits over positives.
pub fn centerness_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &TargetMap, pos: &[usize]) -> Result<Var> {
    if pos.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let x = g.gather_rows(logits, pos)?;
    let t: Vec<f64> = pos.iter().map(|&i| targets.centerness[i]).collect();
    let tn: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let t = g.constant(Tensor::from_f64(vec![pos.len(), 1], &t)?);
    let tn = g.constant(Tensor::from_f64(vec![pos.len(), 1], &tn)?);
    let lp = g.log_sigmoid(x);
    let nx = g.neg(x);
    let lq = g.log_sigmoid(nx);
    let a = g.mul(lp, t)?;
    let b = g.mul(lq, tn)?;
    let s = g.add(a, b)?;
    let m = g.mean_all(s);
    Ok(g.neg(m))
}

/// `[n, 1]` column `axis` of `x`.
fn col<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    Ok(g.slice(x, 1, axis, 1)?)
}

/// Differentiable IoU between boxes decoded from `reg` rows (`[n, 6]`) at
/// `anchors` and fixed boxes. Returns `[n, 1]`.
pub fn decoded_iou<T: Real>(g: &mut Graph<T>, reg: Var, anchors: &[[f64; 3]], gt: &[Box3D]) -> Result<Var> {
    let n = anchors.len();
    let mut inter: Option<Var> = None;
    let mut vol_p: Option<Var> = None;
    for a in 0..3 {
        let d = col(g, reg, a)?;
        let ls = col(g, reg, 3 + a)?;
        let size = g.exp(ls);
        let anc = g.constant(Tensor::from_f64(vec![n, 1], &anchors.iter().map(|p| p[a]).collect::<Vec<_>>())?);
        let c = g.add(anc, d)?;
        let half = g.scale(size, 0.5);
        let pmin = g.sub(c, half)?;
        let pmax = g.add(c, half)?;
        let gmin = g.constant(Tensor::from_f64(vec![n, 1], &gt.iter().map(|b| b.min()[a]).collect::<Vec<_>>())?);
        let gmax = g.constant(Tensor::from_f64(vec![n, 1], &gt.iter().map(|b| b.max()[a]).collect::<Vec<_>>())?);
        let hi = g.minimum(pmax, gmax)?;
        let lo = g.maximum(pmin, gmin)?;
        let ext = g.sub(hi, lo)?;
        let ext = g.relu(ext);
        inter = Some(match inter {
            None => ext,
            Some(v) => g.mul(v, ext)?,
        });
        vol_p = Some(match vol_p {
            None => size,
            Some(v) => g.mul(v, size)?,
        });
    }
    let (inter, vol_p) = (inter.unwrap(), vol_p.unwrap());
    let vol_g = g.constant(Tensor::from_f64(vec![n, 1], &gt.iter().map(|b| b.volume()).collect::<Vec<_>>())?);
    let union = g.add(vol_p, vol_g)?;
    let union = g.sub(union, inter)?;
    Ok(g.div(inter, union)?)
}

/// Mean `1 - IoU` over positives.
pub fn localization_loss<T: Real>(g: &mut Graph<T>, reg: Var, targets: &TargetMap, anchors: &[[f64; 3]], gt: &[Box3D], pos: &[usize]) -> Result<Var> {
    if pos.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let r = g.gather_rows(reg, pos)?;
    let anc: Vec<[f64; 3]> = pos.iter().map(|&i| anchors[i]).collect();
    let boxes: Vec<Box3D> = pos.iter().map(|&i| gt[targets.assigned[i].unwrap()]).collect();
    let iou = decoded_iou(g, r, &anc, &boxes)?;
    let m = g.mean_all(iou);
    let nm = g.neg(m);
    Ok(g.add_scalar(nm, 1.0))
}

pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    cls: Var,
    reg: Var,
    cntr: Var,
    targets: &TargetMap,
    anchors: &[[f64; 3]],
    gt: &[Box3D],
    num_classes: usize,
) -> Result<DetectionLoss> {
    let pos = targets.positives();
    Ok(DetectionLoss {
        cls: focal_loss(g, cls, targets, num_classes, FocalParams::default())?,
        cntr: centerness_loss(g, cntr, targets, &pos)?,
        loc: localization_loss(g, reg, targets, anchors, gt, &pos)?,
    })
}

/// Mean per-ray L2 norm of the RGB residual and mean absolute depth error
/// from a `[R, 5]` render.
pub fn nerf_losses<T: Real>(g: &mut Graph<T>, render: Var, batch: &RayBatch) -> Result<(Var, Var)> {
    let r = batch.num_rays();
    if g.shape(render) != [r, 5] {
        return Err(Error::Invalid(format!("render shaped {:?}, expected [{r}, 5]", g.shape(render))));
    }
    let rgb = g.slice(render, 1, 0, 3)?;
    let gt_rgb = g.constant(Tensor::from_f64(vec![r, 3], &batch.gt_rgb)?);
    let d = g.sub(rgb, gt_rgb)?;
    let sq = g.square(d);
    let ss = g.sum_axis(sq, 1)?;
    let norm = g.sqrt(ss);
    let l_c = g.mean_all(norm);
    let depth = g.slice(render, 1, 3, 1)?;
    let gt_d = g.constant(Tensor::from_f64(vec![r, 1], &batch.gt_depth)?);
    let dd = g.sub(depth, gt_d)?;
    let ad = g.abs(dd);
    let l_d = g.mean_all(ad);
    Ok((l_c, l_d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub cls: f64,
    pub cntr: f64,
    pub loc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelLoss>,
    pub nerf_rgb: f64,
    pub nerf_depth: f64,
    pub total: f64,
}

impl LossReport {
    /// Sums components in a fixed order: levels first, then `L_c`, `L_d`.
    pub fn new(levels: Vec<LevelLoss>, nerf_rgb: f64, nerf_depth: f64) -> Self {
        let mut total = 0.0;
        for l in &levels {
            total += l.cls;
            total += l.cntr;
            total += l.loc;
        }
        total += nerf_rgb;
        total += nerf_depth;
        LossReport {
            levels,
            nerf_rgb,
            nerf_depth,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Unweighted sum of every level's detection losses and the optional
/// rendering losses, plus the matching report.
pub fn total_loss<T: Real>(g: &mut Graph<T>, levels: &[DetectionLoss], nerf: Option<(Var, Var)>) -> Result<(Var, LossReport)> {
    let mut terms = Vec::new();
    let mut report_levels = Vec::new();
    for l in levels {
        terms.extend([l.cls, l.cntr, l.loc]);
        report_levels.push(LevelLoss {
            cls: g.value(l.cls).item().f64(),
            cntr: g.value(l.cntr).item().f64(),
            loc: g.value(l.loc).item().f64(),
        });
    }
    let (rgb, depth) = match nerf {
        Some((c, d)) => {
            terms.extend([c, d]);
            (g.value(c).item().f64(), g.value(d).item().f64())
        }
        None => (0.0, 0.0),
    };
    let mut total = g.scalar(0.0);
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok((total, LossReport::new(report_levels, rgb, depth)))
}
