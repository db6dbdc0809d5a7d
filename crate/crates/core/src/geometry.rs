//! Pinhole cameras, poses, voxel grids, rays and the mirror transform used
//! for flip augmentation.
//!
//! Camera frame convention: x right, y down, z forward. Poses are
//! camera-to-world.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use voxdet_tensor::{CustomOp, Graph, Real, Result as TResult, Tensor, Var};

use crate::{Error, Result};

/// Minimum camera-space depth for a projection to count as valid.
pub const Z_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "pose rotation not proper orthonormal (|RᵀR-I|={ortho:.2e}, det={det:.6})"
            )));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, world up +z.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let fwd = (target - eye).normalize();
        let mut right = fwd.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        Pose {
            rotation: Matrix3::from_columns(&[right, down, fwd]),
            translation: eye,
        }
    }

    /// 4x4 camera-to-world matrix, row-major.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Invalid(format!("pose matrix needs 16 values, got {}", m.len())));
        }
        let pose = Pose {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// A posed view together with the resolution of the feature map sampled
/// from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub feat_w: usize,
    pub feat_h: usize,
}

impl CameraView {
    pub fn new(pose: Pose, intrinsics: Intrinsics, feat_w: usize, feat_h: usize) -> Self {
        CameraView {
            pose,
            intrinsics,
            feat_w,
            feat_h,
        }
    }

    /// Scale from image to feature pixels along u and v.
    fn feat_scale(&self) -> (f64, f64) {
        (
            self.feat_w as f64 / self.intrinsics.width as f64,
            self.feat_h as f64 / self.intrinsics.height as f64,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Feature-plane coordinates (integer = pixel centre).
    pub u: f64,
    pub v: f64,
    /// Image-plane coordinates.
    pub u_img: f64,
    pub v_img: f64,
    /// Euclidean distance from the camera centre.
    pub dist: f64,
    pub z_cam: f64,
    pub valid: bool,
}

/// Maps image pixel coordinates to feature pixel coordinates so that pixel
/// centres stay aligned under striding.
#[inline]
fn to_feature(c: f64, scale: f64) -> f64 {
    (c + 0.5) * scale - 0.5
}

pub fn project(point: &Vector3<f64>, view: &CameraView) -> Projection {
    let k = &view.intrinsics;
    let pc = view.pose.world_to_camera(point);
    let dist = (point - view.pose.translation).norm();
    let (sx, sy) = view.feat_scale();
    if pc.z <= Z_MIN {
        return Projection {
            u: -1.0,
            v: -1.0,
            u_img: f64::NAN,
            v_img: f64::NAN,
            dist,
            z_cam: pc.z,
            valid: false,
        };
    }
    let u_img = k.fx * pc.x / pc.z + k.cx;
    let v_img = k.fy * pc.y / pc.z + k.cy;
    let (u, v) = (to_feature(u_img, sx), to_feature(v_img, sy));
    let valid = u >= 0.0 && v >= 0.0 && u <= view.feat_w as f64 - 1.0 && v <= view.feat_h as f64 - 1.0;
    Projection {
        u,
        v,
        u_img,
        v_img,
        dist,
        z_cam: pc.z,
        valid,
    }
}

/// World point seen at image pixel `(u, v)` with camera depth `z_cam`.
pub fn unproject(u: f64, v: f64, z_cam: f64, pose: &Pose, intr: &Intrinsics) -> Vector3<f64> {
    let pc = Vector3::new((u - intr.cx) / intr.fx * z_cam, (v - intr.cy) / intr.fy * z_cam, z_cam);
    pose.rotation * pc + pose.translation
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

pub fn generate_rays(pose: &Pose, intr: &Intrinsics, pixels: &[(f64, f64)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(u, v)| {
            let d = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0).normalize();
            Ray {
                origin: pose.translation,
                direction: pose.rotation * d,
            }
        })
        .collect()
}

/// Axis-aligned voxel grid over a box of space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub resolution: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], extent: [f64; 3], resolution: [usize; 3]) -> Result<Self> {
        let g = VoxelGrid {
            origin,
            extent,
            resolution,
        };
        if extent.iter().any(|&e| e <= 0.0) || resolution.iter().any(|&r| r == 0) {
            return Err(Error::Invalid(format!("bad voxel grid {g:?}")));
        }
        Ok(g)
    }

    pub fn pitch(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.extent[a] / self.resolution[a] as f64)
    }

    pub fn mean_pitch(&self) -> f64 {
        self.pitch().iter().sum::<f64>() / 3.0
    }

    pub fn num_points(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Voxel centres, x index slowest and z index fastest; this matches the
    /// `[W, L, H, c]` layout used by the 3D convolutions.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        let p = self.pitch();
        let [w, l, h] = self.resolution;
        let mut out = Vec::with_capacity(w * l * h);
        for i in 0..w {
            for j in 0..l {
                for k in 0..h {
                    out.push([
                        self.origin[0] + p[0] * (i as f64 + 0.5),
                        self.origin[1] + p[1] * (j as f64 + 0.5),
                        self.origin[2] + p[2] * (k as f64 + 0.5),
                    ]);
                }
            }
        }
        out
    }
}

/// Voxel centres as a `[W, L, H, 3]` tensor.
pub fn voxel_centers<T: Real>(grid: &VoxelGrid) -> Tensor<T> {
    let [w, l, h] = grid.resolution;
    let data: Vec<f64> = grid.centers().into_iter().flatten().collect();
    Tensor::from_f64(vec![w, l, h, 3], &data).unwrap()
}

/// Reflection across the plane `y = y0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MirrorPlane {
    pub y0: f64,
}

impl MirrorPlane {
    pub fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(p.x, 2.0 * self.y0 - p.y, p.z)
    }

    /// `R' = M R F`, `t' = mirror(t)` with `M` the world reflection and `F`
    /// the camera x-axis flip, so that mirrored points project to
    /// horizontally flipped pixels.
    pub fn pose(&self, pose: &Pose) -> Pose {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        let f = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        Pose {
            rotation: m * pose.rotation * f,
            translation: self.point(&pose.translation),
        }
    }
}

pub fn mirror_intrinsics(intr: &Intrinsics) -> Intrinsics {
    Intrinsics {
        cx: intr.width as f64 - 1.0 - intr.cx,
        ..*intr
    }
}

/// Flips an interleaved `[h, w, channels]` image left to right.
pub fn flip_lr<P: Copy>(data: &[P], width: usize, height: usize, channels: usize) -> Vec<P> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        for x in (0..width).rev() {
            let i = (y * width + x) * channels;
            out.extend_from_slice(&data[i..i + channels]);
        }
    }
    out
}

/// Mirrors a posed RGB-D view: images flipped left-right, principal point
/// reflected, pose conjugated by the world mirror.
pub fn mirror_view(
    pose: &Pose,
    intr: &Intrinsics,
    image: &[f32],
    depth: &[f32],
    plane: &MirrorPlane,
) -> (Pose, Intrinsics, Vec<f32>, Vec<f32>) {
    (
        plane.pose(pose),
        mirror_intrinsics(intr),
        flip_lr(image, intr.width, intr.height, 3),
        flip_lr(depth, intr.width, intr.height, 1),
    )
}

struct ProjectOp {
    /// Per view: d(u, v, dist)/d(point) for every point, row-major 3x3.
    jacobians: Vec<[f64; 9]>,
}

impl<T: Real> CustomOp<T> for ProjectOp {
    fn name(&self) -> &'static str {
        "project_points"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let np = inputs[0].numel() / 3;
        let mut gp = vec![0.0f64; np * 3];
        let gd = grad.data();
        for (k, jac) in self.jacobians.iter().enumerate() {
            let p = k % np;
            for r in 0..3 {
                let go = gd[3 * k + r].f64();
                if go == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    gp[3 * p + c] += go * jac[3 * r + c];
                }
            }
        }
        vec![Some(Tensor::from_f64(inputs[0].shape().to_vec(), &gp).unwrap())]
    }
}

/// Projects `points[..., 3]` into every view.
///
/// Returns a `[N, P, 3]` tensor of `(u, v, dist)` in feature-plane pixels
/// and meters, plus a `[N * P]` flag that is false where the point lies at
/// or behind the camera plane. Differentiable with respect to the points;
/// entries behind the camera carry `(u, v) = (-1, -1)` and no gradient
/// through `u, v`.
pub fn project_points<T: Real>(g: &mut Graph<T>, points: Var, views: &[CameraView]) -> TResult<(Var, Vec<bool>)> {
    let pts = g.value(points).to_f64_vec();
    let np = pts.len() / 3;
    let mut out = Vec::with_capacity(views.len() * np * 3);
    let mut in_front = Vec::with_capacity(views.len() * np);
    let mut jacobians = Vec::with_capacity(views.len() * np);
    for view in views {
        let rt = view.pose.rotation.transpose();
        let k = &view.intrinsics;
        let (sx, sy) = view.feat_scale();
        for p in pts.chunks_exact(3) {
            let pw = Vector3::new(p[0], p[1], p[2]);
            let pr = project(&pw, view);
            out.extend_from_slice(&[pr.u, pr.v, pr.dist]);
            let front = pr.z_cam > Z_MIN;
            in_front.push(front);
            let mut jac = [0.0; 9];
            let rel = pw - view.pose.translation;
            if pr.dist > 0.0 {
                for c in 0..3 {
                    jac[6 + c] = rel[c] / pr.dist;
                }
            }
            if front {
                let pc = rt * rel;
                let iz = 1.0 / pc.z;
                for c in 0..3 {
                    // Row i of Rᵀ is d(p_cam_i)/d(p).
                    let (dx, dy, dz) = (rt[(0, c)], rt[(1, c)], rt[(2, c)]);
                    jac[c] = sx * k.fx * (dx * iz - pc.x * iz * iz * dz);
                    jac[3 + c] = sy * k.fy * (dy * iz - pc.y * iz * iz * dz);
                }
            }
            jacobians.push(jac);
        }
    }
    let value = Tensor::from_f64(vec![views.len(), np, 3], &out)?;
    let flops = (views.len() * np * 30) as u64;
    let v = g.custom(&[points], value, Box::new(ProjectOp { jacobians }), flops);
    Ok((v, in_front))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_intr() -> Intrinsics {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        }
    }

    #[test]
    fn optical_axis_projection() {
        let view = CameraView::new(Pose::identity(), unit_intr(), 1, 1);
        let pr = project(&Vector3::new(0.0, 0.0, 1.0), &view);
        assert_eq!((pr.u_img, pr.v_img, pr.dist), (0.0, 0.0, 1.0));
        assert!(pr.valid);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let view = CameraView::new(Pose::identity(), unit_intr(), 1, 1);
        assert!(!project(&Vector3::new(0.0, 0.0, -1.0), &view).valid);
    }

    #[test]
    fn voxel_centres_closed_form() {
        let g = VoxelGrid::new([0.0; 3], [2.0; 3], [2, 2, 2]).unwrap();
        let c = g.centers();
        assert_eq!(c.len(), 8);
        for p in &c {
            for v in p {
                assert!(*v == 0.5 || *v == 1.5);
            }
        }
        assert_eq!(c[1], [0.5, 0.5, 1.5]);
        let one = VoxelGrid::new([1.0, 2.0, 3.0], [4.0, 2.0, 1.0], [1, 1, 1]).unwrap();
        assert_eq!(one.centers(), vec![[3.0, 3.0, 3.5]]);
    }

    #[test]
    fn centres_inside_half_open_bounds() {
        let g = VoxelGrid::new([-1.0, 0.5, 0.0], [6.4, 6.4, 3.2], [16, 16, 8]).unwrap();
        for p in g.centers() {
            for a in 0..3 {
                assert!(p[a] >= g.origin[a] && p[a] < g.origin[a] + g.extent[a]);
            }
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let pose = Pose::look_at(Vector3::new(1.0, 2.0, 1.5), Vector3::new(3.0, 3.0, 0.5));
        let intr = Intrinsics {
            fx: 70.0,
            fy: 70.0,
            cx: 47.5,
            cy: 35.5,
            width: 96,
            height: 72,
        };
        let r = generate_rays(&pose, &intr, &[(47.5, 35.5)]);
        assert_abs_diff_eq!(r[0].direction, pose.rotation * Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn mirror_is_involution() {
        let pose = Pose::look_at(Vector3::new(1.0, 2.0, 1.5), Vector3::new(3.0, 3.0, 0.5));
        let plane = MirrorPlane { y0: 3.2 };
        let back = plane.pose(&plane.pose(&pose));
        assert_abs_diff_eq!(back.rotation, pose.rotation, epsilon = 1e-9);
        assert_abs_diff_eq!(back.translation, pose.translation, epsilon = 1e-9);
        plane.pose(&pose).validate().unwrap();
    }

    #[test]
    fn matrix_round_trip() {
        let pose = Pose::look_at(Vector3::new(1.0, 2.0, 1.5), Vector3::new(3.0, 3.0, 0.5));
        let back = Pose::from_matrix(&pose.to_matrix()).unwrap();
        assert_eq!(back, pose);
        assert!(Pose::from_matrix(&[0.0; 16]).is_err());
    }
}
