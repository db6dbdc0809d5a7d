//! Procedural desk-scale rooms with coloured boxes, and an exact ray-cast
//! renderer producing RGB and Euclidean depth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxdet_tensor::par;

use crate::boxes::{iou_3d, Box3D};
use crate::geometry::{generate_rays, Intrinsics, Pose, Ray};
use crate::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["crate", "slab", "pillar"];

const AMBIENT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room_extent: [f64; 3],
    pub objects_min: usize,
    pub objects_max: usize,
    pub num_classes: usize,
    /// Minimum horizontal clearance between placed objects (meters).
    pub min_gap: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room_extent: [6.4, 6.4, 3.2],
            objects_min: 2,
            objects_max: 6,
            num_classes: 3,
            min_gap: 0.1,
            max_retries: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub floor_color: [f64; 3],
    /// -x, +x, -y, +y walls.
    pub wall_colors: [[f64; 3]; 4],
    pub ceiling_color: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn room_center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.room_min[a] + self.room_max[a]))
    }

    pub fn room_diagonal(&self) -> f64 {
        (0..3).map(|a| (self.room_max[a] - self.room_min[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Size range per axis for each class: (min, max) of x/y footprint and height.
fn class_prior(class_id: usize) -> ((f64, f64), (f64, f64), [f64; 3]) {
    match class_id % 3 {
        // roughly cubic
        0 => ((0.55, 0.95), (0.5, 0.9), [0.85, 0.45, 0.2]),
        // wide and low
        1 => ((1.0, 1.6), (0.45, 0.6), [0.2, 0.45, 0.85]),
        // thin and tall
        _ => ((0.45, 0.6), (1.4, 2.2), [0.25, 0.8, 0.3]),
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    if config.objects_min > config.objects_max || config.num_classes == 0 {
        return Err(Error::Invalid(format!("bad scene config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = config.room_extent;
    let n = rng.gen_range(config.objects_min..=config.objects_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let margin = 0.15;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..config.max_retries {
            let class_id = rng.gen_range(0..config.num_classes);
            let ((f0, f1), (h0, h1), color) = class_prior(class_id);
            let size = [rng.gen_range(f0..f1), rng.gen_range(f0..f1), rng.gen_range(h0..h1).min(ext[2] - 0.2)];
            let lo = [margin + size[0] / 2.0, margin + size[1] / 2.0];
            let hi = [ext[0] - margin - size[0] / 2.0, ext[1] - margin - size[1] / 2.0];
            if lo[0] >= hi[0] || lo[1] >= hi[1] {
                continue;
            }
            let center = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), size[2] / 2.0];
            let cand = Box3D::new(center, size, class_id);
            let clear = objects.iter().all(|o| {
                let b = &o.bbox;
                (0..2).any(|a| (b.center[a] - cand.center[a]).abs() >= 0.5 * (b.size[a] + cand.size[a]) + config.min_gap)
            });
            if clear {
                debug_assert!(objects.iter().all(|o| iou_3d(&o.bbox, &cand) == 0.0));
                objects.push(SceneObject {
                    bbox: cand,
                    albedo: jitter_color(&mut rng, color, 0.08),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place object {} of {n} after {} retries (seed {seed})",
                objects.len() + 1,
                config.max_retries
            )));
        }
    }
    Ok(SceneSpec {
        room_min: [0.0; 3],
        room_max: ext,
        objects,
        floor_color: jitter_color(&mut rng, [0.55, 0.5, 0.45], 0.05),
        wall_colors: std::array::from_fn(|_| jitter_color(&mut rng, [0.78, 0.78, 0.74], 0.05)),
        ceiling_color: jitter_color(&mut rng, [0.9, 0.9, 0.9], 0.03),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    /// Index into `scene.objects`, or `None` for room surfaces.
    pub object: Option<usize>,
    pub color: [f64; 3],
}

/// Slab test; returns the entry distance and the entry face normal.
fn ray_box(ray: &Ray, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d.abs() < 1e-15 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
        }
        t1 = t1.min(tb);
    }
    if t0 > t1 || t0 <= 0.0 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -ray.direction[axis].signum();
    Some((t0, n))
}

pub fn trace(scene: &SceneSpec, ray: &Ray) -> Hit {
    // Room: exit through the nearest wall.
    let mut best = Hit {
        t: f64::INFINITY,
        normal: Vector3::zeros(),
        object: None,
        color: [0.0; 3],
    };
    for a in 0..3 {
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            continue;
        }
        let (bound, face) = if d > 0.0 { (scene.room_max[a], 1) } else { (scene.room_min[a], 0) };
        let t = (bound - ray.origin[a]) / d;
        if t > 0.0 && t < best.t {
            let mut n = Vector3::zeros();
            n[a] = if face == 1 { -1.0 } else { 1.0 };
            let color = match (a, face) {
                (2, 0) => scene.floor_color,
                (2, _) => scene.ceiling_color,
                (ax, f) => scene.wall_colors[ax * 2 + f],
            };
            best = Hit {
                t,
                normal: n,
                object: None,
                color,
            };
        }
    }
    for (i, o) in scene.objects.iter().enumerate() {
        if let Some((t, n)) = ray_box(ray, o.bbox.min(), o.bbox.max()) {
            if t < best.t {
                best = Hit {
                    t,
                    normal: n,
                    object: Some(i),
                    color: o.albedo,
                };
            }
        }
    }
    best
}

pub fn light_direction() -> Vector3<f64> {
    Vector3::new(0.3, 0.5, 0.8).normalize()
}

pub fn shade(hit: &Hit) -> [f64; 3] {
    let lambert = hit.normal.dot(&light_direction()).max(0.0);
    let f = AMBIENT + (1.0 - AMBIENT) * lambert;
    hit.color.map(|c| (c * f).clamp(0.0, 1.0))
}

/// Rendered view: `rgb` is `[h, w, 3]` in `[0, 1]`, `depth` is `[h, w]` in
/// meters (Euclidean distance to the hit), `ids` is the object hit per pixel.
pub struct Render {
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub ids: Vec<Option<usize>>,
}

pub fn render_view(scene: &SceneSpec, pose: &Pose, intr: &Intrinsics) -> Render {
    let (w, h) = (intr.width, intr.height);
    let rows = par::map_range(h, |y| {
        let pixels: Vec<(f64, f64)> = (0..w).map(|x| (x as f64, y as f64)).collect();
        generate_rays(pose, intr, &pixels)
            .iter()
            .map(|r| {
                let hit = trace(scene, r);
                (shade(&hit), hit.t, hit.object)
            })
            .collect::<Vec<_>>()
    });
    let mut out = Render {
        rgb: Vec::with_capacity(w * h * 3),
        depth: Vec::with_capacity(w * h),
        ids: Vec::with_capacity(w * h),
    };
    for (c, t, id) in rows.into_iter().flatten() {
        out.rgb.extend(c.iter().map(|&v| v as f32));
        out.depth.push(t as f32);
        out.ids.push(id);
    }
    out
}

/// Pixel count per object in one view.
pub fn visible_pixels(scene: &SceneSpec, render: &Render) -> Vec<usize> {
    let mut counts = vec![0; scene.objects.len()];
    for id in render.ids.iter().flatten() {
        counts[*id] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
    /// Distance of the camera ring from the room centre (meters).
    pub ring_radius: f64,
    pub height_range: [f64; 2],
    pub min_visible_pixels: usize,
    pub max_retries: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 96,
            height: 72,
            hfov_deg: 68.0,
            ring_radius: 2.7,
            height_range: [1.4, 2.0],
            min_visible_pixels: 25,
            max_retries: 200,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        let fx = 0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Cameras on a jittered ring looking at a jittered room-centre target.
/// Every camera must see at least one object with `min_visible_pixels`.
pub fn place_cameras(scene: &SceneSpec, n_views: usize, config: &CameraConfig, seed: u64) -> Result<Vec<(Pose, Intrinsics)>> {
    if n_views == 0 {
        return Err(Error::Invalid("n_views must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca3e);
    let intr = config.intrinsics();
    let c = scene.room_center();
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n_views as f64;
    let mut out = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let mut found = None;
        for _ in 0..config.max_retries {
            let theta = phase + step * i as f64 + rng.gen_range(-0.3..0.3) * step.min(1.0);
            let r = config.ring_radius + rng.gen_range(-0.15..0.15);
            let eye = Vector3::new(
                c[0] + r * theta.cos(),
                c[1] + r * theta.sin(),
                rng.gen_range(config.height_range[0]..config.height_range[1]),
            );
            let inside_room = (0..3).all(|a| eye[a] > scene.room_min[a] + 0.05 && eye[a] < scene.room_max[a] - 0.05);
            let inside_object = scene.objects.iter().any(|o| {
                let mut b = o.bbox;
                b.size = b.size.map(|s| s + 0.3);
                b.contains(&[eye.x, eye.y, eye.z])
            });
            if !inside_room || inside_object {
                continue;
            }
            let target = Vector3::new(
                c[0] + rng.gen_range(-0.3..0.3),
                c[1] + rng.gen_range(-0.3..0.3),
                0.6 + rng.gen_range(-0.2..0.2),
            );
            let pose = Pose::look_at(eye, target);
            if scene.objects.is_empty() {
                found = Some(pose);
                break;
            }
            let render = render_view(scene, &pose, &intr);
            if visible_pixels(scene, &render).iter().any(|&n| n >= config.min_visible_pixels) {
                found = Some(pose);
                break;
            }
        }
        let pose = found.ok_or_else(|| {
            Error::Placement(format!("camera {i} sees no object after {} retries (scene seed {})", config.max_retries, scene.seed))
        })?;
        out.push((pose, intr));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_scene() -> SceneSpec {
        SceneSpec {
            room_min: [0.0; 3],
            room_max: [6.4, 6.4, 3.2],
            objects: vec![],
            floor_color: [0.5; 3],
            wall_colors: [[0.7; 3]; 4],
            ceiling_color: [0.9; 3],
            seed: 0,
        }
    }

    fn facing_plus_x(eye: [f64; 3]) -> Pose {
        let e = Vector3::from(eye);
        Pose::look_at(e, e + Vector3::x())
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(sample_scene(42, &cfg).unwrap(), sample_scene(42, &cfg).unwrap());
        assert_ne!(sample_scene(42, &cfg).unwrap(), sample_scene(43, &cfg).unwrap());
    }

    #[test]
    fn empty_room_renders_room_colours_only() {
        let scene = empty_scene();
        let intr = CameraConfig::default().intrinsics();
        let r = render_view(&scene, &facing_plus_x([3.2, 3.2, 1.6]), &intr);
        assert!(r.ids.iter().all(|i| i.is_none()));
    }

    #[test]
    fn wall_depth_on_axis() {
        let scene = empty_scene();
        let intr = Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 2.0,
            cy: 2.0,
            width: 5,
            height: 5,
        };
        let r = render_view(&scene, &facing_plus_x([1.0, 3.2, 1.6]), &intr);
        assert!((r.depth[2 * 5 + 2] as f64 - 5.4).abs() < 1e-5);
    }

    #[test]
    fn nearer_box_occludes() {
        let mut scene = empty_scene();
        scene.objects.push(SceneObject {
            bbox: Box3D::new([4.0, 3.2, 1.6], [0.5, 0.5, 0.5], 0),
            albedo: [1.0, 0.0, 0.0],
        });
        scene.objects.push(SceneObject {
            bbox: Box3D::new([3.0, 3.2, 1.6], [0.5, 0.5, 0.5], 1),
            albedo: [0.0, 0.0, 1.0],
        });
        let intr = Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 2.0,
            cy: 2.0,
            width: 5,
            height: 5,
        };
        let r = render_view(&scene, &facing_plus_x([1.0, 3.2, 1.6]), &intr);
        let c = 2 * 5 + 2;
        assert_eq!(r.ids[c], Some(1));
        assert!((r.depth[c] as f64 - 1.75).abs() < 1e-6);
        assert_eq!(r.rgb[3 * c], 0.0);
        assert!(r.rgb[3 * c + 2] > 0.0);
    }

    #[test]
    fn cameras_inside_room_and_deterministic() {
        let scene = sample_scene(3, &SceneConfig::default()).unwrap();
        let cfg = CameraConfig::default();
        let a = place_cameras(&scene, 8, &cfg, 9).unwrap();
        assert_eq!(a, place_cameras(&scene, 8, &cfg, 9).unwrap());
        for (p, _) in &a {
            for ax in 0..3 {
                assert!(p.translation[ax] > 0.0 && p.translation[ax] < scene.room_max[ax]);
            }
        }
    }

    #[test]
    fn zero_views_rejected() {
        let scene = sample_scene(3, &SceneConfig::default()).unwrap();
        assert!(place_cameras(&scene, 0, &CameraConfig::default(), 0).is_err());
    }
}
