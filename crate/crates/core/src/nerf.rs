//! Radiance-field branch: density and colour MLPs over multi-view point
//! descriptors, alpha compositing along rays, and the opacity field used to
//! modulate detection features.

use rand::Rng;
use voxdet_tensor::{CustomOp, Graph, InitSpec, ParamId, ParamStore, Real, Tensor, Var};

use crate::geometry::{CameraView, Ray};
use crate::volume::{build_multiview_volume, mean_fuse, view_sum, MultiViewVolume};
use crate::{Error, Result};

/// Samples along a set of rays plus their supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    /// `[R * K]`, increasing along each ray.
    pub t: Vec<f64>,
    /// `[R * K]`, positive.
    pub deltas: Vec<f64>,
    /// `[R * 3]`.
    pub gt_rgb: Vec<f64>,
    /// `[R]`.
    pub gt_depth: Vec<f64>,
    pub samples_per_ray: usize,
}

impl RayBatch {
    pub fn num_rays(&self) -> usize {
        self.origins.len()
    }

    /// Sample positions `[R * K, 3]`.
    pub fn points(&self) -> Vec<f64> {
        let k = self.samples_per_ray;
        let mut out = Vec::with_capacity(self.t.len() * 3);
        for (r, (o, d)) in self.origins.iter().zip(&self.directions).enumerate() {
            for &t in &self.t[r * k..(r + 1) * k] {
                out.extend((0..3).map(|a| o[a] + t * d[a]));
            }
        }
        out
    }

    pub fn directions_per_sample(&self) -> Vec<f64> {
        let k = self.samples_per_ray;
        self.directions.iter().flat_map(|d| std::iter::repeat_n(d.iter().copied(), k).flatten()).collect()
    }
}

/// `k` samples per ray in `[near, far]`: bin centres, or one uniform draw
/// per bin when `stratified`. Deltas are forward differences, with the bin
/// width for the last sample.
pub fn sample_along_rays<R: Rng>(rays: &[Ray], near: f64, far: f64, k: usize, stratified: bool, rng: &mut R) -> Result<RayBatch> {
    if k < 1 {
        return Err(Error::Invalid("need at least one sample per ray".into()));
    }
    if !(near > 0.0 && far > near) {
        return Err(Error::Invalid(format!("need 0 < near < far, got {near}, {far}")));
    }
    let bin = (far - near) / k as f64;
    let mut t = Vec::with_capacity(rays.len() * k);
    let mut deltas = Vec::with_capacity(rays.len() * k);
    for _ in rays {
        let start = t.len();
        for i in 0..k {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            t.push(near + (i as f64 + u) * bin);
        }
        for i in 0..k {
            deltas.push(if i + 1 < k { t[start + i + 1] - t[start + i] } else { bin });
        }
    }
    Ok(RayBatch {
        origins: rays.iter().map(|r| r.origin.into()).collect(),
        directions: rays.iter().map(|r| r.direction.into()).collect(),
        t,
        deltas,
        gt_rgb: vec![0.0; rays.len() * 3],
        gt_depth: vec![0.0; rays.len()],
        samples_per_ray: k,
    })
}

#[derive(Clone, Debug)]
pub struct FieldParams {
    pub geo: Vec<(ParamId, ParamId)>,
    pub color: Vec<(ParamId, ParamId)>,
    pub descriptor_dim: usize,
}

fn mlp_layers<T: Real>(store: &mut ParamStore<T>, prefix: &str, widths: &[usize], last_bias: f64) -> Result<Vec<(ParamId, ParamId)>> {
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let last = i + 2 == widths.len();
        let bias = if last { InitSpec::Constant(last_bias) } else { InitSpec::Zeros };
        layers.push((
            store.add(&format!("{prefix}.l{i}.w"), &[w[0], w[1]], InitSpec::HeUniform { fan_in: w[0] })?,
            store.add(&format!("{prefix}.l{i}.b"), &[w[1]], bias)?,
        ));
    }
    Ok(layers)
}

impl FieldParams {
    /// Descriptor width is `2 * channels`.
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        let d = 2 * channels;
        Ok(FieldParams {
            geo: mlp_layers(store, &format!("{prefix}.geo"), &[d, hidden, hidden, 1], -1.0)?,
            color: mlp_layers(store, &format!("{prefix}.color"), &[d + 3, hidden, 3], 0.0)?,
            descriptor_dim: d,
        })
    }
}

fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, layers: &[(ParamId, ParamId)], mut x: Var) -> Result<Var> {
    for (i, &(w, b)) in layers.iter().enumerate() {
        let (w, b) = (g.param(store, w), g.param(store, b));
        x = g.linear(x, w, b)?;
        if i + 1 < layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Valid-view mean and population variance of a multi-view volume,
/// concatenated to `[P, 2c]`.
pub fn descriptor_from_volume<T: Real>(g: &mut Graph<T>, vm: &MultiViewVolume) -> Result<Var> {
    let mean = mean_fuse(g, vm, false)?.features;
    let sq = g.square(vm.features);
    let sq_sum = view_sum(g, sq)?;
    let cov = vm.coverage();
    let inv: Vec<f64> = cov.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
    let inv = g.constant(Tensor::from_f64(vec![vm.num_points, 1], &inv)?);
    let mean_sq = g.mul(sq_sum, inv)?;
    let m2 = g.square(mean);
    let var = g.sub(mean_sq, m2)?;
    Ok(g.concat(&[mean, var], 1)?)
}

pub fn point_descriptor<T: Real>(g: &mut Graph<T>, feature_maps: Var, views: &[CameraView], points: Var) -> Result<(Var, Vec<usize>)> {
    let vm = build_multiview_volume(g, feature_maps, views, points)?;
    Ok((descriptor_from_volume(g, &vm)?, vm.coverage()))
}

/// Density `softplus(geo(desc))`, shaped `[M, 1]`.
pub fn density<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, field: &FieldParams, desc: Var) -> Result<Var> {
    let logit = mlp(g, store, &field.geo, desc)?;
    Ok(g.softplus(logit))
}

/// Colour `sigmoid(color([desc, dir]))`, shaped `[M, 3]`.
pub fn color<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, field: &FieldParams, desc: Var, dirs: Var) -> Result<Var> {
    let x = g.concat(&[desc, dirs], 1)?;
    let logit = mlp(g, store, &field.color, x)?;
    Ok(g.sigmoid(logit))
}

/// `1 - exp(-sigma * delta_ref)`.
pub fn opacity_from_density<T: Real>(g: &mut Graph<T>, sigma: Var, delta_ref: f64) -> Result<Var> {
    if delta_ref <= 0.0 {
        return Err(Error::Invalid(format!("delta_ref must be positive, got {delta_ref}")));
    }
    let x = g.scale(sigma, -delta_ref);
    let e = g.exp(x);
    let ne = g.neg(e);
    Ok(g.add_scalar(ne, 1.0))
}

/// Opacity at arbitrary points from the multi-view volume already sampled
/// there.
pub fn opacity_at<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, field: &FieldParams, vm: &MultiViewVolume, delta_ref: f64) -> Result<Var> {
    let desc = descriptor_from_volume(g, vm)?;
    let sigma = density(g, store, field, desc)?;
    opacity_from_density(g, sigma, delta_ref)
}

/// Compositing of `[R, K]` densities and `[R, K, 3]` colours into `[R, 5]`
/// rows of `(r, g, b, depth, acc)`.
struct VolumeRenderOp {
    t: Vec<f64>,
    deltas: Vec<f64>,
    k: usize,
}

/// Per-ray transmittance-weighted sums. Returns weights `[R * K]` and
/// transmittance after each sample.
fn composite(sigma: &[f64], deltas: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; sigma.len()];
    let mut t_after = vec![0.0; sigma.len()];
    for (r, chunk) in sigma.chunks_exact(k).enumerate() {
        let mut trans = 1.0;
        for (i, &s) in chunk.iter().enumerate() {
            let j = r * k + i;
            let e = (-s * deltas[j]).exp();
            w[j] = trans * (1.0 - e);
            trans *= e;
            t_after[j] = trans;
        }
    }
    (w, t_after)
}

impl<T: Real> CustomOp<T> for VolumeRenderOp {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let sigma = inputs[0].to_f64_vec();
        let col = inputs[1].to_f64_vec();
        let gd = grad.to_f64_vec();
        let k = self.k;
        let (w, t_after) = composite(&sigma, &self.deltas, k);
        let mut gs = vec![0.0; sigma.len()];
        let mut gc = vec![0.0; col.len()];
        for r in 0..sigma.len() / k {
            let go = &gd[r * 5..r * 5 + 5];
            // Suffix of sum_{i>j} w_i e_i projected on the upstream grad.
            let mut suffix = 0.0;
            for i in (0..k).rev() {
                let j = r * k + i;
                let e_dot = go[0] * col[3 * j] + go[1] * col[3 * j + 1] + go[2] * col[3 * j + 2] + go[3] * self.t[j] + go[4];
                gs[j] = (t_after[j] * e_dot - suffix) * self.deltas[j];
                suffix += w[j] * e_dot;
                for ch in 0..3 {
                    gc[3 * j + ch] = go[ch] * w[j];
                }
            }
        }
        vec![
            Some(Tensor::from_f64(inputs[0].shape().to_vec(), &gs).unwrap()),
            Some(Tensor::from_f64(inputs[1].shape().to_vec(), &gc).unwrap()),
        ]
    }
}

/// Renders `(rgb, depth, acc)` as a `[R, 5]` tensor from per-sample
/// densities (`[R, K]` or `[R * K, 1]`) and colours (`[R, K, 3]` or
/// `[R * K, 3]`).
pub fn volume_render<T: Real>(g: &mut Graph<T>, batch: &RayBatch, sigma: Var, colors: Var) -> Result<Var> {
    let k = batch.samples_per_ray;
    let m = batch.t.len();
    if g.value(sigma).numel() != m || g.value(colors).numel() != 3 * m {
        return Err(Error::Invalid(format!(
            "volume_render expects {m} densities and colours, got {:?} and {:?}",
            g.shape(sigma),
            g.shape(colors)
        )));
    }
    let s = g.value(sigma).to_f64_vec();
    let c = g.value(colors).to_f64_vec();
    let (w, t_after) = composite(&s, &batch.deltas, k);
    let mut out = vec![0.0; batch.num_rays() * 5];
    for r in 0..batch.num_rays() {
        let o = &mut out[r * 5..r * 5 + 5];
        for i in 0..k {
            let j = r * k + i;
            for ch in 0..3 {
                o[ch] += w[j] * c[3 * j + ch];
            }
            o[3] += w[j] * batch.t[j];
        }
        // Equal to the weight sum, without its rounding above one.
        o[4] = 1.0 - t_after[r * k + k - 1];
    }
    let value = Tensor::from_f64(vec![batch.num_rays(), 5], &out)?;
    let op = VolumeRenderOp {
        t: batch.t.clone(),
        deltas: batch.deltas.clone(),
        k,
    };
    Ok(g.custom(&[sigma, colors], value, Box::new(op), (12 * m) as u64))
}

/// Full branch forward: descriptors at the batch's sample points, density,
/// colour and compositing. Returns the `[R, 5]` render.
pub fn render_rays<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    field: &FieldParams,
    feature_maps: Var,
    views: &[CameraView],
    batch: &RayBatch,
) -> Result<Var> {
    let m = batch.t.len();
    let pts = g.constant(Tensor::from_f64(vec![m, 3], &batch.points())?);
    let (desc, _) = point_descriptor(g, feature_maps, views, pts)?;
    let sigma = density(g, store, field, desc)?;
    let dirs = g.constant(Tensor::from_f64(vec![m, 3], &batch.directions_per_sample())?);
    let rgb = color(g, store, field, desc, dirs)?;
    volume_render(g, batch, sigma, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray() -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::x(),
        }
    }

    fn batch_with(t: Vec<f64>, deltas: Vec<f64>) -> RayBatch {
        let k = t.len();
        RayBatch {
            origins: vec![[0.0; 3]],
            directions: vec![[1.0, 0.0, 0.0]],
            t,
            deltas,
            gt_rgb: vec![0.0; 3],
            gt_depth: vec![0.0],
            samples_per_ray: k,
        }
    }

    #[test]
    fn uniform_bin_centres() {
        let b = sample_along_rays(&[ray()], 1.0, 3.0, 2, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.t, vec![1.5, 2.5]);
        assert_eq!(b.deltas, vec![1.0, 1.0]);
    }

    #[test]
    fn stratified_within_bins_and_seeded() {
        let rays = vec![ray(); 4];
        let a = sample_along_rays(&rays, 0.5, 4.5, 8, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_along_rays(&rays, 0.5, 4.5, 8, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        for r in 0..4 {
            for i in 0..8 {
                let t = a.t[r * 8 + i];
                assert!(t >= 0.5 + i as f64 * 0.5 && t <= 0.5 + (i + 1) as f64 * 0.5);
            }
        }
        assert!(a.deltas.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn bad_sampling_args_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_along_rays(&[ray()], 1.0, 3.0, 0, false, &mut rng).is_err());
        assert!(sample_along_rays(&[ray()], 2.0, 1.0, 4, false, &mut rng).is_err());
    }

    #[test]
    fn half_alpha_single_sample() {
        let mut g = Graph::<f64>::new();
        let b = batch_with(vec![2.0], vec![1.0]);
        let s = g.constant(Tensor::from_f64(vec![1, 1], &[std::f64::consts::LN_2]).unwrap());
        let c = g.constant(Tensor::from_f64(vec![1, 3], &[0.2, 0.4, 0.8]).unwrap());
        let out = volume_render(&mut g, &b, s, c).unwrap();
        let o = g.value(out).data();
        for (got, want) in o.iter().zip([0.1, 0.2, 0.4, 1.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let mut g = Graph::<f64>::new();
        let b = batch_with(vec![1.0, 2.0, 3.0], vec![1.0; 3]);
        let s = g.constant(Tensor::zeros(vec![3, 1]));
        let c = g.constant(Tensor::full(vec![3, 3], 0.5));
        let out = volume_render(&mut g, &b, s, c).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_first_sample_occludes() {
        let mut g = Graph::<f64>::new();
        let b = batch_with(vec![1.0, 2.0], vec![1.0, 1.0]);
        let s = g.constant(Tensor::from_f64(vec![2, 1], &[1e3, 1e3]).unwrap());
        let c = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let out = volume_render(&mut g, &b, s, c).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn opacity_values() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(vec![3, 1], &[0.0, std::f64::consts::LN_2 / 0.4, 5.0]).unwrap());
        let a = opacity_from_density(&mut g, s, 0.4).unwrap();
        let d = g.value(a).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!(d[2] > d[1] && d[2] < 1.0);
    }

    #[test]
    fn identical_views_have_zero_variance() {
        let mut g = Graph::<f64>::new();
        let f = Tensor::from_f64(vec![1, 2, 2], &[0.3, -1.2, 2.0, 0.5]).unwrap();
        let mut both = f.data().to_vec();
        both.extend_from_slice(f.data());
        let vm = MultiViewVolume {
            features: g.constant(Tensor::new(vec![2, 2, 2], both).unwrap()),
            valid: vec![true; 4],
            dist: g.constant(Tensor::zeros(vec![2, 2, 1])),
            num_views: 2,
            num_points: 2,
            channels: 2,
        };
        let d = descriptor_from_volume(&mut g, &vm).unwrap();
        let v = g.value(d).data();
        assert_eq!(&v[0..2], &[0.3, -1.2]);
        assert_eq!(&v[2..4], &[0.0, 0.0]);
        assert_eq!(&v[6..8], &[0.0, 0.0]);
    }
}
