//! On-disk dataset: generation, export and import.
//!
//! ```text
//! <root>/scenes/<scene_id>/meta.json
//! <root>/scenes/<scene_id>/images/view_%03d.ppm
//! <root>/scenes/<scene_id>/depth/view_%03d.pfm
//! <root>/scenes/<scene_id>/boxes.json
//! <root>/manifest.json
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxdet_tensor::par;

use crate::boxes::Box3D;
use crate::error::{io_err, json_err};
use crate::geometry::{Intrinsics, Pose};
use crate::scene::{place_cameras, render_view, sample_scene, visible_pixels, CameraConfig, SceneConfig, SceneSpec, CLASS_NAMES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_scenes: usize,
    /// Scenes held out for evaluation (the last ones); capped so at least one
    /// training scene remains.
    pub num_eval: usize,
    pub views_min: usize,
    pub views_max: usize,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    /// Minimum pixels per object summed over all views of a scene.
    pub min_object_pixels: usize,
    pub max_scene_retries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            num_scenes: 40,
            num_eval: 8,
            views_min: 8,
            views_max: 12,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            min_object_pixels: 25,
            max_scene_retries: 50,
        }
    }
}

impl DataConfig {
    pub fn split_sizes(&self) -> (usize, usize) {
        let eval = self.num_eval.min(self.num_scenes.saturating_sub(1));
        (self.num_scenes - eval, eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// `[h, w, 3]` in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// `[h, w]` meters.
    pub depth: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub boxes: Vec<Box3D>,
    pub views: Vec<ViewData>,
}

impl SceneData {
    pub fn room_center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.room_min[a] + self.room_max[a]))
    }

    pub fn room_diagonal(&self) -> f64 {
        (0..3).map(|a| (self.room_max[a] - self.room_min[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub splits: Splits,
    pub images: Vec<String>,
    pub config: serde_json::Value,
    pub build_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub intrinsics: Vec<Intrinsics>,
    /// Camera-to-world, row-major 4x4.
    pub poses: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub room: RoomBounds,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<SceneData>,
    pub eval: Vec<SceneData>,
}

/// 64-bit mix used to derive independent child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

fn quantize(rgb: &[f32]) -> Vec<f32> {
    rgb.iter().map(|&v| to_byte(v) as f32 / 255.0).collect()
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Builds one scene with every object visible; resamples cameras and then the
/// scene itself on failure.
pub fn generate_scene(index: usize, config: &DataConfig) -> Result<(SceneSpec, SceneData)> {
    let base = mix_seed(config.seed, index as u64);
    let mut last_err = None;
    for attempt in 0..config.max_scene_retries.max(1) {
        let seed = mix_seed(base, attempt as u64);
        let spec = match sample_scene(seed, &config.scene) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_views = rng.gen_range(config.views_min..=config.views_max.max(config.views_min));
        let cams = match place_cameras(&spec, n_views, &config.camera, seed) {
            Ok(c) => c,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let mut counts = vec![0usize; spec.objects.len()];
        let mut views = Vec::with_capacity(n_views);
        for (pose, intr) in cams {
            let r = render_view(&spec, &pose, &intr);
            for (c, n) in counts.iter_mut().zip(visible_pixels(&spec, &r)) {
                *c += n;
            }
            views.push(ViewData {
                pose,
                intrinsics: intr,
                rgb: quantize(&r.rgb),
                depth: r.depth,
            });
        }
        if counts.iter().any(|&c| c < config.min_object_pixels) {
            last_err = Some(Error::Placement(format!("scene {index}: object below visibility floor")));
            continue;
        }
        let data = SceneData {
            id: scene_id(index),
            room_min: spec.room_min,
            room_max: spec.room_max,
            boxes: spec.boxes(),
            views,
        };
        return Ok((spec, data));
    }
    Err(last_err.unwrap_or_else(|| Error::Placement(format!("scene {index}"))))
}

pub fn generate(config: &DataConfig) -> Result<Vec<SceneData>> {
    if config.views_min == 0 || config.views_min > config.views_max {
        return Err(Error::Config(format!("bad view range {}..={}", config.views_min, config.views_max)));
    }
    par::map_range(config.num_scenes, |i| generate_scene(i, config).map(|(_, d)| d))
        .into_iter()
        .collect()
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Format(format!("ppm payload {} != {}x{}x3", rgb.len(), width, height)));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend(rgb.iter().map(|&v| to_byte(v)));
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ascii header".into()))
}

fn parse_usize(tok: &str) -> Result<usize> {
    tok.parse().map_err(|_| Error::Format(format!("bad integer {tok:?}")))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    if header_token(&bytes, &mut pos)? != "P6" {
        return Err(Error::Format(format!("{}: not a P6 file", path.display())));
    }
    let w = parse_usize(header_token(&bytes, &mut pos)?)?;
    let h = parse_usize(header_token(&bytes, &mut pos)?)?;
    if header_token(&bytes, &mut pos)? != "255" {
        return Err(Error::Format(format!("{}: only 8-bit ppm supported", path.display())));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Format(format!("{}: short payload", path.display())))?;
    Ok((w, h, data.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Grayscale little-endian PFM; rows stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Format(format!("pfm payload {} != {}x{}", data.len(), width, height)));
    }
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    if header_token(&bytes, &mut pos)? != "Pf" {
        return Err(Error::Format(format!("{}: not a grayscale PFM", path.display())));
    }
    let w = parse_usize(header_token(&bytes, &mut pos)?)?;
    let h = parse_usize(header_token(&bytes, &mut pos)?)?;
    let scale: f64 = header_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad pfm scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Format(format!("{}: big-endian PFM not supported", path.display())));
    }
    pos += 1;
    let payload = bytes.get(pos..pos + w * h * 4).ok_or_else(|| Error::Format(format!("{}: short payload", path.display())))?;
    let mut out = vec![0f32; w * h];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let (row, col) = (h - 1 - i / w, i % w);
        out[row * w + col] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Ok((w, h, out))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(s.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(io_err(path))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(json_err(path))
}

pub fn export_scene(scene: &SceneData, root: &Path) -> Result<Vec<String>> {
    let dir = root.join("scenes").join(&scene.id);
    for sub in ["images", "depth"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
    }
    let meta = SceneMeta {
        scene_id: scene.id.clone(),
        intrinsics: scene.views.iter().map(|v| v.intrinsics).collect(),
        poses: scene.views.iter().map(|v| v.pose.to_matrix().to_vec()).collect(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        room: RoomBounds {
            min: scene.room_min,
            max: scene.room_max,
        },
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_json(&dir.join("boxes.json"), &scene.boxes)?;
    let mut images = Vec::new();
    for (i, v) in scene.views.iter().enumerate() {
        let (w, h) = (v.intrinsics.width, v.intrinsics.height);
        let rel = format!("scenes/{}/images/view_{i:03}.ppm", scene.id);
        write_ppm(&root.join(&rel), w, h, &v.rgb)?;
        write_pfm(&dir.join(format!("depth/view_{i:03}.pfm")), w, h, &v.depth)?;
        images.push(rel);
    }
    Ok(images)
}

/// Writes every scene and a manifest whose first `n_train` ids form the
/// training split.
pub fn export_dataset(scenes: &[SceneData], n_train: usize, root: &Path, seed: u64, config: serde_json::Value, build_id: &str) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut images = Vec::new();
    for s in scenes {
        images.extend(export_scene(s, root)?);
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let n_train = n_train.min(ids.len());
    let manifest = Manifest {
        seed,
        splits: Splits {
            train: ids[..n_train].to_vec(),
            eval: ids[n_train..].to_vec(),
        },
        images,
        config,
        build_id: build_id.to_string(),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn import_scene(root: &Path, id: &str) -> Result<SceneData> {
    let dir = root.join("scenes").join(id);
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    let boxes: Vec<Box3D> = read_json(&dir.join("boxes.json"))?;
    if meta.poses.len() != meta.intrinsics.len() {
        return Err(Error::Format(format!("{id}: {} poses vs {} intrinsics", meta.poses.len(), meta.intrinsics.len())));
    }
    let mut views = Vec::with_capacity(meta.poses.len());
    for (i, (m, intr)) in meta.poses.iter().zip(&meta.intrinsics).enumerate() {
        let pose = Pose::from_matrix(m)?;
        let (w, h, rgb) = read_ppm(&dir.join(format!("images/view_{i:03}.ppm")))?;
        let (dw, dh, depth) = read_pfm(&dir.join(format!("depth/view_{i:03}.pfm")))?;
        if (w, h) != (intr.width, intr.height) || (dw, dh) != (w, h) {
            return Err(Error::Format(format!("{id} view {i}: image size mismatch")));
        }
        views.push(ViewData {
            pose,
            intrinsics: *intr,
            rgb,
            depth,
        });
    }
    Ok(SceneData {
        id: meta.scene_id,
        room_min: meta.room.min,
        room_max: meta.room.max,
        boxes,
        views,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    let load = |ids: &[String]| ids.iter().map(|id| import_scene(root, id)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        root: root.to_path_buf(),
        train: load(&manifest.splits.train)?,
        eval: load(&manifest.splits.eval)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DataConfig {
        DataConfig {
            num_scenes: 2,
            num_eval: 1,
            views_min: 2,
            views_max: 3,
            ..DataConfig::default()
        }
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let data: Vec<f32> = (0..12).map(|i| (i as f32).sqrt() * 1.37 + f32::EPSILON).collect();
        write_pfm(&p, 4, 3, &data).unwrap();
        let (w, h, back) = read_pfm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"Pf\n4 3\n-1.0\n"));
    }

    #[test]
    fn ppm_header_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        write_ppm(&p, 2, 1, &[0.0, 0.5, 1.0, 1.5, -0.2, 0.25]).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(raw, b"P6\n2 1\n255\n\x00\x80\xff\xff\x00\x40");
        let (_, _, back) = read_ppm(&p).unwrap();
        assert_eq!(back[2], 1.0);
    }

    #[test]
    fn split_sizes_keep_a_training_scene() {
        assert_eq!(DataConfig::default().split_sizes(), (32, 8));
        let one = DataConfig {
            num_scenes: 1,
            ..DataConfig::default()
        };
        assert_eq!(one.split_sizes(), (1, 0));
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = small_config();
        let scenes = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_dataset(&scenes, 1, dir.path(), cfg.seed, serde_json::json!({"k": 1}), "test").unwrap();
        let total: usize = scenes.iter().map(|s| s.views.len()).sum();
        assert_eq!(m.images.len(), total);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len() + ds.eval.len(), 2);
        for (a, b) in scenes.iter().zip(ds.train.iter().chain(&ds.eval)) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.views.len(), b.views.len());
            for (va, vb) in a.views.iter().zip(&b.views) {
                let (ma, mb) = (va.pose.to_matrix(), vb.pose.to_matrix());
                assert!(ma.iter().zip(mb.iter()).all(|(x, y)| (x - y).abs() <= 1e-9));
                assert_eq!(va.rgb, vb.rgb);
                assert_eq!(va.depth, vb.depth);
            }
        }
    }
}
