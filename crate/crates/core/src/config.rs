//! Run configuration: one JSON document, validated before any work, with
//! dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DataConfig;
use crate::error::{io_err, json_err};
use crate::msan::{FusionMode, ModelConfig, OffsetMode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate ramp length in iterations; 0 disables it.
    #[serde(default)]
    pub warmup_iters: usize,
    /// Learning rate at the last iteration relative to `lr`; 1 keeps it
    /// constant.
    #[serde(default = "one")]
    pub final_lr_ratio: f64,
    /// Learning-rate multiplier for the sampling-offset convolutions.
    #[serde(default = "one")]
    pub offset_lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_iters: 100,
            final_lr_ratio: 0.05,
            offset_lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub views_per_iter: usize,
    pub rays_per_iter: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub flip_augment: bool,
    pub flip_prob: f64,
    pub optim: OptimConfig,
    pub checkpoint_every: usize,
    /// Evaluate on the eval split every this many iterations; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            views_per_iter: 6,
            rays_per_iter: 256,
            samples_per_ray: 32,
            near: 0.05,
            flip_augment: true,
            flip_prob: 0.5,
            optim: OptimConfig::default(),
            checkpoint_every: 500,
            eval_every: 500,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub views: usize,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub max_boxes: usize,
    pub pre_nms_top: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            views: 6,
            nms_iou: 0.25,
            score_thresh: 0.05,
            max_boxes: 50,
            pre_nms_top: 300,
        }
    }
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub fusion: FusionMode,
    pub levels: usize,
    pub flip: bool,
    pub offsets: OffsetMode,
}

impl AblationCell {
    pub fn key(&self) -> String {
        let fusion = match self.fusion {
            FusionMode::Mwf => "mwf",
            FusionMode::Mean => "mean",
            FusionMode::Attention => "attention",
        };
        let offsets = match self.offsets {
            OffsetMode::Learned => "learned",
            OffsetMode::Frozen => "frozen",
        };
        format!("fusion-{fusion}_levels-{}_flip-{}_offsets-{offsets}", self.levels, if self.flip { "on" } else { "off" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Iterations per cell; the training default when absent.
    pub iterations: Option<usize>,
    pub fusion: Vec<FusionMode>,
    pub levels: Vec<usize>,
    pub flip: Vec<bool>,
    pub offsets: Vec<OffsetMode>,
    /// Explicit cell list replacing the cartesian grid when present.
    pub cells: Option<Vec<AblationCell>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2],
            iterations: None,
            fusion: vec![FusionMode::Mean, FusionMode::Mwf],
            levels: vec![0, 1, 2],
            flip: vec![false, true],
            offsets: vec![OffsetMode::Learned, OffsetMode::Frozen],
            cells: None,
        }
    }
}

impl AblateConfig {
    pub fn grid(&self) -> Vec<AblationCell> {
        if let Some(c) = &self.cells {
            return c.clone();
        }
        let mut out = Vec::new();
        for &fusion in &self.fusion {
            for &levels in &self.levels {
                for &flip in &self.flip {
                    for &offsets in &self.offsets {
                        out.push(AblationCell { fusion, levels, flip, offsets });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: String,
    pub data: DataConfig,
    /// Voxel counts along x, y, z; each divisible by 4.
    pub grid: [usize; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: "dataset".into(),
            data: DataConfig::default(),
            grid: [16, 16, 8],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            deterministic: true,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid.iter().any(|&r| r == 0 || r % 4 != 0) {
            return bad(format!("grid {:?}: every axis must be a positive multiple of 4", self.grid));
        }
        let m = &self.model;
        if m.heads == 0 || m.channels % m.heads != 0 {
            return bad(format!("heads {} must divide channels {}", m.heads, m.channels));
        }
        if m.dist_frequency <= 0.0 {
            return bad("dist_frequency must be positive".into());
        }
        if m.num_classes != m.num_classes.min(crate::scene::CLASS_NAMES.len()) || m.num_classes != self.data.scene.num_classes {
            return bad(format!(
                "model classes {} must match scene classes {} (at most {})",
                m.num_classes,
                self.data.scene.num_classes,
                crate::scene::CLASS_NAMES.len()
            ));
        }
        let t = &self.train;
        if t.views_per_iter == 0 || t.samples_per_ray == 0 || t.near <= 0.0 || !(0.0..=1.0).contains(&t.flip_prob) {
            return bad("train: views_per_iter, samples_per_ray and near must be positive; flip_prob in [0, 1]".into());
        }
        if !(t.optim.offset_lr_scale >= 0.0) || !(0.0..=1.0).contains(&t.optim.final_lr_ratio) {
            return bad("optim: offset_lr_scale >= 0 and final_lr_ratio in [0, 1]".into());
        }
        if t.optim.lr <= 0.0 || !(0.0..1.0).contains(&t.optim.beta1) || !(0.0..1.0).contains(&t.optim.beta2) {
            return bad("optim: lr > 0 and betas in [0, 1)".into());
        }
        if self.data.views_min == 0 || self.data.views_min > self.data.views_max {
            return bad(format!("data view range {}..={}", self.data.views_min, self.data.views_max));
        }
        if self.eval.views == 0 {
            return bad("eval.views must be positive".into());
        }
        Ok(())
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON document; absent fields keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        let v: Value = serde_json::from_str(&s).map_err(json_err(path))?;
        let mut base = RunConfig::default().to_value();
        merge(&mut base, v);
        Self::from_value(base)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut v = self.to_value();
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path, value)?;
        }
        Self::from_value(v)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*p) {
                    return Err(Error::Config(format!("unknown config key {path:?}")));
                }
                let slot = map.get_mut(*p).unwrap();
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(arr) => {
                let idx: usize = p.parse().map_err(|_| Error::Config(format!("bad index {p:?} in {path:?}")))?;
                let len = arr.len();
                let slot = arr
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range ({len}) in {path:?}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path:?} descends into a scalar"))),
        };
    }
    Err(Error::Config("empty override path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_value(c.to_value()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = RunConfig::default().to_value();
        v["model"]["bogus"] = Value::from(1);
        assert!(RunConfig::from_value(v).is_err());
        assert!(RunConfig::default().with_overrides(&["model.nope=3".into()]).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"ablate": {"iterations": 7}, "model": {"levels": 1}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.ablate.iterations, Some(7));
        assert_eq!(c.ablate.seeds, AblateConfig::default().seeds);
        assert_eq!(c.model.levels, 1);
        assert_eq!(c.model.fusion, FusionMode::Mwf);
        std::fs::write(&p, r#"{"model": {"levles": 1}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&["model.fusion=mean".into(), "grid=[8,8,4]".into(), "train.flip_augment=false".into()])
            .unwrap();
        assert_eq!(c.model.fusion, FusionMode::Mean);
        assert_eq!(c.grid, [8, 8, 4]);
        assert!(!c.train.flip_augment);
        assert!(RunConfig::default().with_overrides(&["grid.0=6".into()]).is_err());
    }

    #[test]
    fn ablation_grid_size() {
        let a = AblateConfig::default();
        assert_eq!(a.grid().len(), 2 * 3 * 2 * 2);
    }
}
