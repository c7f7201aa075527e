//! Run configuration: one JSON document, with `--set` and `--seed` overrides
//! layered on top of the file, which is layered on top of the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use voxcal_core::dataset::SceneConfig;
use voxcal_core::gan::{DiscriminatorConfig, GanTrainConfig, GeneratorConfig};
use voxcal_core::regressor::{BackboneConfig, RegressorTrainConfig};
use voxcal_core::adaptation::AdaptationTrainConfig;
use voxcal_core::pipeline::JointConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every model initialization and shuffle (and the dataset unless `data.seed` is set).
    pub seed: u64,
    /// Image side; also the voxel resolution along every axis.
    pub image_size: usize,
    pub data: DataConfig,
    pub gan: GanSection,
    pub regressor: RegressorSection,
    pub baseline: TrainSection,
    pub adaptation: AdaptationSection,
    /// Fine-tune all three models on the energy loss after staged training.
    pub joint_finetune: bool,
    pub joint: JointSection,
    /// Occupancy threshold for generated voxels.
    pub tau: f32,
    /// Seeds evaluated by `ablate`; empty means just `seed`.
    pub ablation_seeds: Vec<u64>,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub classes: usize,
    pub split_ratio: f64,
    pub seed: Option<u64>,
    /// `image_size` here is always overwritten by the top-level one.
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub levels: usize,
    pub base_channels: usize,
    pub noise_dim: usize,
    pub dropout: f64,
    pub disc_base_channels: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub lr: f32,
    pub beta1: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSection {
    pub channels: Vec<usize>,
    pub feature_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    /// Weight of the L1 term next to cross-entropy.
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub epochs: usize,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            data: DataConfig::default(),
            gan: GanSection::default(),
            regressor: RegressorSection::default(),
            baseline: TrainSection::default(),
            adaptation: AdaptationSection::default(),
            joint_finetune: false,
            joint: JointSection::default(),
            tau: 0.5,
            ablation_seeds: Vec::new(),
            paths: Paths::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 400,
            classes: 4,
            split_ratio: 0.845,
            seed: None,
            scene: SceneConfig::default(),
        }
    }
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let t = GanTrainConfig::default();
        Self {
            levels: g.levels,
            base_channels: g.base_channels,
            noise_dim: g.noise_dim,
            dropout: g.dropout,
            disc_base_channels: DiscriminatorConfig::default().base_channels,
            epochs: t.epochs,
            lambda: t.lambda,
            lr: t.lr,
            beta1: t.beta1,
        }
    }
}

impl Default for RegressorSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let t = TrainSection::default();
        Self {
            channels: b.channels,
            feature_width: b.feature_width,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta: t.beta,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = RegressorTrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta: t.beta,
        }
    }
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let t = AdaptationTrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            bias: true,
        }
    }
}

impl Default for JointSection {
    fn default() -> Self {
        Self { epochs: 1, lr: 1e-4 }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

impl RunConfig {
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut value, patch);
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        if let Some(seed) = seed {
            value["seed"] = seed.into();
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.data.scene.image_size = cfg.image_size;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.generator().validate().or_else(|e| usage(e.to_string()))?;
        self.backbone().validate().or_else(|e| usage(e.to_string()))?;
        self.data.scene.validate().or_else(|e| usage(e.to_string()))?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return usage(format!("tau {} outside (0, 1)", self.tau));
        }
        let batches = [self.regressor.batch_size, self.baseline.batch_size, self.adaptation.batch_size];
        if batches.contains(&0) {
            return usage("batch sizes must be positive".into());
        }
        let p = &self.paths;
        if p.dataset_dir == p.checkpoint_dir || p.dataset_dir == p.report_dir {
            return usage("the dataset directory must differ from the checkpoint and report directories".into());
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.ablation_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation_seeds.clone()
        }
    }

    pub fn checkpoint_dir(&self, seed: u64) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("seed-{seed}"))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.image_size,
            levels: self.gan.levels,
            base_channels: self.gan.base_channels,
            noise_dim: self.gan.noise_dim,
            dropout: self.gan.dropout,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.gan.disc_base_channels,
        }
    }

    pub fn gan_train(&self, seed: u64) -> GanTrainConfig {
        GanTrainConfig {
            epochs: self.gan.epochs,
            lambda: self.gan.lambda,
            lr: self.gan.lr,
            beta1: self.gan.beta1,
            seed,
            max_steps: None,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: self.image_size,
            channels: self.regressor.channels.clone(),
            feature_width: self.regressor.feature_width,
            classes: self.data.classes,
        }
    }

    pub fn adaptation_train(&self, seed: u64) -> AdaptationTrainConfig {
        let a = &self.adaptation;
        AdaptationTrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            beta1: a.beta1,
            seed,
        }
    }

    pub fn joint(&self, seed: u64) -> JointConfig {
        JointConfig {
            epochs: self.joint.epochs,
            lr: self.joint.lr,
            seed,
        }
    }
}

impl RegressorSection {
    pub fn train(&self) -> TrainSection {
        TrainSection {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta: self.beta,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> RegressorTrainConfig {
        RegressorTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta: self.beta,
            seed,
        }
    }
}
