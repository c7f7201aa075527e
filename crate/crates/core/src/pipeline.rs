//! The three models wired together: image -> voxels -> volume, image ->
//! (p, d), then refinement and energy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxcal_autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use voxcal_autodiff::{AdamConfig, OptimizerState, ParamGrads, ParamSet, Tape, Tensor};

use crate::adaptation::{adaptation_forward, AdaptationLayer, AdaptationRecord, EnergyEstimate};
use crate::error::{Error, Result};
use crate::gan::{generate, generator_forward, DiscriminatorConfig, GeneratorConfig};
use crate::nn::stack;
use crate::pnm::RgbImage;
use crate::regressor::{predict, regressor_forward, BackboneConfig, EnergyBaseline};
use crate::voxel::{binarize, VoxelGrid};

/// Everything inference needs. Depth appears nowhere in here.
#[derive(Clone, Debug)]
pub struct PipelineModels {
    pub gen_cfg: GeneratorConfig,
    pub generator: ParamSet,
    pub reg_cfg: BackboneConfig,
    pub regressor: ParamSet,
    pub adaptation: AdaptationLayer,
    /// Physical volume of one voxel.
    pub cell_volume: f64,
    pub tau: f32,
}

impl PipelineModels {
    /// Predicted occupancy of one image.
    pub fn voxelize(&self, image: &Tensor<f32>) -> Result<VoxelGrid> {
        let probs = generate(&self.generator, &self.gen_cfg, image)?;
        Ok(binarize(&probs, self.tau)?.with_cell_volume(self.cell_volume))
    }

    /// Frozen upstream outputs `(p, v, d)`.
    pub fn upstream(&self, image: &Tensor<f32>) -> Result<(Vec<f32>, f64, f64)> {
        let v = self.voxelize(image)?.volume();
        let r = predict(&self.regressor, &self.reg_cfg, image)?;
        Ok((r.p, v, r.d as f64))
    }
}

/// Energy of the dish in `image`, with full provenance.
pub fn estimate_energy(models: &PipelineModels, image: &RgbImage, sample_id: &str) -> Result<EnergyEstimate> {
    let (p, v, d) = models.upstream(&image.to_tensor())?;
    EnergyEstimate::new(sample_id, p, v, d, &models.adaptation)
}

/// Upstream records for adaptation training.
pub fn adaptation_records(models: &PipelineModels, data: &[(Tensor<f32>, f64)]) -> Result<Vec<AdaptationRecord>> {
    data.iter()
        .map(|(image, energy)| {
            let (p, v, d) = models.upstream(image)?;
            Ok(AdaptationRecord { p, v, d, energy: *energy })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

/// End-to-end fine-tune of all three models on energy L1. The hard threshold
/// has no gradient, so the volume here is the soft occupancy sum.
pub fn joint_finetune(models: &mut PipelineModels, data: &[(Tensor<f32>, f64)], cfg: &JointConfig) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adam = AdamConfig::with_lr(cfg.lr, 0.9);
    let mut g_state = OptimizerState::new(adam, &models.generator);
    let mut r_state = OptimizerState::new(adam, &models.regressor);
    let mut a_state = OptimizerState::new(adam, &models.adaptation.params);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order {
            let (image, energy) = &data[i];
            let mut tape = Tape::<f32>::new();
            let gb = models.generator.bind(&mut tape, true);
            let rb = models.regressor.bind(&mut tape, true);
            let ab = models.adaptation.params.bind(&mut tape, true);
            let x = tape.constant(stack(&[image])?);
            let z = (models.gen_cfg.noise_dim > 0)
                .then(|| tape.constant(Tensor::zeros(&[1, models.gen_cfg.noise_dim])));
            let g = generator_forward(&mut tape, &gb, &models.gen_cfg, x, z, None)?;
            let occupied = tape.sum(g.probs);
            let v = tape.scale(occupied, models.cell_volume as f32);
            let v = tape.reshape(v, &[1, 1])?;
            let r = regressor_forward(&mut tape, &rb, &models.reg_cfg, x)?;
            let (_, w) = adaptation_forward(&mut tape, &ab, models.adaptation.scale, r.probs, v, r.density)?;
            let target = tape.constant(Tensor::new(&[1, 1], vec![*energy as f32])?);
            let loss = tape.l1_loss(w, target)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NumericFailure {
                    stage: "joint",
                    iteration: log.len(),
                });
            }
            let grads = tape.backward(loss)?;
            voxcal_autodiff::optimizer_step(&mut models.generator, &ParamGrads::from_tape(&gb, &grads), &mut g_state)?;
            voxcal_autodiff::optimizer_step(&mut models.regressor, &ParamGrads::from_tape(&rb, &grads), &mut r_state)?;
            voxcal_autodiff::optimizer_step(
                &mut models.adaptation.params,
                &ParamGrads::from_tape(&ab, &grads),
                &mut a_state,
            )?;
            log.push(value);
        }
    }
    Ok(log)
}

/// Checkpoint file names inside a run's checkpoint directory.
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISCRIMINATOR_CKPT: &str = "discriminator.ckpt";
pub const REGRESSOR_CKPT: &str = "regressor.ckpt";
pub const ADAPTATION_CKPT: &str = "adaptation.ckpt";
pub const BASELINE_CKPT: &str = "baseline.ckpt";

/// `MissingArtifact` unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_owned()))
    }
}

impl PipelineModels {
    pub fn load(dir: &Path, tau: f32) -> Result<Self> {
        let a = dir.join(ADAPTATION_CKPT);
        require(&a)?;
        let (aparams, ameta) = load_checkpoint(&a)?;
        Self::load_upstream(dir, tau, AdaptationLayer::from_parts(aparams, &ameta)?)
    }

    /// Generator and regressor from `dir`, paired with the given refinement.
    pub fn load_upstream(dir: &Path, tau: f32, adaptation: AdaptationLayer) -> Result<Self> {
        let g = dir.join(GENERATOR_CKPT);
        let r = dir.join(REGRESSOR_CKPT);
        require(&g)?;
        require(&r)?;
        let (generator, gmeta) = load_checkpoint(&g)?;
        let (regressor, rmeta) = load_checkpoint(&r)?;
        let gen_cfg: GeneratorConfig = serde_json::from_value(gmeta["config"].clone())?;
        let reg_cfg: BackboneConfig = serde_json::from_value(rmeta["config"].clone())?;
        if reg_cfg.classes != adaptation.classes {
            return Err(crate::error::invalid(format!(
                "regressor predicts {} classes, refinement expects {}",
                reg_cfg.classes, adaptation.classes
            )));
        }
        let cell_volume = gmeta["cell_volume"]
            .as_f64()
            .ok_or_else(|| crate::error::invalid("generator checkpoint lacks cell_volume"))?;
        Ok(Self {
            gen_cfg,
            generator,
            reg_cfg,
            regressor,
            adaptation,
            cell_volume,
            tau,
        })
    }

    /// Volume of the whole voxel grid, the natural scale of the refinement.
    pub fn grid_volume(&self) -> f64 {
        self.cell_volume * (self.gen_cfg.resolution as f64).powi(3)
    }
}

pub fn save_generator(dir: &Path, cfg: &GeneratorConfig, params: &ParamSet, cell_volume: f64) -> Result<()> {
    let meta = serde_json::json!({ "config": cfg, "cell_volume": cell_volume });
    Ok(save_checkpoint(&dir.join(GENERATOR_CKPT), params, &meta)?)
}

pub fn save_discriminator(dir: &Path, cfg: &DiscriminatorConfig, params: &ParamSet) -> Result<()> {
    Ok(save_checkpoint(&dir.join(DISCRIMINATOR_CKPT), params, &serde_json::json!({ "config": cfg }))?)
}

pub fn save_regressor(dir: &Path, cfg: &BackboneConfig, params: &ParamSet) -> Result<()> {
    Ok(save_checkpoint(&dir.join(REGRESSOR_CKPT), params, &serde_json::json!({ "config": cfg }))?)
}

pub fn save_adaptation(dir: &Path, layer: &AdaptationLayer) -> Result<()> {
    Ok(save_checkpoint(&dir.join(ADAPTATION_CKPT), &layer.params, &layer.meta())?)
}

pub fn save_baseline(dir: &Path, baseline: &EnergyBaseline) -> Result<()> {
    let meta = serde_json::json!({ "config": baseline.cfg, "energy_scale": baseline.energy_scale });
    Ok(save_checkpoint(&dir.join(BASELINE_CKPT), &baseline.params, &meta)?)
}

pub fn load_baseline(dir: &Path) -> Result<EnergyBaseline> {
    let path = dir.join(BASELINE_CKPT);
    require(&path)?;
    let (params, meta) = load_checkpoint(&path)?;
    Ok(EnergyBaseline {
        cfg: serde_json::from_value(meta["config"].clone())?,
        params,
        energy_scale: meta["energy_scale"]
            .as_f64()
            .ok_or_else(|| crate::error::invalid("baseline checkpoint lacks energy_scale"))?,
    })
}
