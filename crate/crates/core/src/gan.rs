//! Conditional GAN that lifts a top-view RGB image to a voxel occupancy grid.
//!
//! The generator is a U-net with a 2D convolutional encoder and a 3D
//! transposed-convolution decoder. Skip features and the bottleneck are turned
//! into volumes by reinterpreting channels as depth slices.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use voxcal_autodiff::{
    optimizer_step, AdamConfig, Bound, Init, OptimizerState, ParamGrads, ParamSet, Scalar, Tape, Tensor, Var,
};

use crate::error::{invalid, Error, Result};
use crate::nn::{add_layer, bias, stack, weight};

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Image side and voxel resolution (cubic output).
    pub resolution: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Length of the noise vector joined at the bottleneck; 0 disables it.
    pub noise_dim: usize,
    /// Decoder dropout rate during training; 0 disables it.
    pub dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            levels: 4,
            base_channels: 16,
            noise_dim: 16,
            dropout: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn spatial(&self, level: usize) -> usize {
        self.resolution >> level
    }

    /// Output channels of the decoder step landing on encoder level `level` (>= 1).
    pub fn dec_channels(&self, level: usize) -> usize {
        (self.enc_channels(level) / 2).max(4)
    }

    /// Number of leading decoder steps that apply dropout.
    pub fn dropout_steps(&self) -> usize {
        self.levels.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if self.levels == 0 || !r.is_power_of_two() || r < 1 << self.levels {
            return Err(invalid(format!(
                "resolution {r} must be a power of two of at least 2^{}",
                self.levels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for l in 1..self.levels {
            if self.enc_channels(l) % self.spatial(l) != 0 {
                return Err(invalid(format!(
                    "encoder level {l}: {} channels do not split into {} depth slices",
                    self.enc_channels(l),
                    self.spatial(l)
                )));
            }
        }
        let bottleneck = self.enc_channels(self.levels) + self.noise_dim;
        if bottleneck % self.spatial(self.levels) != 0 {
            return Err(invalid(format!(
                "bottleneck: {bottleneck} channels do not split into {} depth slices",
                self.spatial(self.levels)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

impl DiscriminatorConfig {
    /// Stride-2 layers before the patch head: enough to reach 4^3-ish patches, at most 3.
    pub fn downsamplings(&self, resolution: usize) -> usize {
        (resolution.trailing_zeros() as usize).saturating_sub(2).clamp(1, 3)
    }
}

pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut cin = 3;
    for l in 1..=cfg.levels {
        let co = cfg.enc_channels(l);
        let normed = l > 1 && l < cfg.levels;
        add_layer(
            &mut p,
            &mut rng,
            &format!("enc{l}"),
            &[co, cin, 4, 4],
            (cin * 16, co * 16),
            Init::HeUniform,
            (!normed).then_some(co),
        )?;
        cin = co;
    }
    let mut cin = (cfg.enc_channels(cfg.levels) + cfg.noise_dim) / cfg.spatial(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let (co, init, with_bias) = if level == 0 {
            (1, Init::XavierUniform, true)
        } else {
            (cfg.dec_channels(level), Init::HeUniform, false)
        };
        // Each output of a stride-2, k=4 transposed conv sees 2^3 taps per input channel.
        add_layer(
            &mut p,
            &mut rng,
            &format!("dec{level}"),
            &[cin, co, 4, 4, 4],
            (cin * 8, co * 8),
            init,
            with_bias.then_some(co),
        )?;
        if level > 0 {
            cin = co + cfg.enc_channels(level) / cfg.spatial(level);
        }
    }
    Ok(p)
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, resolution: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut cin = 4;
    for i in 0..cfg.downsamplings(resolution) {
        let co = cfg.base_channels << i;
        add_layer(
            &mut p,
            &mut rng,
            &format!("d{i}"),
            &[co, cin, 4, 4, 4],
            (cin * 64, co * 64),
            Init::HeUniform,
            (i == 0).then_some(co),
        )?;
        cin = co;
    }
    add_layer(&mut p, &mut rng, "d_out", &[1, cin, 3, 3, 3], (cin * 27, 27), Init::XavierUniform, Some(1))?;
    Ok(p)
}

/// Reinterprets `[B, C, h, w]` as `[B, C / slices, slices, h, w]` without moving data.
pub fn skip_reshape_2d_to_3d<T: Scalar>(tape: &mut Tape<T>, feat: Var, slices: usize) -> Result<Var> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 4 || slices == 0 || s[1] % slices != 0 {
        return Err(invalid(format!("cannot split channels of {s:?} into {slices} depth slices")));
    }
    Ok(tape.reshape(feat, &[s[0], s[1] / slices, slices, s[2], s[3]])?)
}

/// Tensor form of [`skip_reshape_2d_to_3d`] for a single `[C, h, w]` feature map.
pub fn skip_reshape_tensor(feat: Tensor<f32>, slices: usize) -> Result<Tensor<f32>> {
    let s = feat.shape().to_vec();
    if s.len() != 3 || slices == 0 || s[0] % slices != 0 {
        return Err(invalid(format!("cannot split channels of {s:?} into {slices} depth slices")));
    }
    Ok(feat.reshape(&[s[0] / slices, slices, s[1], s[2]])?)
}

/// Intermediate handles of one generator pass.
pub struct GeneratorTrace {
    pub encoder: Vec<Var>,
    pub bottleneck: Var,
    pub logits: Var,
    /// `[B, Z, H, W]` occupancy probabilities.
    pub probs: Var,
}

/// `image: [B, 3, H, W]`, `noise: [B, noise_dim]` (ignored when `noise_dim` is 0).
/// `dropout_seed: None` turns dropout off, as at inference.
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &GeneratorConfig,
    image: Var,
    noise: Option<Var>,
    dropout_seed: Option<u64>,
) -> Result<GeneratorTrace> {
    let r = cfg.resolution;
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1..] != [3, r, r] {
        return Err(Error::Dimensions {
            op: "generator_forward",
            left: vec![3, r, r],
            right: s,
        });
    }
    let batch = s[0];
    let leak = T::from_f64_lossy(LEAK);
    let eps = T::from_f64_lossy(NORM_EPS);

    let mut encoder = Vec::with_capacity(cfg.levels);
    let mut h = image;
    for l in 1..=cfg.levels {
        let name = format!("enc{l}");
        h = tape.conv2d(h, weight(bound, &name)?, bias(bound, &name)?, 2, 1)?;
        if l > 1 && l < cfg.levels {
            h = tape.instance_norm(h, eps)?;
        }
        h = tape.leaky_relu(h, leak);
        encoder.push(h);
    }

    let sl = cfg.spatial(cfg.levels);
    let mut bottleneck = h;
    if cfg.noise_dim > 0 {
        let z = noise.ok_or_else(|| invalid("generator configured with noise but none given"))?;
        if tape.shape(z) != [batch, cfg.noise_dim] {
            return Err(Error::Dimensions {
                op: "generator noise",
                left: vec![batch, cfg.noise_dim],
                right: tape.shape(z).to_vec(),
            });
        }
        let z = tape.reshape(z, &[batch, cfg.noise_dim, 1, 1])?;
        let z = tape.broadcast_to(z, &[batch, cfg.noise_dim, sl, sl])?;
        bottleneck = tape.concat(&[bottleneck, z], 1)?;
    }
    let mut v = skip_reshape_2d_to_3d(tape, bottleneck, sl)?;

    let mut mask_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    for (step, level) in (0..cfg.levels).rev().enumerate() {
        let name = format!("dec{level}");
        v = tape.conv_transpose3d(v, weight(bound, &name)?, bias(bound, &name)?, 2, 1)?;
        if level == 0 {
            break;
        }
        v = tape.instance_norm(v, eps)?;
        v = tape.relu(v);
        if let Some(rng) = mask_rng.as_mut() {
            if step < cfg.dropout_steps() && cfg.dropout > 0.0 {
                v = tape.dropout(v, cfg.dropout, Some(rng.random()))?;
            }
        }
        let skip = skip_reshape_2d_to_3d(tape, encoder[level - 1], cfg.spatial(level))?;
        v = tape.concat(&[v, skip], 1)?;
    }
    let logits = tape.reshape(v, &[batch, r, r, r])?;
    let probs = tape.sigmoid(logits);
    Ok(GeneratorTrace {
        encoder,
        bottleneck,
        logits,
        probs,
    })
}

/// Patch logits for (image, voxel) pairs. `image: [B, 3, H, W]`, `voxel: [B, Z, H, W]`.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &DiscriminatorConfig,
    image: Var,
    voxel: Var,
) -> Result<Var> {
    let (si, sv) = (tape.shape(image).to_vec(), tape.shape(voxel).to_vec());
    if si.len() != 4 || sv.len() != 4 || si[0] != sv[0] || si[1] != 3 || si[2..] != sv[2..] {
        return Err(Error::Dimensions {
            op: "discriminator_forward",
            left: si,
            right: sv,
        });
    }
    let (b, z, h, w) = (sv[0], sv[1], sv[2], sv[3]);
    // Condition every depth slice on the image by tiling it along Z.
    let img = tape.reshape(image, &[b, 3, 1, h, w])?;
    let img = tape.broadcast_to(img, &[b, 3, z, h, w])?;
    let vox = tape.reshape(voxel, &[b, 1, z, h, w])?;
    let mut x = tape.concat(&[img, vox], 1)?;
    let leak = T::from_f64_lossy(LEAK);
    for i in 0..cfg.downsamplings(z) {
        let name = format!("d{i}");
        x = tape.conv3d(x, weight(bound, &name)?, bias(bound, &name)?, 2, 1)?;
        if i > 0 {
            x = tape.instance_norm(x, T::from_f64_lossy(NORM_EPS))?;
        }
        x = tape.leaky_relu(x, leak);
    }
    Ok(tape.conv3d(x, weight(bound, "d_out")?, bias(bound, "d_out")?, 1, 1)?)
}

/// Generator objective on one batch: adversarial BCE against "real" plus
/// `lambda` times the L1 distance to the reference occupancy.
pub struct GeneratorLoss {
    pub adv: Var,
    pub l1: Var,
    pub total: Var,
    pub probs: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    gen: &Bound,
    disc: &Bound,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    image: Var,
    noise: Option<Var>,
    target: Var,
    lambda: f64,
    dropout_seed: Option<u64>,
) -> Result<GeneratorLoss> {
    let trace = generator_forward(tape, gen, gcfg, image, noise, dropout_seed)?;
    let logits = discriminator_forward(tape, disc, dcfg, image, trace.probs)?;
    let ones = tape.constant(Tensor::ones(tape.shape(logits)));
    let adv = tape.bce_with_logits(logits, ones)?;
    let l1 = tape.l1_loss(trace.probs, target)?;
    let weighted = tape.scale(l1, T::from_f64_lossy(lambda));
    let total = tape.add(adv, weighted)?;
    Ok(GeneratorLoss {
        adv,
        l1,
        total,
        probs: trace.probs,
    })
}

/// Discriminator objective: mean of BCE(real, 1) and BCE(fake, 0).
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &Bound,
    dcfg: &DiscriminatorConfig,
    image: Var,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let real_logits = discriminator_forward(tape, disc, dcfg, image, real)?;
    let fake_logits = discriminator_forward(tape, disc, dcfg, image, fake)?;
    let ones = tape.constant(Tensor::ones(tape.shape(real_logits)));
    let zeros = tape.constant(Tensor::zeros(tape.shape(fake_logits)));
    let a = tape.bce_with_logits(real_logits, ones)?;
    let b = tape.bce_with_logits(fake_logits, zeros)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, T::from_f64_lossy(0.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub lr: f32,
    pub beta1: f32,
    pub seed: u64,
    /// Stop after this many generator updates, whatever the epoch count.
    pub max_steps: Option<usize>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lambda: 100.0,
            lr: 2e-3,
            beta1: 0.5,
            seed: 0,
            max_steps: None,
        }
    }
}

/// Image and reference occupancy for one training dish.
#[derive(Clone, Debug)]
pub struct GanSample {
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor<f32>,
    /// `[Z, H, W]` of 0/1.
    pub voxel: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossReport {
    pub iteration: usize,
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_l1: f32,
    pub g_total: f32,
}

#[derive(Clone, Debug)]
pub struct GanModel {
    pub generator: ParamSet,
    pub discriminator: ParamSet,
}

impl GanModel {
    pub fn init(gcfg: &GeneratorConfig, dcfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: init_generator(gcfg, seed)?,
            discriminator: init_discriminator(dcfg, gcfg.resolution, seed ^ 0x5eed_d15c)?,
        })
    }
}

fn noise_tensor<R: Rng>(dim: usize, rng: &mut R) -> Tensor<f32> {
    let data = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[1, dim], data).expect("noise shape")
}

/// Alternating discriminator / generator Adam updates, one sample per step.
/// `on_epoch` runs after every completed epoch (e.g. to write checkpoints).
pub fn gan_train(
    samples: &[GanSample],
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &GanTrainConfig,
    model: GanModel,
    mut on_epoch: impl FnMut(usize, &GanModel) -> Result<()>,
) -> Result<(GanModel, Vec<GanLossReport>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    gcfg.validate()?;
    let mut model = model;
    let adam = AdamConfig::with_lr(tcfg.lr, tcfg.beta1);
    let mut g_state = OptimizerState::new(adam, &model.generator);
    let mut d_state = OptimizerState::new(adam, &model.discriminator);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut reports = Vec::new();
    let limit = tcfg.max_steps.unwrap_or(usize::MAX);

    'outer: for epoch in 0..tcfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order {
            if reports.len() >= limit {
                break 'outer;
            }
            let iteration = reports.len();
            let s = &samples[i];
            let image = stack(&[&s.image])?;
            let target = stack(&[&s.voxel])?;
            let noise = (gcfg.noise_dim > 0).then(|| noise_tensor(gcfg.noise_dim, &mut rng));
            let drop_seed = (gcfg.dropout > 0.0).then(|| rng.random::<u64>());

            // Generator pass, kept on its tape for the generator update below.
            let mut gt = Tape::<f32>::new();
            let gb = model.generator.bind(&mut gt, true);
            let img_g = gt.constant(image.clone());
            let tgt_g = gt.constant(target.clone());
            let z_g = noise.clone().map(|n| gt.constant(n));
            let trace = generator_forward(&mut gt, &gb, gcfg, img_g, z_g, drop_seed)?;
            let fake = gt.value(trace.probs).clone();

            // Discriminator update on the detached fake.
            let mut dt = Tape::<f32>::new();
            let db = model.discriminator.bind(&mut dt, true);
            let img_d = dt.constant(image);
            let real_d = dt.constant(target);
            let fake_d = dt.constant(fake);
            let d_loss = discriminator_loss(&mut dt, &db, dcfg, img_d, real_d, fake_d)?;
            let d_value = dt.value(d_loss).item();
            if !d_value.is_finite() {
                return Err(Error::NumericFailure { stage: "gan", iteration });
            }
            let d_grads = ParamGrads::from_tape(&db, &dt.backward(d_loss)?);
            optimizer_step(&mut model.discriminator, &d_grads, &mut d_state)?;

            // Generator update against the refreshed discriminator.
            let db_const = model.discriminator.bind(&mut gt, false);
            let logits = discriminator_forward(&mut gt, &db_const, dcfg, img_g, trace.probs)?;
            let ones = gt.constant(Tensor::ones(gt.shape(logits)));
            let adv = gt.bce_with_logits(logits, ones)?;
            let l1 = gt.l1_loss(trace.probs, tgt_g)?;
            let weighted = gt.scale(l1, tcfg.lambda as f32);
            let total = gt.add(adv, weighted)?;
            let report = GanLossReport {
                iteration,
                d_loss: d_value,
                g_adv: gt.value(adv).item(),
                g_l1: gt.value(l1).item(),
                g_total: gt.value(total).item(),
            };
            if ![report.g_adv, report.g_l1, report.g_total].iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure { stage: "gan", iteration });
            }
            let g_grads = ParamGrads::from_tape(&gb, &gt.backward(total)?);
            optimizer_step(&mut model.generator, &g_grads, &mut g_state)?;
            reports.push(report);
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, reports))
}

/// Inference pass: no dropout, zero noise. Returns `[Z, H, W]` probabilities.
pub fn generate(params: &ParamSet, cfg: &GeneratorConfig, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(stack(&[image])?);
    let z = (cfg.noise_dim > 0).then(|| tape.constant(Tensor::zeros(&[1, cfg.noise_dim])));
    let trace = generator_forward(&mut tape, &bound, cfg, x, z, None)?;
    let r = cfg.resolution;
    Ok(tape.value(trace.probs).clone().reshape(&[r, r, r])?)
}

pub fn write_loss_csv(path: &Path, reports: &[GanLossReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "d_loss", "g_adv", "g_l1", "g_total"])?;
    for r in reports {
        w.write_record([
            r.iteration.to_string(),
            r.d_loss.to_string(),
            r.g_adv.to_string(),
            r.g_l1.to_string(),
            r.g_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_consistent() {
        let c = GeneratorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.dropout_steps(), 2);
        assert_eq!(c.dec_channels(3), 32);
        assert_eq!(DiscriminatorConfig::default().downsamplings(32), 3);
        assert_eq!(DiscriminatorConfig::default().downsamplings(8), 1);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let c = GeneratorConfig {
            resolution: 64,
            levels: 2,
            base_channels: 4,
            ..GeneratorConfig::default()
        };
        assert!(c.validate().is_err());
        let tall = GeneratorConfig {
            resolution: 8,
            levels: 4,
            ..GeneratorConfig::default()
        };
        assert!(tall.validate().is_err());
    }

    #[test]
    fn skip_reshape_examples() {
        let feat = Tensor::new(&[8, 2, 2], (0..32).map(|v| v as f32).collect()).unwrap();
        let one = skip_reshape_tensor(feat.clone(), 1).unwrap();
        assert_eq!(one.shape(), &[8, 1, 2, 2]);
        assert_eq!(one.data(), feat.data());
        let eight = skip_reshape_tensor(feat.clone(), 8).unwrap();
        assert_eq!(eight.shape(), &[1, 8, 2, 2]);
        assert_eq!(eight.reshape(&[8, 2, 2]).unwrap(), feat);
        assert!(skip_reshape_tensor(feat, 3).is_err());
    }
}
