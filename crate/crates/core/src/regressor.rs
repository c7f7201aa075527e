//! Image-only class probabilities and energy density from a small CNN.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxcal_autodiff::{AdamConfig, Bound, Init, ParamSet, Scalar, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::{add_layer, linear, minibatch_train, stack, weight};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Output channels of each stride-2 conv block.
    pub channels: Vec<usize>,
    pub feature_width: usize,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64, 64],
            feature_width: 32,
            classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.feature_width < self.classes {
            return Err(invalid(format!(
                "need K >= 2 and F >= K, got K={} F={}",
                self.classes, self.feature_width
            )));
        }
        if self.channels.is_empty() || self.input_size == 0 {
            return Err(invalid("backbone needs at least one block and a nonzero input"));
        }
        Ok(())
    }
}

fn init_backbone(cfg: &BackboneConfig, rng: &mut ChaCha8Rng, p: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let mut cin = 3;
    for (i, &co) in cfg.channels.iter().enumerate() {
        add_layer(p, rng, &format!("blk{i}"), &[co, cin, 3, 3], (cin * 9, co * 9), Init::HeUniform, None)?;
        cin = co;
    }
    let f = cfg.feature_width;
    add_layer(p, rng, "trunk", &[cin, f], (cin, f), Init::HeUniform, Some(f))?;
    add_layer(p, rng, "cls", &[f, cfg.classes], (f, cfg.classes), Init::XavierUniform, Some(cfg.classes))?;
    Ok(())
}

/// Backbone, classification head and density head.
pub fn init_regressor(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_backbone(cfg, &mut rng, &mut p)?;
    let f = cfg.feature_width;
    add_layer(&mut p, &mut rng, "dens", &[f, 1], (f, 1), Init::XavierUniform, Some(1))?;
    Ok(p)
}

/// Same backbone with one linear layer regressing (scaled) energy directly.
pub fn init_energy_baseline(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_backbone(cfg, &mut rng, &mut p)?;
    let f = cfg.feature_width;
    add_layer(&mut p, &mut rng, "energy", &[f, 1], (f, 1), Init::XavierUniform, Some(1))?;
    Ok(p)
}

/// Pooled trunk features `[B, F]` of `image: [B, 3, H, W]`.
fn backbone<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1..] != [3, cfg.input_size, cfg.input_size] {
        return Err(Error::Dimensions {
            op: "regressor_forward",
            left: vec![3, cfg.input_size, cfg.input_size],
            right: s,
        });
    }
    let mut h = image;
    for i in 0..cfg.channels.len() {
        h = tape.conv2d(h, weight(bound, &format!("blk{i}"))?, None, 2, 1)?;
        let hs = tape.shape(h).to_vec();
        // A 1x1 map normalizes to all zeros, which would cut the gradient.
        if hs[2] * hs[3] > 1 {
            h = tape.instance_norm(h, T::from_f64_lossy(NORM_EPS))?;
        }
        h = tape.relu(h);
    }
    let hs = tape.shape(h).to_vec();
    let flat = tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
    let pooled = tape.mean_axis(flat, 2)?;
    let feat = linear(tape, bound, pooled, "trunk")?;
    Ok(tape.relu(feat))
}

pub struct RegressorTrace {
    pub logits: Var,
    /// `[B, K]`
    pub probs: Var,
    /// `[B, 1]`, non-negative.
    pub density: Var,
}

pub fn regressor_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &BackboneConfig,
    image: Var,
) -> Result<RegressorTrace> {
    let feat = backbone(tape, bound, cfg, image)?;
    let logits = linear(tape, bound, feat, "cls")?;
    let probs = tape.softmax(logits, 1)?;
    let raw = linear(tape, bound, feat, "dens")?;
    let density = tape.softplus(raw);
    Ok(RegressorTrace { logits, probs, density })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorOutput {
    pub p: Vec<f32>,
    pub d: f32,
}

pub fn predict(params: &ParamSet, cfg: &BackboneConfig, image: &Tensor<f32>) -> Result<RegressorOutput> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(stack(&[image])?);
    let t = regressor_forward(&mut tape, &bound, cfg, x)?;
    Ok(RegressorOutput {
        p: tape.value(t.probs).data().to_vec(),
        d: tape.value(t.density).item(),
    })
}

/// `cross_entropy + beta * L1(density)` for a batch; returns (total, ce, l1).
pub fn regressor_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &BackboneConfig,
    image: Var,
    labels: &[usize],
    densities: Var,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let t = regressor_forward(tape, bound, cfg, image)?;
    let ce = tape.cross_entropy(t.logits, labels)?;
    let l1 = tape.l1_loss(t.density, densities)?;
    let weighted = tape.scale(l1, T::from_f64_lossy(beta));
    let total = tape.add(ce, weighted)?;
    Ok((total, ce, l1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    /// Weight of the density L1 term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegressorSample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub density: f32,
    /// Ground-truth energy; only the direct-energy baseline reads it.
    pub energy: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorLossReport {
    pub iteration: usize,
    pub ce: f32,
    pub l1: f32,
    pub total: f32,
}

fn batch_images(samples: &[RegressorSample], idx: &[usize]) -> Result<Tensor<f32>> {
    stack(&idx.iter().map(|&i| &samples[i].image).collect::<Vec<_>>())
}

fn column(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(&[n, 1], values).expect("column")
}

pub fn train_regressor(
    samples: &[RegressorSample],
    cfg: &BackboneConfig,
    tcfg: &RegressorTrainConfig,
    mut params: ParamSet,
) -> Result<(ParamSet, Vec<RegressorLossReport>)> {
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.classes) {
        return Err(invalid(format!("label {} outside {} classes", s.label, cfg.classes)));
    }
    let log = minibatch_train(
        &mut params,
        samples.len(),
        tcfg.batch_size,
        tcfg.epochs,
        AdamConfig::with_lr(tcfg.lr, tcfg.beta1),
        tcfg.seed,
        "regressor",
        |tape, bound, idx| {
            let x = tape.constant(batch_images(samples, idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
            let d = tape.constant(column(idx.iter().map(|&i| samples[i].density).collect()));
            let (total, ce, l1) = regressor_loss(tape, bound, cfg, x, &labels, d, tcfg.beta)?;
            Ok((total, vec![ce, l1]))
        },
    )?;
    let reports = log
        .iter()
        .enumerate()
        .map(|(iteration, r)| RegressorLossReport {
            iteration,
            total: r[0],
            ce: r[1],
            l1: r[2],
        })
        .collect();
    Ok((params, reports))
}

/// Relabels the class head so that old class `c` becomes class `perm[c]`.
pub fn permute_classes(params: &ParamSet, perm: &[usize]) -> Result<ParamSet> {
    let k = perm.len();
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || std::mem::replace(&mut seen[p], true) {
            return Err(invalid(format!("{perm:?} is not a permutation")));
        }
    }
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let moved = match name {
            "cls.w" => {
                let f = t.shape()[0];
                if t.shape()[1] != k {
                    return Err(invalid("permutation length differs from class count"));
                }
                let mut data = vec![0.0; f * k];
                for r in 0..f {
                    for (c, &pc) in perm.iter().enumerate() {
                        data[r * k + pc] = t.data()[r * k + c];
                    }
                }
                Tensor::new(t.shape(), data)?
            }
            "cls.b" => {
                let mut data = vec![0.0; k];
                for (c, &pc) in perm.iter().enumerate() {
                    data[pc] = t.data()[c];
                }
                Tensor::new(t.shape(), data)?
            }
            _ => t.clone(),
        };
        out.insert(name, moved)?;
    }
    Ok(out)
}

/// Direct-energy baseline: energies are regressed in units of `energy_scale`
/// (the mean training energy) so the head starts near the right magnitude.
#[derive(Clone, Debug)]
pub struct EnergyBaseline {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    pub energy_scale: f64,
}

pub fn baseline_forward<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, cfg: &BackboneConfig, image: Var) -> Result<(Var, Var)> {
    let feat = backbone(tape, bound, cfg, image)?;
    let logits = linear(tape, bound, feat, "cls")?;
    let energy = linear(tape, bound, feat, "energy")?;
    Ok((logits, energy))
}

/// Trains the baseline on `cross_entropy + beta * L1(scaled energy)`.
pub fn train_energy_baseline(
    samples: &[RegressorSample],
    cfg: &BackboneConfig,
    tcfg: &RegressorTrainConfig,
    mut params: ParamSet,
) -> Result<(EnergyBaseline, Vec<RegressorLossReport>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scale = samples.iter().map(|s| s.energy as f64).sum::<f64>() / samples.len() as f64;
    if !(scale > 0.0) {
        return Err(invalid("training energies must have a positive mean"));
    }
    let log = minibatch_train(
        &mut params,
        samples.len(),
        tcfg.batch_size,
        tcfg.epochs,
        AdamConfig::with_lr(tcfg.lr, tcfg.beta1),
        tcfg.seed,
        "baseline",
        |tape, bound, idx| {
            let x = tape.constant(batch_images(samples, idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
            let target = tape.constant(column(idx.iter().map(|&i| (samples[i].energy as f64 / scale) as f32).collect()));
            let (logits, energy) = baseline_forward(tape, bound, cfg, x)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            let l1 = tape.l1_loss(energy, target)?;
            let weighted = tape.scale(l1, tcfg.beta as f32);
            Ok((tape.add(ce, weighted)?, vec![ce, l1]))
        },
    )?;
    let reports = log
        .iter()
        .enumerate()
        .map(|(iteration, r)| RegressorLossReport {
            iteration,
            total: r[0],
            ce: r[1],
            l1: r[2],
        })
        .collect();
    Ok((
        EnergyBaseline {
            cfg: cfg.clone(),
            params,
            energy_scale: scale,
        },
        reports,
    ))
}

impl EnergyBaseline {
    pub fn predict(&self, image: &Tensor<f32>) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(stack(&[image])?);
        let (_, e) = baseline_forward(&mut tape, &bound, &self.cfg, x)?;
        Ok(tape.value(e).item() as f64 * self.energy_scale)
    }
}

pub fn write_loss_csv(path: &Path, reports: &[RegressorLossReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "ce", "l1", "total"])?;
    for r in reports {
        w.write_record([r.iteration.to_string(), r.ce.to_string(), r.l1.to_string(), r.total.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_have_valid_ranges() {
        let cfg = BackboneConfig::default();
        let p = init_regressor(&cfg, 3).unwrap();
        let img = Tensor::full(&[3, 32, 32], 0.4);
        let out = predict(&p, &cfg, &img).unwrap();
        assert!((out.p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(out.d >= 0.0);
        assert_eq!(out, predict(&p, &cfg, &img).unwrap());
    }

    #[test]
    fn config_limits() {
        let bad = BackboneConfig {
            classes: 1,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
        let narrow = BackboneConfig {
            feature_width: 3,
            ..BackboneConfig::default()
        };
        assert!(narrow.validate().is_err());
    }

    #[test]
    fn permutation_moves_head_columns() {
        let cfg = BackboneConfig::default();
        let p = init_regressor(&cfg, 1).unwrap();
        let q = permute_classes(&p, &[2, 0, 3, 1]).unwrap();
        let (a, b) = (p.get("cls.w").unwrap(), q.get("cls.w").unwrap());
        for r in 0..cfg.feature_width {
            assert_eq!(a.data()[r * 4], b.data()[r * 4 + 2]);
            assert_eq!(a.data()[r * 4 + 3], b.data()[r * 4 + 1]);
        }
        assert!(permute_classes(&p, &[0, 0, 1, 2]).is_err());
    }
}
