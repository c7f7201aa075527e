//! Class-aware volume refinement `f(p, v)` and the energy `w = d * f(p, v)`.
//!
//! Parameters are stored normalized by `scale` (the volume of the full grid) so
//! that the volume input is O(1). In raw terms
//! `f = scale * theta_p . p + theta_v * v + scale * theta_b`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxcal_autodiff::{AdamConfig, Bound, ParamSet, Scalar, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::minibatch_train;

#[derive(Clone, Debug)]
pub struct AdaptationLayer {
    /// `theta_p: [K, 1]`, `theta_v: [1, 1]` and, with the bias flag, `theta_b: [1]`.
    pub params: ParamSet,
    pub classes: usize,
    pub scale: f64,
}

impl AdaptationLayer {
    /// `f(p, v) = v`.
    pub fn identity(classes: usize, scale: f64, use_bias: bool) -> Self {
        Self::from_raw(&vec![0.0; classes], 1.0, use_bias.then_some(0.0), scale)
    }

    pub fn from_raw(w_p: &[f64], w_v: f64, bias: Option<f64>, scale: f64) -> Self {
        let mut params = ParamSet::new();
        let tp = w_p.iter().map(|w| (w / scale) as f32).collect();
        params.insert("theta_p", Tensor::new(&[w_p.len(), 1], tp).expect("column")).expect("fresh");
        params.insert("theta_v", Tensor::new(&[1, 1], vec![w_v as f32]).expect("scalar")).expect("fresh");
        if let Some(b) = bias {
            params.insert("theta_b", Tensor::new(&[1], vec![(b / scale) as f32]).expect("scalar")).expect("fresh");
        }
        Self {
            params,
            classes: w_p.len(),
            scale,
        }
    }

    pub fn use_bias(&self) -> bool {
        self.params.get("theta_b").is_some()
    }

    /// Raw `(w_p, w_v, b)`.
    pub fn raw_weights(&self) -> (Vec<f64>, f64, f64) {
        let tp = self.params.get("theta_p").expect("theta_p");
        let w_p = tp.data().iter().map(|&t| t as f64 * self.scale).collect();
        let w_v = self.params.get("theta_v").expect("theta_v").item() as f64;
        let b = self.params.get("theta_b").map_or(0.0, |t| t.item() as f64 * self.scale);
        (w_p, w_v, b)
    }

    pub fn refine_volume(&self, p: &[f32], v: f64) -> Result<f64> {
        if p.len() != self.classes {
            return Err(invalid(format!("expected {} class probabilities, got {}", self.classes, p.len())));
        }
        let (w_p, w_v, b) = self.raw_weights();
        Ok(w_p.iter().zip(p).map(|(w, &pi)| w * pi as f64).sum::<f64>() + w_v * v + b)
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "classes": self.classes, "scale": self.scale, "bias": self.use_bias() })
    }

    pub fn from_parts(params: ParamSet, meta: &serde_json::Value) -> Result<Self> {
        let classes = meta["classes"].as_u64().ok_or_else(|| invalid("adaptation meta lacks `classes`"))? as usize;
        let scale = meta["scale"].as_f64().ok_or_else(|| invalid("adaptation meta lacks `scale`"))?;
        match params.get("theta_p") {
            Some(t) if t.shape() == [classes, 1] => {}
            _ => return Err(invalid("adaptation checkpoint has a malformed theta_p")),
        }
        Ok(Self { params, classes, scale })
    }
}

/// Batched `(v_refined, w)` on the tape: `p: [B, K]`, `v: [B, 1]` raw volume, `d: [B, 1]`.
pub fn adaptation_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    scale: f64,
    p: Var,
    v: Var,
    d: Var,
) -> Result<(Var, Var)> {
    let vn = tape.scale(v, T::from_f64_lossy(1.0 / scale));
    let from_p = tape.matmul(p, bound.get("theta_p")?)?;
    let from_v = tape.mul(vn, bound.get("theta_v")?)?;
    let mut f = tape.add(from_p, from_v)?;
    if bound.names().iter().any(|n| n == "theta_b") {
        f = tape.add(f, bound.get("theta_b")?)?;
    }
    let refined = tape.scale(f, T::from_f64_lossy(scale));
    let w = tape.mul(d, refined)?;
    Ok((refined, w))
}

/// Frozen upstream outputs for one training dish.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub p: Vec<f32>,
    pub v: f64,
    pub d: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub seed: u64,
}

impl Default for AdaptationTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            seed: 0,
        }
    }
}

/// Fits the layer with L1 on energy; upstream values are constants.
pub fn train_adaptation(
    records: &[AdaptationRecord],
    layer: AdaptationLayer,
    tcfg: &AdaptationTrainConfig,
) -> Result<(AdaptationLayer, Vec<f32>)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(r) = records.iter().find(|r| r.p.len() != layer.classes) {
        return Err(invalid(format!("record has {} probabilities, layer expects {}", r.p.len(), layer.classes)));
    }
    let mut layer = layer;
    let (k, scale) = (layer.classes, layer.scale);
    let log = minibatch_train(
        &mut layer.params,
        records.len(),
        tcfg.batch_size,
        tcfg.epochs,
        AdamConfig::with_lr(tcfg.lr, tcfg.beta1),
        tcfg.seed,
        "adaptation",
        |tape, bound, idx| {
            let b = idx.len();
            let p: Vec<f32> = idx.iter().flat_map(|&i| records[i].p.iter().copied()).collect();
            let col = |f: &dyn Fn(&AdaptationRecord) -> f64| {
                Tensor::new(&[b, 1], idx.iter().map(|&i| f(&records[i]) as f32).collect()).expect("column")
            };
            let p = tape.constant(Tensor::new(&[b, k], p)?);
            let v = tape.constant(col(&|r| r.v));
            let d = tape.constant(col(&|r| r.d));
            let target = tape.constant(col(&|r| r.energy));
            let (_, w) = adaptation_forward(tape, bound, scale, p, v, d)?;
            Ok((tape.l1_loss(w, target)?, vec![]))
        },
    )?;
    Ok((layer, log.into_iter().map(|r| r[0]).collect()))
}

/// Energy L1 per iteration, for adaptation or joint training.
pub fn write_loss_csv(path: &Path, l1: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "l1"])?;
    for (i, v) in l1.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-image provenance of an energy estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub sample_id: String,
    pub p: Vec<f32>,
    pub v: f64,
    pub v_refined: f64,
    pub d: f64,
    pub w_kcal: f64,
}

impl EnergyEstimate {
    pub fn new(sample_id: &str, p: Vec<f32>, v: f64, d: f64, layer: &AdaptationLayer) -> Result<Self> {
        let v_refined = layer.refine_volume(&p, v)?;
        Ok(Self {
            sample_id: sample_id.to_owned(),
            p,
            v,
            v_refined,
            d,
            w_kcal: d * v_refined,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_returns_volume() {
        let l = AdaptationLayer::identity(4, 32768.0, true);
        assert_eq!(l.refine_volume(&[0.1, 0.2, 0.3, 0.4], 50.0).unwrap(), 50.0);
        assert!(l.refine_volume(&[1.0], 50.0).is_err());
    }

    #[test]
    fn constant_map() {
        let l = AdaptationLayer::from_raw(&[0.0; 3], 0.0, Some(7.0), 64.0);
        for v in [0.0, 3.0, 1e4] {
            assert_eq!(l.refine_volume(&[0.2, 0.3, 0.5], v).unwrap(), 7.0);
        }
    }

    #[test]
    fn energy_is_density_times_refined_volume() {
        let l = AdaptationLayer::identity(2, 100.0, false);
        let e = EnergyEstimate::new("x", vec![0.5, 0.5], 50.0, 2.0, &l).unwrap();
        assert_eq!(e.w_kcal, 100.0);
        let empty = EnergyEstimate::new("x", vec![0.5, 0.5], 0.0, 2.0, &l).unwrap();
        assert_eq!(empty.w_kcal, 0.0);
    }

    #[test]
    fn zero_epochs_keep_identity() {
        let recs = vec![AdaptationRecord {
            p: vec![1.0, 0.0],
            v: 10.0,
            d: 1.0,
            energy: 30.0,
        }];
        let cfg = AdaptationTrainConfig {
            epochs: 0,
            ..AdaptationTrainConfig::default()
        };
        let (l, log) = train_adaptation(&recs, AdaptationLayer::identity(2, 100.0, true), &cfg).unwrap();
        assert!(log.is_empty());
        assert!(l.params.bitwise_eq(&AdaptationLayer::identity(2, 100.0, true).params));
    }
}
