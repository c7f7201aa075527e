mod common;

use common::{lift, rng, uniform, widen};
use proptest::prelude::*;
use voxcal_autodiff::{grad_check_sampled, Bound, ParamGrads, Tape, Tensor};
use voxcal_core::regressor::*;

fn cfg16() -> BackboneConfig {
    BackboneConfig {
        input_size: 16,
        ..BackboneConfig::default()
    }
}

fn samples(n: usize, seed: u64) -> Vec<RegressorSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| RegressorSample {
            image: uniform(&[3, 16, 16], 0.0, 1.0, &mut r),
            label: i % 4,
            density: 0.5 * (i % 4 + 1) as f32,
            energy: 10.0 * (i + 1) as f32,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn outputs_are_a_distribution_and_a_non_negative_density(seed in 0u64..1000, lo in -2.0f64..0.0, hi in 0.1f64..3.0) {
        let cfg = cfg16();
        let p = init_regressor(&cfg, seed).unwrap();
        let out = predict(&p, &cfg, &uniform(&[3, 16, 16], lo, hi, &mut rng(seed + 1))).unwrap();
        let sum: f32 = out.p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-5);
        prop_assert!(out.p.iter().all(|&v| v >= 0.0));
        prop_assert!(out.d >= 0.0);
    }
}

#[test]
fn identical_images_give_identical_outputs() {
    let cfg = cfg16();
    let p = init_regressor(&cfg, 1).unwrap();
    let x = uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(2));
    assert_eq!(predict(&p, &cfg, &x).unwrap(), predict(&p, &cfg, &x.clone()).unwrap());
    assert!(predict(&p, &cfg, &Tensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn combined_loss_gradients() {
    let cfg = cfg16();
    let p = init_regressor(&cfg, 3).unwrap();
    let (names, inputs) = widen(&p);
    let mut r = rng(4);
    let x: Tensor<f64> = uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r).cast();
    let d = Tensor::new(&[2, 1], vec![0.5f64, 2.0]).unwrap();
    let err = grad_check_sampled(
        |tape: &mut Tape<f64>, vars| {
            let b = Bound::from_vars(&names, vars);
            let (xv, dv) = (tape.constant(x.clone()), tape.constant(d.clone()));
            Ok(lift(regressor_loss(tape, &b, &cfg, xv, &[1, 3], dv, 1.0))?.0)
        },
        &inputs,
        1e-6,
        6,
    )
    .unwrap();
    assert!(err <= 5e-3, "relative error {err}");
}

#[test]
fn zero_beta_starves_the_density_head() {
    let cfg = cfg16();
    let p = init_regressor(&cfg, 5).unwrap();
    let mut tape = Tape::<f32>::new();
    let b = p.bind(&mut tape, true);
    let mut r = rng(6);
    let x = tape.constant(uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r));
    let d = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
    let (total, _, _) = regressor_loss(&mut tape, &b, &cfg, x, &[0, 1], d, 0.0).unwrap();
    let g = ParamGrads::from_tape(&b, &tape.backward(total).unwrap());
    for name in ["dens.w", "dens.b"] {
        if let Some(t) = g.get(name) {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(g.get("cls.w").unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn single_sample_density_overfits() {
    let cfg = cfg16();
    let s = vec![RegressorSample {
        density: 2.0,
        ..samples(1, 7).remove(0)
    }];
    let t = RegressorTrainConfig {
        epochs: 200,
        batch_size: 1,
        seed: 8,
        ..RegressorTrainConfig::default()
    };
    let (p, log) = train_regressor(&s, &cfg, &t, init_regressor(&cfg, 9).unwrap()).unwrap();
    assert_eq!(log.len(), 200);
    // The logged L1 is this sample's density error before each step.
    let best = log.iter().map(|r| r.l1).fold(f32::INFINITY, f32::min);
    assert!(best / 2.0 < 0.01, "best density error {best}");
    let d = predict(&p, &cfg, &s[0].image).unwrap().d;
    assert!((d - 2.0).abs() / 2.0 < 0.05, "final density {d}");
}

#[test]
fn relabelling_classes_relabels_nothing_else() {
    let cfg = cfg16();
    let perm = [2, 0, 3, 1];
    let base = samples(16, 10);
    let relabelled: Vec<RegressorSample> = base
        .iter()
        .map(|s| RegressorSample {
            label: perm[s.label],
            ..s.clone()
        })
        .collect();
    let t = RegressorTrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 11,
        ..RegressorTrainConfig::default()
    };
    let init = init_regressor(&cfg, 12).unwrap();
    let (_, a) = train_regressor(&base, &cfg, &t, init.clone()).unwrap();
    let (_, b) = train_regressor(&relabelled, &cfg, &t, permute_classes(&init, &perm).unwrap()).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.total - y.total).abs() <= 1e-4 * x.total.abs().max(1.0), "{x:?} vs {y:?}");
    }
    assert!(permute_classes(&init, &[0, 0, 1, 2]).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = cfg16();
    let mut s = samples(2, 13);
    s[1].label = 4;
    let t = RegressorTrainConfig::default();
    assert!(train_regressor(&s, &cfg, &t, init_regressor(&cfg, 0).unwrap()).is_err());
    assert!(train_regressor(&[], &cfg, &t, init_regressor(&cfg, 0).unwrap()).is_err());
    let narrow = BackboneConfig {
        feature_width: 3,
        ..cfg16()
    };
    assert!(init_regressor(&narrow, 0).is_err());
}

#[test]
fn baseline_predicts_in_energy_units() {
    let cfg = cfg16();
    let s = samples(8, 14);
    let t = RegressorTrainConfig {
        epochs: 2,
        seed: 15,
        ..RegressorTrainConfig::default()
    };
    let (b, log) = train_energy_baseline(&s, &cfg, &t, init_energy_baseline(&cfg, 16).unwrap()).unwrap();
    assert_eq!(log.len(), 2);
    assert!((b.energy_scale - 45.0).abs() < 1e-9);
    assert!(b.predict(&s[0].image).unwrap().is_finite());
}
