mod common;

use common::{gan_samples, lift, rng, uniform, widen};
use voxcal_autodiff::{grad_check_sampled, Bound, Tape, Tensor};
use voxcal_core::gan::*;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        levels: 3,
        base_channels: 16,
        noise_dim: 16,
        dropout: 0.0,
    }
}

/// `[3, H, W]` images stacked into `[B, 3, H, W]`.
fn batch(images: &[Tensor<f32>]) -> Tensor<f32> {
    let s = images[0].shape().to_vec();
    let data = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[images.len(), s[0], s[1], s[2]], data).unwrap()
}

fn forward(params: &voxcal_autodiff::ParamSet, cfg: &GeneratorConfig, x: &Tensor<f32>, z: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(x.clone());
    let z = tape.constant(z.clone());
    let t = generator_forward(&mut tape, &b, cfg, x, Some(z), None).unwrap();
    tape.value(t.probs).clone()
}

#[test]
fn generator_output_is_a_probability_volume() {
    let cfg = small();
    let p = init_generator(&cfg, 1).unwrap();
    let x = uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(2));
    let out = generate(&p, &cfg, &x).unwrap();
    assert_eq!(out.shape(), &[16, 16, 16]);
    assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(generate(&p, &cfg, &x).unwrap().data(), out.data());
}

#[test]
fn only_noise_changes_the_output() {
    let cfg = small();
    let p = init_generator(&cfg, 3).unwrap();
    let x = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(4));
    let z1 = uniform(&[1, 16], -1.0, 1.0, &mut rng(5));
    let z2 = uniform(&[1, 16], -1.0, 1.0, &mut rng(6));
    let a = forward(&p, &cfg, &x, &z1);
    assert_eq!(forward(&p, &cfg, &x, &z1).data(), a.data());
    assert_ne!(forward(&p, &cfg, &x, &z2).data(), a.data());
}

#[test]
fn batches_equal_separate_samples() {
    let cfg = small();
    let p = init_generator(&cfg, 7).unwrap();
    let mut r = rng(8);
    let xs: Vec<Tensor<f32>> = (0..3).map(|_| uniform(&[3, 16, 16], 0.0, 1.0, &mut r)).collect();
    let z = uniform(&[3, 16], -1.0, 1.0, &mut r);
    let joint = forward(&p, &cfg, &batch(&xs), &z);
    let per = 16 * 16 * 16;
    for (i, x) in xs.iter().enumerate() {
        let zi = Tensor::new(&[1, 16], z.data()[i * 16..(i + 1) * 16].to_vec()).unwrap();
        let single = forward(&p, &cfg, &batch(std::slice::from_ref(x)), &zi);
        for (a, b) in single.data().iter().zip(&joint.data()[i * per..(i + 1) * per]) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn discriminator_scores_real_and_fake_alike() {
    let cfg = small();
    let dcfg = DiscriminatorConfig::default();
    let d = init_discriminator(&dcfg, 16, 9).unwrap();
    let mut tape = Tape::<f32>::new();
    let b = d.bind(&mut tape, false);
    let mut r = rng(10);
    let img = tape.constant(uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r));
    let real = tape.constant(uniform(&[2, 16, 16, 16], 0.0, 1.0, &mut r).map(|v| v.round()));
    let fake = tape.constant(uniform(&[2, 16, 16, 16], 0.0, 1.0, &mut r));
    let a = discriminator_forward(&mut tape, &b, &dcfg, img, real).unwrap();
    let f = discriminator_forward(&mut tape, &b, &dcfg, img, fake).unwrap();
    assert_eq!(tape.shape(a), tape.shape(f));
    assert_eq!(tape.shape(a)[..2], [2, 1]);
    let _ = cfg;
}

#[test]
fn zero_lambda_leaves_only_the_adversarial_term() {
    let cfg = small();
    let dcfg = DiscriminatorConfig::default();
    let m = GanModel::init(&cfg, &dcfg, 11).unwrap();
    let mut tape = Tape::<f32>::new();
    let g = m.generator.bind(&mut tape, true);
    let d = m.discriminator.bind(&mut tape, false);
    let mut r = rng(12);
    let img = tape.constant(uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r));
    let z = tape.constant(uniform(&[1, 16], -1.0, 1.0, &mut r));
    let target = tape.constant(Tensor::ones(&[1, 16, 16, 16]));
    let loss = generator_loss(&mut tape, &g, &d, &cfg, &dcfg, img, Some(z), target, 0.0, None).unwrap();
    assert_eq!(tape.value(loss.total).item(), tape.value(loss.adv).item());
    assert!(tape.value(loss.l1).item() > 0.0);
}

/// The composed generator objective (adversarial + L1 through the
/// discriminator) at 8^3, checked in f64 on a sample of every parameter.
#[test]
fn generator_objective_gradients() {
    let cfg = GeneratorConfig {
        resolution: 8,
        levels: 3,
        base_channels: 4,
        noise_dim: 4,
        dropout: 0.0,
    };
    let dcfg = DiscriminatorConfig { base_channels: 4 };
    let m = GanModel::init(&cfg, &dcfg, 13).unwrap();
    let (gnames, mut inputs) = widen(&m.generator);
    let (dnames, dparams) = widen(&m.discriminator);
    let ng = inputs.len();
    inputs.extend(dparams);
    let mut r = rng(14);
    let img: Tensor<f64> = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r).cast();
    let z: Tensor<f64> = uniform(&[1, 4], -1.0, 1.0, &mut r).cast();
    let target: Tensor<f64> = uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut r).map(|v| v.round()).cast();
    let err = grad_check_sampled(
        |tape: &mut Tape<f64>, vars| {
            let g = Bound::from_vars(&gnames, &vars[..ng]);
            let d = Bound::from_vars(&dnames, &vars[ng..]);
            let x = tape.constant(img.clone());
            let zv = tape.constant(z.clone());
            let t = tape.constant(target.clone());
            Ok(lift(generator_loss(tape, &g, &d, &cfg, &dcfg, x, Some(zv), t, 100.0, None))?.total)
        },
        &inputs,
        1e-6,
        4,
    )
    .unwrap();
    assert!(err <= 5e-3, "relative error {err}");
}

#[test]
fn discriminator_objective_gradients() {
    let dcfg = DiscriminatorConfig { base_channels: 4 };
    let d = init_discriminator(&dcfg, 8, 15).unwrap();
    let (names, inputs) = widen(&d);
    let mut r = rng(16);
    let img: Tensor<f64> = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r).cast();
    let real: Tensor<f64> = uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut r).map(|v| v.round()).cast();
    let fake: Tensor<f64> = uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut r).cast();
    let err = grad_check_sampled(
        |tape: &mut Tape<f64>, vars| {
            let b = Bound::from_vars(&names, vars);
            let (x, a, f) = (tape.constant(img.clone()), tape.constant(real.clone()), tape.constant(fake.clone()));
            lift(discriminator_loss(tape, &b, &dcfg, x, a, f))
        },
        &inputs,
        1e-6,
        8,
    )
    .unwrap();
    assert!(err <= 5e-3, "relative error {err}");
}

#[test]
fn training_is_reproducible_and_reports_every_step() {
    let cfg = GeneratorConfig {
        resolution: 8,
        levels: 3,
        base_channels: 8,
        noise_dim: 8,
        dropout: 0.5,
    };
    let dcfg = DiscriminatorConfig::default();
    let samples = gan_samples(4, 8, 17);
    let tcfg = GanTrainConfig {
        epochs: 3,
        seed: 18,
        ..GanTrainConfig::default()
    };
    let run = || {
        let mut epochs = vec![];
        let m = GanModel::init(&cfg, &dcfg, 19).unwrap();
        let (m, rep) = gan_train(&samples, &cfg, &dcfg, &tcfg, m, |e, _| {
            epochs.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, vec![0, 1, 2]);
        (m, rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.generator.bitwise_eq(&b.generator));
    assert!(a.discriminator.bitwise_eq(&b.discriminator));
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 12);
    for (i, r) in ra.iter().enumerate() {
        assert_eq!(r.iteration, i);
        let expect = r.g_adv + tcfg.lambda as f32 * r.g_l1;
        assert!((r.g_total - expect).abs() <= 1e-4 * expect.abs(), "{r:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, &ra).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,d_loss,g_adv,g_l1,g_total");
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn max_steps_caps_training() {
    let cfg = GeneratorConfig {
        resolution: 8,
        levels: 3,
        base_channels: 8,
        noise_dim: 0,
        dropout: 0.0,
    };
    let dcfg = DiscriminatorConfig::default();
    let t = GanTrainConfig {
        epochs: 100,
        max_steps: Some(5),
        ..GanTrainConfig::default()
    };
    let m = GanModel::init(&cfg, &dcfg, 1).unwrap();
    let (_, rep) = gan_train(&gan_samples(4, 8, 2), &cfg, &dcfg, &t, m, |_, _| Ok(())).unwrap();
    assert_eq!(rep.len(), 5);
    assert!(gan_train(&[], &cfg, &dcfg, &t, GanModel::init(&cfg, &dcfg, 1).unwrap(), |_, _| Ok(())).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        GeneratorConfig { resolution: 12, ..small() },
        GeneratorConfig { levels: 5, ..small() },
        GeneratorConfig { dropout: 1.0, ..small() },
        GeneratorConfig { noise_dim: 3, ..small() },
    ];
    for c in bad {
        assert!(init_generator(&c, 0).is_err(), "{c:?}");
    }
    let p = init_generator(&small(), 0).unwrap();
    assert!(generate(&p, &small(), &Tensor::zeros(&[3, 8, 8])).is_err());
}
