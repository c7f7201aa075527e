use voxcal_autodiff::{optimizer_step, AdamConfig, Error, OptimizerState, ParamGrads, ParamSet, Tensor};

fn single(value: f32) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(value)).unwrap();
    p
}

fn grads_for(params: &ParamSet, values: &[f32]) -> ParamGrads {
    let mut g = ParamGrads::zeros_like(params);
    for (name, v) in params.names().to_vec().iter().zip(values) {
        for x in g.get_mut(name).unwrap().data_mut() {
            *x = *v;
        }
    }
    g
}

#[test]
fn zero_gradient_leaves_params_and_decays_moments() {
    let mut params = single(1.5);
    let mut state = OptimizerState::new(AdamConfig::default(), &params);
    let g = grads_for(&params, &[1.0]);
    optimizer_step(&mut params, &g, &mut state).unwrap();
    let m_after_one = state.first_moment(0)[0];
    let before = params.get("w").unwrap().item();
    let g = grads_for(&params, &[0.0]);
    optimizer_step(&mut params, &g, &mut state).unwrap();
    // With m > 0 Adam keeps moving on momentum; the moments themselves must decay.
    assert!(state.first_moment(0)[0] < m_after_one);
    assert!(state.first_moment(0)[0] > 0.0);

    let mut fresh = single(1.5);
    let mut s = OptimizerState::new(AdamConfig::default(), &fresh);
    for _ in 0..5 {
        let g = grads_for(&fresh, &[0.0]);
        optimizer_step(&mut fresh, &g, &mut s).unwrap();
    }
    assert_eq!(fresh.get("w").unwrap().item(), 1.5);
    assert_eq!(s.first_moment(0)[0], 0.0);
    assert!(before.is_finite());
}

#[test]
fn first_step_moves_by_learning_rate() {
    // m1 = 0.1, v1 = 0.001; bias correction gives m_hat = 1, v_hat = 1, so the
    // step is lr / (1 + eps).
    let mut params = single(0.0);
    let mut state = OptimizerState::new(AdamConfig::with_lr(0.1, 0.9), &params);
    let g = grads_for(&params, &[1.0]);
    optimizer_step(&mut params, &g, &mut state).unwrap();
    let w = params.get("w").unwrap().item();
    assert!((w + 0.1).abs() < 1e-6, "{w}");
    assert_eq!(state.step_count(), 1);
}

#[test]
fn identical_params_follow_identical_trajectories() {
    let mut params = ParamSet::new();
    params.insert("a", Tensor::scalar(0.7)).unwrap();
    params.insert("b", Tensor::scalar(0.7)).unwrap();
    let mut state = OptimizerState::new(AdamConfig::default(), &params);
    for step in 0..100 {
        let a = params.get("a").unwrap().item();
        let g = (a - 0.2) * (1.0 + step as f32 * 0.01);
        let grads = grads_for(&params, &[g, g]);
        optimizer_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(
            params.get("a").unwrap().item().to_bits(),
            params.get("b").unwrap().item().to_bits()
        );
    }
    assert_eq!(state.step_count(), 100);
}

#[test]
fn missing_gradient_is_rejected() {
    let mut params = ParamSet::new();
    params.insert("used", Tensor::scalar(1.0)).unwrap();
    params.insert("unused", Tensor::scalar(1.0)).unwrap();
    let mut tape = voxcal_autodiff::Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let loss = tape.sum(bound.get("used").unwrap());
    let grads = ParamGrads::from_tape(&bound, &tape.backward(loss).unwrap());
    let mut state = OptimizerState::new(AdamConfig::default(), &params);
    let err = optimizer_step(&mut params, &grads, &mut state).unwrap_err();
    assert!(matches!(err, Error::MissingGrad(ref n) if n == "unused"));
    assert_eq!(state.step_count(), 0);
}
