mod common;

use common::{rng, uniform};
use voxcal_autodiff::{grad_check, Error, Tape, Tensor};

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    assert_eq!(g.get(x).unwrap().shape(), &[2, 3]);
}

#[test]
fn mean_of_squares_matches_hand_derivative() {
    // d/dx mean(x^2) = 2x / n
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.mean(sq);
    let g = tape.backward(loss).unwrap();
    let expected = [2.0 / 3.0, 4.0 / 3.0, 2.0];
    for (a, b) in g.get(x).unwrap().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bce_at_symmetric_point_has_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let logit = tape.param(Tensor::scalar(0.0));
    let target = tape.constant(Tensor::scalar(0.5));
    let loss = tape.bce_with_logits(logit, target).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(logit).unwrap().item(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::ones(&[3]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![3]));
}

#[test]
fn non_ancestors_get_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Tensor::ones(&[2]));
    let b = tape.param(Tensor::ones(&[2]));
    let unrelated = tape.relu(b);
    let loss = tape.sum(a);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none());
    assert!(g.get(unrelated).is_none());
}

#[test]
fn backward_leaves_tape_intact_and_visits_each_record_once_in_reverse() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_vec(vec![0.3, -0.2, 0.9]));
    let y = tape.sigmoid(x);
    let z = tape.mul(y, x).unwrap();
    let w = tape.tanh(z);
    let loss = tape.mean(w);
    let before = tape.len();
    let g1 = tape.backward(loss).unwrap();
    assert_eq!(tape.len(), before);

    let visited = g1.visited();
    assert_eq!(visited.len(), tape.records().len());
    assert!(visited.windows(2).all(|p| p[0] > p[1]));

    // Reusable: a second pass gives identical gradients.
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(x), g2.get(x));
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn records_are_topologically_ordered() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::ones(&[1, 1, 4, 4]));
    let k = tape.param(Tensor::ones(&[2, 1, 3, 3]));
    let y = tape.conv2d(x, k, None, 1, 1).unwrap();
    let y = tape.instance_norm(y, 1e-5).unwrap();
    let _ = tape.mean(y);
    for r in tape.records() {
        assert!(r.inputs.iter().all(|i| i.id() < r.output.id()));
    }
}

#[test]
fn grad_check_of_linear_function_is_exact() {
    let x = uniform(&[4, 5], -1.0, 1.0, &mut rng(1));
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn grad_check_conv_sigmoid_mean() {
    let mut r = rng(2);
    let x = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let err = grad_check(
        |t, x| {
            let k = t.constant(k.clone());
            let y = t.conv2d(x, k, None, 1, 1)?;
            let s = t.sigmoid(y);
            Ok(t.mean(s))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn grad_check_rejects_unseeded_dropout() {
    let x = uniform(&[64], -1.0, 1.0, &mut rng(3));
    let result = grad_check(
        |t, x| {
            let y = t.dropout(x, 0.5, None)?;
            Ok(t.sum(y))
        },
        &x,
        1e-3,
    );
    assert!(matches!(result, Err(Error::NonDeterministic { .. })));
}

#[test]
fn grad_check_requires_positive_eps() {
    let x = Tensor::<f64>::ones(&[2]);
    assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
}

#[test]
fn broadcast_input_gradient_sums_back_to_its_shape() {
    let mut tape = Tape::<f32>::new();
    let big = tape.param(Tensor::ones(&[2, 3, 4]));
    let bias = tape.param(Tensor::ones(&[3, 1]));
    let y = tape.add(big, bias).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    let gb = g.get(bias).unwrap();
    assert_eq!(gb.shape(), &[3, 1]);
    assert!(gb.data().iter().all(|&v| v == 8.0));
}
