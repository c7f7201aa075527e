mod common;

use proptest::prelude::*;
use voxcal_autodiff::{Tape, Tensor};

fn vec_strategy() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-30.0f32..30.0, 1..40)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in vec_strategy(), rows in 1usize..4) {
        let cols = data.len();
        let full: Vec<f32> = (0..rows).flat_map(|r| data.iter().map(move |v| v + r as f32)).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[rows, cols], full).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sigmoid_and_softplus_ranges(data in proptest::collection::vec(-15.0f32..15.0, 1..40)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(data));
        let s = tape.sigmoid(x);
        let p = tape.softplus(x);
        prop_assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tape.value(p).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_gradients(seed in any::<u64>()) {
        let run = || {
            let mut r = common::rng(seed);
            let x = common::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r).cast::<f32>();
            let k = common::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r).cast::<f32>();
            let mut tape = Tape::<f32>::new();
            let x = tape.param(x);
            let k = tape.param(k);
            let y = tape.conv2d(x, k, None, 2, 1).unwrap();
            let y = tape.dropout(y, 0.3, Some(seed)).unwrap();
            let y = tape.leaky_relu(y, 0.2);
            let loss = tape.mean(y);
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).item().to_bits(), g.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
