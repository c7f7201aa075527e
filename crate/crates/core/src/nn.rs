//! Small layer helpers shared by the models.

use rand::Rng;
use voxcal_autodiff::{init_tensor, Bound, Init, ParamSet, Scalar, Tape, Var};

use crate::error::Result;

/// Registers a weight (and optional zero bias of length `out`) under `name.w` / `name.b`.
pub(crate) fn add_layer<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    name: &str,
    shape: &[usize],
    fan: (usize, usize),
    init: Init,
    bias: Option<usize>,
) -> Result<()> {
    params.insert(&format!("{name}.w"), init_tensor(shape, fan.0, fan.1, init, rng))?;
    if let Some(out) = bias {
        params.insert(&format!("{name}.b"), init_tensor(&[out], 0, 0, Init::Constant(0.0), rng))?;
    }
    Ok(())
}

pub(crate) fn weight(bound: &Bound, name: &str) -> Result<Var> {
    Ok(bound.get(&format!("{name}.w"))?)
}

pub(crate) fn bias(bound: &Bound, name: &str) -> Result<Option<Var>> {
    let key = format!("{name}.b");
    Ok(bound.names().iter().any(|n| *n == key).then(|| bound.get(&key)).transpose()?)
}

/// `x: [B, in]` times `name.w: [in, out]` plus `name.b`.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, weight(bound, name)?)?;
    Ok(match bias(bound, name)? {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Stacks per-sample tensors along a new leading axis.
pub(crate) fn stack(items: &[&voxcal_autodiff::Tensor<f32>]) -> Result<voxcal_autodiff::Tensor<f32>> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(crate::Error::Dimensions {
                op: "stack",
                left: shape,
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(voxcal_autodiff::Tensor::new(&full, data)?)
}

/// Plain minibatch Adam loop. `loss` builds the objective for one batch of
/// sample indices and returns the value to minimize followed by any extra terms
/// to log; each iteration's logged row is `[total, extras...]`.
pub(crate) fn minibatch_train<F>(
    params: &mut ParamSet,
    n: usize,
    batch_size: usize,
    epochs: usize,
    adam: voxcal_autodiff::AdamConfig,
    seed: u64,
    stage: &'static str,
    mut loss: F,
) -> Result<Vec<Vec<f32>>>
where
    F: FnMut(&mut Tape<f32>, &Bound, &[usize]) -> Result<(Var, Vec<Var>)>,
{
    use rand::SeedableRng;
    if n == 0 {
        return Err(crate::Error::EmptyDataset);
    }
    let mut state = voxcal_autodiff::OptimizerState::new(adam, params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    for _ in 0..epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, true);
            let (total, extras) = loss(&mut tape, &bound, chunk)?;
            let mut row = vec![tape.value(total).item()];
            row.extend(extras.iter().map(|v| tape.value(*v).item()));
            if !row.iter().all(|v| v.is_finite()) {
                return Err(crate::Error::NumericFailure {
                    stage,
                    iteration: log.len(),
                });
            }
            let grads = voxcal_autodiff::ParamGrads::from_tape(&bound, &tape.backward(total)?);
            voxcal_autodiff::optimizer_step(params, &grads, &mut state)?;
            log.push(row);
        }
    }
    Ok(log)
}
