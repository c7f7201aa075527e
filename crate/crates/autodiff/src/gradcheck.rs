use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eval<T, F>(f: &F, inputs: &[Tensor<T>], trainable: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn value<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval(f, inputs, false)?;
    Ok(tape.value(out).item())
}

/// Max relative error between the tape gradient of scalar `f` at `x` and its
/// central-difference estimate with step `eps`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once, checking every element.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check_many`] but probes at most `per_input` evenly strided
/// elements of each input.
pub fn grad_check_sampled<T, F>(f: F, inputs: &[Tensor<T>], eps: T, per_input: usize) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            detail: "eps must be positive".into(),
        });
    }
    let (tape, vars, out) = eval(&f, inputs, true)?;
    let first = tape.value(out).item();
    let second = value(&f, inputs)?;
    if first.bits() != second.bits() {
        return Err(Error::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let len = inputs[slot].len();
        let zeros = Tensor::zeros(inputs[slot].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let step = (len / per_input.max(1)).max(1);
        for i in (0..len).step_by(step) {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + eps;
            let plus = value(&f, &probe)?;
            probe[slot].data_mut()[i] = orig - eps;
            let minus = value(&f, &probe)?;
            probe[slot].data_mut()[i] = orig;

            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * eps.as_f64());
            let a = analytic.data()[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
