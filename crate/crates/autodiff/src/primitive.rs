use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Every differentiable operation the tape knows how to record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    BroadcastTo,
    Scale,
    MatMul,
    Reshape,
    Concat,
    Slice,
    LeakyRelu,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Softmax,
    Mean,
    Sum,
    MeanAxis,
    SumAxis,
    Conv2d,
    Conv3d,
    ConvTranspose3d,
    InstanceNorm,
    Dropout,
    L1Loss,
    MseLoss,
    BceWithLogits,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 28] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::BroadcastTo,
        Primitive::Scale,
        Primitive::MatMul,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::LeakyRelu,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Softplus,
        Primitive::Softmax,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::MeanAxis,
        Primitive::SumAxis,
        Primitive::Conv2d,
        Primitive::Conv3d,
        Primitive::ConvTranspose3d,
        Primitive::InstanceNorm,
        Primitive::Dropout,
        Primitive::L1Loss,
        Primitive::MseLoss,
        Primitive::BceWithLogits,
        Primitive::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::BroadcastTo => "broadcast_to",
            Primitive::Scale => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softplus => "softplus",
            Primitive::Softmax => "softmax",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::MeanAxis => "mean_axis",
            Primitive::SumAxis => "sum_axis",
            Primitive::Conv2d => "conv2d",
            Primitive::Conv3d => "conv3d",
            Primitive::ConvTranspose3d => "conv_transpose3d",
            Primitive::InstanceNorm => "instance_norm",
            Primitive::Dropout => "dropout",
            Primitive::L1Loss => "l1_loss",
            Primitive::MseLoss => "mse_loss",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::CrossEntropy => "cross_entropy",
        }
    }

    fn arity(self) -> std::ops::RangeInclusive<usize> {
        use Primitive::*;
        match self {
            Add | Sub | Mul | MatMul | L1Loss | MseLoss | BceWithLogits => 2..=2,
            Conv2d | Conv3d | ConvTranspose3d => 2..=3,
            Concat => 1..=usize::MAX,
            _ => 1..=1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

/// Named attributes for [`Tape::apply`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs(BTreeMap<String, Attr>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: Attr) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn int(self, key: &str, v: i64) -> Self {
        self.with(key, Attr::Int(v))
    }

    pub fn float(self, key: &str, v: f64) -> Self {
        self.with(key, Attr::Float(v))
    }

    pub fn ints(self, key: &str, v: &[i64]) -> Self {
        self.with(key, Attr::Ints(v.to_vec()))
    }

    fn get(&self, op: Primitive, key: &'static str) -> Result<&Attr> {
        self.0.get(key).ok_or(Error::MissingAttr { op: op.name(), attr: key })
    }

    fn usize(&self, op: Primitive, key: &'static str) -> Result<usize> {
        match self.get(op, key)? {
            Attr::Int(v) if *v >= 0 => Ok(*v as usize),
            other => Err(bad_attr(op, key, other)),
        }
    }

    fn float_of(&self, op: Primitive, key: &'static str) -> Result<f64> {
        match self.get(op, key)? {
            Attr::Float(v) => Ok(*v),
            Attr::Int(v) => Ok(*v as f64),
            other => Err(bad_attr(op, key, other)),
        }
    }

    fn usizes(&self, op: Primitive, key: &'static str) -> Result<Vec<usize>> {
        match self.get(op, key)? {
            Attr::Ints(v) if v.iter().all(|&x| x >= 0) => Ok(v.iter().map(|&x| x as usize).collect()),
            other => Err(bad_attr(op, key, other)),
        }
    }
}

fn bad_attr(op: Primitive, key: &str, got: &Attr) -> Error {
    Error::InvalidArgument {
        op: op.name(),
        detail: format!("attribute `{key}` has unusable value {got:?}"),
    }
}

impl<T: Scalar> Tape<T> {
    /// Applies a primitive by name, the dynamic counterpart of the typed methods.
    pub fn apply_named(&mut self, kind: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        self.apply(kind.parse()?, inputs, attrs)
    }

    /// Applies `kind` to `inputs`.
    ///
    /// Attribute keys: `shape` (reshape, broadcast_to), `axis` (concat, slice,
    /// softmax, *_axis), `start`/`end` (slice), `alpha` (leaky_relu), `factor`
    /// (scale), `stride`/`pad` (convolutions), `eps` (instance_norm), `rate` and
    /// optional `seed` (dropout), `labels` (cross_entropy).
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        use Primitive as P;
        if !kind.arity().contains(&inputs.len()) {
            return Err(Error::InvalidArgument {
                op: kind.name(),
                detail: format!("expects {:?} inputs, got {}", kind.arity(), inputs.len()),
            });
        }
        let x = inputs[0];
        let f = |v: f64| T::from_f64_lossy(v);
        match kind {
            P::Add => self.add(x, inputs[1]),
            P::Sub => self.sub(x, inputs[1]),
            P::Mul => self.mul(x, inputs[1]),
            P::MatMul => self.matmul(x, inputs[1]),
            P::BroadcastTo => self.broadcast_to(x, &attrs.usizes(kind, "shape")?),
            P::Reshape => self.reshape(x, &attrs.usizes(kind, "shape")?),
            P::Scale => Ok(self.scale(x, f(attrs.float_of(kind, "factor")?))),
            P::Concat => self.concat(inputs, attrs.usize(kind, "axis")?),
            P::Slice => self.slice(
                x,
                attrs.usize(kind, "axis")?,
                attrs.usize(kind, "start")?,
                attrs.usize(kind, "end")?,
            ),
            P::LeakyRelu => Ok(self.leaky_relu(x, f(attrs.float_of(kind, "alpha")?))),
            P::Relu => Ok(self.relu(x)),
            P::Sigmoid => Ok(self.sigmoid(x)),
            P::Tanh => Ok(self.tanh(x)),
            P::Softplus => Ok(self.softplus(x)),
            P::Softmax => self.softmax(x, attrs.usize(kind, "axis")?),
            P::Mean => Ok(self.mean(x)),
            P::Sum => Ok(self.sum(x)),
            P::MeanAxis => self.mean_axis(x, attrs.usize(kind, "axis")?),
            P::SumAxis => self.sum_axis(x, attrs.usize(kind, "axis")?),
            P::Conv2d | P::Conv3d | P::ConvTranspose3d => {
                let (stride, pad) = (attrs.usize(kind, "stride")?, attrs.usize(kind, "pad")?);
                let b = inputs.get(2).copied();
                match kind {
                    P::Conv2d => self.conv2d(x, inputs[1], b, stride, pad),
                    P::Conv3d => self.conv3d(x, inputs[1], b, stride, pad),
                    _ => self.conv_transpose3d(x, inputs[1], b, stride, pad),
                }
            }
            P::InstanceNorm => {
                let eps = attrs.float_of(kind, "eps").unwrap_or(1e-5);
                self.instance_norm(x, f(eps))
            }
            P::Dropout => {
                let seed = attrs.usize(kind, "seed").ok().map(|s| s as u64);
                self.dropout(x, attrs.float_of(kind, "rate")?, seed)
            }
            P::L1Loss => self.l1_loss(x, inputs[1]),
            P::MseLoss => self.mse_loss(x, inputs[1]),
            P::BceWithLogits => self.bce_with_logits(x, inputs[1]),
            P::CrossEntropy => self.cross_entropy(x, &attrs.usizes(kind, "labels")?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        let err = "conv4d".parse::<Primitive>().unwrap_err();
        assert!(matches!(err, Error::UnknownPrimitive(ref s) if s == "conv4d"));
    }
}
