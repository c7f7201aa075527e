//! Reverse-mode tape.
//!
//! Every operation appends one node holding its forward value. When at least
//! one input requires a gradient the node also keeps the record needed to
//! run its backward rule; otherwise it is stored as a constant.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::primitive::Primitive;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_index, broadcast_shape, numel, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastTo(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, dims: u8 },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    InstanceNorm { x: Var, normalized: Vec<T>, inv_std: Vec<T>, group: usize },
    Dropout { x: Var, mask: Vec<T> },
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    BceWithLogits { logits: Var, targets: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<Primitive> {
        use Primitive as P;
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => P::Add,
            Op::Sub(..) => P::Sub,
            Op::Mul(..) => P::Mul,
            Op::BroadcastTo(_) => P::BroadcastTo,
            Op::Scale(..) => P::Scale,
            Op::MatMul(..) => P::MatMul,
            Op::Reshape(_) => P::Reshape,
            Op::Concat { .. } => P::Concat,
            Op::Slice { .. } => P::Slice,
            Op::LeakyRelu(..) => P::LeakyRelu,
            Op::Relu(_) => P::Relu,
            Op::Sigmoid(_) => P::Sigmoid,
            Op::Tanh(_) => P::Tanh,
            Op::Softplus(_) => P::Softplus,
            Op::Softmax { .. } => P::Softmax,
            Op::Sum(_) => P::Sum,
            Op::Mean(_) => P::Mean,
            Op::SumAxis { .. } => P::SumAxis,
            Op::MeanAxis { .. } => P::MeanAxis,
            Op::Conv { dims: 2, .. } => P::Conv2d,
            Op::Conv { .. } => P::Conv3d,
            Op::ConvTranspose { .. } => P::ConvTranspose3d,
            Op::InstanceNorm { .. } => P::InstanceNorm,
            Op::Dropout { .. } => P::Dropout,
            Op::L1Loss(..) => P::L1Loss,
            Op::MseLoss(..) => P::MseLoss,
            Op::BceWithLogits { .. } => P::BceWithLogits,
            Op::CrossEntropy { .. } => P::CrossEntropy,
        })
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::L1Loss(a, b)
            | Op::MseLoss(a, b) => vec![*a, *b],
            Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
            Op::BroadcastTo(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::LeakyRelu(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softplus(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::InstanceNorm { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One recorded primitive application, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub kind: Primitive,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    map: HashMap<usize, Tensor<T>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Ids of the records whose backward rule ran, in execution order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count fits the scalar type")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Recorded (differentiable) primitive applications, in tape order.
    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.op.kind().map(|kind| Record {
                    kind,
                    inputs: n.op.inputs(),
                    output: Var(i),
                })
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise arithmetic -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out, &sa);
            let ib = broadcast_index(&out, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if broadcast_shape(&src, shape).as_deref() != Some(shape) {
            return Err(shape_err("broadcast_to", format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let idx = broadcast_index(shape, &src);
        let d = self.data(x);
        let t = Tensor::new(shape, idx.iter().map(|&i| d[i]).collect())?;
        Ok(self.push(t, Op::BroadcastTo(x)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    // ---- shape manipulation -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let block = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.data(*v)[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    // ---- nonlinearities -----------------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { alpha * v });
        self.push(t, Op::LeakyRelu(x, alpha))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (d[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    // ---- reductions -----------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / count(d.len());
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn reduce_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err(op, format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, out))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis(x, axis, "sum_axis")?;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis(x, axis, "mean_axis")?;
        let n = count::<T>(self.shape(x)[axis]);
        for v in &mut out {
            *v = *v / n;
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, axis }))
    }

    // ---- convolutions -----------------------------------------------------------------

    fn check_bias(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err(op, format!("bias {:?}, expected [{channels}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// `x: [N, C, H, W]`, `w: [Co, C, kh, kw]`, optional `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        self.check_bias(b, sw[0], "conv2d")?;
        let geom = ConvGeom::conv(
            sx[1],
            sw[0],
            [1, sx[2], sx[3]],
            [1, sw[2], sw[3]],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let y = conv::conv_forward(
            self.data(x),
            sx[0],
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let t = Tensor::new(&[sx[0], sw[0], geom.output[1], geom.output[2]], y)?;
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch: sx[0],
                dims: 2,
            },
        ))
    }

    /// `x: [N, C, D, H, W]`, `w: [Co, C, kd, kh, kw]`, optional `b: [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(shape_err("conv3d", format!("input {sx:?} with kernel {sw:?}")));
        }
        self.check_bias(b, sw[0], "conv3d")?;
        let geom = ConvGeom::conv(
            sx[1],
            sw[0],
            [sx[2], sx[3], sx[4]],
            [sw[2], sw[3], sw[4]],
            [stride; 3],
            [pad; 3],
        )?;
        let y = conv::conv_forward(
            self.data(x),
            sx[0],
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let t = Tensor::new(&[sx[0], sw[0], od, oh, ow], y)?;
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch: sx[0],
                dims: 3,
            },
        ))
    }

    /// `x: [N, Ci, D, H, W]`, `w: [Ci, Co, kd, kh, kw]`, optional `b: [Co]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[0] {
            return Err(shape_err("conv_transpose3d", format!("input {sx:?} with kernel {sw:?}")));
        }
        self.check_bias(b, sw[1], "conv_transpose3d")?;
        let geom = ConvGeom::transposed(
            sw[0],
            sw[1],
            [sx[2], sx[3], sx[4]],
            [sw[2], sw[3], sw[4]],
            [stride; 3],
            [pad; 3],
        )?;
        let y = conv::conv_transpose_forward(
            self.data(x),
            sx[0],
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let [d, h, ww] = geom.input;
        let t = Tensor::new(&[sx[0], sw[1], d, h, ww], y)?;
        Ok(self.push(
            t,
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                batch: sx[0],
            },
        ))
    }

    // ---- normalization and regularization ---------------------------------------------

    /// Per-sample, per-channel normalization over the spatial axes of `[N, C, ...]`.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err("instance_norm", format!("need [N, C, spatial..], got {s:?}")));
        }
        let group: usize = s[2..].iter().product();
        let d = self.data(x);
        let n = count::<T>(group);
        let mut normalized = vec![T::zero(); d.len()];
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for (chunk, out) in d.chunks(group).zip(normalized.chunks_mut(group)) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(&s, normalized.clone())?;
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                normalized,
                inv_std,
                group,
            },
        ))
    }

    /// Inverted dropout. `seed: None` draws the mask from OS entropy, which makes
    /// the surrounding function non-deterministic.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: Option<u64>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mut rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_os_rng(),
        };
        let len = self.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let d = self.data(x);
        let data = d.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    // ---- losses ------------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(&x, &y)| (x - y).abs()).sum::<T>() / count(da.len());
        Ok(self.push(Tensor::scalar(s), Op::L1Loss(a, b)))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / count(da.len());
        Ok(self.push(Tensor::scalar(s), Op::MseLoss(a, b)))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape(logits, targets, "bce_with_logits")?;
        let (dl, dt) = (self.data(logits), self.data(targets));
        let s = dl
            .iter()
            .zip(dt)
            .map(|(&x, &t)| softplus(x) - x * t)
            .sum::<T>()
            / count(dl.len());
        Ok(self.push(Tensor::scalar(s), Op::BceWithLogits { logits, targets }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// logits are `[N, K]` or `[K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (n, k) = match s.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(shape_err("cross_entropy", format!("logits {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &d[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += z.ln() + max - row[label];
        }
        let t = Tensor::scalar(total / count(n));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ------------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every ancestor of `loss` that requires a
    /// gradient. The tape itself is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.propagate(id, &g, &mut grads);
                visited.push(id);
            }
            grads[id] = Some(g);
        }
        let map = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = g?;
                let node = &self.nodes[id];
                node.requires_grad
                    .then(|| (id, Tensor::new(node.value.shape(), g).expect("grad shape")))
            })
            .collect();
        Ok(Gradients { map, visited })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Sums an output-shaped gradient back onto a broadcast source.
    fn unbroadcast(&self, g: &[T], out_shape: &[usize], src: Var) -> Vec<T> {
        let s = self.shape(src);
        if s == out_shape {
            return g.to_vec();
        }
        let mut r = vec![T::zero(); numel(s)];
        for (gi, si) in g.iter().zip(broadcast_index(out_shape, s)) {
            r[si] += *gi;
        }
        r
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, self.unbroadcast(g, out_shape, *a));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, self.unbroadcast(g, out_shape, *b));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, self.unbroadcast(g, out_shape, *a));
                }
                if self.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum(grads, *b, self.unbroadcast(&neg, out_shape, *b));
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let od = self.data(other);
                    let scaled: Vec<T> = if self.shape(other) == out_shape {
                        g.iter().zip(od).map(|(&gv, &o)| gv * o).collect()
                    } else {
                        let idx = broadcast_index(out_shape, self.shape(other));
                        g.iter().zip(idx).map(|(&gv, i)| gv * od[i]).collect()
                    };
                    self.accum(grads, this, self.unbroadcast(&scaled, out_shape, this));
                }
            }
            Op::BroadcastTo(x) => self.accum(grads, *x, self.unbroadcast(g, out_shape, *x)),
            Op::Scale(x, f) => self.accum(grads, *x, g.iter().map(|&v| v * *f).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        self.data(*b),
                        (1, n as isize),
                        T::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.data(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::zero(),
                        &mut gb,
                        (n as isize, 1),
                    );
                    self.accum(grads, *b, gb);
                }
            }
            Op::Reshape(x) => self.accum(grads, *x, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                let row = out_shape[*axis] * inner;
                for v in inputs {
                    let block = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let mut part = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            part.extend_from_slice(&g[o * row + offset..o * row + offset + block]);
                        }
                        self.accum(grads, *v, part);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = out_shape[*axis] * inner;
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let at = (o * len + start) * inner;
                    gx[at..at + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.accum(grads, *x, gx);
            }
            Op::LeakyRelu(x, alpha) => {
                let xd = self.data(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *alpha })
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.accum(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                self.accum(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                let gx = g.iter().zip(xd).map(|(&gv, &v)| gv * sigmoid(v)).collect();
                self.accum(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Sum(x) => self.accum(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, vec![g[0] / count(n); n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / count(len)
                } else {
                    T::one()
                };
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
                ..
            } => {
                let (dx, dw) = conv::conv_backward(
                    self.data(*x),
                    *batch,
                    self.data(*w),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accum(grads, b, conv::bias_grad(g, geom.out_channels, geom.out_spatial()));
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let (dx, dw) = conv::conv_transpose_backward(
                    self.data(*x),
                    *batch,
                    self.data(*w),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accum(grads, b, conv::bias_grad(g, geom.in_channels, geom.in_spatial()));
                }
            }
            Op::InstanceNorm {
                x,
                normalized,
                inv_std,
                group,
            } => {
                let n = count::<T>(*group);
                let mut gx = vec![T::zero(); g.len()];
                for (((gc, yc), out), &inv) in g
                    .chunks(*group)
                    .zip(normalized.chunks(*group))
                    .zip(gx.chunks_mut(*group))
                    .zip(inv_std)
                {
                    let mean_g = gc.iter().copied().sum::<T>() / n;
                    let mean_gy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gv), &yv) in out.iter_mut().zip(gc).zip(yc) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let gx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(grads, *x, gx);
            }
            Op::L1Loss(a, b) | Op::MseLoss(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let n = count::<T>(da.len());
                let two = T::one() + T::one();
                let l1 = matches!(node.op, Op::L1Loss(..));
                let ga: Vec<T> = da
                    .iter()
                    .zip(db)
                    .map(|(&p, &q)| {
                        let d = if l1 { sign(p - q) } else { two * (p - q) };
                        g[0] * d / n
                    })
                    .collect();
                if self.wants(*b) {
                    self.accum(grads, *b, ga.iter().map(|&v| -v).collect());
                }
                self.accum(grads, *a, ga);
            }
            Op::BceWithLogits { logits, targets } => {
                let (dl, dt) = (self.data(*logits), self.data(*targets));
                let n = count::<T>(dl.len());
                if self.wants(*logits) {
                    let gl = dl
                        .iter()
                        .zip(dt)
                        .map(|(&x, &t)| g[0] * (sigmoid(x) - t) / n)
                        .collect();
                    self.accum(grads, *logits, gl);
                }
                if self.wants(*targets) {
                    let gt = dl.iter().map(|&x| -g[0] * x / n).collect();
                    self.accum(grads, *targets, gt);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut gl: Vec<T> = probs.iter().map(|&p| g[0] * p / count(n)).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= g[0] / count(n);
                }
                self.accum(grads, *logits, gl);
            }
        }
    }
}
