//! Convolution kernels built on im2col + gemm.
//!
//! Everything is expressed in three spatial dimensions; 2D convolution is the
//! special case of depth 1 with a depth-1 kernel. A transposed convolution is
//! described by the geometry of the forward convolution it is the adjoint of.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution, deriving the output extent.
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(shape_err("conv", "zero stride or kernel extent"));
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(shape_err(
                    "conv",
                    format!("input {:?} (pad {:?}) smaller than kernel {:?}", input, pad, kernel),
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// Geometry of a transposed convolution taking `t_in` channels at extent
    /// `input` to `t_out` channels. Returned in the "conv view": the forward
    /// convolution whose adjoint this is, so `geom.input` is the transposed
    /// output and `geom.output` the transposed input.
    pub fn transposed(
        t_in: usize,
        t_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * stride[a] + kernel[a];
            if full < 2 * pad[a] + 1 {
                return Err(shape_err("conv_transpose", "padding exceeds output extent"));
            }
            out[a] = full - 2 * pad[a];
        }
        let g = Self::conv(t_out, t_in, out, kernel, stride, pad)?;
        if g.output != input {
            return Err(shape_err(
                "conv_transpose",
                format!("extent {input:?} is not reachable with kernel {kernel:?} stride {stride:?}"),
            ));
        }
        Ok(g)
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix: one per (input channel, kernel offset).
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p_len = od * oh * ow;
    for c in 0..g.in_channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p_len..(row + 1) * p_len];
                    let mut p = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[p..p + oh * ow].fill(T::zero());
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[p..p + ow].fill(T::zero());
                                p += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[p] = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    x[base + ix as usize]
                                };
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p_len = od * oh * ow;
    for c in 0..g.in_channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * p_len..(row + 1) * p_len];
                    let mut p = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                p += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[base + ix as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], spatial: usize) {
    for (chunk, &b) in y.chunks_mut(spatial).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Sum of `dy` over batch and spatial axes, per channel.
pub(crate) fn bias_grad<T: Scalar>(dy: &[T], channels: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in dy.chunks(spatial).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    db
}

const ROW_MAJOR: fn(usize) -> (isize, isize) = |cols| (cols as isize, 1);
/// View of a row-major matrix with `cols` stored columns as its transpose.
const TRANSPOSED: fn(usize) -> (isize, isize) = |cols| (1, cols as isize);

/// Forward convolution over a batch of `n` samples.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (r, p, co) = (g.col_rows(), g.out_spatial(), g.out_channels);
    let in_len = g.in_channels * g.in_spatial();
    let mut cols = vec![T::zero(); r * p];
    let mut y = vec![T::zero(); n * co * p];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        T::gemm(
            co,
            r,
            p,
            T::one(),
            w,
            ROW_MAJOR(r),
            &cols,
            ROW_MAJOR(p),
            T::zero(),
            &mut y[s * co * p..(s + 1) * co * p],
            ROW_MAJOR(p),
        );
    }
    if let Some(b) = bias {
        add_bias(&mut y, b, p);
    }
    y
}

/// Gradients of a forward convolution with respect to input and weight.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (r, p, co) = (g.col_rows(), g.out_spatial(), g.out_channels);
    let in_len = g.in_channels * g.in_spatial();
    let mut cols = vec![T::zero(); r * p];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.weight_len()]);
    for s in 0..n {
        let dys = &dy[s * co * p..(s + 1) * co * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            T::gemm(
                co,
                p,
                r,
                T::one(),
                dys,
                ROW_MAJOR(p),
                &cols,
                TRANSPOSED(p),
                T::one(),
                dw,
                ROW_MAJOR(r),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                r,
                co,
                p,
                T::one(),
                w,
                TRANSPOSED(r),
                dys,
                ROW_MAJOR(p),
                T::zero(),
                &mut cols,
                ROW_MAJOR(p),
            );
            col2im(&cols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Forward transposed convolution; `g` is the conv view (see [`ConvGeom::transposed`]).
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (r, p, ci) = (g.col_rows(), g.out_spatial(), g.out_channels);
    let out_len = g.in_channels * g.in_spatial();
    let mut cols = vec![T::zero(); r * p];
    let mut y = vec![T::zero(); n * out_len];
    for s in 0..n {
        T::gemm(
            r,
            ci,
            p,
            T::one(),
            w,
            TRANSPOSED(r),
            &x[s * ci * p..(s + 1) * ci * p],
            ROW_MAJOR(p),
            T::zero(),
            &mut cols,
            ROW_MAJOR(p),
        );
        col2im(&cols, g, &mut y[s * out_len..(s + 1) * out_len]);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b, g.in_spatial());
    }
    y
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (r, p, ci) = (g.col_rows(), g.out_spatial(), g.out_channels);
    let out_len = g.in_channels * g.in_spatial();
    let mut cols = vec![T::zero(); r * p];
    let mut dx = need_dx.then(|| vec![T::zero(); n * ci * p]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.weight_len()]);
    for s in 0..n {
        im2col(&dy[s * out_len..(s + 1) * out_len], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                ci,
                r,
                p,
                T::one(),
                w,
                ROW_MAJOR(r),
                &cols,
                ROW_MAJOR(p),
                T::zero(),
                &mut dx[s * ci * p..(s + 1) * ci * p],
                ROW_MAJOR(p),
            );
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(
                ci,
                p,
                r,
                T::one(),
                &x[s * ci * p..(s + 1) * ci * p],
                ROW_MAJOR(p),
                &cols,
                TRANSPOSED(p),
                T::one(),
                dw,
                ROW_MAJOR(r),
            );
        }
    }
    (dx, dw)
}
