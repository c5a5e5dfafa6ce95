//! Value-level 2-d convolution kernels over `(batch, channels, height, width)` tensors.
//!
//! `conv2d` is a cross-correlation (no kernel flip). `conv_transpose2d` is its exact
//! adjoint: for a weight tensor `w` of shape `(o, i, kh, kw)` and identical geometry,
//! `<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>`.

use crate::error::TensorError;
use crate::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type TResult<T> = Result<T, TensorError>;

/// Output size of a convolution along one axis, `None` when the kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output size of a transposed convolution along one axis.
pub fn tconv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&d| d >= 1)
}

/// Gradients of a convolution-like operator with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Calls `f(row, col, src)` for every in-bounds (patch row, output column, input offset).
    #[inline(always)]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.oh * self.ow;
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for b in 0..self.batch {
                        let src_base = (b * self.channels + c) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(
                                    row,
                                    b * plane + oy * self.ow + ox,
                                    src_base + iy as usize * self.w + ix as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let ncols = self.cols();
        let mut cols = vec![T::zero(); self.rows() * ncols];
        self.for_each(|row, col, src| cols[row * ncols + col] = x[src]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let ncols = self.cols();
        let mut out = vec![T::zero(); self.batch * self.channels * self.h * self.w];
        self.for_each(|row, col, dst| out[dst] = out[dst] + cols[row * ncols + col]);
        out
    }
}

fn dims4(t: &Tensor<impl Scalar>, op: &'static str) -> TResult<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Geometry {
            op,
            detail: format!("expected a 4-d tensor, got {:?}", t.shape()),
        }),
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, channels: usize, op: &'static str) -> TResult<()> {
    if bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![channels],
            rhs: bias.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(c, batch·p)` channel-major matrix → `(batch, c, p)` tensor data, adding `bias[c]`.
fn channel_major_to_batched<T: Scalar>(m: &[T], batch: usize, c: usize, p: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); batch * c * p];
    for ch in 0..c {
        let bv = bias.map_or(T::zero(), |b| b[ch]);
        for b in 0..batch {
            let src = &m[ch * batch * p + b * p..ch * batch * p + (b + 1) * p];
            let dst = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
            if bias.is_some() {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

/// `(batch, c, p)` tensor data → `(c, batch·p)` channel-major matrix.
fn batched_to_channel_major<T: Scalar>(x: &[T], batch: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * c * p];
    for b in 0..batch {
        for ch in 0..c {
            out[ch * batch * p + b * p..ch * batch * p + (b + 1) * p]
                .copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..batch {
        for (ch, o) in out.iter_mut().enumerate() {
            for &v in &g[(b * c + ch) * p..(b * c + ch + 1) * p] {
                *o = *o + v;
            }
        }
    }
    out
}

fn conv_patch<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, op: &'static str) -> TResult<Patch> {
    let [batch, cin, h, wd] = dims4(x, op)?;
    let [_, wcin, kh, kw] = dims4(w, op)?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (oh, ow) = match (conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kw, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::Geometry {
                op,
                detail: format!("kernel {kh}x{kw} (stride {stride}, padding {pad}) does not fit input {h}x{wd}"),
            })
        }
    };
    Ok(Patch {
        batch,
        channels: cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Cross-correlation of `x: (b, i, h, w)` with `w: (o, i, kh, kw)` plus `bias: (o)`.
///
/// Each output element is the sum over `(i, ky, kx)` in ascending order, starting from
/// zero, followed by the bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> TResult<Tensor<T>> {
    let g = conv_patch(x, w, stride, pad, "conv2d")?;
    let cout = w.shape()[0];
    check_bias(bias, cout, "conv2d")?;
    let cols = g.im2col(x.data());
    let out = gemm::gemm(cout, g.cols(), g.rows(), w.data(), &cols);
    let data = channel_major_to_batched(&out, g.batch, cout, g.oh * g.ow, Some(bias.data()));
    Tensor::new(vec![g.batch, cout, g.oh, g.ow], data)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> TResult<ConvGrads<T>> {
    let g = conv_patch(x, w, stride, pad, "conv2d_backward")?;
    let cout = w.shape()[0];
    let expected = [g.batch, cout, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let p = g.oh * g.ow;
    let gy = batched_to_channel_major(grad_out.data(), g.batch, cout, p);
    let cols = g.im2col(x.data());
    let cols_t = gemm::transpose(g.rows(), g.cols(), &cols);
    let dw = gemm::gemm(cout, g.rows(), g.cols(), &gy, &cols_t);
    let w_t = gemm::transpose(cout, g.rows(), w.data());
    let dcols = gemm::gemm(g.rows(), g.cols(), cout, &w_t, &gy);
    let dx = g.col2im(&dcols);
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![cout], channel_sums(grad_out.data(), g.batch, cout, p))?,
    })
}

fn tconv_patch<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, op: &'static str) -> TResult<(Patch, usize)> {
    let [batch, cin, h, wd] = dims4(x, op)?;
    let [wcin, cout, kh, kw] = dims4(w, op)?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (oh, ow) = match (tconv_out_dim(h, kh, stride, pad), tconv_out_dim(wd, kw, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::Geometry {
                op,
                detail: format!("transposed kernel {kh}x{kw} (stride {stride}, padding {pad}) on input {h}x{wd} gives an empty output"),
            })
        }
    };
    // Patch over the *output* image: the conv that maps it back onto the input grid.
    Ok((
        Patch {
            batch,
            channels: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: wd,
        },
        cin,
    ))
}

/// Transposed convolution of `x: (b, i, h, w)` with `w: (i, o, kh, kw)` plus `bias: (o)`.
/// Output spatial size is `(in − 1)·stride − 2·padding + k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> TResult<Tensor<T>> {
    let (g, cin) = tconv_patch(x, w, stride, pad, "conv_transpose2d")?;
    check_bias(bias, g.channels, "conv_transpose2d")?;
    let pin = g.oh * g.ow;
    let xm = batched_to_channel_major(x.data(), g.batch, cin, pin);
    let w_t = gemm::transpose(cin, g.rows(), w.data());
    let cols = gemm::gemm(g.rows(), g.cols(), cin, &w_t, &xm);
    let mut out = g.col2im(&cols);
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for (c, &bv) in bias.data().iter().enumerate() {
            for v in &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane] {
                *v = *v + bv;
            }
        }
    }
    Tensor::new(vec![g.batch, g.channels, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> TResult<ConvGrads<T>> {
    let (g, cin) = tconv_patch(x, w, stride, pad, "conv_transpose2d_backward")?;
    let expected = [g.batch, g.channels, g.h, g.w];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let pin = g.oh * g.ow;
    let dcols = g.im2col(grad_out.data());
    let dxm = gemm::gemm(cin, g.cols(), g.rows(), w.data(), &dcols);
    let dx = channel_major_to_batched(&dxm, g.batch, cin, pin, None);
    let xm = batched_to_channel_major(x.data(), g.batch, cin, pin);
    let dcols_t = gemm::transpose(g.rows(), g.cols(), &dcols);
    let dw = gemm::gemm(cin, g.rows(), g.cols(), &xm, &dcols_t);
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new(
            vec![g.channels],
            channel_sums(grad_out.data(), g.batch, g.channels, g.h * g.w),
        )?,
    })
}
