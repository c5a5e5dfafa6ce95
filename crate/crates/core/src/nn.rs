//! Parameterized layers built on the convolution kernels.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conv;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Reduce, Tensor};

type TResult<T> = Result<T, TensorError>;

/// Fills `weight` with draws from `uniform(−b, b)`, `b = sqrt(1 / fan_in)`, and zeroes `bias`.
fn init_uniform<T: Scalar>(weight: &mut Tensor<T>, bias: &mut Tensor<T>, fan_in: usize, seed: u64) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in weight.data_mut() {
        *w = T::of(dist.sample(&mut rng));
    }
    bias.data_mut().iter_mut().for_each(|b| *b = T::zero());
}

/// Convolution with weight `(out_ch, in_ch, kh, kw)` and bias `(out_ch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized layer with a square kernel.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn init_parameters(&mut self, seed: u64) {
        let s = self.weight.shape();
        let fan_in = s[1] * s[2] * s[3];
        init_uniform(&mut self.weight, &mut self.bias, fan_in, seed);
    }

    pub fn forward(&self, x: &Tensor<T>) -> TResult<Tensor<T>> {
        conv::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundConv<'t, T> {
        BoundConv {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
            stride: self.stride,
            padding: self.padding,
            transposed: false,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Transposed convolution with weight `(in_ch, out_ch, kh, kw)` and bias `(out_ch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        ConvTranspose2d {
            weight: Tensor::zeros(&[in_ch, out_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn init_parameters(&mut self, seed: u64) {
        let s = self.weight.shape();
        let fan_in = s[0] * s[2] * s[3];
        init_uniform(&mut self.weight, &mut self.bias, fan_in, seed);
    }

    pub fn forward(&self, x: &Tensor<T>) -> TResult<Tensor<T>> {
        conv::conv_transpose2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundConv<'t, T> {
        BoundConv {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
            stride: self.stride,
            padding: self.padding,
            transposed: true,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvTranspose2d<U> {
        ConvTranspose2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// A layer's parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv<'t, T: Scalar> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
    stride: usize,
    padding: usize,
    transposed: bool,
}

impl<'t, T: Scalar> BoundConv<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> TResult<Var<'t, T>> {
        if self.transposed {
            x.conv_transpose2d(self.weight, self.bias, self.stride, self.padding)
        } else {
            x.conv2d(self.weight, self.bias, self.stride, self.padding)
        }
    }
}

/// `(batch, c, h, w) → (batch, c)` per-channel spatial maximum together with the flat
/// input index of each maximum (lowest row-major index on ties).
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> TResult<(Tensor<T>, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(TensorError::Geometry {
            op: "global_max_pool",
            detail: format!("expected a 4-d tensor, got {:?}", x.shape()),
        });
    }
    let r = x.reduce(Reduce::Max, Some(&[2, 3]))?;
    Ok((r.values, r.argmax.expect("max reduction records argmax")))
}
