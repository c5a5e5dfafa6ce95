//! The two-stream network: an encoder producing the feature map `C` and its max-pooled
//! vector `F`, a transposed-convolution reconstructor mapping `C` back to an image, and the
//! per-identity class head used only by the training loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::{self, BoundConv, Conv2d, ConvTranspose2d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type TResult<T> = std::result::Result<T, TensorError>;

/// Architecture descriptor. Stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub img_ch: usize,
    pub resolution: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_kernel: usize,
    pub encoder_padding: usize,
    pub decoder_kernel: usize,
    pub decoder_padding: usize,
    pub stride: usize,
    pub num_identities: usize,
}

impl Architecture {
    pub fn new(img_ch: usize, num_identities: usize) -> Self {
        Architecture {
            img_ch,
            resolution: 64,
            encoder_widths: vec![32, 64, 128, 128],
            encoder_kernel: 3,
            encoder_padding: 1,
            decoder_kernel: 4,
            decoder_padding: 1,
            stride: 2,
            num_identities,
        }
    }

    /// Number of feature channels `c`.
    pub fn feature_channels(&self) -> usize {
        *self.encoder_widths.last().expect("validated widths")
    }

    /// Spatial side of the feature map `C`.
    pub fn feature_size(&self) -> usize {
        self.resolution / self.stride.pow(self.encoder_widths.len() as u32)
    }

    /// Output widths of the reconstructor blocks: the encoder widths mirrored, ending in
    /// the image channels (`[128, 64, 32, img_ch]` for the default encoder).
    pub fn decoder_widths(&self) -> Vec<usize> {
        let n = self.encoder_widths.len();
        let mut w: Vec<usize> = self.encoder_widths[..n - 1].iter().rev().copied().collect();
        w.push(self.img_ch);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Descriptor(m));
        if !matches!(self.img_ch, 1 | 3) {
            return bad(format!("img_ch must be 1 or 3, got {}", self.img_ch));
        }
        if self.encoder_widths.len() < 2 || self.encoder_widths.contains(&0) {
            return bad(format!("invalid encoder widths {:?}", self.encoder_widths));
        }
        if self.stride < 2 {
            return bad(format!("stride must be at least 2, got {}", self.stride));
        }
        let factor = self.stride.pow(self.encoder_widths.len() as u32);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return bad(format!(
                "resolution {} is not a positive multiple of {factor}",
                self.resolution
            ));
        }
        if self.num_identities == 0 {
            return bad("num_identities must be positive".into());
        }
        // Every encoder stage must halve exactly and every decoder stage must double.
        let mut side = self.resolution;
        for _ in &self.encoder_widths {
            let next = crate::conv::conv_out_dim(side, self.encoder_kernel, self.stride, self.encoder_padding);
            if next != Some(side / self.stride) {
                return bad(format!(
                    "encoder kernel {} / padding {} does not downsample {side} by {}",
                    self.encoder_kernel, self.encoder_padding, self.stride
                ));
            }
            side /= self.stride;
        }
        for _ in &self.encoder_widths {
            let next = crate::conv::tconv_out_dim(side, self.decoder_kernel, self.stride, self.decoder_padding);
            if next != Some(side * self.stride) {
                return bad(format!(
                    "decoder kernel {} / padding {} does not upsample {side} by {}",
                    self.decoder_kernel, self.decoder_padding, self.stride
                ));
            }
            side *= self.stride;
        }
        Ok(())
    }
}

/// Convolutional feature map `C: (batch, c, h, w)` and pooled vector `F: (batch, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    pub map: Tensor<T>,
    pub pooled: Tensor<T>,
}

/// Stack of stride-2 conv → ReLU blocks followed by a global max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<Conv2d<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(arch: &Architecture) -> Self {
        let mut in_ch = arch.img_ch;
        let blocks = arch
            .encoder_widths
            .iter()
            .map(|&w| {
                let layer = Conv2d::new(in_ch, w, arch.encoder_kernel, arch.stride, arch.encoder_padding);
                in_ch = w;
                layer
            })
            .collect();
        Encoder { blocks }
    }

    /// Feature map of a batch of images, before pooling.
    pub fn feature_map(&self, images: &Tensor<T>) -> TResult<Tensor<T>> {
        let mut h = self.blocks[0].forward(images)?.relu();
        for block in &self.blocks[1..] {
            h = block.forward(&h)?.relu();
        }
        Ok(h)
    }

    pub fn encode(&self, images: &Tensor<T>) -> TResult<FeatureBundle<T>> {
        let map = self.feature_map(images)?;
        let (pooled, _) = nn::global_max_pool(&map)?;
        Ok(FeatureBundle { map, pooled })
    }
}

/// How the reconstructor squashes its final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

/// Maps a batch of feature maps `(n, c, h, w)` to images.
pub trait Decode<T: Scalar>: Sync {
    fn decode(&self, features: &Tensor<T>) -> TResult<Tensor<T>>;
}

/// Transposed-convolution stack with ReLU between blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor<T> {
    pub blocks: Vec<ConvTranspose2d<T>>,
    pub output: OutputActivation,
}

impl<T: Scalar> Reconstructor<T> {
    pub fn new(arch: &Architecture) -> Self {
        let mut in_ch = arch.feature_channels();
        let blocks = arch
            .decoder_widths()
            .into_iter()
            .map(|w| {
                let layer = ConvTranspose2d::new(in_ch, w, arch.decoder_kernel, arch.stride, arch.decoder_padding);
                in_ch = w;
                layer
            })
            .collect();
        Reconstructor {
            blocks,
            output: OutputActivation::Tanh,
        }
    }

    pub fn reconstruct(&self, features: &Tensor<T>) -> TResult<Tensor<T>> {
        let last = self.blocks.len() - 1;
        let mut h = features.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(match self.output {
            OutputActivation::Tanh => h.map(|v| v.tanh()),
            OutputActivation::Identity => h,
        })
    }
}

impl<T: Scalar> Decode<T> for Reconstructor<T> {
    fn decode(&self, features: &Tensor<T>) -> TResult<Tensor<T>> {
        self.reconstruct(features)
    }
}

impl<T: Scalar> Decode<T> for ConvTranspose2d<T> {
    fn decode(&self, features: &Tensor<T>) -> TResult<Tensor<T>> {
        self.forward(features)
    }
}

/// Per-identity weight vectors `W: (num_identities, c)` for the margin loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead<T> {
    pub weight: Tensor<T>,
}

/// Encoder, reconstructor and class head together with their descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel<T> {
    pub arch: Architecture,
    pub encoder: Encoder<T>,
    pub decoder: Reconstructor<T>,
    pub head: ClassHead<T>,
}

/// Parameter names in checkpoint order.
pub fn parameter_names(arch: &Architecture) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..arch.encoder_widths.len() {
        names.push(format!("encoder.{i}.weight"));
        names.push(format!("encoder.{i}.bias"));
    }
    for i in 0..arch.decoder_widths().len() {
        names.push(format!("decoder.{i}.weight"));
        names.push(format!("decoder.{i}.bias"));
    }
    names.push("head.weight".into());
    names
}

impl<T: Scalar> FaceModel<T> {
    /// Zero-initialized model.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(FaceModel {
            encoder: Encoder::new(&arch),
            decoder: Reconstructor::new(&arch),
            head: ClassHead {
                weight: Tensor::zeros(&[arch.num_identities, arch.feature_channels()]),
            },
            arch,
        })
    }

    /// Randomly initialized model; layer `i` in checkpoint order uses sub-seed `seed + i`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut sub = seed;
        for block in &mut model.encoder.blocks {
            block.init_parameters(sub);
            sub += 1;
        }
        for block in &mut model.decoder.blocks {
            block.init_parameters(sub);
            sub += 1;
        }
        let c = model.arch.feature_channels();
        init_head(&mut model.head.weight, c, sub);
        Ok(model)
    }

    pub fn encode(&self, images: &Tensor<T>) -> TResult<FeatureBundle<T>> {
        self.encoder.encode(images)
    }

    pub fn reconstruct(&self, features: &Tensor<T>) -> TResult<Tensor<T>> {
        self.decoder.reconstruct(features)
    }

    /// All parameters in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.encoder.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        for b in &self.decoder.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.head.weight);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for b in &mut self.decoder.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.weight);
        out
    }

    /// Number of parameter tensors belonging to the encoder (they come first).
    pub fn encoder_param_count(&self) -> usize {
        2 * self.encoder.blocks.len()
    }

    pub fn decoder_param_count(&self) -> usize {
        2 * self.decoder.blocks.len()
    }

    pub fn cast<U: Scalar>(&self) -> FaceModel<U> {
        FaceModel {
            arch: self.arch.clone(),
            encoder: Encoder {
                blocks: self.encoder.blocks.iter().map(Conv2d::cast).collect(),
            },
            decoder: Reconstructor {
                blocks: self.decoder.blocks.iter().map(ConvTranspose2d::cast).collect(),
                output: self.decoder.output,
            },
            head: ClassHead {
                weight: self.head.weight.cast(),
            },
        }
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundModel<'t, T> {
        BoundModel {
            encoder: self.encoder.blocks.iter().map(|b| b.bind(tape, requires_grad)).collect(),
            decoder: self.decoder.blocks.iter().map(|b| b.bind(tape, requires_grad)).collect(),
            head: tape.leaf(self.head.weight.clone(), requires_grad),
            output: self.decoder.output,
        }
    }
}

/// Class weights drawn from `uniform(−b, b)`, `b = sqrt(1 / c)`.
fn init_head<T: Scalar>(weight: &mut Tensor<T>, c: usize, seed: u64) {
    use rand::distr::{Distribution, Uniform};
    use rand::SeedableRng;
    let bound = (1.0 / c as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for w in weight.data_mut() {
        *w = T::of(dist.sample(&mut rng));
    }
}

/// Model parameters living on a tape, for differentiable forward passes.
pub struct BoundModel<'t, T: Scalar> {
    pub encoder: Vec<BoundConv<'t, T>>,
    pub decoder: Vec<BoundConv<'t, T>>,
    pub head: Var<'t, T>,
    output: OutputActivation,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    /// Returns `(C, F)`.
    pub fn encode(&self, images: Var<'t, T>) -> TResult<(Var<'t, T>, Var<'t, T>)> {
        let mut h = images;
        for block in &self.encoder {
            h = block.forward(h)?.relu()?;
        }
        Ok((h, h.global_max_pool()?))
    }

    pub fn reconstruct(&self, features: Var<'t, T>) -> TResult<Var<'t, T>> {
        let last = self.decoder.len() - 1;
        let mut h = features;
        for (i, block) in self.decoder.iter().enumerate() {
            h = block.forward(h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        match self.output {
            OutputActivation::Tanh => h.tanh(),
            OutputActivation::Identity => Ok(h),
        }
    }

    /// Parameter variables in checkpoint order.
    pub fn param_vars(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            out.push(b.weight);
            out.push(b.bias);
        }
        out.push(self.head);
        out
    }
}
