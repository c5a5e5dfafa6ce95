//! Channel-masking saliency: each feature channel's maximal activation is removed, the
//! feature map is reconstructed, and the resulting image residuals are weighted by how much
//! that channel contributes to the cosine similarity of the pair.

use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::TensorError;
use crate::model::{Decode, FaceModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type TResult<T> = Result<T, TensorError>;

/// Number of masked feature maps decoded together.
const RESIDUAL_CHUNK: usize = 16;

/// Threshold subtracted from every channel weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    /// Mean per-channel product, i.e. `cosine / c`, which centres the weights at zero.
    #[default]
    Auto,
    Fixed(f64),
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Threshold::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Threshold::Fixed(v)),
            _ => Err(format!("threshold must be \"auto\" or a finite number, got {s:?}")),
        }
    }
}

/// Whether each channel is masked on a fresh copy of the feature map or on a copy that
/// keeps every earlier mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    #[default]
    Isolated,
    Cumulative,
}

impl FromStr for MaskingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "isolated" => Ok(MaskingMode::Isolated),
            "cumulative" => Ok(MaskingMode::Cumulative),
            _ => Err(format!("mode must be isolated or cumulative, got {s:?}")),
        }
    }
}

fn normalized(v: &[f64]) -> TResult<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(TensorError::DivisionByZero { op: "normalize" });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn as_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Cosine of the angle between two non-zero vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> TResult<f64> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (a, b) = (normalized(&as_f64(a))?, normalized(&as_f64(b))?);
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

/// Per-channel products of the normalized pooled features, shifted by the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub threshold: f64,
}

pub fn channel_weights<T: Scalar>(fa: &[T], fb: &[T], threshold: Threshold) -> TResult<WeightVector> {
    if fa.len() != fb.len() {
        return Err(TensorError::ShapeMismatch {
            op: "channel_weights",
            lhs: vec![fa.len()],
            rhs: vec![fb.len()],
        });
    }
    let (a, b) = (normalized(&as_f64(fa))?, normalized(&as_f64(fb))?);
    let products: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let t = match threshold {
        Threshold::Auto => products.iter().sum::<f64>() / products.len() as f64,
        Threshold::Fixed(t) => t,
    };
    Ok(WeightVector {
        values: products.iter().map(|p| p - t).collect(),
        threshold: t,
    })
}

/// Zeroes every spatial entry of `channel` that attains the channel's maximum.
/// `map` is a single feature map `(c, h, w)`.
pub fn mask_channel_max<T: Scalar>(map: &mut Tensor<T>, channel: usize) {
    let hw = map.shape()[1] * map.shape()[2];
    let slot = &mut map.data_mut()[channel * hw..(channel + 1) * hw];
    let max = slot.iter().copied().fold(slot[0], T::max);
    slot.iter_mut().filter(|v| **v == max).for_each(|v| *v = T::zero());
}

/// Rescales to `[0, 1]`. A map that is identically zero stays zero; any other constant
/// map becomes all ones.
pub fn min_max_normalize<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let lo = map.min_all();
    let hi = map.max_all().0;
    if hi > lo {
        let span = hi - lo;
        map.map(|v| (v - lo) / span)
    } else if hi.is_zero() {
        Tensor::zeros(map.shape())
    } else {
        Tensor::full(map.shape(), T::one())
    }
}

/// `|a − b|` averaged over colour channels, for images `(ch, h, w)`; returns `(h, w)`.
fn channel_mean_abs_diff<T: Scalar>(a: &[T], b: &[T], ch: usize, h: usize, w: usize) -> TResult<Tensor<T>> {
    let hw = h * w;
    let inv = T::of(1.0 / ch as f64);
    let mut out = vec![T::zero(); hw];
    for k in 0..ch {
        for (p, o) in out.iter_mut().enumerate() {
            *o = *o + (a[k * hw + p] - b[k * hw + p]).abs();
        }
    }
    if ch > 1 {
        out.iter_mut().for_each(|v| *v = *v * inv);
    }
    Tensor::new(vec![h, w], out)
}

fn check_feature_map<T: Scalar>(map: &Tensor<T>) -> TResult<(usize, usize, usize)> {
    match *map.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Geometry {
            op: "channel_residuals",
            detail: format!("expected a single feature map (c, h, w), got {:?}", map.shape()),
        }),
    }
}

/// Residual maps in channel order, processing channels in ascending order.
pub fn channel_residuals<T: Scalar, D: Decode<T> + ?Sized>(map: &Tensor<T>, decoder: &D, mode: MaskingMode) -> TResult<Vec<Tensor<T>>> {
    let c = check_feature_map(map)?.0;
    let order: Vec<usize> = (0..c).collect();
    channel_residuals_in_order(map, decoder, mode, &order)
}

/// Residual maps indexed by channel, with masks applied in `order` (a permutation of the
/// channels). In isolated mode the result does not depend on `order`.
pub fn channel_residuals_in_order<T: Scalar, D: Decode<T> + ?Sized>(
    map: &Tensor<T>,
    decoder: &D,
    mode: MaskingMode,
    order: &[usize],
) -> TResult<Vec<Tensor<T>>> {
    let (c, fh, fw) = check_feature_map(map)?;
    let mut seen = vec![false; c];
    if order.len() != c || order.iter().any(|&i| i >= c || std::mem::replace(&mut seen[i], true)) {
        return Err(TensorError::Geometry {
            op: "channel_residuals",
            detail: format!("processing order is not a permutation of {c} channels"),
        });
    }
    let batched = |maps: &[Tensor<T>]| Tensor::stack(maps);
    let base = decoder.decode(&map.reshape(&[1, c, fh, fw])?)?;
    let (ch, h, w) = match *base.shape() {
        [1, ch, h, w] => (ch, h, w),
        _ => {
            return Err(TensorError::Geometry {
                op: "channel_residuals",
                detail: format!("decoder produced {:?}", base.shape()),
            })
        }
    };
    let img = ch * h * w;

    // Masked copies in processing order.
    let mut masked = Vec::with_capacity(c);
    let mut running = map.clone();
    for &i in order {
        match mode {
            MaskingMode::Isolated => {
                let mut m = map.clone();
                mask_channel_max(&mut m, i);
                masked.push(m);
            }
            MaskingMode::Cumulative => {
                mask_channel_max(&mut running, i);
                masked.push(running.clone());
            }
        }
    }
    // Each chunk is one decoder batch; batch entries are computed independently.
    let chunks: Vec<Vec<Tensor<T>>> = masked
        .par_chunks(RESIDUAL_CHUNK)
        .map(|chunk| {
            let recon = decoder.decode(&batched(chunk)?)?;
            (0..chunk.len())
                .map(|j| {
                    let r = &recon.data()[j * img..(j + 1) * img];
                    Ok(min_max_normalize(&channel_mean_abs_diff(base.data(), r, ch, h, w)?))
                })
                .collect::<TResult<Vec<_>>>()
        })
        .collect::<TResult<Vec<_>>>()?;
    let mut out: Vec<Option<Tensor<T>>> = vec![None; c];
    for (&i, r) in order.iter().zip(chunks.into_iter().flatten()) {
        out[i] = Some(r);
    }
    Ok(out.into_iter().map(|r| r.expect("order is a permutation")).collect())
}

/// Signed map `H` and its derived discriminative (`S`), similarity (`S⁺`) and
/// dissimilarity (`S⁻`) maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTriple<T> {
    pub h: Tensor<T>,
    pub s: Tensor<T>,
    pub pos: Tensor<T>,
    pub neg: Tensor<T>,
}

impl<T: Scalar> SaliencyTriple<T> {
    pub fn from_signed(h: Tensor<T>) -> Self {
        SaliencyTriple {
            s: h.map(|v| v.abs()),
            pos: h.map(|v| v.max(T::zero())),
            neg: h.map(|v| (-v).max(T::zero())),
            h,
        }
    }
}

/// `H = Σ weights[i]·residuals[i]`, accumulated in ascending channel order.
pub fn combine<T: Scalar>(residuals: &[Tensor<T>], weights: &[f64]) -> TResult<SaliencyTriple<T>> {
    let first = residuals.first().ok_or_else(|| TensorError::Geometry {
        op: "combine",
        detail: "no residual maps".into(),
    })?;
    if residuals.len() != weights.len() {
        return Err(TensorError::ShapeMismatch {
            op: "combine",
            lhs: vec![residuals.len()],
            rhs: vec![weights.len()],
        });
    }
    let mut h = Tensor::zeros(first.shape());
    for (r, &w) in residuals.iter().zip(weights) {
        first.expect_same_shape(r, "combine")?;
        let w = T::of(w);
        for (acc, &v) in h.data_mut().iter_mut().zip(r.data()) {
            *acc = *acc + w * v;
        }
    }
    Ok(SaliencyTriple::from_signed(h))
}

/// Saliency maps for the first image of a pair along with the pair's verification score.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation<T> {
    pub saliency: SaliencyTriple<T>,
    pub score: f64,
    pub weights: WeightVector,
}

fn single<T: Scalar>(image: &Tensor<T>) -> TResult<Tensor<T>> {
    match *image.shape() {
        [ch, h, w] => image.reshape(&[1, ch, h, w]),
        _ => Err(TensorError::Geometry {
            op: "explain",
            detail: format!("expected an image (ch, h, w), got {:?}", image.shape()),
        }),
    }
}

/// Explains the decision on `(image_a, image_b)` by saliency over `image_a`.
pub fn generate_saliency<T: Scalar>(
    model: &FaceModel<T>,
    image_a: &Tensor<T>,
    image_b: &Tensor<T>,
    threshold: Threshold,
    mode: MaskingMode,
) -> TResult<Explanation<T>> {
    let fa = model.encode(&single(image_a)?)?;
    let fb = model.encode(&single(image_b)?)?;
    let map = fa.map.slice0(0);
    let residuals = channel_residuals(&map, &model.decoder, mode)?;
    explain_with_residuals(&residuals, fa.pooled.data(), fb.pooled.data(), threshold)
}

/// Combines precomputed residuals of image A with the weights of the pair `(F_A, F_B)`.
/// Residuals depend on image A alone, so they can be reused across its pairs.
pub fn explain_with_residuals<T: Scalar>(residuals: &[Tensor<T>], fa: &[T], fb: &[T], threshold: Threshold) -> TResult<Explanation<T>> {
    let weights = channel_weights(fa, fb, threshold)?;
    Ok(Explanation {
        saliency: combine(residuals, &weights.values)?,
        score: cosine_similarity(fa, fb)?,
        weights,
    })
}

/// Gradient-times-input baseline: `|I_A ∘ ∂cos(F_A, F_B)/∂I_A|`, averaged over colour
/// channels and min-max normalized.
pub fn gradient_baseline<T: Scalar>(model: &FaceModel<T>, image_a: &Tensor<T>, image_b: &Tensor<T>) -> TResult<Tensor<T>> {
    let grad = cosine_input_gradient(model, image_a, image_b)?;
    let (ch, h, w) = (image_a.shape()[0], image_a.shape()[1], image_a.shape()[2]);
    let prod: Vec<T> = image_a.data().iter().zip(grad.data()).map(|(&x, &g)| x * g).collect();
    let zeros = vec![T::zero(); prod.len()];
    Ok(min_max_normalize(&channel_mean_abs_diff(&prod, &zeros, ch, h, w)?))
}

/// `∂cos(F_A, F_B)/∂I_A`, shaped like `image_a`.
pub fn cosine_input_gradient<T: Scalar>(model: &FaceModel<T>, image_a: &Tensor<T>, image_b: &Tensor<T>) -> TResult<Tensor<T>> {
    let fb = model.encode(&single(image_b)?)?.pooled;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let x = tape.leaf(single(image_a)?, true);
    let (_, fa) = bound.encode(x)?;
    let fb = tape.constant(fb);
    let cos = fa.l2_normalize_rows()?.mul(fb.l2_normalize_rows()?)?.sum()?;
    tape.backward(cos)?;
    let g = x.grad().unwrap_or_else(|| Tensor::zeros(&x.shape()));
    g.reshape(image_a.shape())
}

/// Seeded map of independent `uniform[0, 1)` draws.
pub fn random_baseline<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0.0f64, 1.0).expect("valid range");
    let data = (0..h * w).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(vec![h, w], data).expect("shape matches data")
}
