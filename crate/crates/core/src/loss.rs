//! Training objectives: additive angular margin loss for recognition, mean squared error
//! for reconstruction, and their weighted sum.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type TResult<T> = std::result::Result<T, TensorError>;

/// Cosines are clamped to `[−1 + ε, 1 − ε]` before `acos`, whose derivative diverges at ±1.
pub const COS_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Trade-off weight on the reconstruction term.
    pub lambda: f64,
    /// Additive angular margin, radians.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            margin: 0.5,
            scale: 30.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!("margin must lie in [0, pi/2), got {}", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// ArcFace loss of pooled features `(batch, c)` against class weights `(identities, c)`.
///
/// Rows of both are L2-normalized; the true-class logit is `s·cos(θ_y + m)`, the others
/// `s·cos θ_j`, followed by mean softmax cross-entropy. For `θ_y > π − m` the true-class
/// logit becomes `s·(cos θ_y − m·sin m)`.
pub fn arcface_loss<'t, T: Scalar>(
    features: Var<'t, T>,
    class_weights: Var<'t, T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> TResult<Var<'t, T>> {
    let tape = features.tape();
    let cosine = features
        .l2_normalize_rows()?
        .matmul(class_weights.l2_normalize_rows()?.transpose()?)?;
    let shape = cosine.shape();
    let (batch, classes) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(TensorError::ShapeMismatch {
            op: "arcface_loss",
            lhs: vec![batch],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Domain {
            op: "arcface_loss",
            detail: format!("label {bad} with {classes} identities"),
        });
    }
    let logits = if cfg.margin == 0.0 {
        cosine
    } else {
        let mut onehot = Tensor::zeros(&[batch, classes]);
        for (b, &l) in labels.iter().enumerate() {
            onehot.data_mut()[b * classes + l] = T::one();
        }
        let eps = T::of(COS_CLAMP_EPS);
        let angular = cosine
            .clamp(-T::one() + eps, T::one() - eps)?
            .acos()?
            .add_scalar(T::of(cfg.margin))?
            .cos()?;
        // Past θ = π − m, cos(θ + m) turns upward again; the linear penalty keeps the target
        // logit monotone in θ there.
        let limit = T::of(-cfg.margin.cos());
        let beyond = cosine.value().map(|c| if c <= limit { T::one() } else { T::zero() });
        let within = beyond.map(|b| T::one() - b);
        let linear = cosine.add_scalar(T::of(-cfg.margin * cfg.margin.sin()))?;
        let with_margin = angular
            .mul(tape.constant(within))?
            .add(linear.mul(tape.constant(beyond))?)?;
        let shift = tape.constant(onehot).mul(with_margin.sub(cosine)?)?;
        cosine.add(shift)?
    };
    logits.mul_scalar(T::of(cfg.scale))?.cross_entropy(labels)
}

/// Mean of squared differences over all elements.
pub fn mse_loss<'t, T: Scalar>(recon: Var<'t, T>, target: Var<'t, T>) -> TResult<Var<'t, T>> {
    recon.sub(target)?.square()?.mean()
}

/// `L_id + λ·L_rec`.
pub fn total_loss<'t, T: Scalar>(id_loss: Var<'t, T>, rec_loss: Var<'t, T>, lambda: f64) -> TResult<Var<'t, T>> {
    id_loss.add(rec_loss.mul_scalar(T::of(lambda))?)
}
