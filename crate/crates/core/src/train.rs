//! Joint training of the recognition and reconstruction streams.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{self, EpochLosses, TrainingMetadata};
use crate::error::{Error, Result, TensorError};
use crate::loss::{self, LossConfig};
use crate::model::FaceModel;
use crate::optim::{clip_grad_norm, cosine_lr, Optimizer};
use crate::tensor::Tensor;

/// Offset added to the run seed for the per-epoch shuffle stream.
const SHUFFLE_SEED_OFFSET: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial SGD learning rate for the encoder and class head (cosine-decayed).
    pub lr_sgd: f64,
    pub momentum: f64,
    /// Adam learning rate for the reconstructor.
    pub lr_adam: f64,
    /// Cap on the joint L2 norm of the SGD-stream gradient per step; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 16,
            lr_sgd: 0.02,
            momentum: 0.9,
            lr_adam: 2e-4,
            max_grad_norm: Some(1.0),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.lr_sgd > 0.0 && self.lr_sgd.is_finite() && self.lr_adam > 0.0 && self.lr_adam.is_finite()) {
            return bad("learning rates must be positive");
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0 && n.is_finite())) {
            return bad("max gradient norm must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        self.loss.validate()
    }
}

/// Labelled training images, each `(img_ch, resolution, resolution)` in `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

fn diverged(epoch: usize, step: usize, e: TensorError) -> Error {
    Error::Diverged {
        epoch,
        step,
        detail: e.to_string(),
    }
}

/// Trains `model` in place. `on_epoch` runs after every epoch with the updated model and
/// the metadata accumulated so far.
pub fn train<F>(model: &mut FaceModel<f32>, data: &TrainSet, cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochLosses>>
where
    F: FnMut(&FaceModel<f32>, &TrainingMetadata) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() || data.images.len() != data.labels.len() {
        return Err(Error::Dataset("training set is empty or mislabelled".into()));
    }
    if data.num_identities() < 2 {
        return Err(Error::Dataset("training needs at least 2 identities".into()));
    }
    if data.num_identities() > model.arch.num_identities {
        return Err(Error::Descriptor(format!(
            "labels reach {} identities but the head has {}",
            data.num_identities(),
            model.arch.num_identities
        )));
    }
    let n_enc = model.encoder_param_count();
    let n_dec = model.decoder_param_count();
    let (mut sgd, mut adam) = {
        let params = model.params();
        let recognition: Vec<&Tensor<f32>> = params[..n_enc].iter().chain(&params[n_enc + n_dec..]).copied().collect();
        (
            Optimizer::sgd(cfg.lr_sgd, cfg.momentum, &recognition),
            Optimizer::adam(cfg.lr_adam, &params[n_enc..n_enc + n_dec]),
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SHUFFLE_SEED_OFFSET));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut meta = TrainingMetadata {
        epoch: 0,
        seed: cfg.seed,
        loss_history: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 1..=cfg.epochs {
        sgd.lr = cosine_lr(cfg.lr_sgd, epoch - 1, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut sum_id, mut sum_rec, mut sum_total) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let images = Tensor::stack(&batch).map_err(|e| diverged(epoch, step, e))?;

            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let (grads, id, rec, total) = (|| {
                let x = tape.constant(images);
                let (c, f) = bound.encode(x)?;
                let recon = bound.reconstruct(c)?;
                let id = loss::arcface_loss(f, bound.head, &labels, &cfg.loss)?;
                let rec = loss::mse_loss(recon, x)?;
                let total = loss::total_loss(id, rec, cfg.loss.lambda)?;
                let values = (id.value().item(), rec.value().item(), total.value().item());
                tape.backward(total)?;
                let grads: Vec<Tensor<f32>> = bound
                    .param_vars()
                    .iter()
                    .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
                    .collect();
                Ok::<_, TensorError>((grads, values.0, values.1, values.2))
            })()
            .map_err(|e| diverged(epoch, step, e))?;
            if !total.is_finite() {
                return Err(diverged(epoch, step, TensorError::NonFinite { op: "total_loss" }));
            }

            let mut params = model.params_mut();
            let mut dec: Vec<&mut Tensor<f32>> = params.drain(n_enc..n_enc + n_dec).collect();
            adam.step(&mut dec, &grads[n_enc..n_enc + n_dec]).map_err(|e| diverged(epoch, step, e))?;
            let mut rec_grads: Vec<Tensor<f32>> = grads[..n_enc].iter().chain(&grads[n_enc + n_dec..]).cloned().collect();
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut rec_grads, max);
            }
            sgd.step(&mut params, &rec_grads).map_err(|e| diverged(epoch, step, e))?;

            let w = chunk.len() as f64;
            sum_id += id as f64 * w;
            sum_rec += rec as f64 * w;
            sum_total += total as f64 * w;
        }
        let n = data.len() as f64;
        let losses = EpochLosses {
            epoch,
            identity: sum_id / n,
            reconstruction: sum_rec / n,
            total: sum_total / n,
        };
        log::info!(
            "epoch {epoch}/{}: L_id {:.5} L_rec {:.5} total {:.5}",
            cfg.epochs,
            losses.identity,
            losses.reconstruction,
            losses.total
        );
        meta.epoch = epoch;
        meta.loss_history.push(losses);
        on_epoch(model, &meta)?;
    }
    Ok(meta.loss_history)
}

/// `epoch,L_id,L_rec,total` rows with shortest round-trip float formatting.
pub fn losses_csv(history: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,L_id,L_rec,total\n");
    for l in history {
        let _ = writeln!(out, "{},{},{},{}", l.epoch, l.identity, l.reconstruction, l.total);
    }
    out
}

/// Checkpoint file name for `epoch`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.{}", checkpoint::EXTENSION)
}

/// Trains and writes `epoch_NNN.xfrc`, `latest.xfrc` and `losses.csv` into `out_dir`
/// after every epoch.
pub fn train_to_dir(model: &mut FaceModel<f32>, data: &TrainSet, cfg: &TrainConfig, out_dir: &Path) -> Result<Vec<EpochLosses>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    train(model, data, cfg, |m, meta| {
        let bytes = checkpoint::to_bytes(m, meta)?;
        for name in [checkpoint_name(meta.epoch), format!("latest.{}", checkpoint::EXTENSION)] {
            let p = out_dir.join(name);
            fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        }
        let p = out_dir.join("losses.csv");
        fs::write(&p, losses_csv(&meta.loss_history)).map_err(|e| Error::io(&p, e))
    })
}

/// Moving average over a trailing window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
