//! Hiding-game evaluation: progressively blur the least-salient pixels of the first image
//! of every pair and track how verification accuracy degrades.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::explain::{self, MaskingMode, Threshold};
use crate::model::FaceModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type TResult<T> = std::result::Result<T, TensorError>;

/// Images encoded per forward pass during evaluation.
const ENCODE_BATCH: usize = 32;

/// Odd kernel size covering ±3σ.
pub fn default_kernel_size(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur of an image `(ch, h, w)` with reflected borders.
pub fn gaussian_blur<T: Scalar>(image: &Tensor<T>, sigma: f64, size: usize) -> Result<Tensor<T>> {
    let (ch, h, w) = match *image.shape() {
        [ch, h, w] => (ch, h, w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "blur expects an image (ch, h, w), got {:?}",
                image.shape()
            )))
        }
    };
    let k = gaussian_kernel(sigma, size)?;
    let r = (size / 2) as isize;
    let src: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let mut rows = vec![0.0; src.len()];
    let mut out = vec![T::zero(); src.len()];
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                rows[c * h * w + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let plane = &rows[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
                out[c * h * w + y * w + x] = T::of(v);
            }
        }
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// `floor(percent · n / 100)`.
pub fn hidden_count(percent: f64, n: usize) -> usize {
    ((percent * n as f64 / 100.0).floor() as usize).min(n)
}

/// Pixel indices sorted by ascending saliency, ties broken by row-major index.
pub fn hiding_order<T: Scalar>(saliency: &Tensor<T>) -> Vec<usize> {
    let s = saliency.data();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).expect("finite saliency").then(a.cmp(&b)));
    idx
}

/// Which pixels are replaced at `percent`.
pub fn hide_mask<T: Scalar>(saliency: &Tensor<T>, percent: f64) -> Vec<bool> {
    let order = hiding_order(saliency);
    let mut mask = vec![false; order.len()];
    for &p in &order[..hidden_count(percent, order.len())] {
        mask[p] = true;
    }
    mask
}

/// Replaces the least-salient `percent` of pixels (across all colour channels) of `image`
/// with the corresponding pixels of `blurred`.
pub fn hide_pixels<T: Scalar>(image: &Tensor<T>, saliency: &Tensor<T>, percent: f64, blurred: &Tensor<T>) -> Result<Tensor<T>> {
    image.expect_same_shape(blurred, "hide_pixels")?;
    let (ch, h, w) = match *image.shape() {
        [ch, h, w] => (ch, h, w),
        _ => return Err(Error::InvalidArgument(format!("expected an image (ch, h, w), got {:?}", image.shape()))),
    };
    if saliency.shape() != [h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "hide_pixels",
            lhs: vec![h, w],
            rhs: saliency.shape().to_vec(),
        }
        .into());
    }
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::InvalidArgument(format!("percent must lie in [0, 100], got {percent}")));
    }
    let mask = hide_mask(saliency, percent);
    let mut out = image.clone();
    for c in 0..ch {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[c * h * w + p] = blurred.data()[c * h * w + p];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HidingGameConfig {
    pub percentages: Vec<f64>,
    pub sigma: f64,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for HidingGameConfig {
    fn default() -> Self {
        HidingGameConfig {
            percentages: (0..10).map(|i| i as f64 * 10.0).collect(),
            sigma: 4.0,
            kernel_size: default_kernel_size(4.0),
            seed: 0,
        }
    }
}

impl HidingGameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.percentages.is_empty() {
            return Err(Error::InvalidArgument("percentages must not be empty".into()));
        }
        if self.percentages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("percentages must be strictly ascending".into()));
        }
        if self.percentages.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::InvalidArgument("percentages must lie in [0, 100]".into()));
        }
        gaussian_kernel(self.sigma, self.kernel_size).map(|_| ())
    }
}

/// Saliency method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Gradient,
    Random,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::Gradient => "gradient",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ours" => Ok(Method::Ours),
            "gradient" => Ok(Method::Gradient),
            "random" => Ok(Method::Random),
            _ => Err(format!("method must be ours, gradient or random, got {s:?}")),
        }
    }
}

/// A verification pair referring to images by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedPair {
    pub a: usize,
    pub b: usize,
    pub matching: bool,
}

fn check_pairs(pairs: &[IndexedPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    if pairs.iter().all(|p| p.matching) || pairs.iter().all(|p| !p.matching) {
        return Err(Error::InvalidArgument("pairs must contain both matching and non-matching labels".into()));
    }
    Ok(())
}

/// Fraction of pairs where `score ≥ threshold` agrees with the label.
pub fn verification_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    correct as f64 / scores.len() as f64
}

/// Threshold maximizing accuracy, with that accuracy. Candidates are every observed score
/// and one value above the maximum; ties go to the lowest threshold.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(scores.iter().copied().fold(f64::MIN, f64::max) + 1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();
    let mut best = (candidates[0], -1.0);
    for &t in &candidates {
        let acc = verification_accuracy(scores, labels, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

/// Area under the ROC curve as the Mann–Whitney statistic (ties count one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Trapezoidal mean of `values` over `xs`, scaled to `[0, 100]`.
pub fn trapezoid_auc(xs: &[f64], values: &[f64]) -> f64 {
    if xs.len() == 1 {
        return 100.0 * values[0];
    }
    let area: f64 = xs
        .windows(2)
        .zip(values.windows(2))
        .map(|(x, v)| (x[1] - x[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    100.0 * area / (xs[xs.len() - 1] - xs[0])
}

/// Accuracy-versus-percentage curve of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveResult {
    pub method: Method,
    pub dataset: String,
    pub threshold: f64,
    pub unblurred_accuracy: f64,
    pub percentages: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub auc: f64,
}

impl CurveResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("percent,accuracy\n");
        for (p, a) in self.percentages.iter().zip(&self.accuracies) {
            let _ = writeln!(out, "{p},{a}");
        }
        out
    }

    pub fn auc_text(&self) -> String {
        format!("{}\n", self.auc)
    }
}

/// Pooled features of a list of images `(ch, h, w)`, encoded in fixed-size batches.
pub fn encode_all<T: Scalar>(model: &FaceModel<T>, images: &[&Tensor<T>]) -> TResult<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_BATCH) {
        let pooled = model.encode(&Tensor::stack(chunk)?)?.pooled;
        let c = pooled.shape()[1];
        out.extend(pooled.data().chunks(c).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Cosine score of every pair.
pub fn pair_scores<T: Scalar>(features: &[Vec<T>], pairs: &[IndexedPair]) -> TResult<Vec<f64>> {
    pairs
        .iter()
        .map(|p| explain::cosine_similarity(&features[p.a], &features[p.b]))
        .collect()
}

/// The saliency map `(h, w)` over the first image of every pair.
pub fn saliency_maps<T: Scalar>(
    model: &FaceModel<T>,
    images: &[Tensor<T>],
    pairs: &[IndexedPair],
    method: Method,
    seed: u64,
    threshold: Threshold,
    mode: MaskingMode,
) -> Result<Vec<Tensor<T>>> {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    match method {
        Method::Random => Ok((0..pairs.len())
            .map(|i| explain::random_baseline(h, w, seed.wrapping_add(i as u64)))
            .collect()),
        Method::Gradient => Ok(pairs
            .par_iter()
            .map(|p| explain::gradient_baseline(model, &images[p.a], &images[p.b]))
            .collect::<TResult<Vec<_>>>()?),
        Method::Ours => {
            let refs: Vec<&Tensor<T>> = images.iter().collect();
            let features = encode_all(model, &refs)?;
            // Residuals depend on the first image only; compute them once per image.
            let mut residuals: BTreeMap<usize, Vec<Tensor<T>>> = BTreeMap::new();
            for p in pairs {
                if let std::collections::btree_map::Entry::Vacant(slot) = residuals.entry(p.a) {
                    let ch = images[p.a].shape()[0];
                    let map = model.encode(&images[p.a].reshape(&[1, ch, h, w])?)?.map.slice0(0);
                    slot.insert(explain::channel_residuals(&map, &model.decoder, mode)?);
                }
            }
            pairs
                .iter()
                .map(|p| {
                    let e = explain::explain_with_residuals(&residuals[&p.a], &features[p.a], &features[p.b], threshold)?;
                    Ok(e.saliency.s)
                })
                .collect()
        }
    }
}

/// Plays the hiding game with precomputed saliency maps, one per pair.
pub fn run_hiding_game<T: Scalar>(
    model: &FaceModel<T>,
    images: &[Tensor<T>],
    pairs: &[IndexedPair],
    maps: &[Tensor<T>],
    method: Method,
    dataset: &str,
    cfg: &HidingGameConfig,
) -> Result<CurveResult> {
    cfg.validate()?;
    check_pairs(pairs)?;
    if maps.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!("{} saliency maps for {} pairs", maps.len(), pairs.len())));
    }
    let labels: Vec<bool> = pairs.iter().map(|p| p.matching).collect();
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let features = encode_all(model, &refs)?;
    let (threshold, unblurred_accuracy) = calibrate_threshold(&pair_scores(&features, pairs)?, &labels);

    let mut blurred: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
    for p in pairs {
        if !blurred.contains_key(&p.a) {
            blurred.insert(p.a, gaussian_blur(&images[p.a], cfg.sigma, cfg.kernel_size)?);
        }
    }
    let mut accuracies = Vec::with_capacity(cfg.percentages.len());
    for &pct in &cfg.percentages {
        let hidden: Vec<Tensor<T>> = pairs
            .iter()
            .zip(maps)
            .map(|(p, s)| hide_pixels(&images[p.a], s, pct, &blurred[&p.a]))
            .collect::<Result<_>>()?;
        let hidden_refs: Vec<&Tensor<T>> = hidden.iter().collect();
        let hidden_features = encode_all(model, &hidden_refs)?;
        let scores: Vec<f64> = pairs
            .iter()
            .zip(&hidden_features)
            .map(|(p, fa)| explain::cosine_similarity(fa, &features[p.b]))
            .collect::<TResult<_>>()?;
        accuracies.push(verification_accuracy(&scores, &labels, threshold));
    }
    let auc = trapezoid_auc(&cfg.percentages, &accuracies);
    Ok(CurveResult {
        method,
        dataset: dataset.to_string(),
        threshold,
        unblurred_accuracy,
        percentages: cfg.percentages.clone(),
        accuracies,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel(4.0, default_kernel_size(4.0)).unwrap();
        assert_eq!(k.len(), 25);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(0.0, 5).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Tensor::full(&[1, 9, 7], 0.3f64);
        let b = gaussian_blur(&img, 2.0, 7).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn centered_impulse_reproduces_kernel() {
        let mut img = Tensor::zeros(&[1, 11, 11]);
        img.data_mut()[5 * 11 + 5] = 1.0f64;
        let b = gaussian_blur(&img, 1.5, 7).unwrap();
        let k = gaussian_kernel(1.5, 7).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert!((b.data()[(y + 2) * 11 + x + 2] - k[y] * k[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn separable_blur_matches_dense_oracle() {
        let (h, w, size, sigma) = (13, 10, 9, 1.7);
        let img = crate::explain::random_baseline::<f64>(h, w, 4).reshape(&[1, h, w]).unwrap();
        let blurred = gaussian_blur(&img, sigma, size).unwrap();
        // Dense 2-D kernel evaluated directly from the Gaussian density.
        let r = (size / 2) as isize;
        let dense: Vec<f64> = (0..size * size)
            .map(|i| {
                let (dy, dx) = ((i / size) as f64 - r as f64, (i % size) as f64 - r as f64);
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let norm: f64 = dense.iter().sum();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ky in -r..=r {
                    for kx in -r..=r {
                        let wgt = dense[((ky + r) * size as isize + kx + r) as usize] / norm;
                        acc += wgt * img.data()[reflect(y + ky, h) * w + reflect(x + kx, w)];
                    }
                }
                assert!((acc - blurred.data()[y as usize * w + x as usize]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hide_examples() {
        let img = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let blur = t(&[1, 2, 2], &[-1.0, -2.0, -3.0, -4.0]);
        let sal = t(&[2, 2], &[0.1, 0.9, 0.2, 0.8]);
        assert_eq!(hide_pixels(&img, &sal, 0.0, &blur).unwrap(), img);
        assert_eq!(hide_pixels(&img, &sal, 100.0, &blur).unwrap(), blur);
        assert_eq!(hide_pixels(&img, &sal, 50.0, &blur).unwrap().data(), &[-1.0, 2.0, -3.0, 4.0]);
        assert!(hide_pixels(&img, &t(&[4], &[0.0; 4]), 50.0, &blur).is_err());
        assert!(hide_pixels(&img, &sal, 101.0, &blur).is_err());
    }

    #[test]
    fn ties_hide_lowest_index_first() {
        let sal = t(&[1, 4], &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(hide_mask(&sal, 50.0), vec![true, true, false, false]);
    }

    #[test]
    fn hidden_sets_are_nested() {
        let sal = crate::explain::random_baseline::<f64>(8, 8, 3);
        let pct = [0.0, 10.0, 33.0, 50.0, 90.0, 100.0];
        for w in pct.windows(2) {
            let (a, b) = (hide_mask(&sal, w[0]), hide_mask(&sal, w[1]));
            assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(trapezoid_auc(&[0.0, 50.0, 90.0], &[1.0, 1.0, 1.0]), 100.0);
        assert_eq!(trapezoid_auc(&[0.0, 100.0], &[0.0, 1.0]), 50.0);
        assert!((trapezoid_auc(&[0.0, 10.0, 90.0], &[0.7; 3]) - 70.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_calibration() {
        let scores = [0.9, 0.8, 0.3, 0.2, 0.85];
        let labels = [true, true, false, false, false];
        assert_eq!(verification_accuracy(&[1.0, 1.0], &[true, true], 1.0), 1.0);
        let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = verification_accuracy(&scores, &labels, 0.5);
        assert!((verification_accuracy(&scores, &inverted, 0.5) - (1.0 - a)).abs() < 1e-15);
        let (thr, acc) = calibrate_threshold(&scores, &labels);
        assert_eq!((thr, acc), (0.8, 0.8));
        assert!((roc_auc(&scores, &labels) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(HidingGameConfig::default().validate().is_ok());
        let mut c = HidingGameConfig::default();
        c.percentages = vec![0.0, 20.0, 10.0];
        assert!(c.validate().is_err());
        c.percentages = vec![0.0, 120.0];
        assert!(c.validate().is_err());
        c = HidingGameConfig { kernel_size: 24, ..HidingGameConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!("gradient".parse::<Method>().unwrap(), Method::Gradient);
        assert_eq!(Method::Ours.to_string(), "ours");
    }

    #[test]
    fn rejects_degenerate_pair_lists() {
        assert!(check_pairs(&[]).is_err());
        let p = IndexedPair { a: 0, b: 1, matching: true };
        assert!(check_pairs(&[p, p]).is_err());
        assert!(check_pairs(&[p, IndexedPair { matching: false, ..p }]).is_ok());
    }
}
