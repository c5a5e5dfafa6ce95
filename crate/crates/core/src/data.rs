//! Dataset scanning, image loading, verification pairs and their CSV form.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image file extensions picked up when scanning a dataset.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub name: String,
    pub images: Vec<PathBuf>,
}

/// Images grouped by identity, one subdirectory per identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceDataset {
    pub root: PathBuf,
    pub identities: Vec<Identity>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

impl FaceDataset {
    /// Scans `root`: every subdirectory holding at least one image is an identity. Both
    /// identities and images are sorted by path.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut identities = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let images: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
            if !images.is_empty() {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                identities.push(Identity { name, images });
            }
        }
        let ds = FaceDataset {
            root: root.to_path_buf(),
            identities,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.identities.len() < 2 {
            return Err(Error::Dataset(format!(
                "{} holds {} identities, need at least 2",
                self.root.display(),
                self.identities.len()
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    /// `(path, identity index)` for every image, in dataset order.
    pub fn labelled_images(&self) -> Vec<(PathBuf, usize)> {
        self.identities
            .iter()
            .enumerate()
            .flat_map(|(k, id)| id.images.iter().map(move |p| (p.clone(), k)))
            .collect()
    }

    /// Splits off `held_out` randomly chosen identities; returns `(train, held_out)`, each
    /// keeping the original identity order.
    pub fn split_by_identity(&self, held_out: usize, seed: u64) -> Result<(FaceDataset, FaceDataset)> {
        let n = self.identities.len();
        if held_out < 2 || n < held_out + 2 {
            return Err(Error::Dataset(format!(
                "cannot hold out {held_out} of {n} identities with at least 2 on each side"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: BTreeSet<usize> = index::sample(&mut rng, n, held_out).into_iter().collect();
        let part = |keep: bool| FaceDataset {
            root: self.root.clone(),
            identities: (0..n)
                .filter(|i| chosen.contains(i) != keep)
                .map(|i| self.identities[i].clone())
                .collect(),
        };
        Ok((part(true), part(false)))
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: FaceDataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Two image paths and whether they show the same identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub matching: bool,
}

/// Draws `count` distinct items from a pool of `size` (with repeats only once the pool is
/// exhausted), returned as indices into the pool.
fn draw(rng: &mut ChaCha8Rng, size: usize, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(size);
        out.extend(index::sample(rng, size, take));
    }
    out
}

/// Exactly `n_pairs / 2` matching pairs and the rest non-matching, shuffled; a pure
/// function of the dataset listing, `n_pairs` and `seed`.
pub fn generate_pairs(ds: &FaceDataset, n_pairs: usize, seed: u64) -> Result<Vec<PairRecord>> {
    ds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_match = n_pairs / 2;
    let n_non = n_pairs - n_match;

    let mut same: Vec<(&PathBuf, &PathBuf)> = Vec::new();
    for id in &ds.identities {
        for i in 0..id.images.len() {
            for j in i + 1..id.images.len() {
                same.push((&id.images[i], &id.images[j]));
            }
        }
    }
    if n_match > 0 && same.is_empty() {
        return Err(Error::Dataset("no identity has two images; cannot form matching pairs".into()));
    }
    let flat = ds.labelled_images();
    let sizes: Vec<usize> = ds.identities.iter().map(|i| i.images.len()).collect();
    let total = flat.len();
    let cross: usize = sizes.iter().map(|s| s * (total - s)).sum::<usize>() / 2;

    let mut pairs = Vec::with_capacity(n_pairs);
    for k in draw(&mut rng, same.len().max(1), n_match) {
        let (a, b) = same[k];
        pairs.push((a.clone(), b.clone(), true));
    }
    // Non-matching pairs: sample without replacement by rejection unless the pool is small
    // enough to be exhausted.
    if cross <= n_non {
        let mut all = Vec::with_capacity(cross);
        for i in 0..total {
            for j in i + 1..total {
                if flat[i].1 != flat[j].1 {
                    all.push((i, j));
                }
            }
        }
        for k in draw(&mut rng, all.len(), n_non) {
            let (i, j) = all[k];
            pairs.push((flat[i].0.clone(), flat[j].0.clone(), false));
        }
    } else {
        let mut seen = BTreeSet::new();
        while seen.len() < n_non {
            let i = rng.random_range(0..total);
            let j = rng.random_range(0..total);
            if flat[i].1 == flat[j].1 || !seen.insert((i.min(j), i.max(j))) {
                continue;
            }
            pairs.push((flat[i.min(j)].0.clone(), flat[i.max(j)].0.clone(), false));
        }
    }
    let mut out: Vec<PairRecord> = pairs
        .into_iter()
        .map(|(a, b, matching)| {
            if rng.random_bool(0.5) {
                PairRecord { path_a: b, path_b: a, matching }
            } else {
                PairRecord { path_a: a, path_b: b, matching }
            }
        })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// `path_a,path_b,label` lines with label 1 (match) or 0.
pub fn pairs_to_csv(pairs: &[PairRecord]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let (a, b) = (p.path_a.to_string_lossy(), p.path_b.to_string_lossy());
        if [&a, &b].iter().any(|s| s.contains([',', '\n', '\r'])) {
            return Err(Error::InvalidArgument(format!("path cannot be written to CSV: {a} / {b}")));
        }
        out.push_str(&format!("{a},{b},{}\n", u8::from(p.matching)));
    }
    Ok(out)
}

pub fn write_pairs_csv(path: impl AsRef<Path>, pairs: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pairs_to_csv(pairs)?).map_err(|e| Error::io(path, e))
}

/// Parses pairs CSV text. LF and CRLF line endings are accepted, as is a
/// `path_a,path_b,label` header on the first line. Blank lines are skipped.
pub fn parse_pairs_csv(text: &str, source: &Path) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::PairsParse {
            path: source.to_path_buf(),
            line: n + 1,
            detail,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        if n == 0 && cols[2].trim() == "label" {
            continue;
        }
        let matching = match cols[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(err("empty path".into()));
        }
        out.push(PairRecord {
            path_a: PathBuf::from(cols[0]),
            path_b: PathBuf::from(cols[1]),
            matching,
        });
    }
    Ok(out)
}

pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_csv(&text, path)
}

/// Bilinear resampling with pixel-centre alignment and clamped borders.
pub fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, n: usize| {
        let x = ((d as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(s - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Planes `(ch, h, w)` of intensities in `[0, 1]`; grayscale uses luma 0.299/0.587/0.114.
fn planes(img: &DynamicImage, img_ch: usize) -> Vec<Vec<f64>> {
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let rgb: Vec<[f64; 3]> = if sixteen {
        img.to_rgb16()
            .pixels()
            .map(|p| p.0.map(|v| v as f64 / 65535.0))
            .collect()
    } else {
        img.to_rgb8().pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect()
    };
    let gray_source = !img.color().has_color();
    if img_ch == 1 {
        vec![rgb
            .iter()
            .map(|c| {
                if gray_source {
                    c[0]
                } else {
                    (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0)
                }
            })
            .collect()]
    } else {
        (0..3).map(|k| rgb.iter().map(|c| c[k]).collect()).collect()
    }
}

/// Loads a PNG or PGM as `(img_ch, resolution, resolution)` in `[−1, 1]`, resizing
/// bilinearly when the source size differs.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, img_ch: usize, resolution: usize) -> Result<Tensor<T>> {
    let path = path.as_ref();
    if img_ch != 1 && img_ch != 3 {
        return Err(Error::InvalidArgument(format!("img_ch must be 1 or 3, got {img_ch}")));
    }
    let img_err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Pnm) => {}
        other => return Err(img_err(format!("unsupported format {other:?}; expected PNG or PGM"))),
    }
    let img = reader.decode().map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(img_ch * resolution * resolution);
    for plane in planes(&img, img_ch) {
        let plane = if (h, w) == (resolution, resolution) {
            plane
        } else {
            resize_bilinear(&plane, h, w, resolution, resolution)
        };
        data.extend(plane.into_iter().map(|v| T::of(2.0 * v - 1.0)));
    }
    Ok(Tensor::new(vec![img_ch, resolution, resolution], data)?)
}
