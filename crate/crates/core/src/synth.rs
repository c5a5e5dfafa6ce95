//! Synthetic face dataset for offline experiments.
//!
//! Every face shares the same coarse layout (head ellipse, eyes, mouth). Identity lives only
//! in fine, zero-mean textures placed on six facial patches, so a strong blur removes it.
//! Per-image nuisance: a small shift, brightness and contrast jitter, texture amplitude
//! jitter and pixel noise.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch centres relative to the face centre, `(dx, dy)`.
const PATCHES: [(i32, i32); 6] = [(-8, -16), (8, -16), (-12, 6), (12, 6), (0, 2), (0, 21)];
const PATCH: i32 = 8;
const TEXTURES: u8 = 5;
/// Mid-gray background maps to zero after normalization to `[−1, 1]`, so zero padding in
/// the encoder does not create an artificial edge at the image border.
const BACKGROUND: f64 = 0.5;
const FACE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 52,
            images_per_identity: 16,
            resolution: 64,
            seed: 7,
        }
    }
}

/// Texture index per patch.
pub type IdentityCode = [u8; PATCHES.len()];

/// Zero-mean ±1 texture of the given kind at patch coordinates `(x, y)`.
fn texture(kind: u8, x: i32, y: i32) -> f64 {
    let bit = match kind {
        0 => y % 2 == 0,
        1 => x % 2 == 0,
        2 => (x + y) % 2 == 0,
        3 => ((x + y) / 2) % 2 == 0,
        _ => ((x - y + 2 * PATCH) / 2) % 2 == 0,
    };
    if bit {
        1.0
    } else {
        -1.0
    }
}

/// Distinct identity codes drawn from the seed.
pub fn identity_codes(n: usize, seed: u64) -> Vec<IdentityCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes: Vec<IdentityCode> = Vec::with_capacity(n);
    while codes.len() < n {
        let mut c = [0u8; PATCHES.len()];
        c.iter_mut().for_each(|v| *v = rng.random_range(0..TEXTURES));
        if !codes.contains(&c) {
            codes.push(c);
        }
    }
    codes
}

/// Renders one face with intensities in `[0, 1]`, row-major `res × res`.
pub fn render(code: &IdentityCode, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = res as f64 / 64.0;
    let cx = res as f64 / 2.0 + rng.random_range(-2..=2) as f64;
    let cy = res as f64 / 2.0 + rng.random_range(-2..=2) as f64;
    let brightness = rng.random_range(-0.05..0.05);
    let contrast = rng.random_range(0.85..1.15);
    let amplitude = rng.random_range(0.18..0.28);
    let noise = Normal::new(0.0, 0.03).expect("valid deviation");
    let (ax, ay) = (20.0 * scale, 26.0 * scale);
    let mut img = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let mut v = if (dx / ax).powi(2) + (dy / ay).powi(2) <= 1.0 { FACE } else { BACKGROUND };
            for ex in [-9.0, 9.0] {
                if ((dx - ex * scale).powi(2) + (dy + 5.0 * scale).powi(2)).sqrt() <= 3.0 * scale {
                    v = 0.3;
                }
            }
            if dx.abs() <= 6.0 * scale && (dy - 14.0 * scale).abs() <= 1.0 * scale {
                v = 0.35;
            }
            img[y * res + x] = v;
        }
    }
    let half = PATCH / 2;
    for (k, &(px, py)) in PATCHES.iter().enumerate() {
        let x0 = (cx + px as f64 * scale).round() as i32 - half;
        let y0 = (cy + py as f64 * scale).round() as i32 - half;
        for ty in 0..PATCH {
            for tx in 0..PATCH {
                let (x, y) = (x0 + tx, y0 + ty);
                if (0..res as i32).contains(&x) && (0..res as i32).contains(&y) {
                    img[y as usize * res + x as usize] += amplitude * texture(code[k], tx, ty);
                }
            }
        }
    }
    img.iter()
        .map(|&v| (0.5 + contrast * (v - 0.5) + brightness + noise.sample(rng)).clamp(0.0, 1.0))
        .collect()
}

fn check(cfg: &SynthConfig) -> Result<()> {
    if cfg.identities < 2 || cfg.images_per_identity < 1 || cfg.resolution < 16 {
        return Err(Error::InvalidArgument(
            "synthetic set needs >= 2 identities, >= 1 image each and resolution >= 16".into(),
        ));
    }
    Ok(())
}

fn write_identity(dir: &Path, index: usize, code: &IdentityCode, cfg: &SynthConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1));
    for j in 0..cfg.images_per_identity {
        let pixels = render(code, cfg.resolution, &mut rng);
        let r = cfg.resolution as u32;
        let img = GrayImage::from_fn(r, r, |x, y| Luma([(pixels[(y * r + x) as usize] * 255.0).round() as u8]));
        let path = dir.join(format!("img_{j:02}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(())
}

/// Writes `id_NNN/img_NN.png` for every identity under `root`.
pub fn generate(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    check(cfg)?;
    for (i, code) in identity_codes(cfg.identities, cfg.seed).iter().enumerate() {
        write_identity(&root.as_ref().join(format!("id_{i:03}")), i, code, cfg)?;
    }
    Ok(())
}

/// Like [`generate`], but the last `held_out` identities go under `root/test` and the rest
/// under `root/train`. Both halves need at least two identities.
pub fn generate_split(root: impl AsRef<Path>, cfg: &SynthConfig, held_out: usize) -> Result<()> {
    check(cfg)?;
    if held_out < 2 || cfg.identities < held_out + 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {held_out} of {} identities with >= 2 on each side",
            cfg.identities
        )));
    }
    let first_test = cfg.identities - held_out;
    for (i, code) in identity_codes(cfg.identities, cfg.seed).iter().enumerate() {
        let part = if i < first_test { "train" } else { "test" };
        write_identity(&root.as_ref().join(part).join(format!("id_{i:03}")), i, code, cfg)?;
    }
    Ok(())
}
