//! Writers for images, saliency maps and raw float sidecars.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Opacity of the heat map in overlays.
pub const OVERLAY_ALPHA: f64 = 0.5;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn map_dims<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!("expected a 2-d map, got {:?}", map.shape()))),
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [ch @ (1 | 3), h, w] => Ok((ch, h, w)),
        _ => Err(Error::InvalidArgument(format!("expected an image (1|3, h, w), got {:?}", image.shape()))),
    }
}

/// 8-bit levels of a non-negative map, linearly mapped from `[0, max]`; an all-zero map
/// stays black.
pub fn map_to_gray8<T: Scalar>(map: &Tensor<T>) -> Vec<u8> {
    let max = map.max_all().0.as_f64();
    map.data()
        .iter()
        .map(|v| if max > 0.0 { quantize(v.as_f64() / max) } else { 0 })
        .collect()
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn save_map_png<T: Scalar>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = map_dims(map)?;
    let img = GrayImage::from_raw(w as u32, h as u32, map_to_gray8(map)).expect("buffer matches dimensions");
    save(path, img.save(path))
}

/// Raw row-major little-endian `f32` values.
pub fn save_sidecar<T: Scalar>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = map.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Blue → cyan → yellow → red ramp for `v ∈ [0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Saliency blended over an image in `[−1, 1]` at [`OVERLAY_ALPHA`].
pub fn overlay<T: Scalar>(image: &Tensor<T>, map: &Tensor<T>) -> Result<RgbImage> {
    let (ch, h, w) = image_dims(image)?;
    if map_dims(map)? != (h, w) {
        return Err(Error::InvalidArgument(format!("map {:?} does not match image {:?}", map.shape(), image.shape())));
    }
    let max = map.max_all().0.as_f64();
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        let s = if max > 0.0 { map.data()[p].as_f64() / max } else { 0.0 };
        let heat = heat_color(s);
        for (k, hc) in heat.iter().enumerate() {
            let base = (image.data()[(if ch == 3 { k } else { 0 }) * hw + p].as_f64() + 1.0) / 2.0;
            buf.push(quantize((1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * hc));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions"))
}

pub fn save_overlay<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>, map: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let img = overlay(image, map)?;
    save(path, img.save(path))
}

/// Writes an image `(1|3, h, w)` with values in `[−1, 1]` as an 8-bit PNG.
pub fn save_image<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let (ch, h, w) = image_dims(image)?;
    let hw = h * w;
    let level = |i: usize| quantize((image.data()[i].as_f64() + 1.0) / 2.0);
    if ch == 1 {
        let img = GrayImage::from_raw(w as u32, h as u32, (0..hw).map(level).collect()).expect("dimensions");
        save(path, img.save(path))
    } else {
        let buf = (0..hw).flat_map(|p| [level(p), level(hw + p), level(2 * hw + p)]).collect();
        let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("dimensions");
        save(path, img.save(path))
    }
}
