//! PNG and JSON file helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{Domain, Image, LabelMap};

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// Quantize an image to interleaved RGB bytes.
pub fn image_to_rgb8(x: &Image) -> Vec<u8> {
    let (h, w) = (x.height(), x.width());
    let hw = h * w;
    let d = x.tensor().data();
    let mut out = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push(to_u8(d[c * hw + i]));
        }
    }
    out
}

pub fn rgb8_to_image(h: usize, w: usize, rgb: &[u8], domain: Domain) -> Result<Image> {
    if rgb.len() != 3 * h * w {
        return Err(Error::Shape(format!("expected {} RGB bytes, got {}", 3 * h * w, rgb.len())));
    }
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = from_u8(rgb[3 * i + c]);
        }
    }
    Image::new(Tensor::new(vec![3, h, w], data), domain)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn save_rgb8(path: &Path, w: usize, h: usize, rgb: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img: RgbImage = ImageBuffer::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Shape("RGB buffer size does not match dimensions".into()))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_image(path: &Path, x: &Image) -> Result<()> {
    save_rgb8(path, x.width(), x.height(), image_to_rgb8(x))
}

/// Load an RGB PNG as raw bytes plus `(h, w)`.
pub fn load_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn load_image(path: &Path, domain: Domain) -> Result<Image> {
    let (h, w, rgb) = load_rgb8(path)?;
    rgb8_to_image(h, w, &rgb, domain)
}

pub fn save_labels(path: &Path, l: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(l.width() as u32, l.height() as u32, l.data().to_vec())
        .expect("label buffer matches its own dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load an 8-bit label image without validating the ids.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    LabelMap::new(h as usize, w as usize, img.into_raw())
}

pub fn rgb_pixel(c: [u8; 3]) -> Rgb<u8> {
    Rgb(c)
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_vec_pretty(value)?;
    write_atomic(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&s)?)
}
