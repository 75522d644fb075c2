//! 8-bit PNG images and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::UnsupportedImage(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => Ok(img),
        other => Err(Error::UnsupportedImage(format!(
            "{}: {:?} is not an 8-bit format",
            path.display(),
            other.color()
        ))),
    }
}

/// RGB image with bytes mapped to `byte / 255`. Alpha is dropped.
pub fn read_image(path: &Path) -> Result<ImageBuf> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageBuf::from_fn(w as usize, h as usize, 3, |x, y, c| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Single-channel mask: byte >= 128 is real content (1), otherwise mirror (0).
pub fn read_mask(path: &Path) -> Result<ImageBuf> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(ImageBuf::from_fn(w as usize, h as usize, 1, |x, y, _| {
        if gray.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Round-half-up quantization of a value clamped to [0, 1].
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn write_image(img: &ImageBuf, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let result = match img.channels {
        1 => GrayImage::from_fn(w, h, |x, y| image::Luma([quantize(img.get(x as usize, y as usize, 0))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([0, 1, 2].map(|c| quantize(img.get(x as usize, y as usize, c))))
        })
        .save(path),
        c => return Err(Error::UnsupportedImage(format!("cannot write {c}-channel image"))),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedImage(format!("{}: {other}", path.display())),
    })
}
