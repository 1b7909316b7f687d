//! PNG encode/decode for the array types used across the crate.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(image::open(path)?)
}

/// Quantizes a `3 x H x W` array in `[0, 1]` to an 8-bit RGB image.
pub fn rgb_to_image(rgb: &Array3<f32>) -> RgbImage {
    let (_, h, w) = rgb.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (rgb[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn image_to_rgb(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn write_rgb(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    ensure_parent(path)?;
    rgb_to_image(rgb).save(path)?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    match open(path)? {
        DynamicImage::ImageRgb8(img) => Ok(image_to_rgb(&img)),
        other => Err(Error::format(
            path,
            format!("expected 8-bit RGB, found {:?}", other.color()),
        )),
    }
}

/// Interleaved `H x W x 3` bytes, as used by the normal cache.
pub fn write_rgb8(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, _) = rgb.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        image::Rgb([rgb[[r, c, 0]], rgb[[r, c, 1]], rgb[[r, c, 2]]])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb8(path: &Path) -> Result<Array3<u8>> {
    match open(path)? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                img.get_pixel(x as u32, y as u32)[c]
            }))
        }
        other => Err(Error::format(
            path,
            format!("expected 8-bit RGB, found {:?}", other.color()),
        )),
    }
}

pub fn write_gray16(path: &Path, values: &Array2<u16>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = values.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([values[[y as usize, x as usize]]]));
    img.save(path)?;
    Ok(())
}

pub fn read_gray16(path: &Path) -> Result<Array2<u16>> {
    match open(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0]
            }))
        }
        other => Err(Error::format(
            path,
            format!("expected 16-bit grayscale, found {:?}", other.color()),
        )),
    }
}

pub fn write_gray8(path: &Path, values: &Array2<u8>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = values.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([values[[y as usize, x as usize]]]))
        .save(path)?;
    Ok(())
}

pub fn read_gray8(path: &Path) -> Result<Array2<u8>> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0]
            }))
        }
        other => Err(Error::format(
            path,
            format!("expected 8-bit grayscale, found {:?}", other.color()),
        )),
    }
}

/// Writes a binary mask as 0/255.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    write_gray8(path, &mask.mapv(|v| if v != 0 { 255 } else { 0 }))
}

/// Reads a 0/255 mask into {0, 1}; any other value is a format error.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let raw = read_gray8(path)?;
    if let Some(bad) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::format(path, format!("mask value {bad} not in {{0, 255}}")));
    }
    Ok(raw.mapv(|v| u8::from(v == 255)))
}

/// Maps `[0, 1]` floats to an 8-bit grayscale image.
pub fn write_unit_gray(path: &Path, values: &Array2<f32>) -> Result<()> {
    write_gray8(
        path,
        &values.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    )
}
