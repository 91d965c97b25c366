//! PNG/JPEG reading and writing for frames, flow renderings, and masks.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Loads a 3-channel image as (3, H, W) with values in [0,1].
pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = ImageReader::open(path)
        .map_err(|_| Error::MissingFile(path.to_path_buf()))?
        .decode()?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Loads a single-channel image as (H, W) with values in [0,1].
pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = ImageReader::open(path)
        .map_err(|_| Error::MissingFile(path.to_path_buf()))?
        .decode()?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

/// Binarizes a grayscale mask at 0.5, returning the map and the number of
/// non-binary source pixels.
pub fn binarize(mask: &Array2<f32>) -> (Array2<f32>, usize) {
    let mut gray = 0usize;
    let out = mask.map(|&v| {
        if v != 0.0 && v != 1.0 {
            gray += 1;
        }
        if v >= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    (out, gray)
}

/// Writes (3, H, W) values in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(img[(0, y, x)]),
                to_u8(img[(1, y, x)]),
                to_u8(img[(2, y, x)]),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.save(path)?;
    Ok(())
}

/// Writes (H, W) values in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([to_u8(img[(y, x)])]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.save(path)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
