//! RGB PNG loading/saving for fundus images, plus padding to the stride
//! contract (sides divisible by 32).

use anyhow::{Context, Result};
use image::RgbImage;
use retlesion::tensor::Tensor;
use std::path::Path;

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(h, w, 3);
    for (y, x, px) in img
        .enumerate_pixels()
        .map(|(x, y, p)| (y as usize, x as usize, p))
    {
        for ch in 0..3 {
            *t.at_mut(y, x, ch) = px[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    assert_eq!(t.c, 3);
    let mut img = RgbImage::new(t.w as u32, t.h as u32);
    for y in 0..t.h {
        for x in 0..t.w {
            let px = t.pixel(y, x);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
    }
    img.save(path)
        .with_context(|| format!("cannot write image {}", path.display()))?;
    Ok(())
}

pub fn write_gray(path: &Path, t: &Tensor, ch: usize) -> Result<()> {
    let mut img = image::GrayImage::new(t.w as u32, t.h as u32);
    for y in 0..t.h {
        for x in 0..t.w {
            let v = (t.at(y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .with_context(|| format!("cannot write image {}", path.display()))?;
    Ok(())
}

/// Zero-pad bottom/right so both sides become square multiples of 32.
/// Returns the padded tensor and the original (h, w).
pub fn pad_to_stride(t: &Tensor) -> (Tensor, (usize, usize)) {
    let side = t.h.max(t.w).div_ceil(32) * 32;
    if t.h == side && t.w == side {
        return (t.clone(), (t.h, t.w));
    }
    let mut out = Tensor::zeros(side, side, t.c);
    for y in 0..t.h {
        for x in 0..t.w {
            out.pixel_mut(y, x).copy_from_slice(t.pixel(y, x));
        }
    }
    (out, (t.h, t.w))
}

/// Crop the top-left (h, w) region back out of a padded tensor.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(h, w, t.c);
    for y in 0..h {
        for x in 0..w {
            out.pixel_mut(y, x).copy_from_slice(t.pixel(y, x));
        }
    }
    out
}
