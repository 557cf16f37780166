//! Mask stacks on disk: one single-channel lossless PNG per lesion, values
//! in {0,255}, named `<image_id>_<lesion>.png`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LesionMaskStack, LesionVocabulary};
use image::{GrayImage, Luma};
use std::path::Path;

pub fn mask_file_name(image_id: &str, lesion: &str) -> String {
    format!("{image_id}_{lesion}.png")
}

pub fn write_masks(
    stack: &LesionMaskStack,
    dir: &Path,
    image_id: &str,
    vocab: &LesionVocabulary,
) -> Result<()> {
    assert_eq!(stack.m(), vocab.m(), "mask channel count mismatch");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = stack.masks.h;
    for (ch, lesion) in vocab.names().iter().enumerate() {
        let mut img = GrayImage::new(side as u32, side as u32);
        for y in 0..side {
            for x in 0..side {
                let v = if stack.masks.at(y, x, ch) != 0.0 { 255 } else { 0 };
                img.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        let path = dir.join(mask_file_name(image_id, lesion));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    Ok(())
}

pub fn read_masks(dir: &Path, image_id: &str, vocab: &LesionVocabulary) -> Result<LesionMaskStack> {
    let mut stack: Option<Tensor> = None;
    for (ch, lesion) in vocab.names().iter().enumerate() {
        let path = dir.join(mask_file_name(image_id, lesion));
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "missing mask channel for lesion {lesion}: {}",
                path.display()
            )));
        }
        let img = image::open(&path)
            .map_err(|e| Error::image(&path, e))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let t = stack.get_or_insert_with(|| Tensor::zeros(h, w, vocab.m()));
        if (t.h, t.w) != (h, w) {
            return Err(Error::Shape(format!(
                "mask channel {lesion} has size {w}x{h}, expected {}x{}",
                t.w, t.h
            )));
        }
        for y in 0..h {
            for x in 0..w {
                if img.get_pixel(x as u32, y as u32)[0] >= 128 {
                    *t.at_mut(y, x, ch) = 1.0;
                }
            }
        }
    }
    LesionMaskStack::new(stack.expect("vocabulary is non-empty"))
}
