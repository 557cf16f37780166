//! Geometric and photometric augmentation. Geometric transforms (rotation,
//! crop-resize, flips) hit the image and every mask channel identically;
//! masks are resampled nearest-neighbor so they stay binary. Photometric
//! jitter (brightness, saturation, contrast) touches the image only.

use crate::error::Result;
use crate::tensor::Tensor;
use crate::types::{FundusImage, LesionMaskStack};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from +- this many degrees.
    pub rotate_degrees: f64,
    /// Crop side scale drawn uniformly from [this, 1.0], then resized back.
    pub crop_min_scale: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Brightness/saturation/contrast factors drawn from [1-j, 1+j].
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_degrees: 180.0,
            crop_min_scale: 0.9,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    /// A config whose every draw is the identity transform.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotate_degrees: 0.0,
            crop_min_scale: 1.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub off_x: f64,
    pub off_y: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            scale: 1.0,
            off_x: 0.0,
            off_y: 0.0,
            hflip: false,
            vflip: false,
            brightness: 1.0,
            saturation: 1.0,
            contrast: 1.0,
        }
    }

    fn is_identity(&self) -> bool {
        *self == AugmentParams::identity()
    }
}

pub fn sample_params(config: &AugmentConfig, rng: &mut ChaCha20Rng, side: usize) -> AugmentParams {
    let angle_deg = if config.rotate_degrees > 0.0 {
        rng.gen_range(-config.rotate_degrees..config.rotate_degrees)
    } else {
        0.0
    };
    let scale = if config.crop_min_scale < 1.0 {
        rng.gen_range(config.crop_min_scale..1.0)
    } else {
        1.0
    };
    let slack = side as f64 * (1.0 - scale);
    let (off_x, off_y) = if slack > 0.0 {
        (rng.gen_range(0.0..slack), rng.gen_range(0.0..slack))
    } else {
        (0.0, 0.0)
    };
    let hflip = rng.gen_bool(config.hflip_prob);
    let vflip = rng.gen_bool(config.vflip_prob);
    let jitter = |rng: &mut ChaCha20Rng| {
        if config.jitter > 0.0 {
            rng.gen_range(1.0 - config.jitter..1.0 + config.jitter)
        } else {
            1.0
        }
    };
    AugmentParams {
        angle_deg,
        scale,
        off_x,
        off_y,
        hflip,
        vflip,
        brightness: jitter(rng),
        saturation: jitter(rng),
        contrast: jitter(rng),
    }
}

/// Map an output pixel center back to source coordinates: undo the
/// crop-resize, then the rotation about the image center, then the flips.
fn source_coords(params: &AugmentParams, side: usize, oy: usize, ox: usize) -> (f64, f64) {
    let mut px = params.off_x + params.scale * (ox as f64 + 0.5) - 0.5;
    let mut py = params.off_y + params.scale * (oy as f64 + 0.5) - 0.5;
    let c = (side as f64 - 1.0) / 2.0;
    let a = params.angle_deg.to_radians();
    let (sin, cos) = a.sin_cos();
    let (dx, dy) = (px - c, py - c);
    px = c + cos * dx + sin * dy;
    py = c - sin * dx + cos * dy;
    if params.hflip {
        px = side as f64 - 1.0 - px;
    }
    if params.vflip {
        py = side as f64 - 1.0 - py;
    }
    (py, px)
}

fn sample_bilinear(t: &Tensor, y: f64, x: f64, out: &mut [f64]) {
    if y < -0.5 || x < -0.5 || y > t.h as f64 - 0.5 || x > t.w as f64 - 0.5 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let yc = y.clamp(0.0, (t.h - 1) as f64);
    let xc = x.clamp(0.0, (t.w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(t.h - 1);
    let x1 = (x0 + 1).min(t.w - 1);
    let (wy, wx) = (yc - y0 as f64, xc - x0 as f64);
    let (p00, p01) = (t.pixel(y0, x0), t.pixel(y0, x1));
    let (p10, p11) = (t.pixel(y1, x0), t.pixel(y1, x1));
    for (ch, o) in out.iter_mut().enumerate() {
        let top = p00[ch] + wx * (p01[ch] - p00[ch]);
        let bot = p10[ch] + wx * (p11[ch] - p10[ch]);
        *o = top + wy * (bot - top);
    }
}

fn sample_nearest(t: &Tensor, y: f64, x: f64, out: &mut [f64]) {
    let yi = y.round();
    let xi = x.round();
    if yi < 0.0 || xi < 0.0 || yi >= t.h as f64 || xi >= t.w as f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    out.copy_from_slice(t.pixel(yi as usize, xi as usize));
}

pub fn apply_augment(
    image: &FundusImage,
    masks: &LesionMaskStack,
    params: &AugmentParams,
) -> Result<(FundusImage, LesionMaskStack)> {
    if params.is_identity() {
        return Ok((image.clone(), masks.clone()));
    }
    let side = image.side();
    let mut img = Tensor::zeros(side, side, image.pixels.c);
    let mut msk = Tensor::zeros(side, side, masks.masks.c);
    for oy in 0..side {
        for ox in 0..side {
            let (sy, sx) = source_coords(params, side, oy, ox);
            sample_bilinear(&image.pixels, sy, sx, img.pixel_mut(oy, ox));
            sample_nearest(&masks.masks, sy, sx, msk.pixel_mut(oy, ox));
        }
    }
    // photometric jitter, image only
    for px in img.data.chunks_exact_mut(img.c) {
        let lum = px.iter().sum::<f64>() / px.len() as f64;
        for v in px.iter_mut() {
            let mut x = *v * params.brightness;
            x = lum * params.brightness + params.saturation * (x - lum * params.brightness);
            x = 0.5 + params.contrast * (x - 0.5);
            *v = x.clamp(0.0, 1.0);
        }
    }
    Ok((FundusImage::new(img)?, LesionMaskStack::new(msk)?))
}

pub fn augment(
    image: &FundusImage,
    masks: &LesionMaskStack,
    config: &AugmentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(FundusImage, LesionMaskStack)> {
    let params = sample_params(config, rng, image.side());
    apply_augment(image, masks, &params)
}
