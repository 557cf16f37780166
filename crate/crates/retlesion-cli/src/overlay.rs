//! Overlay rendering: lesion contours in fixed per-lesion colors drawn on
//! the input image, with a small legend in the top-left corner.

use retlesion::tensor::Tensor;
use retlesion::types::{LesionMaskStack, LESION_NAMES};

/// Fixed overlay colors, canonical lesion order.
pub const LESION_COLORS: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0], // MA red
    [1.0, 0.0, 1.0], // iHE magenta
    [1.0, 1.0, 0.0], // HaEx yellow
    [1.0, 1.0, 1.0], // CWS white
    [1.0, 0.5, 0.0], // vHE orange
    [0.5, 0.0, 1.0], // pHE purple
    [0.0, 1.0, 1.0], // NV cyan
    [0.0, 0.5, 1.0], // FiP blue
];

/// 3x5 glyphs for the letters used in the legend, one bitmask row each.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'E' => [0b111, 0b100, 0b111, 0b100, 0b111],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'C' => [0b111, 0b100, 0b100, 0b100, 0b111],
        'W' => [0b101, 0b101, 0b101, 0b111, 0b101],
        'S' => [0b111, 0b100, 0b111, 0b001, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b111, 0b101, 0b111, 0b100, 0b100],
        'N' => [0b101, 0b111, 0b101, 0b101, 0b101],
        'F' => [0b111, 0b100, 0b111, 0b100, 0b100],
        _ => [0; 5],
    }
}

fn put(img: &mut Tensor, y: usize, x: usize, color: &[f64; 3]) {
    if y < img.h && x < img.w {
        img.pixel_mut(y, x).copy_from_slice(color);
    }
}

fn draw_text(img: &mut Tensor, y: usize, x: usize, text: &str, color: &[f64; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c.to_ascii_uppercase());
        for (dy, row) in g.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    put(img, y + dy, cx + dx, color);
                }
            }
        }
        cx += 4;
    }
}

fn is_contour(masks: &Tensor, y: usize, x: usize, ch: usize) -> bool {
    if masks.at(y, x, ch) == 0.0 {
        return false;
    }
    let neighbors = [
        (y.wrapping_sub(1), x),
        (y + 1, x),
        (y, x.wrapping_sub(1)),
        (y, x + 1),
    ];
    neighbors
        .iter()
        .any(|&(ny, nx)| ny >= masks.h || nx >= masks.w || masks.at(ny, nx, ch) == 0.0)
}

/// Image with lesion contours and legend burned in; same size as `image`.
pub fn render_overlay(image: &Tensor, masks: &LesionMaskStack) -> Tensor {
    let mut out = image.clone();
    let m = masks.m().min(LESION_COLORS.len());
    for ch in 0..m {
        for y in 0..out.h {
            for x in 0..out.w {
                if is_contour(&masks.masks, y, x, ch) {
                    put(&mut out, y, x, &LESION_COLORS[ch]);
                }
            }
        }
    }
    // legend: one row per lesion, swatch plus name
    for ch in 0..m {
        let y0 = 2 + ch * 7;
        for dy in 0..5 {
            for dx in 0..5 {
                put(&mut out, y0 + dy, 2 + dx, &LESION_COLORS[ch]);
            }
        }
        draw_text(&mut out, y0, 9, LESION_NAMES[ch], &LESION_COLORS[ch]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_dimensions() {
        let img = Tensor::filled(32, 32, 3, 0.2);
        let masks = LesionMaskStack::zeros(32, 8);
        let out = render_overlay(&img, &masks);
        assert_eq!(out.shape(), (32, 32, 3));
    }

    #[test]
    fn contour_marks_boundary_not_interior() {
        let img = Tensor::filled(32, 32, 3, 0.0);
        let mut m = Tensor::zeros(32, 32, 8);
        for y in 24..30 {
            for x in 24..30 {
                *m.at_mut(y, x, 0) = 1.0;
            }
        }
        let masks = LesionMaskStack::new(m).unwrap();
        let out = render_overlay(&img, &masks);
        // boundary pixel painted MA red, interior untouched
        assert_eq!(out.pixel(24, 24), &LESION_COLORS[0]);
        assert_eq!(out.pixel(26, 26), &[0.0, 0.0, 0.0]);
    }
}
