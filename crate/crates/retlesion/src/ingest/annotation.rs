//! Expert annotation shapes (polygons and rotated ellipses) and their
//! rasterization into binary masks.
//!
//! A pixel belongs to a shape iff its center (x+0.5, y+0.5) lies inside:
//! even-odd rule for polygons, the implicit equation for ellipses. Shapes
//! are clipped to image bounds by construction (out-of-bounds centers are
//! simply never tested).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LesionMaskStack, LesionVocabulary};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Polygon {
        /// Ordered vertices in pixel coordinates.
        points: Vec<[f64; 2]>,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        /// Semi-axes in pixels.
        a: f64,
        b: f64,
        /// Rotation in radians.
        theta: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    pub lesion: String,
    #[serde(flatten)]
    pub shape: Shape,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        match &self.shape {
            Shape::Polygon { points } => {
                if points.len() < 3 {
                    return Err(Error::InvalidInput(format!(
                        "polygon needs >= 3 vertices, got {}",
                        points.len()
                    )));
                }
            }
            Shape::Ellipse { a, b, .. } => {
                if *a <= 0.0 || *b <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "ellipse semi-axes must be positive, got ({a}, {b})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Even-odd point-in-polygon test (ray cast toward +x).
fn point_in_polygon(px: f64, py: f64, pts: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (pts[i][0], pts[i][1]);
        let (xj, yj) = (pts[j][0], pts[j][1]);
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn point_in_ellipse(px: f64, py: f64, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    // rotate into the ellipse frame
    let u = dx * cos_t + dy * sin_t;
    let v = -dx * sin_t + dy * cos_t;
    (u / a).powi(2) + (v / b).powi(2) <= 1.0
}

/// Rasterize one annotation into a single-channel binary mask of `side`x`side`.
/// Degenerate shapes (zero area after clipping) yield an empty mask.
pub fn rasterize_annotation(ann: &Annotation, side: usize) -> Result<Vec<bool>> {
    ann.validate()?;
    let mut mask = vec![false; side * side];
    // Bounding box limits the scan; clipping to the image falls out of it.
    let (x0, y0, x1, y1) = match &ann.shape {
        Shape::Polygon { points } => {
            let xs = points.iter().map(|p| p[0]);
            let ys = points.iter().map(|p| p[1]);
            (
                xs.clone().fold(f64::INFINITY, f64::min),
                ys.clone().fold(f64::INFINITY, f64::min),
                xs.fold(f64::NEG_INFINITY, f64::max),
                ys.fold(f64::NEG_INFINITY, f64::max),
            )
        }
        Shape::Ellipse { cx, cy, a, b, .. } => {
            let r = a.max(*b);
            (cx - r, cy - r, cx + r, cy + r)
        }
    };
    let yb = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(side as f64 - 1.0).max(0.0) as usize);
    let xb = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(side as f64 - 1.0).max(0.0) as usize);
    if x1 < 0.0 || y1 < 0.0 || x0 >= side as f64 || y0 >= side as f64 {
        return Ok(mask);
    }
    for y in yb {
        for x in xb.clone() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match &ann.shape {
                Shape::Polygon { points } => point_in_polygon(px, py, points),
                Shape::Ellipse { cx, cy, a, b, theta } => {
                    point_in_ellipse(px, py, *cx, *cy, *a, *b, *theta)
                }
            };
            if inside {
                mask[y * side + x] = true;
            }
        }
    }
    Ok(mask)
}

/// Union all annotations into an m-channel mask stack, ORing per lesion.
/// Different lesions over the same region co-exist (multi-label).
pub fn masks_to_stack(
    annotations: &[Annotation],
    side: usize,
    vocab: &LesionVocabulary,
) -> Result<LesionMaskStack> {
    let m = vocab.m();
    let mut stack = Tensor::zeros(side, side, m);
    for ann in annotations {
        let ch = vocab.index_of(&ann.lesion).ok_or_else(|| {
            Error::InvalidInput(format!("unknown lesion: {}", ann.lesion))
        })?;
        let mask = rasterize_annotation(ann, side)?;
        for (i, &inside) in mask.iter().enumerate() {
            if inside {
                stack.data[i * m + ch] = 1.0;
            }
        }
    }
    LesionMaskStack::new(stack)
}
