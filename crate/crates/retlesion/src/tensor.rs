//! Dense channels-last tensors (height x width x channels), f64 throughout.
//!
//! Double precision keeps finite-difference gradient checks meaningful; the
//! desk-scale models here are small enough that the extra bandwidth does not
//! matter.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "tensor data length mismatch");
        Tensor { h, w, c, data }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel slice at one spatial position.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise product, same shape required.
    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert!(self.same_shape(other), "hadamard shape mismatch");
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.h == b.h && a.w == b.w, "concat spatial mismatch");
        let c = a.c + b.c;
        let mut out = Tensor::zeros(a.h, a.w, c);
        for y in 0..a.h {
            for x in 0..a.w {
                let dst = out.pixel_mut(y, x);
                dst[..a.c].copy_from_slice(a.pixel(y, x));
                dst[a.c..].copy_from_slice(b.pixel(y, x));
            }
        }
        out
    }

    /// Split a channel-concatenated tensor back into its two parts.
    pub fn split_channels(&self, first_c: usize) -> (Tensor, Tensor) {
        assert!(first_c <= self.c);
        let mut a = Tensor::zeros(self.h, self.w, first_c);
        let mut b = Tensor::zeros(self.h, self.w, self.c - first_c);
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.pixel(y, x);
                a.pixel_mut(y, x).copy_from_slice(&src[..first_c]);
                b.pixel_mut(y, x).copy_from_slice(&src[first_c..]);
            }
        }
        (a, b)
    }
}
