//! Differentiable building blocks: convolutions, activations, bilinear
//! resampling, pooling and the fully connected head. Everything is f64 and
//! hand-backpropagated; the convolution inner loops are data-parallel over
//! rows (see [`crate::par`]).

use crate::par;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// One trainable array with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len());
        Param {
            grad: vec![0.0; n],
            data,
            shape,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named traversal of a model's trainable parameters. Visit order is fixed
/// per model, which the optimizer and checkpoints rely on.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

/// Total trainable scalar count. An empty model reports 0.
pub fn param_count(model: &dyn Params) -> usize {
    let mut n = 0;
    model.visit(&mut |_, p| n += p.len());
    n
}

pub fn zero_grads(model: &mut dyn Params) {
    model.visit_mut(&mut |_, p| p.grad.iter_mut().for_each(|g| *g = 0.0));
}

pub fn read_flat_param(model: &dyn Params, index: usize) -> f64 {
    let mut seen = 0;
    let mut out = f64::NAN;
    model.visit(&mut |_, p| {
        if index >= seen && index < seen + p.len() {
            out = p.data[index - seen];
        }
        seen += p.len();
    });
    out
}

pub fn add_flat_param(model: &mut dyn Params, index: usize, delta: f64) {
    let mut seen = 0;
    model.visit_mut(&mut |_, p| {
        if index >= seen && index < seen + p.len() {
            p.data[index - seen] += delta;
        }
        seen += p.len();
    });
}

pub fn read_flat_grad(model: &dyn Params, index: usize) -> f64 {
    let mut seen = 0;
    let mut out = f64::NAN;
    model.visit(&mut |_, p| {
        if index >= seen && index < seen + p.len() {
            out = p.grad[index - seen];
        }
        seen += p.len();
    });
    out
}

fn randn(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// 2-D convolution, channels-last, weight layout [ky][kx][in_c][out_c].
/// Padding is (k-1)/2, so k=1 is pointwise and k=3 keeps (or halves) the
/// spatial size depending on stride.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Param,
    pub b: Param,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha20Rng) -> Self {
        let n = k * k * in_c * out_c;
        let std = (2.0 / (k * k * in_c) as f64).sqrt();
        let data = (0..n).map(|_| std * randn(rng)).collect();
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad: (k - 1) / 2,
            w: Param::new(vec![k, k, in_c, out_c], data),
            b: Param::zeros(vec![out_c]),
        }
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channel mismatch");
        let (oh, ow) = (self.out_side(x.h), self.out_side(x.w));
        let (k, stride, pad, in_c, out_c) = (self.k, self.stride, self.pad, self.in_c, self.out_c);
        let mut out = Tensor::zeros(oh, ow, out_c);
        let w = &self.w.data;
        let b = &self.b.data;
        par::for_each_chunk(&mut out.data, ow * out_c, |oy, row| {
            for ox in 0..ow {
                let acc = &mut row[ox * out_c..(ox + 1) * out_c];
                acc.copy_from_slice(b);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= x.h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= x.w {
                            continue;
                        }
                        let xin = x.pixel(iy as usize, ix as usize);
                        let wbase = ((ky * k + kx) * in_c) * out_c;
                        for (ic, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let ws = &w[wbase + ic * out_c..wbase + (ic + 1) * out_c];
                            for (a, &wv) in acc.iter_mut().zip(ws) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Backpropagate `gout` through the layer, accumulating weight/bias
    /// gradients and returning the gradient with respect to the input.
    pub fn backward(&mut self, x: &Tensor, gout: &Tensor) -> Tensor {
        let (k, stride, pad, in_c, out_c) = (self.k, self.stride, self.pad, self.in_c, self.out_c);
        let (oh, ow) = (gout.h, gout.w);
        assert_eq!(gout.c, out_c);

        // weight/bias gradients: fold row-partials, then merge
        let wlen = self.w.len();
        let partial = par::fold_indexed(
            oh,
            || vec![0.0f64; wlen + out_c],
            |acc, oy| {
                let (dw, db) = acc.split_at_mut(wlen);
                for ox in 0..ow {
                    let g = gout.pixel(oy, ox);
                    for (oc, &gv) in g.iter().enumerate() {
                        db[oc] += gv;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= x.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= x.w {
                                continue;
                            }
                            let xin = x.pixel(iy as usize, ix as usize);
                            let wbase = ((ky * k + kx) * in_c) * out_c;
                            for (ic, &xv) in xin.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let ws = &mut dw[wbase + ic * out_c..wbase + (ic + 1) * out_c];
                                for (d, &gv) in ws.iter_mut().zip(g) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
        for (g, p) in self.w.grad.iter_mut().zip(&partial[..wlen]) {
            *g += p;
        }
        for (g, p) in self.b.grad.iter_mut().zip(&partial[wlen..]) {
            *g += p;
        }

        // input gradient (gather form, parallel over input rows)
        let mut gin = Tensor::zeros(x.h, x.w, in_c);
        let w = &self.w.data;
        let in_w = x.w;
        par::for_each_chunk(&mut gin.data, in_w * in_c, |iy, row| {
            for ix in 0..in_w {
                let acc = &mut row[ix * in_c..(ix + 1) * in_c];
                for ky in 0..k {
                    let t = iy as isize + pad as isize - ky as isize;
                    if t < 0 || t % stride as isize != 0 {
                        continue;
                    }
                    let oy = (t / stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let u = ix as isize + pad as isize - kx as isize;
                        if u < 0 || u % stride as isize != 0 {
                            continue;
                        }
                        let ox = (u / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let g = gout.pixel(oy, ox);
                        let wbase = ((ky * k + kx) * in_c) * out_c;
                        for (ic, a) in acc.iter_mut().enumerate() {
                            let ws = &w[wbase + ic * out_c..wbase + (ic + 1) * out_c];
                            let mut s = 0.0;
                            for (&wv, &gv) in ws.iter().zip(g) {
                                s += wv * gv;
                            }
                            *a += s;
                        }
                    }
                }
            }
        });
        gin
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Fully connected layer on flat vectors, weight layout [in][out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| std * randn(rng)).collect();
        Linear {
            in_dim,
            out_dim,
            w: Param::new(vec![in_dim, out_dim], data),
            b: Param::zeros(vec![out_dim]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.data.clone();
        for (i, &xv) in x.iter().enumerate() {
            let ws = &self.w.data[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, &wv) in out.iter_mut().zip(ws) {
                *o += xv * wv;
            }
        }
        out
    }

    pub fn backward(&mut self, x: &[f64], gout: &[f64]) -> Vec<f64> {
        let mut gin = vec![0.0; self.in_dim];
        for (i, (&xv, gi)) in x.iter().zip(gin.iter_mut()).enumerate() {
            let ws = &self.w.data[i * self.out_dim..(i + 1) * self.out_dim];
            let dws = &mut self.w.grad[i * self.out_dim..(i + 1) * self.out_dim];
            let mut s = 0.0;
            for ((&wv, dw), &gv) in ws.iter().zip(dws.iter_mut()).zip(gout) {
                s += wv * gv;
                *dw += xv * gv;
            }
            *gi = s;
        }
        for (db, &gv) in self.b.grad.iter_mut().zip(gout) {
            *db += gv;
        }
        gin
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Smooth rectifier (exponential-linear, alpha = 1).
pub fn elu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// Backward through `elu` given its own output `y`.
pub fn elu_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    assert!(y.same_shape(gout));
    let data = y
        .data
        .iter()
        .zip(&gout.data)
        .map(|(&yv, &gv)| if yv > 0.0 { gv } else { gv * (yv + 1.0) })
        .collect();
    Tensor::from_vec(y.h, y.w, y.c, data)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through `sigmoid` given its own output `y`.
pub fn sigmoid_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    assert!(y.same_shape(gout));
    let data = y
        .data
        .iter()
        .zip(&gout.data)
        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
        .collect();
    Tensor::from_vec(y.h, y.w, y.c, data)
}

#[inline]
fn bilinear_axis(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    // half-pixel-center alignment: src = (i + 0.5) * in/out - 0.5
    let src = (out_i as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
    let src = src.clamp(0.0, (in_n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resample to an arbitrary size (half-pixel centers). Exact on
/// constants; used parameter-free for the x2 merge upsample and the final
/// xX upsample.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let mut out = Tensor::zeros(out_h, out_w, x.c);
    let c = x.c;
    par::for_each_chunk(&mut out.data, out_w * c, |oy, row| {
        let (y0, y1, wy) = bilinear_axis(oy, out_h, x.h);
        for ox in 0..out_w {
            let (x0, x1, wx) = bilinear_axis(ox, out_w, x.w);
            let p00 = x.pixel(y0, x0);
            let p01 = x.pixel(y0, x1);
            let p10 = x.pixel(y1, x0);
            let p11 = x.pixel(y1, x1);
            let dst = &mut row[ox * c..(ox + 1) * c];
            for ch in 0..c {
                let top = p00[ch] + wx * (p01[ch] - p00[ch]);
                let bot = p10[ch] + wx * (p11[ch] - p10[ch]);
                dst[ch] = top + wy * (bot - top);
            }
        }
    });
    out
}

/// Transpose of [`resize_bilinear`]: scatter output gradients back to the
/// input grid.
pub fn resize_bilinear_backward(gout: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let mut gin = Tensor::zeros(in_h, in_w, gout.c);
    let c = gout.c;
    for oy in 0..gout.h {
        let (y0, y1, wy) = bilinear_axis(oy, gout.h, in_h);
        for ox in 0..gout.w {
            let (x0, x1, wx) = bilinear_axis(ox, gout.w, in_w);
            let g = gout.pixel(oy, ox);
            for ch in 0..c {
                let gv = g[ch];
                *gin.at_mut(y0, x0, ch) += gv * (1.0 - wy) * (1.0 - wx);
                *gin.at_mut(y0, x1, ch) += gv * (1.0 - wy) * wx;
                *gin.at_mut(y1, x0, ch) += gv * wy * (1.0 - wx);
                *gin.at_mut(y1, x1, ch) += gv * wy * wx;
            }
        }
    }
    gin
}

/// Max pooling with kernel == stride; `factor` must divide the input side.
pub fn max_pool_down(x: &Tensor, factor: usize) -> Tensor {
    assert!(factor > 0 && x.h % factor == 0 && x.w % factor == 0);
    let (oh, ow) = (x.h / factor, x.w / factor);
    let mut out = Tensor::filled(oh, ow, x.c, f64::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst_idx = (oy * ow + ox) * x.c;
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = x.pixel(oy * factor + dy, ox * factor + dx);
                    for (ch, &v) in src.iter().enumerate() {
                        let d = &mut out.data[dst_idx + ch];
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel spatial maximum; also returns the flat pixel index of each
/// channel's (first) maximum for gradient routing.
pub fn global_max_pool(x: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let mut best = vec![f64::NEG_INFINITY; x.c];
    let mut arg = vec![0usize; x.c];
    for (pix, px) in x.data.chunks_exact(x.c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            if v > best[ch] {
                best[ch] = v;
                arg[ch] = pix;
            }
        }
    }
    (best, arg)
}

pub fn global_max_pool_backward(
    grad: &[f64],
    argmax: &[usize],
    h: usize,
    w: usize,
    c: usize,
) -> Tensor {
    let mut gin = Tensor::zeros(h, w, c);
    for (ch, (&g, &pix)) in grad.iter().zip(argmax).enumerate() {
        gin.data[pix * c + ch] += g;
    }
    gin
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    let mut out = vec![0.0; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn global_avg_pool_backward(grad: &[f64], h: usize, w: usize) -> Tensor {
    let n = (h * w) as f64;
    let mut gin = Tensor::zeros(h, w, grad.len());
    for px in gin.data.chunks_exact_mut(grad.len()) {
        for (p, &g) in px.iter_mut().zip(grad) {
            *p = g / n;
        }
    }
    gin
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn conv_1x1_param_count() {
        let conv = Conv2d::new(3, 8, 1, 1, &mut rng());
        assert_eq!(param_count(&conv), 3 * 8 + 8);
    }

    #[test]
    fn conv_stride2_halves_even_sides() {
        let conv = Conv2d::new(3, 4, 3, 2, &mut rng());
        let x = Tensor::zeros(64, 64, 3);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), (32, 32, 4));
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with identity weights passes the input through
        let mut conv = Conv2d::new(2, 2, 1, 1, &mut rng());
        conv.w.data = vec![1.0, 0.0, 0.0, 1.0];
        conv.b.data = vec![0.0, 0.0];
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv.forward(&x).data, x.data);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng();
        let mut conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = Tensor::from_vec(4, 4, 2, (0..32).map(|i| (i as f64 * 0.37).sin()).collect());
        // loss = 0.5 * sum(y^2)
        let y = conv.forward(&x);
        let gout = y.clone();
        let gin = conv.backward(&x, &gout);
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x).data.iter().map(|v| 0.5 * v * v).sum()
        };
        let step = 1e-6;
        // weight grads
        for i in (0..conv.w.len()).step_by(7) {
            let mut c2 = conv.clone();
            c2.w.data[i] += step;
            let mut c3 = conv.clone();
            c3.w.data[i] -= step;
            let fd = (loss(&c2, &x) - loss(&c3, &x)) / (2.0 * step);
            assert!(
                (fd - conv.w.grad[i]).abs() / fd.abs().max(1.0) < 1e-6,
                "w[{i}]: fd={fd} analytic={}",
                conv.w.grad[i]
            );
        }
        // input grads
        for i in (0..x.data.len()).step_by(3) {
            let mut x2 = x.clone();
            x2.data[i] += step;
            let mut x3 = x.clone();
            x3.data[i] -= step;
            let fd = (loss(&conv, &x2) - loss(&conv, &x3)) / (2.0 * step);
            assert!(
                (fd - gin.data[i]).abs() / fd.abs().max(1.0) < 1e-6,
                "x[{i}]: fd={fd} analytic={}",
                gin.data[i]
            );
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::filled(4, 4, 3, 0.7);
        let y = resize_bilinear(&x, 8, 8);
        assert!(y.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let z = resize_bilinear(&x, 2, 2);
        assert!(z.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <resize(x), g> == <x, resize_backward(g)>
        let mut r = rng();
        let x = Tensor::from_vec(3, 3, 2, (0..18).map(|_| randn(&mut r)).collect());
        let g = Tensor::from_vec(6, 6, 2, (0..72).map(|_| randn(&mut r)).collect());
        let y = resize_bilinear(&x, 6, 6);
        let gb = resize_bilinear_backward(&g, 3, 3);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gb.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn gmp_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(2, 2, 1, vec![0.1, 0.9, 0.3, 0.2]);
        let (vals, arg) = global_max_pool(&x);
        assert_eq!(vals, vec![0.9]);
        let gin = global_max_pool_backward(&[2.0], &arg, 2, 2, 1);
        assert_eq!(gin.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_keeps_single_peak() {
        let mut x = Tensor::zeros(4, 4, 1);
        *x.at_mut(1, 2, 0) = 1.0;
        let y = max_pool_down(&x, 2);
        assert_eq!(y.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut r = rng();
        let mut lin = Linear::new(4, 3, &mut r);
        let x: Vec<f64> = (0..4).map(|_| randn(&mut r)).collect();
        let y = lin.forward(&x);
        let gout: Vec<f64> = y.clone();
        let gin = lin.backward(&x, &gout);
        let loss = |lin: &Linear, x: &[f64]| -> f64 {
            lin.forward(x).iter().map(|v| 0.5 * v * v).sum()
        };
        let step = 1e-6;
        for i in 0..lin.w.len() {
            let mut l2 = lin.clone();
            l2.w.data[i] += step;
            let mut l3 = lin.clone();
            l3.w.data[i] -= step;
            let fd = (loss(&l2, &x) - loss(&l3, &x)) / (2.0 * step);
            assert!((fd - lin.w.grad[i]).abs() < 1e-6);
        }
        for i in 0..4 {
            let mut x2 = x.clone();
            x2[i] += step;
            let mut x3 = x.clone();
            x3[i] -= step;
            let fd = (loss(&lin, &x2) - loss(&lin, &x3)) / (2.0 * step);
            assert!((fd - gin[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }
}
