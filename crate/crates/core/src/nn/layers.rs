use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::imagestack::Shape;

/// Fully connected map from the flattened input to a `(c, h, w)` output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_len: usize,
    pub out_shape: Shape,
    /// Row-major `(out, in)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_len: usize, out_shape: Shape, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_len as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            in_len,
            out_shape,
            weight: (0..in_len * out_shape.len()).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_shape.len()],
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.data.len(), self.in_len, "dense input length");
        let data = self
            .weight
            .chunks_exact(self.in_len)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        Tensor::new(self.out_shape, data)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let mut gx = vec![0.0; self.in_len];
        for (row, &go) in self.weight.chunks_exact(self.in_len).zip(&g.data) {
            for (acc, w) in gx.iter_mut().zip(row) {
                *acc += w * go;
            }
        }
        if let Some((gw, gb)) = grads {
            for ((grow, &go), gbias) in gw.chunks_exact_mut(self.in_len).zip(&g.data).zip(gb.iter_mut()) {
                *gbias += go;
                for (acc, v) in grow.iter_mut().zip(&x.data) {
                    *acc += go * v;
                }
            }
        }
        Tensor::new(x.shape, gx)
    }
}

/// Stride-1 convolution with zero "same" padding and an odd kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out, in, k, k)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Row span `[lo, hi)` of outputs whose shifted source index `y + d` is valid.
fn valid_span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: (0..out_channels * in_channels * kernel * kernel).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn scale_weights(&mut self, factor: f64) {
        self.weight.iter_mut().for_each(|w| *w *= factor);
    }

    fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(self.out_channels, s.height, s.width)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape;
        assert_eq!(s.channels, self.in_channels, "conv input channels");
        let (h, w, k) = (s.height, s.width, self.kernel);
        let pad = (k / 2) as isize;
        let plane = h * w;
        let mut out = vec![0.0; self.out_channels * plane];
        for (o, out_plane) in out.chunks_exact_mut(plane).enumerate() {
            out_plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = &x.data[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_channels + i) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_span(w, dx);
                        let wt = self.weight[wbase + ky * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            let orow = &mut out_plane[y * w + x0..y * w + x1];
                            for (ov, sv) in orow.iter_mut().zip(srow) {
                                *ov += wt * sv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(self.out_shape(s), out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let s = x.shape;
        let (h, w, k) = (s.height, s.width, self.kernel);
        let pad = (k / 2) as isize;
        let plane = h * w;
        let mut gx = vec![0.0; self.in_channels * plane];
        let (mut gw, mut gb) = match grads {
            Some((gw, gb)) => (Some(gw), Some(gb)),
            None => (None, None),
        };
        for o in 0..self.out_channels {
            let gplane = &g.data[o * plane..(o + 1) * plane];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += gplane.iter().sum::<f64>();
            }
            for i in 0..self.in_channels {
                let src = &x.data[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_channels + i) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_span(w, dx);
                        let wt = self.weight[wbase + ky * k + kx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let lo = sy * w + (x0 as isize + dx) as usize;
                            let hi = sy * w + (x1 as isize + dx) as usize;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let gxrow = &mut gx[i * plane + lo..i * plane + hi];
                            for (a, gv) in gxrow.iter_mut().zip(grow) {
                                *a += wt * gv;
                            }
                            if gw.is_some() {
                                let srow = &src[lo..hi];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(s, gx)
    }
}

/// Transposed convolution, kernel 4, stride 2, padding 1: doubles the
/// spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(in, out, 4, 4)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

const TK: usize = 4;

impl ConvTranspose2d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        // each output pixel receives 2x2 taps per input channel
        let fan_in = (in_channels * 4) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            in_channels,
            out_channels,
            weight: (0..in_channels * out_channels * TK * TK).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(self.out_channels, s.height * 2, s.width * 2)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape;
        assert_eq!(s.channels, self.in_channels, "transposed conv input channels");
        let os = self.out_shape(s);
        let (h, w) = (s.height, s.width);
        let (oh, ow) = (os.height, os.width);
        let oplane = oh * ow;
        let mut out = vec![0.0; os.len()];
        for (o, plane) in out.chunks_exact_mut(oplane).enumerate() {
            plane.fill(self.bias[o]);
        }
        for i in 0..self.in_channels {
            for o in 0..self.out_channels {
                let wbase = (i * self.out_channels + o) * TK * TK;
                let oplane_data = &mut out[o * oplane..(o + 1) * oplane];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x.data[(i * h + iy) * w + ix];
                        for ky in 0..TK {
                            let oy = (2 * iy + ky) as isize - 1;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..TK {
                                let ox = (2 * ix + kx) as isize - 1;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                oplane_data[oy as usize * ow + ox as usize] += self.weight[wbase + ky * TK + kx] * v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(os, out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let s = x.shape;
        let (h, w) = (s.height, s.width);
        let (oh, ow) = (2 * h, 2 * w);
        let oplane = oh * ow;
        let mut gx = vec![0.0; s.len()];
        let (mut gw, gb) = match grads {
            Some((gw, gb)) => (Some(gw), Some(gb)),
            None => (None, None),
        };
        if let Some(gb) = gb {
            for o in 0..self.out_channels {
                gb[o] += g.data[o * oplane..(o + 1) * oplane].iter().sum::<f64>();
            }
        }
        for i in 0..self.in_channels {
            for o in 0..self.out_channels {
                let wbase = (i * self.out_channels + o) * TK * TK;
                let gplane = &g.data[o * oplane..(o + 1) * oplane];
                for iy in 0..h {
                    for ix in 0..w {
                        let xi = (i * h + iy) * w + ix;
                        let v = x.data[xi];
                        let mut acc = 0.0;
                        for ky in 0..TK {
                            let oy = (2 * iy + ky) as isize - 1;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..TK {
                                let ox = (2 * ix + kx) as isize - 1;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let go = gplane[oy as usize * ow + ox as usize];
                                acc += self.weight[wbase + ky * TK + kx] * go;
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw[wbase + ky * TK + kx] += v * go;
                                }
                            }
                        }
                        gx[xi] += acc;
                    }
                }
            }
        }
        Tensor::new(s, gx)
    }
}

/// Per-channel batch normalization over `(batch, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    normalized: Vec<Tensor>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let plane = x.shape.plane();
        let mut out = x.data.clone();
        for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean[c], self.gamma[c], self.beta[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * inv * g + b);
        }
        Tensor::new(x.shape, out)
    }

    /// Batch statistics; `update` folds them into the running estimates.
    fn forward_batch(&mut self, xs: &[Tensor], update: bool) -> (Vec<Tensor>, BnCache) {
        let plane = xs[0].shape.plane();
        let n = (xs.len() * plane) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for x in xs {
            for (c, chunk) in x.data.chunks_exact(plane).enumerate() {
                mean[c] += chunk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for x in xs {
            for (c, chunk) in x.data.chunks_exact(plane).enumerate() {
                var[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut normalized = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xh = x.data.clone();
            let mut y = x.data.clone();
            for c in 0..self.channels {
                let r = c * plane..(c + 1) * plane;
                for (a, b) in xh[r.clone()].iter_mut().zip(y[r].iter_mut()) {
                    *a = (*a - mean[c]) * inv_std[c];
                    *b = *a * self.gamma[c] + self.beta[c];
                }
            }
            normalized.push(Tensor::new(x.shape, xh));
            outs.push(Tensor::new(x.shape, y));
        }
        if update {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..self.channels {
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
            }
        }
        (outs, BnCache { normalized, inv_std })
    }

    fn backward_batch(&self, cache: &BnCache, gs: &[Tensor], grads: Option<(&mut [f64], &mut [f64])>) -> Vec<Tensor> {
        let plane = gs[0].shape.plane();
        let n = (gs.len() * plane) as f64;
        let mut sum_g = vec![0.0; self.channels];
        let mut sum_gx = vec![0.0; self.channels];
        for (g, xh) in gs.iter().zip(&cache.normalized) {
            for c in 0..self.channels {
                let r = c * plane..(c + 1) * plane;
                sum_g[c] += g.data[r.clone()].iter().sum::<f64>();
                sum_gx[c] += g.data[r.clone()].iter().zip(&xh.data[r]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some((gg, gbeta)) = grads {
            for c in 0..self.channels {
                gg[c] += sum_gx[c];
                gbeta[c] += sum_g[c];
            }
        }
        gs.iter()
            .zip(&cache.normalized)
            .map(|(g, xh)| {
                let mut gx = vec![0.0; g.data.len()];
                for c in 0..self.channels {
                    let k = self.gamma[c] * cache.inv_std[c] / n;
                    let r = c * plane..(c + 1) * plane;
                    for ((o, &gv), &xv) in gx[r.clone()].iter_mut().zip(&g.data[r.clone()]).zip(&xh.data[r]) {
                        *o = k * (n * gv - sum_g[c] - xv * sum_gx[c]);
                    }
                }
                Tensor::new(g.shape, gx)
            })
            .collect()
    }

    fn backward_eval(&self, g: &Tensor, x: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let plane = g.shape.plane();
        let mut gx = g.data.clone();
        let mut gg = vec![0.0; self.channels];
        let mut gbeta = vec![0.0; self.channels];
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let r = c * plane..(c + 1) * plane;
            for (o, &xv) in gx[r.clone()].iter_mut().zip(&x.data[r]) {
                gg[c] += *o * (xv - self.running_mean[c]) * inv;
                gbeta[c] += *o;
                *o *= self.gamma[c] * inv;
            }
        }
        if let Some((g_gamma, g_beta)) = grads {
            for c in 0..self.channels {
                g_gamma[c] += gg[c];
                g_beta[c] += gbeta[c];
            }
        }
        Tensor::new(g.shape, gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    LeakyRelu(f64),
    /// `scale * tanh(x)`.
    Tanh(f64),
    Sigmoid,
}

pub(crate) enum LayerCache {
    None,
    Bn(BnCache),
}

impl Layer {
    pub fn output_shape(&self, s: Shape) -> Shape {
        match self {
            Layer::Dense(d) => d.out_shape,
            Layer::Conv2d(c) => c.out_shape(s),
            Layer::ConvTranspose2d(c) => c.out_shape(s),
            _ => s,
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm2d(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => vec![],
        }
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Layer::BatchNorm2d(b) => vec![&b.running_mean, &b.running_var],
            _ => vec![],
        }
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::ConvTranspose2d(c) => c.forward(x),
            Layer::BatchNorm2d(b) => b.forward_eval(x),
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::LeakyRelu(a) => x.map(|v| if v > 0.0 { v } else { a * v }),
            Layer::Tanh(s) => x.map(|v| s * v.tanh()),
            Layer::Sigmoid => x.map(sigmoid),
        }
    }

    pub(crate) fn forward_batch(&mut self, xs: &[Tensor], train: bool) -> (Vec<Tensor>, LayerCache) {
        match self {
            Layer::BatchNorm2d(b) if train => {
                let (out, cache) = b.forward_batch(xs, true);
                (out, LayerCache::Bn(cache))
            }
            _ => (xs.iter().map(|x| self.forward_eval(x)).collect(), LayerCache::None),
        }
    }

    /// Gradient with respect to the inputs; parameter gradients are
    /// accumulated into `grads` (same order as [`Layer::params`]).
    pub(crate) fn backward_batch(
        &self,
        xs: &[Tensor],
        cache: &LayerCache,
        gs: &[Tensor],
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<Tensor> {
        fn pair<'a>(grads: &'a mut Option<&mut [Vec<f64>]>) -> Option<(&'a mut [f64], &'a mut [f64])> {
            grads.as_deref_mut().map(|g| {
                let (a, b) = g.split_at_mut(1);
                (a[0].as_mut_slice(), b[0].as_mut_slice())
            })
        }
        match (self, cache) {
            (Layer::BatchNorm2d(b), LayerCache::Bn(c)) => b.backward_batch(c, gs, pair(&mut grads)),
            _ => xs
                .iter()
                .zip(gs)
                .map(|(x, g)| match self {
                    Layer::Dense(d) => d.backward(x, g, pair(&mut grads)),
                    Layer::Conv2d(c) => c.backward(x, g, pair(&mut grads)),
                    Layer::ConvTranspose2d(c) => c.backward(x, g, pair(&mut grads)),
                    Layer::BatchNorm2d(b) => b.backward_eval(g, x, pair(&mut grads)),
                    Layer::Relu => x.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }),
                    Layer::LeakyRelu(a) => x.zip_map(g, |v, gv| if v > 0.0 { gv } else { a * gv }),
                    Layer::Tanh(s) => x.zip_map(g, |v, gv| {
                        let t = v.tanh();
                        s * (1.0 - t * t) * gv
                    }),
                    Layer::Sigmoid => x.zip_map(g, |v, gv| {
                        let s = sigmoid(v);
                        s * (1.0 - s) * gv
                    }),
                })
                .collect(),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
