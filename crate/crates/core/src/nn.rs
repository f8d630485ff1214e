//! A small CPU neural-network engine: sequential layers with hand-written
//! backward passes, softmax cross-entropy and Adam.
//!
//! Every layer supports gradients with respect to its input, which the
//! perturbation generators rely on to push gradients through a frozen
//! feature extractor back to image pixels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_channels x (in_channels * kernel * kernel)`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// lies inside `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = if w + self.pad > kx {
            ((w + self.pad - kx - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if self.stride == 1 {
                            let start = lo + kx - self.pad;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[(lo + ox) * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let line = &src[oy * ow + lo..oy * ow + hi];
                        if self.stride == 1 {
                            let start = lo + kx - self.pad;
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in line.iter().enumerate() {
                                dst[(lo + ox) * self.stride + kx - self.pad] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let ckk = c * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut kept = if keep { Vec::with_capacity(n * ckk * oh * ow) } else { Vec::new() };
        let mut cols = vec![0.0; ckk * oh * ow];
        for i in 0..n {
            self.im2col(x.item(i), h, w, &mut cols);
            let y = out.item_mut(i);
            for (o, row) in y.chunks_mut(oh * ow).enumerate() {
                row.fill(self.bias[o]);
            }
            gemm(self.out_channels, ckk, oh * ow, &self.weight, false, &cols, false, y, 1.0);
            if keep {
                kept.extend_from_slice(&cols);
            }
        }
        let cache = keep.then(|| Cache::Conv {
            cols: kept,
            in_shape: x.shape(),
        });
        (out, cache)
    }

    fn backward(
        &self,
        cols: &[f32],
        in_shape: [usize; 4],
        grad: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
        need_input: bool,
    ) -> Option<Tensor> {
        let [n, c, h, w] = in_shape;
        let (oh, ow) = self.out_hw(h, w);
        let ckk = c * self.kernel * self.kernel;
        let per = ckk * oh * ow;
        if let Some((gw, gb)) = grads {
            for i in 0..n {
                let g = grad.item(i);
                gemm(
                    self.out_channels,
                    oh * ow,
                    ckk,
                    g,
                    false,
                    &cols[i * per..(i + 1) * per],
                    true,
                    gw,
                    1.0,
                );
                for (o, row) in g.chunks(oh * ow).enumerate() {
                    gb[o] += row.iter().sum::<f32>();
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Tensor::zeros(in_shape);
        let mut dcols = vec![0.0; per];
        for i in 0..n {
            gemm(
                ckk,
                self.out_channels,
                oh * ow,
                &self.weight,
                true,
                grad.item(i),
                false,
                &mut dcols,
                0.0,
            );
            self.col2im(&dcols, h, w, dx.item_mut(i));
        }
        Some(dx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out_features x in_features`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_features as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            in_features,
            out_features,
            weight: (0..in_features * out_features).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_features],
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input width");
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight,
            true,
            &mut out,
            1.0,
        );
        Tensor::matrix(n, self.out_features, out)
    }

    fn backward(&self, input: &Tensor, grad: &Tensor, grads: Option<(&mut [f32], &mut [f32])>, need_input: bool) -> Option<Tensor> {
        let n = input.batch();
        if let Some((gw, gb)) = grads {
            gemm(
                self.out_features,
                n,
                self.in_features,
                grad.data(),
                true,
                input.data(),
                false,
                gw,
                1.0,
            );
            for row in grad.data().chunks(self.out_features) {
                for (b, g) in gb.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = vec![0.0; n * self.in_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            grad.data(),
            false,
            &self.weight,
            false,
            &mut dx,
            0.0,
        );
        Some(Tensor::from_vec(input.shape(), dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    Tanh,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    GlobalAvgPool,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    /// Scale each item to unit Euclidean norm.
    L2Normalize,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug)]
pub enum Cache {
    Conv { cols: Vec<f32>, in_shape: [usize; 4] },
    Input(Tensor),
    Output(Tensor),
    Argmax { idx: Vec<u32>, in_shape: [usize; 4] },
    Shape([usize; 4]),
    Normalize { output: Tensor, norms: Vec<f32> },
}

const NORM_FLOOR: f32 = 1e-12;

impl Layer {
    fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        match self {
            Layer::Conv2d(conv) => conv.forward(x, keep),
            Layer::Linear(lin) => {
                let y = lin.forward(x);
                (y, keep.then(|| Cache::Input(x.clone())))
            }
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                let c = keep.then(|| Cache::Output(y.clone()));
                (y, c)
            }
            Layer::Tanh => {
                let y = x.map(f32::tanh);
                let c = keep.then(|| Cache::Output(y.clone()));
                (y, c)
            }
            Layer::MaxPool2 => {
                let [n, c, h, w] = x.shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros([n, c, oh, ow]);
                let mut idx = Vec::with_capacity(if keep { n * c * oh * ow } else { 0 });
                for i in 0..n {
                    let src = x.item(i);
                    let dst = out.item_mut(i);
                    for ch in 0..c {
                        let base = ch * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = base + 2 * oy * w + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                                    if src[j] > src[best] {
                                        best = j;
                                    }
                                }
                                dst[(ch * oh + oy) * ow + ox] = src[best];
                                if keep {
                                    idx.push(best as u32);
                                }
                            }
                        }
                    }
                }
                let c = keep.then(|| Cache::Argmax { idx, in_shape: x.shape() });
                (out, c)
            }
            Layer::GlobalAvgPool => {
                let [n, c, h, w] = x.shape();
                let hw = (h * w) as f32;
                let mut out = Vec::with_capacity(n * c);
                for i in 0..n {
                    for plane in x.item(i).chunks(h * w) {
                        out.push(plane.iter().sum::<f32>() / hw);
                    }
                }
                (Tensor::matrix(n, c, out), keep.then(|| Cache::Shape(x.shape())))
            }
            Layer::Upsample2 => {
                let [n, c, h, w] = x.shape();
                let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
                for i in 0..n {
                    let src = x.item(i);
                    let dst = out.item_mut(i);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                            }
                        }
                    }
                }
                (out, keep.then(|| Cache::Shape(x.shape())))
            }
            Layer::L2Normalize => {
                let mut y = x.clone();
                let mut norms = Vec::with_capacity(x.batch());
                for i in 0..x.batch() {
                    let row = y.item_mut(i);
                    let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_FLOOR);
                    row.iter_mut().for_each(|v| *v /= norm);
                    norms.push(norm);
                }
                let c = keep.then(|| Cache::Normalize { output: y.clone(), norms });
                (y, c)
            }
        }
    }

    fn backward(&self, cache: Cache, grad: Tensor, grads: Option<&mut [Vec<f32>]>, need_input: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape }) => {
                let g = grads.map(|g| {
                    let (w, b) = g.split_at_mut(1);
                    (w[0].as_mut_slice(), b[0].as_mut_slice())
                });
                conv.backward(&cols, in_shape, &grad, g, need_input)
            }
            (Layer::Linear(lin), Cache::Input(input)) => {
                let g = grads.map(|g| {
                    let (w, b) = g.split_at_mut(1);
                    (w[0].as_mut_slice(), b[0].as_mut_slice())
                });
                lin.backward(&input, &grad, g, need_input)
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Some(g)
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                Some(g)
            }
            (Layer::MaxPool2, Cache::Argmax { idx, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                let per_in = dx.item_len();
                let per_out = grad.item_len();
                for i in 0..in_shape[0] {
                    let g = grad.item(i);
                    let d = &mut dx.data_mut()[i * per_in..(i + 1) * per_in];
                    for (j, &gv) in g.iter().enumerate() {
                        d[idx[i * per_out + j] as usize] += gv;
                    }
                }
                Some(dx)
            }
            (Layer::GlobalAvgPool, Cache::Shape(in_shape)) => {
                let [n, c, h, w] = in_shape;
                let hw = (h * w) as f32;
                let mut dx = Tensor::zeros(in_shape);
                for i in 0..n {
                    let g = grad.item(i);
                    for (ch, plane) in dx.item_mut(i).chunks_mut(h * w).enumerate().take(c) {
                        plane.fill(g[ch] / hw);
                    }
                }
                Some(dx)
            }
            (Layer::Upsample2, Cache::Shape(in_shape)) => {
                let [n, c, h, w] = in_shape;
                let mut dx = Tensor::zeros(in_shape);
                for i in 0..n {
                    let g = grad.item(i);
                    let d = dx.item_mut(i);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
                Some(dx)
            }
            (Layer::L2Normalize, Cache::Normalize { output, norms }) => {
                // d(x/|x|) = (g - y (y.g)) / |x|
                let mut g = grad;
                for (i, &norm) in norms.iter().enumerate() {
                    let y = output.item(i);
                    let row = g.item_mut(i);
                    let dot: f32 = y.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in row.iter_mut().zip(y) {
                        *gv = (*gv - yv * dot) / norm;
                    }
                }
                Some(g)
            }
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
        }
    }

    pub fn params(&self) -> Vec<&[f32]> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

/// Activations recorded by [`Sequential::forward_tape`].
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Gradient buffers aligned with [`Sequential::params`].
pub type Grads = Vec<Vec<f32>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, false).0;
        }
        cur
    }

    pub fn forward_tape(&self, x: &Tensor) -> (Tensor, Tape) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur, true);
            caches.push(c.expect("cache requested"));
            cur = y;
        }
        (cur, Tape { caches })
    }

    /// Backpropagate `grad` (w.r.t. the output) through the recorded tape.
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient w.r.t. the network input is returned when `need_input`.
    pub fn backward(&self, tape: Tape, grad: Tensor, mut grads: Option<&mut Grads>, need_input: bool) -> Option<Tensor> {
        let offsets = self.param_offsets();
        let mut cur = grad;
        let last = self.layers.len();
        for (li, (layer, cache)) in self.layers.iter().zip(tape.caches).enumerate().rev() {
            let nparams = layer.params().len();
            let layer_grads = match grads.as_deref_mut() {
                Some(g) if nparams > 0 => Some(&mut g[offsets[li]..offsets[li] + nparams]),
                _ => None,
            };
            let want_input = li > 0 || need_input;
            match layer.backward(cache, cur, layer_grads, want_input) {
                Some(g) => cur = g,
                None => return None,
            }
            debug_assert!(li < last);
        }
        Some(cur)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.params().len();
        }
        offsets
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameter blocks with stable names (`"{layer}.weight"`, `"{layer}.bias"`).
    pub fn named_params(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, name) in layer.params().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{i}.{name}"), p));
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Mean softmax cross-entropy against (possibly soft) target distributions.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[f32]) -> (f32, Tensor) {
    let n = logits.batch();
    let k = logits.item_len();
    assert_eq!(targets.len(), n * k, "targets must be n x classes");
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.item(i);
        let t = &targets[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[i * k + j] = (p - t[j]) / n as f32;
            if t[j] != 0.0 {
                loss -= (t[j] * (row[j] - log_z)) as f64;
            }
        }
    }
    ((loss / n as f64) as f32, Tensor::from_vec(logits.shape(), grad))
}

/// One-hot target rows for hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f32> {
    let mut t = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        t[i * classes + l] = 1.0;
    }
    t
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &Grads) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn tiny_net(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(2, 3, 3, 1, 1, rng)),
            Layer::Tanh,
            Layer::MaxPool2,
            Layer::Conv2d(Conv2d::new(3, 4, 3, 2, 1, rng)),
            Layer::Relu,
            Layer::Upsample2,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(4, 3, rng)),
            Layer::L2Normalize,
        ])
    }

    // Scalar objective: weighted sum of outputs, computed in f64 for the
    // finite-difference side.
    fn objective(net: &Sequential, x: &Tensor, w: &[f32]) -> f64 {
        net.forward(x).data().iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny_net(&mut rng);
        let x = random_tensor([2, 2, 8, 8], &mut rng);
        let (y, tape) = net.forward_tape(&x);
        let w: Vec<f32> = (0..y.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dx = net.backward(tape, Tensor::from_vec(y.shape(), w.clone()), None, true).unwrap();
        let h = 1e-3;
        let mut checked = 0;
        for idx in (0..x.data().len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&net, &xp, &w) - objective(&net, &xm, &w)) / (2.0 * h as f64);
            let an = dx.data()[idx] as f64;
            let scale = fd.abs().max(an.abs()).max(1e-2);
            assert!((fd - an).abs() / scale < 2e-2, "idx {idx}: fd {fd} vs {an}");
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = tiny_net(&mut rng);
        let x = random_tensor([3, 2, 8, 8], &mut rng);
        let (y, tape) = net.forward_tape(&x);
        let w: Vec<f32> = (0..y.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = net.zero_grads();
        net.backward(tape, Tensor::from_vec(y.shape(), w.clone()), Some(&mut grads), false);
        let h = 1e-3;
        for block in 0..grads.len() {
            for idx in (0..grads[block].len()).step_by(5) {
                let mut plus = net.clone();
                plus.params_mut()[block][idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[block][idx] -= h;
                let fd = (objective(&plus, &x, &w) - objective(&minus, &x, &w)) / (2.0 * h as f64);
                let an = grads[block][idx] as f64;
                let scale = fd.abs().max(an.abs()).max(1e-2);
                assert!((fd - an).abs() / scale < 2e-2, "block {block} idx {idx}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let logits = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let (loss, g) = softmax_cross_entropy(&logits, &one_hot(&[2], 3));
        let z: f32 = [1.0f32, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((loss - (z.ln() - 3.0)).abs() < 1e-6);
        assert!((g.data()[0] - 1f32.exp() / z).abs() < 1e-6);
        assert!((g.data()[2] - (3f32.exp() / z - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![vec![3.0f32, -2.0]];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![p[0].iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            opt.step(p.iter_mut().collect(), &g);
        }
        assert!(p[0].iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn batch_invariance_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = tiny_net(&mut rng);
        let x = random_tensor([4, 2, 8, 8], &mut rng);
        let full = net.forward(&x);
        for i in 0..4 {
            let one = net.forward(&Tensor::stack([x.item(i)], [2, 8, 8]));
            for (a, b) in one.data().iter().zip(full.item(i)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
