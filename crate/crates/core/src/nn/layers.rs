//! Layers with hand-written backward passes. Each layer caches what its
//! backward pass needs during a training-mode forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    fn uniform(n: usize, bound: f32, rng: &mut ChaCha8Rng) -> Self {
        Param::new((0..n).map(|_| rng.random_range(-bound..=bound)).collect())
    }
}

pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    /// Non-trainable state saved with the weights (e.g. running statistics).
    fn buffers(&self) -> Vec<&Vec<f32>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        Vec::new()
    }
}

pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f32).sqrt();
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::uniform(out_ch * fan_in, bound, rng),
            bias: bias.then(|| Param::new(vec![0.0; out_ch])),
            input: None,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let ckk = c * self.kernel * self.kernel;
        let mut cols = vec![0.0; ckk * ho * wo];
        let mut out = Tensor::zeros(&[n, self.out_ch, ho, wo]);
        let per_out = self.out_ch * ho * wo;
        for i in 0..n {
            self.im2col(x.item(i), h, w, &mut cols);
            let y = &mut out.data_mut()[i * per_out..(i + 1) * per_out];
            gemm(self.out_ch, ckk, ho * wo, &self.weight.value, false, &cols, false, 0.0, y);
            if let Some(b) = &self.bias {
                for (o, chunk) in y.chunks_exact_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b.value[o]);
                }
            }
        }
        self.input = train.then(|| x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without training forward");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_dims(h, w);
        let ckk = c * self.kernel * self.kernel;
        let mut cols = vec![0.0; ckk * ho * wo];
        let mut dcols = vec![0.0; ckk * ho * wo];
        let mut dx = Tensor::zeros(x.shape());
        let per_in = c * h * w;
        for i in 0..n {
            let gy = grad.item(i);
            self.im2col(x.item(i), h, w, &mut cols);
            gemm(self.out_ch, ho * wo, ckk, gy, false, &cols, true, 1.0, &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for (o, chunk) in gy.chunks_exact(ho * wo).enumerate() {
                    b.grad[o] += chunk.iter().sum::<f32>();
                }
            }
            gemm(ckk, self.out_ch, ho * wo, &self.weight.value, true, gy, false, 0.0, &mut dcols);
            self.col2im(&dcols, h, w, &mut dx.data_mut()[i * per_in..(i + 1) * per_in]);
        }
        self.input = Some(x);
        dx
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = x.clone();
        // NaN passes through so that divergence surfaces as a non-finite loss
        y.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        if train {
            self.mask = x.data().iter().map(|&v| v > 0.0).collect();
        }
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        g
    }
}

pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best || xd[idx].is_nan() {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        if train {
            self.argmax = argmax;
            self.in_shape = x.shape().to_vec();
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(&self.in_shape);
        for (g, &i) in grad.data().iter().zip(&self.argmax) {
            dx.data_mut()[i] += g;
        }
        dx
    }
}

/// `[n, c, h, w] -> [n, c]` mean over spatial positions.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: Vec<usize>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.dim(2) * x.dim(3);
        let data = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        if train {
            self.in_shape = x.shape().to_vec();
        }
        Tensor::from_vec(&[n, c], data).expect("pooled shape")
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let hw = self.in_shape[2] * self.in_shape[3];
        let mut dx = Tensor::zeros(&self.in_shape);
        for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(grad.data()) {
            plane.fill(g / hw as f32);
        }
        dx
    }
}

pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        Linear {
            in_features,
            out_features,
            weight: Param::uniform(in_features * out_features, bound, rng),
            bias: Param::uniform(out_features, bound, rng),
            input: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.dim(0);
        assert_eq!(x.item_len(), self.in_features, "linear input features");
        let mut y = Tensor::zeros(&[n, self.out_features]);
        gemm(n, self.in_features, self.out_features, x.data(), false, &self.weight.value, true, 0.0, y.data_mut());
        for row in y.data_mut().chunks_exact_mut(self.out_features) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
        }
        self.input = train.then(|| x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("linear backward without training forward");
        let n = x.dim(0);
        gemm(self.out_features, n, self.in_features, grad.data(), true, x.data(), false, 1.0, &mut self.weight.grad);
        for row in grad.data().chunks_exact(self.out_features) {
            self.bias.grad.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, self.out_features, self.in_features, grad.data(), false, &self.weight.value, false, 0.0, dx.data_mut());
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct BatchNorm2d {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    momentum: f32,
    eps: f32,
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            x_hat: Vec::new(),
            inv_std: Vec::new(),
            shape: Vec::new(),
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.dim(2) * x.dim(3);
        assert_eq!(c, self.channels, "batch norm channels");
        let xd = x.data();
        let mut y = Tensor::zeros(x.shape());
        let (mean, var): (Vec<f32>, Vec<f32>) = if train {
            let m = (n * hw) as f64;
            (0..c)
                .map(|ch| {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            s += v as f64;
                            s2 += v as f64 * v as f64;
                        }
                    }
                    let mean = s / m;
                    ((mean) as f32, ((s2 / m - mean * mean).max(0.0)) as f32)
                })
                .unzip()
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = if train { vec![0.0; xd.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in range {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    if train {
                        x_hat[j] = xh;
                    }
                    y.data_mut()[j] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
        }
        if train {
            let m = (n * hw) as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
            }
            self.x_hat = x_hat;
            self.inv_std = inv_std;
            self.shape = x.shape().to_vec();
        }
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c) = (self.shape[0], self.shape[1]);
        let hw = self.shape[2] * self.shape[3];
        let m = (n * hw) as f32;
        let g = grad.data();
        let mut dx = Tensor::zeros(&self.shape);
        for ch in 0..c {
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for i in 0..n {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    sum_g += g[j];
                    sum_gx += g[j] * self.x_hat[j];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let k = self.gamma.value[ch] * self.inv_std[ch] / m;
            for i in 0..n {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    dx.data_mut()[j] = k * (m * g[j] - sum_g - self.x_hat[j] * sum_gx);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Vec<f32>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Two 3x3 convolutions with batch norm and an identity or projected
/// shortcut.
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    out_mask: Vec<bool>,
}

impl BasicBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let downsample = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng), BatchNorm2d::new(out_ch)));
        BasicBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            downsample,
            out_mask: Vec::new(),
        }
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let a = self.conv1.forward(x, train);
        let a = self.bn1.forward(&a, train);
        let a = self.relu1.forward(&a, train);
        let b = self.conv2.forward(&a, train);
        let mut b = self.bn2.forward(&b, train);
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, train);
                bn.forward(&s, train)
            }
            None => x.clone(),
        };
        for (v, s) in b.data_mut().iter_mut().zip(shortcut.data()) {
            *v += s;
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if train {
            self.out_mask = b.data().iter().map(|&v| v > 0.0).collect();
        }
        b
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(&self.out_mask) {
            if !m {
                *v = 0.0;
            }
        }
        let gb = self.bn2.backward(&g);
        let gb = self.conv2.backward(&gb);
        let gb = self.relu1.backward(&gb);
        let gb = self.bn1.backward(&gb);
        let mut dx = self.conv1.backward(&gb);
        let gs = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = bn.backward(&g);
                conv.backward(&s)
            }
            None => g,
        };
        dx.data_mut().iter_mut().zip(gs.data()).for_each(|(a, b)| *a += b);
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.downsample {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.downsample {
            p.extend(c.params_mut());
            p.extend(b.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Vec<f32>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.downsample {
            b.extend(bn.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut b = self.bn1.buffers_mut();
        b.extend(self.bn2.buffers_mut());
        if let Some((_, bn)) = &mut self.downsample {
            b.extend(bn.buffers_mut());
        }
        b
    }
}
