//! Network layers with hand-written backward passes.
//!
//! Inference (`forward`) takes `&self` so a frozen model can be shared across
//! threads. Training (`forward_train`) records what `backward` needs, and
//! `backward` accumulates parameter gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, MatRef, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.03;

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    fn normal<R: Rng>(len: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self::new((0..len).map(|_| dist.sample(rng)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// He initialisation scale for leaky-ReLU networks.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    bias: Option<Param>,
    input_grad: bool,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::normal(out_c * fan_in, he_std(fan_in), rng),
            bias: with_bias.then(|| Param::new(vec![0.0; out_c])),
            input_grad: true,
            input: None,
        }
    }

    /// With `false`, `backward` skips the input gradient and returns zeros.
    /// Meant for layers that read the network input directly.
    pub fn set_input_grad(&mut self, on: bool) {
        self.input_grad = on;
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if w + self.pad > kx {
            ((w - 1 + self.pad - kx) / self.stride + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one item `(C, H, W)` into `(C*k*k, OH*OW)`.
    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * oh * ow;
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(self.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds column gradients back onto the input grid (accumulating).
    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * oh * ow;
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * ow + lo..row + oy * ow + hi];
                        let first = lo * self.stride + kx - self.pad;
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (d, g) in dst[first..].iter_mut().step_by(self.stride).zip(src) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let p = oh * ow;
        let kk = self.cols_len();
        let mut out = Tensor::zeros([n, self.out_c, oh, ow]);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * p]
        };
        for i in 0..n {
            let xi = x.item(i);
            let cols_ref: &[f64] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            let oi = out.item_mut(i);
            if let Some(b) = &self.bias {
                for (o, bv) in b.value.iter().enumerate() {
                    oi[o * p..(o + 1) * p].fill(*bv);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                self.out_c,
                kk,
                p,
                MatRef::rows(&self.weight.value, kk),
                MatRef::rows(cols_ref, p),
                beta,
                oi,
            );
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.forward(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward_train");
        let [n, _, h, w] = x.shape();
        let [_, _, oh, ow] = grad.shape();
        let p = oh * ow;
        let kk = self.cols_len();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { kk * p }];
        let mut dcols = vec![0.0; if self.input_grad { kk * p } else { 0 }];
        for i in 0..n {
            let gi = grad.item(i);
            if let Some(b) = &mut self.bias {
                for (o, bg) in b.grad.iter_mut().enumerate() {
                    *bg += gi[o * p..(o + 1) * p].iter().sum::<f64>();
                }
            }
            let xi = x.item(i);
            let cols_ref: &[f64] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            // dW += dOut * cols^T
            gemm(
                self.out_c,
                p,
                kk,
                MatRef::rows(gi, p),
                MatRef::transposed(cols_ref, p),
                1.0,
                &mut self.weight.grad,
            );
            if !self.input_grad {
                continue;
            }
            // dCols = W^T * dOut
            let target: &mut [f64] = if self.is_pointwise() {
                dx.item_mut(i)
            } else {
                &mut dcols
            };
            gemm(
                kk,
                self.out_c,
                p,
                MatRef::transposed(&self.weight.value, kk),
                MatRef::rows(gi, p),
                0.0,
                target,
            );
            if !self.is_pointwise() {
                self.col2im(&dcols, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    fn normalize(x: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = x.clone();
        for i in 0..n {
            let item = out.item_mut(i);
            for ch in 0..c {
                for v in &mut item[ch * hw..(ch + 1) * hw] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        out
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let [n, c, h, w] = xhat.shape();
        let hw = h * w;
        let mut out = xhat.clone();
        for i in 0..n {
            let item = out.item_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in &mut item[ch * hw..(ch + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        self.affine(&Self::normalize(x, &self.running_mean, &inv_std))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            let item = x.item(i);
            for ch in 0..c {
                mean[ch] += item[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            let item = x.item(i);
            for ch in 0..c {
                var[ch] += item[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
        }
        let xhat = Self::normalize(x, &mean, &inv_std);
        let out = self.affine(&xhat);
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward_train");
        let [n, c, h, w] = xhat.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            let (g, xh) = (grad.item(i), xhat.item(i));
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                for (dy, xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xv;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(xhat.shape());
        for i in 0..n {
            let (g, xh) = (grad.item(i), xhat.item(i));
            let d = dx.item_mut(i);
            for ch in 0..c {
                let k = self.gamma.value[ch] * inv_std[ch] / m;
                for j in ch * hw..(ch + 1) * hw {
                    d[j] = k * (m * g[j] - sum_dy[ch] - xh[j] * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct LeakyRelu {
    input: Option<Tensor>,
}

impl LeakyRelu {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { LEAKY_SLOPE * *v });
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("leaky relu backward without forward_train");
        let mut dx = grad.clone();
        for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
            if *v <= 0.0 {
                *d *= LEAKY_SLOPE;
            }
        }
        dx
    }
}

/// `(N, C, H, W)` to `(N, C, 1, 1)` by spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let item = x.item(i);
            for ch in 0..c {
                out.push(item[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64);
            }
        }
        Tensor::from_vec([n, c, 1, 1], out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input_shape = Some(x.shape());
        self.forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("pool backward without forward_train");
        let [n, c, h, w] = shape;
        let hw = h * w;
        let mut dx = Tensor::zeros(shape);
        for i in 0..n {
            let g = grad.item(i);
            let d = dx.item_mut(i);
            for ch in 0..c {
                d[ch * hw..(ch + 1) * hw].fill(g[ch] / hw as f64);
            }
        }
        dx
    }
}

/// Fully connected layer on `(N, F, 1, 1)` features.
#[derive(Debug, Clone)]
pub struct Linear {
    in_f: usize,
    out_f: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        Self {
            in_f,
            out_f,
            weight: Param::normal(in_f * out_f, (1.0 / in_f as f64).sqrt(), rng),
            bias: Param::new(vec![0.0; out_f]),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_f, "linear input features");
        let mut out = Tensor::zeros([n, self.out_f, 1, 1]);
        for i in 0..n {
            out.item_mut(i).copy_from_slice(&self.bias.value);
        }
        // out (n, out) = x (n, in) * W^T (in, out)
        gemm(
            n,
            self.in_f,
            self.out_f,
            MatRef::rows(x.data(), self.in_f),
            MatRef::transposed(&self.weight.value, self.in_f),
            1.0,
            out.data_mut(),
        );
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward_train");
        let n = x.batch();
        for i in 0..n {
            for (b, g) in self.bias.grad.iter_mut().zip(grad.item(i)) {
                *b += g;
            }
        }
        // dW (out, in) += grad^T (out, n) * x (n, in)
        gemm(
            self.out_f,
            n,
            self.in_f,
            MatRef::transposed(grad.data(), self.out_f),
            MatRef::rows(x.data(), self.in_f),
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            self.out_f,
            self.in_f,
            MatRef::rows(grad.data(), self.out_f),
            MatRef::rows(&self.weight.value, self.in_f),
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

/// One layer of a sequential stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(LeakyRelu),
    /// `x + body(x)`.
    Residual(Vec<Layer>),
    GlobalAvgPool(GlobalAvgPool),
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::LeakyRelu(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Residual(body) => {
                let mut y = forward_stack(body, x);
                y.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                y
            }
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::LeakyRelu(l) => l.forward_train(x),
            Layer::GlobalAvgPool(l) => l.forward_train(x),
            Layer::Residual(body) => {
                let mut y = forward_stack_train(body, x);
                y.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                y
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::LeakyRelu(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Residual(body) => {
                let mut dx = backward_stack(body, grad);
                dx.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
                dx
            }
        }
    }

    /// Visits trainable parameters in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::Residual(body) => body.iter_mut().for_each(|l| l.visit_params(f)),
            Layer::LeakyRelu(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Visits every persisted buffer (parameters and running statistics)
    /// with a name suffix, in a fixed order.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        match self {
            Layer::Conv(l) => {
                f(format!("{prefix}.weight"), &l.weight.value);
                if let Some(b) = &l.bias {
                    f(format!("{prefix}.bias"), &b.value);
                }
            }
            Layer::BatchNorm(l) => {
                f(format!("{prefix}.gamma"), &l.gamma.value);
                f(format!("{prefix}.beta"), &l.beta.value);
                f(format!("{prefix}.running_mean"), &l.running_mean);
                f(format!("{prefix}.running_var"), &l.running_var);
            }
            Layer::Residual(body) => {
                for (i, l) in body.iter().enumerate() {
                    l.visit_state(&format!("{prefix}.{i}"), f);
                }
            }
            Layer::LeakyRelu(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Mutable counterpart of [`Layer::visit_state`], same order.
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.weight.value);
                if let Some(b) = &mut l.bias {
                    f(&mut b.value);
                }
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma.value);
                f(&mut l.beta.value);
                f(&mut l.running_mean);
                f(&mut l.running_var);
            }
            Layer::Residual(body) => body.iter_mut().for_each(|l| l.visit_state_mut(f)),
            Layer::LeakyRelu(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    pub fn conv_count(&self) -> usize {
        match self {
            Layer::Conv(_) => 1,
            Layer::Residual(body) => body.iter().map(Layer::conv_count).sum(),
            _ => 0,
        }
    }
}

impl Linear {
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(format!("{prefix}.weight"), &self.weight.value);
        f(format!("{prefix}.bias"), &self.bias.value);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        f(&mut self.weight.value);
        f(&mut self.bias.value);
    }
}

pub fn forward_stack(layers: &[Layer], x: &Tensor) -> Tensor {
    let mut iter = layers.iter();
    let Some(first) = iter.next() else {
        return x.clone();
    };
    iter.fold(first.forward(x), |h, l| l.forward(&h))
}

pub fn forward_stack_train(layers: &mut [Layer], x: &Tensor) -> Tensor {
    let mut iter = layers.iter_mut();
    let Some(first) = iter.next() else {
        return x.clone();
    };
    let h = first.forward_train(x);
    iter.fold(h, |h, l| l.forward_train(&h))
}

pub fn backward_stack(layers: &mut [Layer], grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution by definition.
    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = c.out_size(h, w);
        let k = c.kernel;
        let mut out = Tensor::zeros([n, c.out_c, oh, ow]);
        for i in 0..n {
            for o in 0..c.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = c.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c.in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += c.weight.value[((o * c.in_c + ci) * k + ky) * k + kx]
                                            * x.item(i)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.item_mut(i)[(o * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, bias) in &[(3, 1, true), (3, 2, false), (1, 1, true), (3, 2, true)] {
            let mut conv = Conv2d::new(3, 4, k, stride, bias, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.1, -0.2, 0.3, 0.0];
            }
            let x = random_tensor([2, 3, 7, 6], &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks `backward` of a single layer against central differences of
    /// `sum(out * probe)`.
    fn check_layer(mut layer: Layer, x: Tensor, rng: &mut ChaCha8Rng) {
        let out = layer.forward_train(&x);
        let probe = random_tensor(out.shape(), rng);
        let dx = layer.backward(&probe);
        let objective = |l: &mut Layer, x: &Tensor| -> f64 {
            let y = l.forward_train(x);
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in (0..x.data().len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (objective(&mut layer, &xp) - objective(&mut layer, &xm)) / (2.0 * eps);
            let ana = dx.data()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                "input grad {idx}: {ana} vs {num}"
            );
        }
        // parameter gradients
        let mut grads = Vec::new();
        let mut fresh = layer.clone();
        fresh.visit_params(&mut |p| p.zero_grad());
        fresh.forward_train(&x);
        fresh.backward(&probe);
        fresh.visit_params(&mut |p| grads.push(p.grad.clone()));
        for (pi, g) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by(3) {
                let nudge = |l: &mut Layer, d: f64| {
                    let mut k = 0;
                    l.visit_params(&mut |p| {
                        if k == pi {
                            p.value[j] += d;
                        }
                        k += 1;
                    });
                };
                let mut lp = fresh.clone();
                nudge(&mut lp, eps);
                let mut lm = fresh.clone();
                nudge(&mut lm, -eps);
                let num = (objective(&mut lp, &x) - objective(&mut lm, &x)) / (2.0 * eps);
                assert!(
                    (num - g[j]).abs() <= 1e-6 * (1.0 + num.abs().max(g[j].abs())),
                    "param {pi}[{j}]: {} vs {num}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::new(2, 3, k, s, true, &mut rng);
            let x = random_tensor([2, 2, 5, 6], &mut rng);
            check_layer(Layer::Conv(conv), x, &mut rng);
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![1.5, -0.5, 0.8];
        bn.beta.value = vec![0.1, 0.2, -0.3];
        let x = random_tensor([2, 3, 4, 3], &mut rng);
        check_layer(Layer::BatchNorm(bn), x, &mut rng);
    }

    #[test]
    fn residual_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let body = vec![
            Layer::Conv(Conv2d::new(2, 3, 1, 1, true, &mut rng)),
            Layer::LeakyRelu(LeakyRelu::default()),
            Layer::Conv(Conv2d::new(3, 2, 3, 1, true, &mut rng)),
        ];
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        check_layer(Layer::Residual(body), x, &mut rng);
        let x = random_tensor([2, 3, 3, 2], &mut rng);
        check_layer(Layer::GlobalAvgPool(GlobalAvgPool::default()), x, &mut rng);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]);
        let y = bn.forward(&x);
        // fresh running stats: mean 0, var 1
        assert!((y.data()[0] - 1.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
        bn.forward_train(&x);
        assert!((bn.running_mean[0] - BN_MOMENTUM * 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::new(3, 2, &mut rng);
        lin.weight.value = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        lin.bias.value = vec![0.5, -0.5];
        let x = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 1.0, 1.0, 0.0, 2.0, -1.0]);
        let y = lin.forward_train(&x);
        assert_eq!(y.data(), &[6.5, -0.5, 1.5, -1.5]);
        let dx = lin.backward(&Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(dx.data(), &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        assert_eq!(lin.bias.grad, vec![1.0, 1.0]);
        assert_eq!(lin.weight.grad, vec![1.0, 1.0, 1.0, 0.0, 2.0, -1.0]);
    }
}
