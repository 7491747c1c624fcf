//! Layers with hand-written backward passes: convolution (im2col + GEMM,
//! tiled over output rows), batch normalization, pointwise activations,
//! nearest upsampling, channel concatenation and max pooling.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::{gemm, Real, Tensor, View, ViewMut};

/// Upper bound on im2col buffer elements per tile.
const COLUMN_BUDGET: usize = 1 << 21;

pub const LEAKY_SLOPE: f64 = 0.2;

/// 2-D convolution with square kernels and "same"-style padding `kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`, row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: bias.then(|| vec![T::zero(); out_channels]),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// He-uniform initialization scaled by `gain`; biases start at zero.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, gain: f64) {
        let bound = gain * Float::sqrt(3.0 / self.fan_in() as f64);
        for w in self.weight.iter_mut() {
            *w = T::lit(rng.gen_range(-bound..bound));
        }
        if let Some(b) = self.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn tile_rows(&self, out_h: usize, out_w: usize) -> usize {
        let per_row = self.fan_in() * out_w;
        (COLUMN_BUDGET / per_row.max(1)).clamp(1, out_h.max(1))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            x.c() == self.in_channels,
            "convolution expects {} input channels, got {}",
            self.in_channels,
            x.c()
        );
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.output_dims(h, w);
        let mut y = Tensor::zeros(x.n(), self.out_channels, oh, ow);
        let k = self.fan_in();
        let tile = self.tile_rows(oh, ow);
        let mut cols = vec![T::zero(); k * tile * ow];
        let oplane = oh * ow;
        for n in 0..x.n() {
            let src = x.sample(n);
            let dst = y.sample_mut(n);
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + tile).min(oh);
                let p = (r1 - r0) * ow;
                self.im2col(src, h, w, ow, r0, r1, &mut cols[..k * p]);
                gemm(
                    T::one(),
                    View { data: &self.weight, rows: self.out_channels, cols: k, rs: k, cs: 1 },
                    View { data: &cols[..k * p], rows: k, cols: p, rs: p, cs: 1 },
                    T::zero(),
                    ViewMut { data: &mut dst[r0 * ow..], rows: self.out_channels, cols: p, rs: oplane, cs: 1 },
                );
                r0 = r1;
            }
            if let Some(bias) = &self.bias {
                for (o, &b) in bias.iter().enumerate() {
                    dst[o * oplane..(o + 1) * oplane].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad_weight`/`grad_bias` and
    /// returns the input gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad_weight: Option<&mut [T]>,
        grad_bias: Option<&mut [T]>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (dy.h(), dy.w());
        assert_eq!((oh, ow), self.output_dims(h, w), "gradient shape does not match forward output");
        if let Some(gw) = grad_weight.as_deref() {
            assert_eq!(gw.len(), self.weight.len());
        }
        let k = self.fan_in();
        let oplane = oh * ow;
        let tile = self.tile_rows(oh, ow);
        let mut cols = if grad_weight.is_some() { vec![T::zero(); k * tile * ow] } else { Vec::new() };
        let mut dcols = if want_input_grad { vec![T::zero(); k * tile * ow] } else { Vec::new() };
        let mut dx = want_input_grad.then(|| Tensor::zeros(x.n(), x.c(), h, w));

        if let Some(gb) = grad_bias {
            for n in 0..dy.n() {
                let g = dy.sample(n);
                for (o, acc) in gb.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for &v in &g[o * oplane..(o + 1) * oplane] {
                        s += v;
                    }
                    *acc += s;
                }
            }
        }

        for n in 0..x.n() {
            let src = x.sample(n);
            let g = dy.sample(n);
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + tile).min(oh);
                let p = (r1 - r0) * ow;
                if let Some(gw) = grad_weight.as_deref_mut() {
                    self.im2col(src, h, w, ow, r0, r1, &mut cols[..k * p]);
                    // dW += dY · colsᵀ
                    gemm(
                        T::one(),
                        View { data: &g[r0 * ow..], rows: self.out_channels, cols: p, rs: oplane, cs: 1 },
                        View { data: &cols[..k * p], rows: p, cols: k, rs: 1, cs: p },
                        T::one(),
                        ViewMut { data: gw, rows: self.out_channels, cols: k, rs: k, cs: 1 },
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols = Wᵀ · dY
                    gemm(
                        T::one(),
                        View { data: &self.weight, rows: k, cols: self.out_channels, rs: 1, cs: k },
                        View { data: &g[r0 * ow..], rows: self.out_channels, cols: p, rs: oplane, cs: 1 },
                        T::zero(),
                        ViewMut { data: &mut dcols[..k * p], rows: k, cols: p, rs: p, cs: 1 },
                    );
                    self.col2im(&dcols[..k * p], h, w, ow, r0, r1, dx.sample_mut(n));
                }
                r0 = r1;
            }
        }
        dx
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    #[inline]
    fn column_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > kx { (self.padding - kx).div_ceil(s) } else { 0 };
        let hi = if w + self.padding > kx { ((w - 1 + self.padding - kx) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, src: &[T], h: usize, w: usize, ow: usize, r0: usize, r1: usize, cols: &mut [T]) {
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let p = (r1 - r0) * ow;
        for ci in 0..self.in_channels {
            let chan = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.column_range(kx, w, ow);
                    for (ri, r) in (r0..r1).enumerate() {
                        let drow = &mut dst[ri * ow..(ri + 1) * ow];
                        let iy = (r * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &chan[iy as usize * w..(iy as usize + 1) * w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let first = lo * s + kx - pad;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&srow[first..first + (hi - lo)]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = srow[first + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, dcols: &[T], h: usize, w: usize, ow: usize, r0: usize, r1: usize, dst: &mut [T]) {
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let p = (r1 - r0) * ow;
        for ci in 0..self.in_channels {
            let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    let (lo, hi) = self.column_range(kx, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    for (ri, r) in (r0..r1).enumerate() {
                        let iy = (r * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[ri * ow..(ri + 1) * ow];
                        let first = lo * s + kx - pad;
                        for (j, &g) in srow[lo..hi].iter().enumerate() {
                            drow[first + j * s] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics. Running statistics are left alone;
    /// apply [`BatchNorm2d::update_running`] with the returned cache to fold them in.
    pub fn forward_train(&self, mut x: Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let c = self.channels();
        assert_eq!(x.c(), c, "batch norm channel mismatch");
        let plane = x.plane();
        let count = x.n() * plane;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0;
            for n in 0..x.n() {
                for &v in &x.sample(n)[ch * plane..(ch + 1) * plane] {
                    s += v.to_f64_lossy();
                }
            }
            let m = s / count as f64;
            let mut q = 0.0;
            for n in 0..x.n() {
                for &v in &x.sample(n)[ch * plane..(ch + 1) * plane] {
                    let d = v.to_f64_lossy() - m;
                    q += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = q / count as f64;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / Float::sqrt(v + self.eps))).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let mut xhat = Tensor::zeros(x.n(), c, x.h(), x.w());
        for n in 0..x.n() {
            let xs = x.sample_mut(n);
            let hs = xhat.sample_mut(n);
            for ch in 0..c {
                let (m, is, g, b) = (mean_t[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                let range = ch * plane..(ch + 1) * plane;
                for (v, hv) in xs[range.clone()].iter_mut().zip(&mut hs[range]) {
                    let nv = (*v - m) * is;
                    *hv = nv;
                    *v = nv * g + b;
                }
            }
        }
        (x, BnCache { xhat, inv_std, mean, var, count })
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let mo = self.momentum;
        let unbias = if cache.count > 1 { cache.count as f64 / (cache.count - 1) as f64 } else { 1.0 };
        for ch in 0..self.channels() {
            let rm = self.running_mean[ch].to_f64_lossy();
            let rv = self.running_var[ch].to_f64_lossy();
            self.running_mean[ch] = T::lit((1.0 - mo) * rm + mo * cache.mean[ch]);
            self.running_var[ch] = T::lit((1.0 - mo) * rv + mo * cache.var[ch] * unbias);
        }
    }

    /// Inference-mode normalization with running statistics, in place.
    pub fn forward_infer(&self, x: &mut Tensor<T>) {
        let c = self.channels();
        assert_eq!(x.c(), c, "batch norm channel mismatch");
        let plane = x.plane();
        let coeffs: Vec<(T, T)> = (0..c)
            .map(|ch| {
                let inv = 1.0 / Float::sqrt(self.running_var[ch].to_f64_lossy() + self.eps);
                let scale = self.gamma[ch].to_f64_lossy() * inv;
                let shift = self.beta[ch].to_f64_lossy() - self.running_mean[ch].to_f64_lossy() * scale;
                (T::lit(scale), T::lit(shift))
            })
            .collect();
        for n in 0..x.n() {
            let xs = x.sample_mut(n);
            for (ch, &(a, b)) in coeffs.iter().enumerate() {
                xs[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = *v * a + b);
            }
        }
    }

    /// Returns the input gradient; accumulates into `grad_gamma` and `grad_beta`.
    pub fn backward(&self, cache: &BnCache<T>, mut dy: Tensor<T>, grad_gamma: &mut [T], grad_beta: &mut [T]) -> Tensor<T> {
        let c = self.channels();
        let plane = dy.plane();
        let m = T::lit(cache.count as f64);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..dy.n() {
                let range = ch * plane..(ch + 1) * plane;
                for (&g, &xh) in dy.sample(n)[range.clone()].iter().zip(&cache.xhat.sample(n)[range]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            grad_gamma[ch] += sum_dy_xhat;
            grad_beta[ch] += sum_dy;
            let scale = self.gamma[ch] * cache.inv_std[ch] / m;
            for n in 0..dy.n() {
                let range = ch * plane..(ch + 1) * plane;
                let xh = &cache.xhat.sample(n)[range.clone()];
                for (g, &xv) in dy.sample_mut(n)[range].iter_mut().zip(xh) {
                    *g = scale * (m * *g - sum_dy - xv * sum_dy_xhat);
                }
            }
        }
        dy
    }
}

pub fn leaky_relu_inplace<T: Real>(x: &mut Tensor<T>) {
    let slope = T::lit(LEAKY_SLOPE);
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = *v * slope;
        }
    });
}

/// Gradient through a leaky rectifier given its output (sign is preserved).
pub fn leaky_relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    let slope = T::lit(LEAKY_SLOPE);
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = *g * slope;
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
}

pub fn sigmoid_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &s) in dy.data_mut().iter_mut().zip(out.data()) {
        *g = *g * s * (T::one() - s);
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h(), x.w());
    let mut y = Tensor::zeros(x.n(), x.c(), 2 * h, 2 * w);
    let ow = 2 * w;
    for n in 0..x.n() {
        let src = x.sample(n);
        let dst = y.sample_mut(n);
        for c in 0..x.c() {
            for yy in 0..2 * h {
                let srow = &src[(c * h + yy / 2) * w..(c * h + yy / 2 + 1) * w];
                let drow = &mut dst[(c * 2 * h + yy) * ow..(c * 2 * h + yy + 1) * ow];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h() / 2, dy.w() / 2);
    let mut dx = Tensor::zeros(dy.n(), dy.c(), h, w);
    let ow = dy.w();
    for n in 0..dy.n() {
        let src = dy.sample(n);
        let dst = dx.sample_mut(n);
        for c in 0..dy.c() {
            for yy in 0..2 * h {
                let srow = &src[(c * 2 * h + yy) * ow..(c * 2 * h + yy + 1) * ow];
                let drow = &mut dst[(c * h + yy / 2) * w..(c * h + yy / 2 + 1) * w];
                for (xx, &g) in srow.iter().enumerate() {
                    drow[xx / 2] += g;
                }
            }
        }
    }
    dx
}

/// Concatenates along channels: `a` first, then `b`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()), "concat operands differ in shape");
    let mut y = Tensor::zeros(a.n(), a.c() + b.c(), a.h(), a.w());
    for n in 0..a.n() {
        let la = a.sample_len();
        let dst = y.sample_mut(n);
        dst[..la].copy_from_slice(a.sample(n));
        dst[la..].copy_from_slice(b.sample(n));
    }
    y
}

/// Splits a channel-concatenated gradient back into its two operands.
pub fn split_channels<T: Real>(dy: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (dy.n(), dy.c(), dy.h(), dy.w());
    let mut a = Tensor::zeros(n, first, h, w);
    let mut b = Tensor::zeros(n, c - first, h, w);
    let la = a.sample_len();
    for i in 0..n {
        let src = dy.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

/// 2x2 max pooling with stride 2; returns the argmax offsets for the backward pass.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (h, w) = (x.h(), x.w());
    ensure!(h >= 2 && w >= 2, "max pooling needs at least 2x2 input, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(x.n(), x.c(), oh, ow);
    let mut arg = Vec::with_capacity(x.n() * x.c() * oh * ow);
    for n in 0..x.n() {
        let src = x.sample(n);
        let dst = y.sample_mut(n);
        for c in 0..x.c() {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = 0usize;
                    let mut bv = T::neg_infinity();
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[(c * h + 2 * yy + dy) * w + 2 * xx + dx];
                        if v > bv {
                            bv = v;
                            best = k;
                        }
                    }
                    dst[(c * oh + yy) * ow + xx] = bv;
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], h: usize, w: usize) -> Tensor<T> {
    let (oh, ow) = (dy.h(), dy.w());
    let mut dx = Tensor::zeros(dy.n(), dy.c(), h, w);
    let mut i = 0;
    for n in 0..dy.n() {
        let src = dy.sample(n);
        let dst = dx.sample_mut(n);
        for c in 0..dy.c() {
            for yy in 0..oh {
                for xx in 0..ow {
                    let k = arg[i] as usize;
                    i += 1;
                    dst[(c * h + 2 * yy + k / 2) * w + 2 * xx + k % 2] += src[(c * oh + yy) * ow + xx];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution used as the oracle.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (oh, ow) = conv.output_dims(x.h(), x.w());
        let mut y = Tensor::zeros(x.n(), conv.out_channels, oh, ow);
        let k = conv.kernel;
        for n in 0..x.n() {
            for o in 0..conv.out_channels {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut s = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (yy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (xx * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    s += conv.weight[((o * conv.in_channels + i) * k + ky) * k + kx]
                                        * x.at(n, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        *y.at_mut(n, o, yy, xx) = s;
                    }
                }
            }
        }
        y
    }

    fn seeded_conv(cin: usize, cout: usize, k: usize, s: usize, seed: u64) -> Conv2d<f64> {
        let mut conv = Conv2d::new(cin, cout, k, s, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        conv.init_uniform(&mut rng, 1.0);
        for b in conv.bias.as_mut().unwrap() {
            *b = rng.gen_range(-0.5..0.5);
        }
        conv
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        for (k, s, h, w) in [(3, 1, 7, 9), (5, 2, 8, 8), (7, 1, 5, 6), (3, 2, 9, 4), (1, 1, 3, 3)] {
            let conv = seeded_conv(3, 4, k, s, 7 + k as u64);
            let x = random_tensor([2, 3, h, w], 11);
            let got = conv.forward(&x).unwrap();
            let want = conv_naive(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = seeded_conv(2, 3, 3, 2, 5);
        let x = random_tensor([2, 2, 6, 5], 9);
        let dy_shape = {
            let (oh, ow) = conv.output_dims(6, 5);
            [2, 3, oh, ow]
        };
        let r = random_tensor(dy_shape, 13);
        // loss = <conv(x), r>
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; 3];
        let dx = conv.backward(&x, &r, Some(&mut gw), Some(&mut gb), true).unwrap();
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight[i] += h;
            let mut cm = conv.clone();
            cm.weight[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
        }
        let bsum: Vec<f64> = (0..3).map(|o| (0..2).map(|n| r.sample(n)[o * 9..(o + 1) * 9].iter().sum::<f64>()).sum()).collect();
        for (a, b) in gb.iter().zip(&bsum) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.1];
        let x = random_tensor([3, 2, 3, 2], 21);
        let r = random_tensor([3, 2, 3, 2], 22);
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = bn.forward_train(x.clone());
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward_train(x.clone());
        let mut gg = vec![0.0; 2];
        let mut gb = vec![0.0; 2];
        let dx = bn.backward(&cache, r.clone(), &mut gg, &mut gb);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-5, "{fd} vs {}", dx.data()[i]);
        }
        for ch in 0..2 {
            let mut p = bn.clone();
            p.gamma[ch] += h;
            let mut m = bn.clone();
            m.gamma[ch] -= h;
            assert!(((loss(&p, &x) - loss(&m, &x)) / (2.0 * h) - gg[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_running_stats_use_unbiased_variance() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = bn.forward_train(x);
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = random_tensor([1, 2, 3, 4], 3);
        let r = random_tensor([1, 2, 6, 8], 4);
        let up = upsample2x(&x);
        let lhs: f64 = up.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let back = upsample2x_backward(&r);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = random_tensor([2, 3, 2, 2], 1);
        let b = random_tensor([2, 1, 2, 2], 2);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let dy = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let dx = max_pool2_backward(&dy, &arg, 2, 2);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
