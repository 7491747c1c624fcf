//! Training objective: masked total variation, L1, perceptual and style
//! terms combined linearly.
//!
//! Values accumulate in `f64`; gradients come back in the network precision.
//! Every loss is evaluated on the raw network output, before compositing.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::features::FeatureExtractor;
use crate::image::{Image, Mask};
use crate::tensor::{gemm, Real, Tensor, View, ViewMut};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_tv: f64,
    pub w_l1: f64,
    pub w_p: f64,
    pub w_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_tv: 0.1, w_l1: 6.0, w_p: 0.1, w_s: 240.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_tv, self.w_l1, self.w_p, self.w_s];
        ensure!(all.iter().all(|w| w.is_finite() && *w >= 0.0), "loss weights must be finite and non-negative: {all:?}");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tv: f64,
    pub l_1: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossReport {
    pub fn combine(l_tv: f64, l_1: f64, l_p: f64, l_s: f64, w: &LossWeights) -> Self {
        let total = w.w_tv * l_tv + w.w_l1 * l_1 + w.w_p * l_p + w.w_s * l_s;
        Self { l_tv, l_1, l_p, l_s, total }
    }

    /// Component-wise mean; the total is recombined from the averaged parts.
    pub fn mean(reports: &[LossReport], w: &LossWeights) -> Self {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::combine(sum(|r| r.l_tv), sum(|r| r.l_1), sum(|r| r.l_p), sum(|r| r.l_s), w)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_tv, self.l_1, self.l_p, self.l_s, self.total].iter().all(|v| v.is_finite())
    }
}

/// How each perceptual/style layer term is scaled before summing over layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    /// Perceptual: mean over feature elements. Style: mean over Gram entries.
    #[default]
    PerElement,
    /// Plain L1 norms.
    Unnormalized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub feature_norm: FeatureNorm,
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference and its gradient w.r.t. `pred`.
pub fn l1_with_grad<T: Real>(pred: &[T], reference: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), reference.len());
    let n = pred.len().max(1);
    let scale = T::lit(1.0 / n as f64);
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| {
            sum += (p - r).to_f64_lossy().abs();
            sign(p - r) * scale
        })
        .collect();
    (sum / n as f64, grad)
}

/// Masked total variation of one CHW sample. A horizontal or vertical
/// neighbor pair counts when either pixel is a hole; the sum of absolute
/// differences is divided by `pairs * channels` (0 when nothing counts).
pub fn tv_with_grad<T: Real>(pred: &[T], channels: usize, mask: &Mask) -> (f64, Vec<T>) {
    let (h, w) = mask.dims();
    assert_eq!(pred.len(), channels * h * w);
    let hole = |y: usize, x: usize| !mask.is_valid(y, x);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w && (hole(y, x) || hole(y, x + 1)) {
                pairs.push((y * w + x, y * w + x + 1));
            }
            if y + 1 < h && (hole(y, x) || hole(y + 1, x)) {
                pairs.push((y * w + x, (y + 1) * w + x));
            }
        }
    }
    let mut grad = vec![T::zero(); pred.len()];
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let denom = (pairs.len() * channels) as f64;
    let scale = T::lit(1.0 / denom);
    let plane = h * w;
    let mut sum = 0.0;
    for c in 0..channels {
        let p = &pred[c * plane..(c + 1) * plane];
        let g = &mut grad[c * plane..(c + 1) * plane];
        for &(a, b) in &pairs {
            let d = p[a] - p[b];
            sum += d.to_f64_lossy().abs();
            let s = sign(d) * scale;
            g[a] += s;
            g[b] -= s;
        }
    }
    (sum / denom, grad)
}

/// `G = F Fᵀ / (C N)` for a `C x N` row-major feature map.
pub fn gram<T: Real>(features: &[T], channels: usize, positions: usize) -> Vec<T> {
    assert_eq!(features.len(), channels * positions);
    assert!(channels > 0 && positions > 0, "gram of an empty feature map");
    let mut g = vec![T::zero(); channels * channels];
    gemm(
        T::lit(1.0 / (channels * positions) as f64),
        View { data: features, rows: channels, cols: positions, rs: positions, cs: 1 },
        View { data: features, rows: positions, cols: channels, rs: 1, cs: positions },
        T::zero(),
        ViewMut { data: &mut g, rows: channels, cols: channels, rs: channels, cs: 1 },
    );
    g
}

/// Perceptual and style terms of one sample, with gradients w.r.t. each tap
/// of the prediction when requested (scaled by the given term weights).
#[allow(clippy::type_complexity)]
fn feature_terms<T: Real>(
    pred_taps: &[&[T]],
    ref_taps: &[&[T]],
    shapes: &[(usize, usize)],
    norm: FeatureNorm,
    grad_weights: Option<(f64, f64)>,
) -> (f64, f64, Option<Vec<Vec<T>>>) {
    let mut l_p = 0.0;
    let mut l_s = 0.0;
    let mut grads = grad_weights.map(|_| Vec::with_capacity(shapes.len()));
    for ((&fp, &fr), &(c, n)) in pred_taps.iter().zip(ref_taps).zip(shapes) {
        let (p_scale, s_scale) = match norm {
            FeatureNorm::PerElement => (1.0 / (c * n) as f64, 1.0 / (c * c) as f64),
            FeatureNorm::Unnormalized => (1.0, 1.0),
        };
        let mut dp = 0.0;
        for (&a, &b) in fp.iter().zip(fr) {
            dp += (a - b).to_f64_lossy().abs();
        }
        l_p += dp * p_scale;

        let gp = gram(fp, c, n);
        let gr = gram(fr, c, n);
        let mut ds = 0.0;
        for (&a, &b) in gp.iter().zip(&gr) {
            ds += (a - b).to_f64_lossy().abs();
        }
        l_s += ds * s_scale;

        if let (Some(grads), Some((wp, ws))) = (grads.as_mut(), grad_weights) {
            let mut g = vec![T::zero(); c * n];
            if wp != 0.0 {
                let k = T::lit(wp * p_scale);
                for ((g, &a), &b) in g.iter_mut().zip(fp).zip(fr) {
                    *g = sign(a - b) * k;
                }
            }
            if ws != 0.0 {
                // dL/dF = (S + Sᵀ) F / (C N), S = sign(Gp - Gr) scaled.
                let mut m = vec![T::zero(); c * c];
                for i in 0..c {
                    for j in 0..c {
                        m[i * c + j] = sign(gp[i * c + j] - gr[i * c + j]) + sign(gp[j * c + i] - gr[j * c + i]);
                    }
                }
                gemm(
                    T::lit(ws * s_scale / (c * n) as f64),
                    View { data: &m, rows: c, cols: c, rs: c, cs: 1 },
                    View { data: fp, rows: c, cols: n, rs: n, cs: 1 },
                    T::one(),
                    ViewMut { data: &mut g, rows: c, cols: n, rs: n, cs: 1 },
                );
            }
            grads.push(g);
        }
    }
    (l_p, l_s, grads)
}

/// Batch loss: the mean of per-sample losses. With `want_grad`, also returns
/// the gradient of the weighted total w.r.t. `pred`.
pub fn batch_loss<T: Real>(
    fx: &FeatureExtractor<T>,
    pred: &Tensor<T>,
    reference: &Tensor<T>,
    masks: &[&Mask],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Tensor<T>>)> {
    cfg.weights.validate()?;
    ensure!(pred.shape() == reference.shape(), "prediction {:?} and reference {:?} differ in shape", pred.shape(), reference.shape());
    ensure!(pred.c() == 3, "losses expect RGB tensors, got {} channels", pred.c());
    ensure!(masks.len() == pred.n(), "{} masks for a batch of {}", masks.len(), pred.n());
    for m in masks {
        ensure!(m.dims() == (pred.h(), pred.w()), "mask {:?} does not match tensor {}x{}", m.dims(), pred.h(), pred.w());
    }
    let w = cfg.weights;
    let batch = pred.n();
    let inv_n = 1.0 / batch as f64;

    let (pred_taps, cache) = if want_grad {
        let (t, c) = fx.extract_with_cache(pred)?;
        (t, Some(c))
    } else {
        (fx.extract(pred)?, None)
    };
    let ref_taps = fx.extract(reference)?;
    let shapes: Vec<(usize, usize)> = pred_taps.iter().map(|t| (t.c(), t.plane())).collect();

    let mut grad = want_grad.then(|| Tensor::zeros(batch, pred.c(), pred.h(), pred.w()));
    let mut tap_grads: Vec<Tensor<T>> = if want_grad { pred_taps.iter().map(|t| Tensor::zeros(t.n(), t.c(), t.h(), t.w())).collect() } else { Vec::new() };
    let mut reports = Vec::with_capacity(batch);
    for n in 0..batch {
        let (l_1, g1) = l1_with_grad(pred.sample(n), reference.sample(n));
        let (l_tv, gtv) = tv_with_grad(pred.sample(n), pred.c(), masks[n]);
        let pt: Vec<&[T]> = pred_taps.iter().map(|t| t.sample(n)).collect();
        let rt: Vec<&[T]> = ref_taps.iter().map(|t| t.sample(n)).collect();
        let gw = want_grad.then_some((w.w_p * inv_n, w.w_s * inv_n));
        let (l_p, l_s, fg) = feature_terms(&pt, &rt, &shapes, cfg.feature_norm, gw);
        reports.push(LossReport::combine(l_tv, l_1, l_p, l_s, &w));
        if let Some(grad) = grad.as_mut() {
            let (k1, ktv) = (T::lit(w.w_l1 * inv_n), T::lit(w.w_tv * inv_n));
            for ((d, &a), &b) in grad.sample_mut(n).iter_mut().zip(&g1).zip(&gtv) {
                *d = a * k1 + b * ktv;
            }
            for (dst, src) in tap_grads.iter_mut().zip(fg.expect("requested")) {
                dst.sample_mut(n).copy_from_slice(&src);
            }
        }
    }
    let report = LossReport::mean(&reports, &w);
    if let (Some(grad), Some(cache)) = (grad.as_mut(), cache) {
        if w.w_p != 0.0 || w.w_s != 0.0 {
            let d_in = fx.backward(&cache, tap_grads.into_iter().map(Some).collect());
            grad.data_mut().iter_mut().zip(d_in.data()).for_each(|(a, &b)| *a += b);
        }
    }
    Ok((report, grad))
}

fn image_pair<T: Real>(pred: &Image, reference: &Image) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure!(
        pred.dims() == reference.dims() && pred.channels() == reference.channels(),
        "images differ in shape: {:?}x{} vs {:?}x{}",
        pred.dims(),
        pred.channels(),
        reference.dims(),
        reference.channels()
    );
    Ok((Tensor::from_images(&[pred])?, Tensor::from_images(&[reference])?))
}

/// `(1 / (C H W)) Σ |pred - ref|`.
pub fn l1_loss(pred: &Image, reference: &Image) -> Result<f64> {
    let (p, r) = image_pair::<f64>(pred, reference)?;
    Ok(l1_with_grad(p.data(), r.data()).0)
}

pub fn tv_loss(pred: &Image, mask: &Mask) -> Result<f64> {
    ensure!(pred.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", pred.dims(), mask.dims());
    let p = Tensor::<f64>::from_images(&[pred])?;
    Ok(tv_with_grad(p.data(), pred.channels(), mask).0)
}

fn feature_losses<T: Real>(fx: &FeatureExtractor<T>, pred: &Image, reference: &Image, norm: FeatureNorm) -> Result<(f64, f64)> {
    let (p, r) = image_pair::<T>(&pred.to_rgb(), &reference.to_rgb())?;
    let pt = fx.extract(&p)?;
    let rt = fx.extract(&r)?;
    let shapes: Vec<(usize, usize)> = pt.iter().map(|t| (t.c(), t.plane())).collect();
    let a: Vec<&[T]> = pt.iter().map(|t| t.data()).collect();
    let b: Vec<&[T]> = rt.iter().map(|t| t.data()).collect();
    let (l_p, l_s, _) = feature_terms(&a, &b, &shapes, norm, None);
    Ok((l_p, l_s))
}

pub fn perceptual_loss<T: Real>(fx: &FeatureExtractor<T>, pred: &Image, reference: &Image) -> Result<f64> {
    Ok(feature_losses(fx, pred, reference, FeatureNorm::default())?.0)
}

pub fn style_loss<T: Real>(fx: &FeatureExtractor<T>, pred: &Image, reference: &Image) -> Result<f64> {
    Ok(feature_losses(fx, pred, reference, FeatureNorm::default())?.1)
}

pub fn total_loss<T: Real>(
    fx: &FeatureExtractor<T>,
    pred: &Image,
    reference: &Image,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let l_1 = l1_loss(pred, reference)?;
    let l_tv = tv_loss(pred, mask)?;
    let (l_p, l_s) = feature_losses(fx, pred, reference, FeatureNorm::default())?;
    Ok(LossReport::combine(l_tv, l_1, l_p, l_s, weights))
}
