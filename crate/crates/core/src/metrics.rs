//! Objective image-quality metrics on `[0, 1]` samples.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{ensure, Result};
use crate::image::{Image, Mask};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    ensure!(
        a.dims() == b.dims() && a.channels() == b.channels(),
        "images differ in shape: {:?}x{} vs {:?}x{}",
        a.dims(),
        a.channels(),
        b.dims(),
        b.channels()
    );
    Ok(())
}

fn check_mask(a: &Image, mask: &Mask) -> Result<()> {
    ensure!(a.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", a.dims(), mask.dims());
    ensure!(mask.hole_count() > 0, "mask has no hole pixels");
    Ok(())
}

/// Sums of |d| and d² over every sample, or over hole pixels only.
fn diff_sums(a: &Image, b: &Image, mask: Option<&Mask>) -> (f64, f64, usize) {
    let c = a.channels();
    let (mut l1, mut l2, mut n) = (0.0, 0.0, 0usize);
    for (i, (pa, pb)) in a.data().chunks(c).zip(b.data().chunks(c)).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 1) {
            continue;
        }
        for (&x, &y) in pa.iter().zip(pb) {
            let d = x as f64 - y as f64;
            l1 += d.abs();
            l2 += d * d;
        }
        n += c;
    }
    (l1, l2, n)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * Float::log10(1.0 / mse)).min(PSNR_CAP_DB)
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(pred: &Image, reference: &Image) -> Result<f64> {
    same_shape(pred, reference)?;
    let (_, l2, n) = diff_sums(pred, reference, None);
    Ok(psnr_from_mse(l2 / n as f64))
}

/// PSNR over hole pixels only.
pub fn psnr_masked(pred: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    same_shape(pred, reference)?;
    check_mask(pred, mask)?;
    let (_, l2, n) = diff_sums(pred, reference, Some(mask));
    Ok(psnr_from_mse(l2 / n as f64))
}

/// Mean absolute difference in 8-bit units.
pub fn mean_l1_8bit(pred: &Image, reference: &Image) -> Result<f64> {
    same_shape(pred, reference)?;
    let (l1, _, n) = diff_sums(pred, reference, None);
    Ok(255.0 * l1 / n as f64)
}

pub fn mean_l1_8bit_masked(pred: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    same_shape(pred, reference)?;
    check_mask(pred, mask)?;
    let (l1, _, n) = diff_sums(pred, reference, Some(mask));
    Ok(255.0 * l1 / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| Float::exp(-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = row[x..x + k].iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| tmp[(y + i) * ow + x] * g[i]).sum();
        }
    }
    out
}

/// Local SSIM for every valid window position, row-major `(h-10) x (w-10)`.
fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

fn ssim_inputs(pred: &Image, reference: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    same_shape(pred, reference)?;
    let (h, w) = pred.dims();
    ensure!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}");
    Ok((pred.luma(), reference.luma()))
}

/// Mean SSIM over all valid 11x11 Gaussian windows of the luma plane.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    if pred == reference {
        same_shape(pred, reference)?;
        ensure!(pred.height() >= SSIM_WINDOW && pred.width() >= SSIM_WINDOW, "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}");
        return Ok(1.0);
    }
    let (a, b) = ssim_inputs(pred, reference)?;
    let map = ssim_map(&a, &b, pred.height(), pred.width());
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean local SSIM over windows centered on hole pixels.
pub fn ssim_masked(pred: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    check_mask(pred, mask)?;
    let (a, b) = ssim_inputs(pred, reference)?;
    let (h, w) = pred.dims();
    let map = ssim_map(&a, &b, h, w);
    let r = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        if !mask.is_valid(i / ow + r, i % ow + r) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        // Holes only near the border: fall back to every window.
        return Ok(map.iter().sum::<f64>() / map.len() as f64);
    }
    Ok(sum / n as f64)
}
