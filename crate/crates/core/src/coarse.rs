//! Stage one: structural fill at a fixed working resolution, upscaled and
//! composited under the known region of the full-resolution image.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{composite, resize_nearest, Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpscaleMethod {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseBackend {
    /// Deterministic push-pull pyramid fill.
    BuiltinPyramid,
    /// Result computed offline (for example by a pretrained coarse network).
    ExternalFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub working_size: usize,
    pub upscale_method: UpscaleMethod,
    pub backend: CoarseBackend,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self { working_size: 512, upscale_method: UpscaleMethod::Bilinear, backend: CoarseBackend::BuiltinPyramid }
    }
}

impl CoarseConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.working_size >= 64 && self.working_size % 2 == 0,
            "working size must be even and at least 64, got {}",
            self.working_size
        );
        Ok(())
    }

    /// Working-resolution dimensions for a full-resolution input: anisotropic
    /// `working_size` square, or native size when either side is smaller.
    pub fn working_dims(&self, height: usize, width: usize) -> (usize, usize) {
        if height >= self.working_size && width >= self.working_size {
            (self.working_size, self.working_size)
        } else {
            (height, width)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseResult {
    /// Full-resolution image with the hole coarsely filled; bit-exact source elsewhere.
    pub filled_full: Image,
    pub mask: Mask,
}

/// Runs stage one with the built-in pyramid backend.
pub fn coarse_fill(img: &Image, mask: &Mask, cfg: &CoarseConfig) -> Result<CoarseResult> {
    cfg.validate()?;
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    if cfg.backend == CoarseBackend::ExternalFile {
        return Err(Error::Backend("external backend selected but no precomputed result supplied".into()));
    }
    if mask.is_all_valid() {
        return Ok(CoarseResult { filled_full: img.clone(), mask: mask.clone() });
    }
    let (wh, ww) = cfg.working_dims(img.height(), img.width());
    let small_img = img.resize_area(wh, ww)?;
    let small_mask = mask.resize_conservative(wh, ww)?;
    let filled = pyramid_fill(&small_img, &small_mask)?;
    finish(img, mask, &filled, cfg)
}

/// Runs stage one with a precomputed coarse result, given either at working
/// resolution or at full resolution (detected by size).
pub fn coarse_fill_with(img: &Image, mask: &Mask, cfg: &CoarseConfig, precomputed: &Image) -> Result<CoarseResult> {
    cfg.validate()?;
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    let working = cfg.working_dims(img.height(), img.width());
    let dims = precomputed.dims();
    if dims != img.dims() && dims != working {
        return Err(Error::Backend(alloc::format!(
            "precomputed coarse result is {}x{}, expected {}x{} (full) or {}x{} (working)",
            dims.0,
            dims.1,
            img.height(),
            img.width(),
            working.0,
            working.1
        )));
    }
    let coarse = if precomputed.channels() == img.channels() { precomputed.clone() } else { match_channels(precomputed, img.channels()) };
    finish(img, mask, &coarse, cfg)
}

fn match_channels(src: &Image, channels: usize) -> Image {
    if channels == 3 {
        return src.to_rgb();
    }
    let luma = src.luma();
    Image::from_fn(src.height(), src.width(), 1, |y, x, _| luma[y * src.width() + x] as f32)
}

fn finish(img: &Image, mask: &Mask, coarse: &Image, cfg: &CoarseConfig) -> Result<CoarseResult> {
    let (h, w) = img.dims();
    let up = match cfg.upscale_method {
        UpscaleMethod::Nearest => resize_nearest(coarse, h, w)?,
        UpscaleMethod::Bilinear => coarse.resize_bilinear(h, w)?,
    };
    let filled_full = composite(img, &up, mask)?;
    Ok(CoarseResult { filled_full, mask: mask.clone() })
}

struct Level {
    h: usize,
    w: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

/// Push-pull fill. Push: masked 2x2 averages (a parent is valid if any child
/// is) until every pixel is valid. Pull: each invalid pixel takes the
/// bilinear sample of its filled parent level. Valid pixels never change;
/// an all-hole mask yields a constant 0.5 image.
pub fn pyramid_fill(img: &Image, mask: &Mask) -> Result<Image> {
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    if mask.is_all_valid() {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let c = img.channels();
    if mask.valid_count() == 0 {
        return Ok(Image::filled(h, w, c, 0.5));
    }
    let base = Level {
        h,
        w,
        values: img.data().iter().map(|&v| v as f64).collect(),
        valid: mask.data().iter().map(|&v| v == 1).collect(),
    };
    let mut levels = vec![base];
    while levels.last().is_some_and(|l| l.valid.iter().any(|v| !v)) {
        let next = push(levels.last().expect("nonempty"), c);
        levels.push(next);
    }
    for k in (0..levels.len() - 1).rev() {
        let (lower, upper) = levels.split_at_mut(k + 1);
        pull(&mut lower[k], &upper[0], c);
    }
    let top = levels.swap_remove(0);
    let mut data: Vec<f32> = top.values.iter().map(|&v| v as f32).collect();
    // Known samples must stay bit-exact; rewrite them from the source.
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            data[i * c..(i + 1) * c].copy_from_slice(&img.data()[i * c..(i + 1) * c]);
        }
    }
    Image::from_clamped(h, w, c, data)
}

fn push(level: &Level, c: usize) -> Level {
    let (h, w) = (level.h.div_ceil(2), level.w.div_ceil(2));
    let mut values = vec![0.0; h * w * c];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0usize;
            let dst = &mut values[(y * w + x) * c..(y * w + x + 1) * c];
            for cy in 2 * y..(2 * y + 2).min(level.h) {
                for cx in 2 * x..(2 * x + 2).min(level.w) {
                    let i = cy * level.w + cx;
                    if level.valid[i] {
                        n += 1;
                        for (d, &s) in dst.iter_mut().zip(&level.values[i * c..(i + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
            if n > 0 {
                dst.iter_mut().for_each(|d| *d /= n as f64);
                valid[y * w + x] = true;
            }
        }
    }
    Level { h, w, values, valid }
}

fn pull(level: &mut Level, parent: &Level, c: usize) {
    let map = |i: usize, parent_len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (parent_len - 1) as f64);
        let i0 = pos as usize;
        let i1 = (i0 + 1).min(parent_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    for y in 0..level.h {
        let (y0, y1, fy) = map(y, parent.h);
        for x in 0..level.w {
            let i = y * level.w + x;
            if level.valid[i] {
                continue;
            }
            let (x0, x1, fx) = map(x, parent.w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| parent.values[(yy * parent.w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                level.values[i * c + ch] = top * (1.0 - fy) + bot * fy;
            }
            level.valid[i] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_valid_mask_returns_input() {
        let img = Image::from_fn(70, 90, 3, |y, x, c| ((y + x + c) % 11) as f32 / 10.0);
        let r = coarse_fill(&img, &Mask::all_valid(70, 90), &CoarseConfig::default()).unwrap();
        assert_eq!(r.filled_full, img);
        assert_eq!(pyramid_fill(&img, &Mask::all_valid(70, 90)).unwrap(), img);
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = Image::filled(600, 520, 3, 0.5);
        let mask = Mask::from_fn(600, 520, |y, x| !(200..400).contains(&y) || !(100..300).contains(&x));
        let r = coarse_fill(&img, &mask, &CoarseConfig::default()).unwrap();
        assert!(r.filled_full.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_hole_takes_masked_mean() {
        let img = Image::new(2, 2, 1, vec![0.2, 0.4, 0.6, 0.0]).unwrap();
        let mask = Mask::new(2, 2, vec![1, 1, 1, 0]).unwrap();
        let out = pyramid_fill(&img, &mask).unwrap();
        assert!((out.get(1, 1, 0) - 0.4).abs() < 1e-6);
        assert_eq!(&out.data()[..3], &img.data()[..3]);
    }

    #[test]
    fn all_hole_mask_fills_half_gray() {
        let img = Image::filled(5, 7, 3, 0.9);
        let out = pyramid_fill(&img, &Mask::all_holes(5, 7)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn external_result_must_match_a_known_size() {
        let img = Image::filled(100, 100, 3, 0.3);
        let mask = Mask::from_fn(100, 100, |y, _| y < 50);
        let cfg = CoarseConfig { backend: CoarseBackend::ExternalFile, ..Default::default() };
        assert!(matches!(coarse_fill(&img, &mask, &cfg), Err(Error::Backend(_))));
        let wrong = Image::filled(99, 100, 3, 0.7);
        assert!(matches!(coarse_fill_with(&img, &mask, &cfg, &wrong), Err(Error::Backend(_))));
        let ext = Image::filled(100, 100, 3, 0.7);
        let r = coarse_fill_with(&img, &mask, &cfg, &ext).unwrap();
        assert_eq!(r.filled_full.get(10, 10, 0), 0.3);
        assert_eq!(r.filled_full.get(80, 10, 0), 0.7);
    }

    #[test]
    fn working_size_must_be_even_and_large_enough() {
        let img = Image::filled(64, 64, 1, 0.3);
        let mask = Mask::from_fn(64, 64, |y, _| y < 32);
        for ws in [63, 62, 65] {
            let cfg = CoarseConfig { working_size: ws, ..Default::default() };
            let r = coarse_fill(&img, &mask, &cfg);
            assert_eq!(r.is_ok(), ws >= 64 && ws % 2 == 0, "ws={ws}");
        }
    }
}
