//! Float rasters, binary validity masks, resampling and compositing.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{ensure, Result};

/// Row-major, channel-interleaved raster with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from raw samples. Samples must be finite and inside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(channels == 1 || channels == 3, "image channels must be 1 or 3, got {channels}");
        ensure!(
            data.len() == height * width * channels,
            "image data length {} does not match {height}x{width}x{channels}",
            data.len()
        );
        ensure!(
            data.iter().all(|s| (0.0..=1.0).contains(s)),
            "image samples must lie in [0, 1]"
        );
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from arbitrary floats, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for s in data.iter_mut() {
            *s = clamp_unit(*s);
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let v = clamp_unit(value);
        Self { height, width, channels, data: vec![v; height * width * channels] }
    }

    /// Evaluates `f(y, x, c)` for every sample; results are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp_unit(f(y, x, c)));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Stores a sample, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = clamp_unit(value);
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "crop window {height}x{width}@({top},{left}) exceeds {}x{}",
            self.height,
            self.width
        );
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Ok(Self { height, width, channels: c, data })
    }

    /// Gray images are replicated into three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { height: self.height, width: self.width, channels: 3, data }
    }

    /// Rec. 601 luma for RGB, the sample itself for gray.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        resize_nearest(self, out_h, out_w)
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(out_h >= 1 && out_w >= 1, "target size must be at least 1x1");
        if (out_h, out_w) == self.dims() {
            return Ok(self.clone());
        }
        let c = self.channels;
        let ys = bilinear_taps(self.height, out_h);
        let xs = bilinear_taps(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let a = self.get(y0, x0, ch) as f64;
                    let b = self.get(y0, x1, ch) as f64;
                    let d = self.get(y1, x0, ch) as f64;
                    let e = self.get(y1, x1, ch) as f64;
                    let top = a + (b - a) * fx;
                    let bot = d + (e - d) * fx;
                    data.push(clamp_unit((top + (bot - top) * fy) as f32));
                }
            }
        }
        Ok(Self { height: out_h, width: out_w, channels: c, data })
    }

    /// Box-filter downscale: each output pixel averages its source footprint.
    /// Falls back to bilinear along axes that grow.
    pub fn resize_area(&self, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(out_h >= 1 && out_w >= 1, "target size must be at least 1x1");
        if out_h > self.height || out_w > self.width {
            return self.resize_bilinear(out_h, out_w);
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(out_h * out_w * c);
        let mut acc = vec![0.0f64; c];
        for oy in 0..out_h {
            let (y0, y1) = footprint(oy, self.height, out_h);
            for ox in 0..out_w {
                let (x0, x1) = footprint(ox, self.width, out_w);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += self.get(y, x, ch) as f64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                data.extend(acc.iter().map(|a| clamp_unit((a / n) as f32)));
            }
        }
        Ok(Self { height: out_h, width: out_w, channels: c, data })
    }

    /// Quantizes every sample to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&s| quantize_u8(s) as f32 / 255.0).collect();
        Self { data, ..*self }
    }
}

/// Binary validity map: 1 marks a known pixel, 0 a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask data length {} does not match {height}x{width}",
            data.len()
        );
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self { height, width, data })
    }

    /// Thresholds a soft mask at 0.5 (values ≥ 0.5 become known).
    pub fn from_soft(height: usize, width: usize, soft: &[f32]) -> Result<Self> {
        let data = soft.iter().map(|&v| u8::from(v >= 0.5)).collect();
        Self::new(height, width, data)
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn all_holes(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut valid: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(valid(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.data[y * self.width + x] = u8::from(valid);
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn hole_count(&self) -> usize {
        self.data.len() - self.valid_count()
    }

    pub fn hole_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.hole_count() as f64 / self.data.len() as f64
    }

    pub fn is_all_valid(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "crop window {height}x{width}@({top},{left}) exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width + left;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        Ok(Self { height, width, data })
    }

    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(out_h >= 1 && out_w >= 1, "target size must be at least 1x1");
        let ys = nearest_taps(self.height, out_h);
        let xs = nearest_taps(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w);
        for &sy in &ys {
            for &sx in &xs {
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Ok(Self { height: out_h, width: out_w, data })
    }

    /// Downscale where an output pixel is known only if its whole footprint is
    /// known, so small holes survive. Falls back to nearest when growing.
    pub fn resize_conservative(&self, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(out_h >= 1 && out_w >= 1, "target size must be at least 1x1");
        if out_h > self.height || out_w > self.width {
            return self.resize_nearest(out_h, out_w);
        }
        let mut data = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1) = footprint(oy, self.height, out_h);
            for ox in 0..out_w {
                let (x0, x1) = footprint(ox, self.width, out_w);
                let known = (y0..y1).all(|y| (x0..x1).all(|x| self.is_valid(y, x)));
                data.push(u8::from(known));
            }
        }
        Ok(Self { height: out_h, width: out_w, data })
    }
}

/// Nearest-neighbor resampling with pixel-center alignment: output index `i`
/// reads source index `floor((i + 0.5) * src / dst)`.
pub fn resize_nearest(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    ensure!(out_h >= 1 && out_w >= 1, "target size must be at least 1x1");
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let c = img.channels;
    let ys = nearest_taps(img.height, out_h);
    let xs = nearest_taps(img.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &sy in &ys {
        for &sx in &xs {
            data.extend_from_slice(img.pixel(sy, sx));
        }
    }
    Ok(Image { height: out_h, width: out_w, channels: c, data })
}

/// Takes `base` where the mask is known and `patch` inside the hole.
///
/// Selection, not blending: known pixels are bit-exact copies of `base`.
pub fn composite(base: &Image, patch: &Image, mask: &Mask) -> Result<Image> {
    ensure!(
        base.dims() == patch.dims() && base.dims() == mask.dims(),
        "composite operands differ in size: base {:?}, patch {:?}, mask {:?}",
        base.dims(),
        patch.dims(),
        mask.dims()
    );
    ensure!(
        base.channels == patch.channels,
        "composite operands differ in channels: {} vs {}",
        base.channels,
        patch.channels
    );
    let c = base.channels;
    let mut data = base.data.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            data[i * c..(i + 1) * c].copy_from_slice(&patch.data[i * c..(i + 1) * c]);
        }
    }
    Ok(Image { height: base.height, width: base.width, channels: c, data })
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `round(s * 255)` clamped to a byte.
#[inline]
pub fn quantize_u8(s: f32) -> u8 {
    let v = Float::round(clamp_unit(s) * 255.0);
    v as u8
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| ((2 * i + 1) * src / (2 * dst)).min(src - 1)).collect()
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = Float::floor(pos) as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn footprint(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = i * src / dst;
    let end = ((i + 1) * src).div_ceil(dst).max(start + 1);
    (start, end.min(src))
}
