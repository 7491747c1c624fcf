//! Dense NCHW tensors and the GEMM entry point the network layers build on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{ensure, Result};
use crate::image::{Image, Mask};

/// Floating-point element type of the network engine.
///
/// Training runs in `f32`; `f64` exists so gradient checks against finite
/// differences have headroom.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: forwarded caller contract.
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: forwarded caller contract.
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Strided matrix view: `rows x cols`, element `(i, j)` at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Bounds-checked `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    assert_eq!(c.rows, a.rows, "gemm row count differs");
    assert_eq!(c.cols, b.cols, "gemm column count differs");
    assert!(span(a.rows, a.cols, a.rs, a.cs) <= a.data.len(), "gemm lhs out of bounds");
    assert!(span(b.rows, b.cols, b.rs, b.cs) <= b.data.len(), "gemm rhs out of bounds");
    assert!(span(c.rows, c.cols, c.rs, c.cs) <= c.data.len(), "gemm output out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: the spans checked above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense batch of feature maps in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { shape: [n, c, h, w], data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, cc, h, w] = self.shape;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Packs images (which must share size and channel count) into one batch.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        ensure!(!images.is_empty(), "cannot batch zero images");
        let (h, w) = images[0].dims();
        let c = images[0].channels();
        ensure!(
            images.iter().all(|i| i.dims() == (h, w) && i.channels() == c),
            "batched images must share size and channel count"
        );
        let mut t = Self::zeros(images.len(), c, h, w);
        for (n, img) in images.iter().enumerate() {
            write_image(t.sample_mut(n), img, 0);
        }
        Ok(t)
    }

    /// Packs masks into a single-channel batch of 0/1 values.
    pub fn from_masks(masks: &[&Mask]) -> Result<Self> {
        ensure!(!masks.is_empty(), "cannot batch zero masks");
        let (h, w) = masks[0].dims();
        ensure!(masks.iter().all(|m| m.dims() == (h, w)), "batched masks must share size");
        let mut t = Self::zeros(masks.len(), 1, h, w);
        for (n, m) in masks.iter().enumerate() {
            write_mask(t.sample_mut(n), m, 0);
        }
        Ok(t)
    }

    /// Converts one batch sample back into an image, clamping into `[0, 1]`.
    pub fn to_image(&self, n: usize) -> Result<Image> {
        let [_, c, h, w] = self.shape;
        ensure!(n < self.n(), "sample {n} out of range for batch of {}", self.n());
        ensure!(c == 1 || c == 3, "only 1- or 3-channel tensors convert to images");
        let src = self.sample(n);
        let plane = h * w;
        let mut data = Vec::with_capacity(plane * c);
        for p in 0..plane {
            for ch in 0..c {
                data.push(src[ch * plane + p].to_f64_lossy() as f32);
            }
        }
        Image::from_clamped(h, w, c, data)
    }
}

/// Writes `img` into planes `first_channel..first_channel + channels` of one NCHW sample.
pub(crate) fn write_image<T: Real>(dst: &mut [T], img: &Image, first_channel: usize) {
    let (h, w) = img.dims();
    let c = img.channels();
    let plane = h * w;
    for (p, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            dst[(first_channel + ch) * plane + p] = T::lit(v as f64);
        }
    }
}

pub(crate) fn write_mask<T: Real>(dst: &mut [T], mask: &Mask, channel: usize) {
    let plane = mask.height() * mask.width();
    for (p, &v) in mask.data().iter().enumerate() {
        dst[channel * plane + p] = if v == 1 { T::one() } else { T::zero() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product_including_transposed_views() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(
            1.0,
            View { data: &a, rows: m, cols: k, rs: k, cs: 1 },
            View { data: &b, rows: k, cols: n, rs: n, cs: 1 },
            0.0,
            ViewMut { data: &mut c, rows: m, cols: n, rs: n, cs: 1 },
        );
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (b^T a^T)^T = a b, read through transposed strides.
        let mut ct = vec![0.0; n * m];
        gemm(
            1.0,
            View { data: &b, rows: n, cols: k, rs: 1, cs: n },
            View { data: &a, rows: k, cols: m, rs: 1, cs: k },
            0.0,
            ViewMut { data: &mut ct, rows: n, cols: m, rs: m, cs: 1 },
        );
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_round_trip_through_tensor() {
        let img = Image::from_fn(4, 5, 3, |y, x, c| (y * 15 + x * 3 + c) as f32 / 60.0);
        let t = Tensor::<f32>::from_images(&[&img]).unwrap();
        assert_eq!(t.shape(), [1, 3, 4, 5]);
        assert_eq!(t.at(0, 2, 1, 3), img.get(1, 3, 2));
        assert_eq!(t.to_image(0).unwrap(), img);
    }
}
