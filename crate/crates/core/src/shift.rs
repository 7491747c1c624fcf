//! The 20-channel refinement input: the coarse-filled image plus four
//! translated copies, each with a validity mask, and constrained patch
//! sampling for training.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::image::{Image, Mask};
use crate::tensor::{write_image, write_mask, Real, Tensor};

pub const SLOT_COUNT: usize = 5;
/// 5 RGB images + 5 masks.
pub const STACK_CHANNELS: usize = 20;
pub const DEFAULT_SHIFT_FRACTION: f64 = 0.20;
pub const MIN_HOLE_FRACTION: f64 = 0.10;
pub const MAX_HOLE_FRACTION: f64 = 0.90;
pub const DEFAULT_MAX_TRIES: usize = 64;

/// Layout of the network input. Stored in checkpoints: first-layer weights
/// are only meaningful for this exact order.
pub const CHANNEL_ORDER_TAG: &str = "rgb:main,left,right,down,up;mask:main,left,right,down,up";

/// Slot of a stack. A shift by `(dx, dy)` moves content so that output pixel
/// `(y, x)` reads source `(y - dy, x - dx)`; "left" moves content left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Main,
    Left,
    Right,
    Down,
    Up,
}

impl Slot {
    pub const ORDER: [Slot; SLOT_COUNT] = [Slot::Main, Slot::Left, Slot::Right, Slot::Down, Slot::Up];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Main => "main",
            Slot::Left => "left",
            Slot::Right => "right",
            Slot::Down => "down",
            Slot::Up => "up",
        }
    }

    /// Signed `(dx, dy)` for per-axis shift magnitudes.
    pub fn offset(self, sx: usize, sy: usize) -> (isize, isize) {
        let (sx, sy) = (sx as isize, sy as isize);
        match self {
            Slot::Main => (0, 0),
            Slot::Left => (-sx, 0),
            Slot::Right => (sx, 0),
            Slot::Down => (0, sy),
            Slot::Up => (0, -sy),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftStack {
    images: Vec<Image>,
    masks: Vec<Mask>,
    shift_fraction: f64,
}

impl ShiftStack {
    /// Validates and wraps five RGB image/mask pairs in [`Slot::ORDER`].
    pub fn from_parts(images: Vec<Image>, masks: Vec<Mask>, shift_fraction: f64) -> Result<Self> {
        ensure!(
            images.len() == SLOT_COUNT && masks.len() == SLOT_COUNT,
            "a stack holds exactly {SLOT_COUNT} images and {SLOT_COUNT} masks"
        );
        let dims = images[0].dims();
        ensure!(
            images.iter().all(|i| i.dims() == dims && i.channels() == 3) && masks.iter().all(|m| m.dims() == dims),
            "stack rasters must be RGB and share one size"
        );
        Ok(Self { images, masks, shift_fraction })
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }

    pub fn shift_fraction(&self) -> f64 {
        self.shift_fraction
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn image(&self, slot: Slot) -> &Image {
        &self.images[slot as usize]
    }

    pub fn mask(&self, slot: Slot) -> &Mask {
        &self.masks[slot as usize]
    }

    pub fn channel_count(&self) -> usize {
        self.images.iter().map(Image::channels).sum::<usize>() + self.masks.len()
    }

    /// Writes this stack as one sample of an NCHW batch in [`CHANNEL_ORDER_TAG`] order.
    pub fn write_into<T: Real>(&self, dst: &mut [T]) {
        for (i, img) in self.images.iter().enumerate() {
            write_image(dst, img, 3 * i);
        }
        for (i, m) in self.masks.iter().enumerate() {
            write_mask(dst, m, 3 * SLOT_COUNT + i);
        }
    }

    pub fn to_tensor<T: Real>(stacks: &[&ShiftStack]) -> Result<Tensor<T>> {
        ensure!(!stacks.is_empty(), "cannot batch zero stacks");
        let (h, w) = stacks[0].dims();
        ensure!(stacks.iter().all(|s| s.dims() == (h, w)), "batched stacks must share size");
        let mut t = Tensor::zeros(stacks.len(), STACK_CHANNELS, h, w);
        for (n, s) in stacks.iter().enumerate() {
            s.write_into(t.sample_mut(n));
        }
        Ok(t)
    }

    /// Applies `f` to every raster (used for cropping and padding).
    pub(crate) fn map_rasters(
        &self,
        mut fi: impl FnMut(&Image) -> Result<Image>,
        mut fm: impl FnMut(&Mask) -> Result<Mask>,
    ) -> Result<Self> {
        let images = self.images.iter().map(&mut fi).collect::<Result<Vec<_>>>()?;
        let masks = self.masks.iter().map(&mut fm).collect::<Result<Vec<_>>>()?;
        Self::from_parts(images, masks, self.shift_fraction)
    }
}

/// Translates image and mask by `(dx, dy)`. Pixels without a source get
/// value 0 and mask 0; elsewhere the source mask is carried along.
pub fn make_shift(img: &Image, mask: &Mask, dx: isize, dy: isize) -> Result<(Image, Mask)> {
    let (h, w) = img.dims();
    ensure!(mask.dims() == (h, w), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    ensure!(
        dx.unsigned_abs() < w && dy.unsigned_abs() < h,
        "shift ({dx}, {dy}) must be smaller than the {h}x{w} image"
    );
    let c = img.channels();
    let mut data = alloc::vec![0.0f32; h * w * c];
    let mut valid = alloc::vec![0u8; h * w];
    let src = img.data();
    // Destination columns with a source: x - dx in [0, w).
    let x0 = dx.max(0) as usize;
    let x1 = (w as isize + dx.min(0)) as usize;
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let sy = sy as usize;
        let sx0 = (x0 as isize - dx) as usize;
        let n = x1 - x0;
        data[(y * w + x0) * c..(y * w + x1) * c].copy_from_slice(&src[(sy * w + sx0) * c..(sy * w + sx0 + n) * c]);
        valid[y * w + x0..y * w + x1].copy_from_slice(&mask.data()[sy * w + sx0..sy * w + sx0 + n]);
    }
    Ok((Image::new(h, w, c, data)?, Mask::new(h, w, valid)?))
}

/// Per-axis shift magnitudes `round(fraction * size)`.
pub fn shift_amounts(height: usize, width: usize, shift_fraction: f64) -> (usize, usize) {
    let sx = Float::round(shift_fraction * width as f64) as usize;
    let sy = Float::round(shift_fraction * height as f64) as usize;
    (sx, sy)
}

/// Builds the stack: slot 0 is the unshifted pair, then left, right, down, up.
/// Gray input is replicated to RGB.
pub fn assemble_stack(img: &Image, mask: &Mask, shift_fraction: f64) -> Result<ShiftStack> {
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    ensure!(
        shift_fraction > 0.0 && shift_fraction < 1.0,
        "shift fraction must lie in (0, 1), got {shift_fraction}"
    );
    let rgb = img.to_rgb();
    let (h, w) = rgb.dims();
    let (sx, sy) = shift_amounts(h, w, shift_fraction);
    let mut images = Vec::with_capacity(SLOT_COUNT);
    let mut masks = Vec::with_capacity(SLOT_COUNT);
    for slot in Slot::ORDER {
        let (dx, dy) = slot.offset(sx, sy);
        let (i, m) = make_shift(&rgb, mask, dx, dy)?;
        images.push(i);
        masks.push(m);
    }
    ShiftStack::from_parts(images, masks, shift_fraction)
}

/// A training window and the share of its main mask that is hole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hole_fraction: f64,
}

fn window_holes(mask: &Mask, top: usize, left: usize, size: usize) -> usize {
    let w = mask.width();
    (top..top + size)
        .map(|y| mask.data()[y * w + left..y * w + left + size].iter().filter(|&&v| v == 0).count())
        .sum()
}

/// `MIN_HOLE_FRACTION <= holes / area <= MAX_HOLE_FRACTION`, in exact integer arithmetic.
pub fn hole_fraction_admissible(holes: usize, area: usize) -> bool {
    holes * 10 >= area && holes * 10 <= area * 9
}

/// Rejection-samples a uniformly placed `size x size` window whose main-mask
/// hole fraction lies in `[0.10, 0.90]`.
pub fn sample_patch<R: Rng + ?Sized>(
    stack: &ShiftStack,
    size: usize,
    rng: &mut R,
    max_tries: usize,
) -> Result<PatchSpec> {
    let (h, w) = stack.dims();
    ensure!(size >= 1 && size <= h && size <= w, "patch size {size} does not fit the {h}x{w} stack");
    let mask = stack.mask(Slot::Main);
    let area = size * size;
    for _ in 0..max_tries {
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        let holes = window_holes(mask, top, left, size);
        if hole_fraction_admissible(holes, area) {
            return Ok(PatchSpec { top, left, size, hole_fraction: holes as f64 / area as f64 });
        }
    }
    Err(Error::SamplingExhausted { tries: max_tries })
}

/// Crops all ten rasters with the same window.
pub fn extract_patch(stack: &ShiftStack, spec: &PatchSpec) -> Result<ShiftStack> {
    let (h, w) = stack.dims();
    ensure!(
        spec.top + spec.size <= h && spec.left + spec.size <= w,
        "patch {}x{}@({},{}) exceeds the {h}x{w} stack",
        spec.size,
        spec.size,
        spec.top,
        spec.left
    );
    stack.map_rasters(
        |i| i.crop(spec.top, spec.left, spec.size, spec.size),
        |m| m.crop(spec.top, spec.left, spec.size, spec.size),
    )
}
