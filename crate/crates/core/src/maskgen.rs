//! Procedural free-form hole masks: random-walk polylines drawn as thick strokes.

use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Mask;

pub const MIN_MASK_SIDE: usize = 64;

/// Inclusive ranges; lengths and widths are in pixels at the target size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenConfig {
    pub stroke_count_range: (u32, u32),
    pub stroke_width_range: (u32, u32),
    pub vertex_count_range: (u32, u32),
    pub segment_length_range: (u32, u32),
    pub seed: u64,
}

impl Default for MaskGenConfig {
    /// Tuned for 512x512 canvases.
    fn default() -> Self {
        Self {
            stroke_count_range: (1, 5),
            stroke_width_range: (10, 36),
            vertex_count_range: (3, 10),
            segment_length_range: (20, 90),
            seed: 0,
        }
    }
}

impl MaskGenConfig {
    /// The default geometry rescaled from 512 pixels to `side` pixels.
    pub fn for_side(side: usize, seed: u64) -> Self {
        let base = Self::default();
        let scale = |(a, b): (u32, u32)| -> (u32, u32) {
            let f = |v: u32| ((v as f64 * side as f64 / 512.0).max(1.0)) as u32;
            (f(a), f(b).max(f(a)))
        };
        Self {
            stroke_width_range: scale(base.stroke_width_range),
            segment_length_range: scale(base.segment_length_range),
            seed,
            ..base
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("stroke_count_range", self.stroke_count_range),
            ("stroke_width_range", self.stroke_width_range),
            ("vertex_count_range", self.vertex_count_range),
            ("segment_length_range", self.segment_length_range),
        ] {
            ensure!(lo <= hi, "{name} is empty: ({lo}, {hi})");
        }
        ensure!(self.stroke_width_range.0 >= 1, "stroke widths must be at least 1 pixel");
        Ok(())
    }
}

/// Draws `N` random strokes as holes on an all-valid canvas. Deterministic in `cfg.seed`.
pub fn generate_irregular_mask(height: usize, width: usize, cfg: &MaskGenConfig) -> Result<Mask> {
    ensure!(
        height >= MIN_MASK_SIDE && width >= MIN_MASK_SIDE,
        "mask generation needs at least {MIN_MASK_SIDE}x{MIN_MASK_SIDE}, got {height}x{width}"
    );
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = Mask::all_valid(height, width);
    let strokes = rng.gen_range(cfg.stroke_count_range.0..=cfg.stroke_count_range.1);
    for _ in 0..strokes {
        let vertices = rng.gen_range(cfg.vertex_count_range.0..=cfg.vertex_count_range.1).max(1);
        let radius = rng.gen_range(cfg.stroke_width_range.0..=cfg.stroke_width_range.1) as f64 / 2.0;
        let mut px = rng.gen_range(0.0..width as f64);
        let mut py = rng.gen_range(0.0..height as f64);
        let mut path = Vec::with_capacity(vertices as usize + 1);
        path.push((px, py));
        for _ in 0..vertices {
            let angle = rng.gen_range(0.0..core::f64::consts::TAU);
            let len = rng.gen_range(cfg.segment_length_range.0..=cfg.segment_length_range.1) as f64;
            px = (px + len * Float::cos(angle)).clamp(0.0, (width - 1) as f64);
            py = (py + len * Float::sin(angle)).clamp(0.0, (height - 1) as f64);
            path.push((px, py));
        }
        for seg in path.windows(2) {
            stamp_capsule(&mut mask, seg[0], seg[1], radius);
        }
    }
    Ok(mask)
}

/// Marks every pixel whose center lies within `radius` of segment `a`-`b` as hole.
fn stamp_capsule(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = mask.dims();
    let x0 = Float::floor(a.0.min(b.0) - radius).max(0.0) as usize;
    let x1 = (Float::ceil(a.0.max(b.0) + radius) as usize).min(w - 1);
    let y0 = Float::floor(a.1.min(b.1) - radius).max(0.0) as usize;
    let y1 = (Float::ceil(a.1.max(b.1) + radius) as usize).min(h - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 { (((cx - a.0) * dx + (cy - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (qx, qy) = (a.0 + t * dx - cx, a.1 + t * dy - cy);
            if qx * qx + qy * qy <= r2 {
                mask.set(y, x, false);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strokes_leaves_canvas_valid() {
        let cfg = MaskGenConfig { stroke_count_range: (0, 0), ..Default::default() };
        assert!(generate_irregular_mask(64, 80, &cfg).unwrap().is_all_valid());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let cfg = MaskGenConfig::default().with_seed(42);
        let a = generate_irregular_mask(128, 96, &cfg).unwrap();
        let b = generate_irregular_mask(128, 96, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_irregular_mask(128, 96, &cfg.clone().with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn small_canvas_and_empty_ranges_are_rejected() {
        assert!(generate_irregular_mask(63, 64, &MaskGenConfig::default()).is_err());
        let cfg = MaskGenConfig { stroke_width_range: (5, 4), ..Default::default() };
        assert!(generate_irregular_mask(64, 64, &cfg).is_err());
        let cfg = MaskGenConfig { stroke_width_range: (0, 4), ..Default::default() };
        assert!(generate_irregular_mask(64, 64, &cfg).is_err());
    }

    #[test]
    fn scaled_config_shrinks_geometry() {
        let c = MaskGenConfig::for_side(256, 1);
        assert_eq!(c.stroke_width_range, (5, 18));
        assert_eq!(c.segment_length_range, (10, 45));
    }
}
