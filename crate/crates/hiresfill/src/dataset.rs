//! Training data on disk: square crops with hole masks, the manifest that
//! lists them, and stack directories for externally computed coarse fills.

use std::path::{Path, PathBuf};

use hiresfill_core::maskgen::{generate_irregular_mask, MaskGenConfig};
use hiresfill_core::shift::{Slot, SLOT_COUNT};
use hiresfill_core::{Image, ShiftStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::io::{load_image, load_mask, save_image, save_mask};

pub const MANIFEST_FILE: &str = "manifest.json";
const SOURCE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub crop_file: PathBuf,
    pub source_file: PathBuf,
    /// `(left, top)` of the square in the source image.
    pub offset: (usize, usize),
    /// Side of the square in the source image, before resizing.
    pub side: usize,
    pub mask_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(json_err(path))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Accepts the manifest file itself or the directory holding it.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub squares_per_image: usize,
    /// Output side in pixels; `None` keeps each crop at its native size.
    pub side: Option<usize>,
    pub seed: u64,
    /// Emit one generated hole mask per crop.
    pub masks: Option<MaskGenConfig>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { squares_per_image: 3, side: Some(512), seed: 0, masks: Some(MaskGenConfig::default()) }
    }
}

/// Sorted list of readable raster files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| SOURCE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Square resize; area averaging when shrinking, bilinear when growing.
pub fn resize_square(img: &Image, side: usize) -> Result<Image> {
    if img.dims() == (side, side) {
        Ok(img.clone())
    } else if img.height() >= side {
        Ok(img.resize_area(side, side)?)
    } else {
        Ok(img.resize_bilinear(side, side)?)
    }
}

/// Independent stream per source file so output does not depend on scheduling.
pub fn file_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Cuts `squares_per_image` largest squares at random offsets from every
/// image in `src`, writes them (and masks) under `out` and returns the
/// manifest, which is also saved as `out/manifest.json`.
pub fn prepare_dataset(src: &Path, out: &Path, opts: &PrepareOptions) -> Result<Manifest> {
    let files = list_images(src)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", src.display())));
    }
    if opts.squares_per_image == 0 {
        return Err(Error::Dataset("squares_per_image must be at least 1".into()));
    }
    let crops_dir = out.join("crops");
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&crops_dir).map_err(io_err(&crops_dir))?;
    if opts.masks.is_some() {
        std::fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;
    }
    let per_file: Vec<Result<Vec<ManifestEntry>>> = files
        .par_iter()
        .enumerate()
        .map(|(index, path)| {
            let img = load_image(path)?;
            let mut rng = file_rng(opts.seed, index);
            let (h, w) = img.dims();
            let side = h.min(w);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let mut entries = Vec::with_capacity(opts.squares_per_image);
            for k in 0..opts.squares_per_image {
                let left = rng.gen_range(0..=w - side);
                let top = rng.gen_range(0..=h - side);
                let mut crop = img.crop(top, left, side, side)?;
                if let Some(s) = opts.side {
                    crop = resize_square(&crop, s)?;
                }
                let name = format!("{index:05}_{stem}_{k}.png");
                save_image(&crop, &crops_dir.join(&name))?;
                let mask_file = match &opts.masks {
                    Some(cfg) => {
                        let out_side = crop.height();
                        let mask = generate_irregular_mask(out_side, out_side, &cfg.clone().with_seed(rng.gen()))?;
                        save_mask(&mask, &masks_dir.join(&name))?;
                        Some(PathBuf::from("masks").join(&name))
                    }
                    None => None,
                };
                entries.push(ManifestEntry {
                    crop_file: PathBuf::from("crops").join(&name),
                    source_file: std::fs::canonicalize(path).unwrap_or_else(|_| path.clone()),
                    offset: (left, top),
                    side,
                    mask_file,
                });
            }
            Ok(entries)
        })
        .collect();
    let mut manifest = Manifest { entries: Vec::new(), root: out.to_path_buf() };
    for r in per_file {
        manifest.entries.extend(r?);
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub shift_fraction: f64,
    pub original_height: usize,
    pub original_width: usize,
    pub channel_order: String,
}

fn slot_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("slot{i}_img.png")), dir.join(format!("slot{i}_mask.png")))
}

/// Writes a stack as ten rasters plus `meta.json`.
pub fn save_stack_dir(dir: &Path, stack: &ShiftStack, original: (usize, usize)) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, slot) in Slot::ORDER.iter().enumerate() {
        let (img, mask) = slot_paths(dir, i);
        save_image(stack.image(*slot), &img)?;
        save_mask(stack.mask(*slot), &mask)?;
    }
    let meta = StackMeta {
        shift_fraction: stack.shift_fraction(),
        original_height: original.0,
        original_width: original.1,
        channel_order: hiresfill_core::shift::CHANNEL_ORDER_TAG.to_string(),
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).map_err(json_err(&path))?).map_err(io_err(&path))
}

pub fn load_stack_dir(dir: &Path) -> Result<(ShiftStack, StackMeta)> {
    let path = dir.join("meta.json");
    let meta: StackMeta = serde_json::from_str(&std::fs::read_to_string(&path).map_err(io_err(&path))?).map_err(json_err(&path))?;
    if meta.channel_order != hiresfill_core::shift::CHANNEL_ORDER_TAG {
        return Err(Error::Dataset(format!("{}: foreign channel order {:?}", dir.display(), meta.channel_order)));
    }
    let mut images = Vec::with_capacity(SLOT_COUNT);
    let mut masks = Vec::with_capacity(SLOT_COUNT);
    for i in 0..SLOT_COUNT {
        let (img, mask) = slot_paths(dir, i);
        images.push(load_image(&img)?.to_rgb());
        masks.push(load_mask(&mask)?);
    }
    Ok((ShiftStack::from_parts(images, masks, meta.shift_fraction)?, meta))
}

/// Reads an offline coarse result and checks its size.
pub fn load_external_coarse(path: &Path, expected_h: usize, expected_w: usize) -> Result<Image> {
    let img = load_image(path)?;
    if img.dims() != (expected_h, expected_w) {
        return Err(hiresfill_core::Error::Backend(format!(
            "{} is {}x{}, expected {expected_h}x{expected_w}",
            path.display(),
            img.height(),
            img.width()
        ))
        .into());
    }
    Ok(img)
}

