//! Raster files: PNG, binary PPM/PGM and (read-only) JPEG.
//!
//! Samples map to `[0, 1]` as `v / 255`; writing quantizes with
//! `round(s * 255)`. Masks are single-channel, 0 = hole, 255 = known, and
//! anything at or above the midpoint reads as known.

use std::io::Cursor;
use std::path::Path;

use hiresfill_core::image::quantize_u8;
use hiresfill_core::{Image, Mask};
use image::{DynamicImage, ExtendedColorType, ImageFormat, ImageReader};

use crate::error::{io_err, Error, Result};

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let data: Vec<f32> = if gray {
        img.into_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    } else {
        img.into_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    Ok(Image::new(h, w, if gray { 1 } else { 3 }, data)?)
}

fn to_bytes(img: &Image) -> (Vec<u8>, ExtendedColorType) {
    let bytes = img.data().iter().map(|&s| quantize_u8(s)).collect();
    let color = if img.channels() == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    (bytes, color)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pgm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!("cannot write {} (use .png, .ppm or .pgm)", path.display()))),
    }
}

/// Reads a raster; gray files stay single-channel, alpha is dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path).map_err(io_err(path))?.with_guessed_format().map_err(io_err(path))?;
    if reader.format().is_none() {
        return Err(Error::Format(format!("{}: unrecognized raster format", path.display())));
    }
    let img = reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    from_dynamic(img)
}

/// Writes 8-bit PNG or binary PNM, chosen by extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    if format == ImageFormat::Pnm {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let want = if img.channels() == 1 { "pgm" } else { "ppm" };
        if ext != "pnm" && ext != want {
            return Err(Error::Format(format!("{}-channel image cannot be written as .{ext}", img.channels())));
        }
    }
    let (bytes, color) = to_bytes(img);
    image::save_buffer_with_format(path, &bytes, img.width() as u32, img.height() as u32, color, format)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn mask_from_image(img: &Image) -> Result<Mask> {
    let luma = img.luma();
    let soft: Vec<f32> = luma.iter().map(|&v| v as f32).collect();
    Ok(Mask::from_soft(img.height(), img.width(), &soft)?)
}

pub fn mask_to_image(mask: &Mask) -> Image {
    Image::from_fn(mask.height(), mask.width(), 1, |y, x, _| if mask.is_valid(y, x) { 1.0 } else { 0.0 })
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    mask_from_image(&load_image(path)?)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    save_image(&mask_to_image(mask), path)
}

/// Width and height from the header alone.
pub fn peek_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::Format(e.to_string()))?;
    if reader.format().is_none() {
        return Err(Error::Format("unrecognized raster format".into()));
    }
    let (w, h) = reader.into_dimensions().map_err(|e| Error::Format(e.to_string()))?;
    Ok((w as usize, h as usize))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::Format(e.to_string()))?;
    if reader.format().is_none() {
        return Err(Error::Format("unrecognized raster format".into()));
    }
    from_dynamic(reader.decode().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    mask_from_image(&decode_image(bytes)?)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (bytes, color) = to_bytes(img);
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut Cursor::new(&mut out),
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    encode_png(&mask_to_image(mask))
}
