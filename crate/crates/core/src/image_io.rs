//! 8-bit grayscale PNG/PGM reading and writing on the `[0, 1]` scale.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::forward_models::Image;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads any PNG or PNM file as grayscale with intensities divided by 255.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| image_err(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f64 / 255.0
    }))
}

/// Writes `img` clamped to `[0, 1]` and rounded to 8 bits. The format follows
/// the extension: `.pgm`/`.pnm` give binary PGM, anything else PNG.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for ((i, j), &v) in img.indexed_iter() {
        out.put_pixel(j as u32, i as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
    }
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "pgm" || e == "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    out.save_with_format(path, format).map_err(|e| image_err(path, e))
}

/// Image files (`.png`, `.pgm`, `.pnm`) in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm" | "pnm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every image in `dir` (see [`list_images`]).
pub fn read_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            read_image(&p).map(|img| (name, img))
        })
        .collect()
}
