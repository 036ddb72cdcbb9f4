//! Plain raster slides (PNG/TIFF) held in memory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_window, PixelBlock, SlideSource};
use crate::{Error, Result};

/// Sidecar metadata stored next to a slide as `<stem>.meta.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlideMetadata {
    pub base_magnification: f64,
}

pub fn sidecar_path(slide_path: &Path) -> PathBuf {
    let stem = slide_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    slide_path.with_file_name(format!("{stem}.meta.json"))
}

#[derive(Debug, Clone)]
pub struct RasterSlide {
    slide_id: String,
    image: image::RgbImage,
    base_magnification: f64,
}

impl RasterSlide {
    pub fn new(slide_id: impl Into<String>, image: image::RgbImage, base_magnification: f64) -> Self {
        RasterSlide {
            slide_id: slide_id.into(),
            image,
            base_magnification,
        }
    }

    pub fn image(&self) -> &image::RgbImage {
        &self.image
    }
}

impl SlideSource for RasterSlide {
    fn slide_id(&self) -> &str {
        &self.slide_id
    }

    fn width(&self) -> u32 {
        self.image.width()
    }

    fn height(&self) -> u32 {
        self.image.height()
    }

    fn base_magnification(&self) -> f64 {
        self.base_magnification
    }

    fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<PixelBlock> {
        check_window(self.dims(), x, y, w, h)?;
        let stride = self.image.width() as usize * 3;
        let raw = self.image.as_raw();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = row as usize * stride + x as usize * 3;
            data.extend_from_slice(&raw[start..start + w as usize * 3]);
        }
        Ok(PixelBlock { width: w, height: h, data })
    }
}

/// Opens a raster slide. Magnification comes from the sidecar file if
/// present, otherwise from an Aperio-style `AppMag` entry in a TIFF
/// ImageDescription tag.
pub fn open_slide(path: &Path) -> Result<RasterSlide> {
    open_slide_with_magnification(path, None)
}

pub fn open_slide_with_magnification(path: &Path, magnification: Option<f64>) -> Result<RasterSlide> {
    if !path.is_file() {
        return Err(Error::SlideNotFound(path.to_path_buf()));
    }
    let mag = match magnification {
        Some(m) => m,
        None => read_magnification(path)?.ok_or_else(|| Error::MissingMagnification(path.to_path_buf()))?,
    };
    if !(mag.is_finite() && mag > 0.0) {
        return Err(Error::Config(format!("invalid base magnification {mag} for {}", path.display())));
    }
    let image = image::open(path)?.to_rgb8();
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(RasterSlide::new(slide_id, image, mag))
}

fn read_magnification(path: &Path) -> Result<Option<f64>> {
    let sidecar = sidecar_path(path);
    if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: SlideMetadata = serde_json::from_str(&text)?;
        return Ok(Some(meta.base_magnification));
    }
    let is_tiff = path
        .extension()
        .map(|e| matches!(e.to_string_lossy().to_ascii_lowercase().as_str(), "tif" | "tiff" | "svs"))
        .unwrap_or(false);
    if is_tiff {
        return Ok(tiff_app_mag(path));
    }
    Ok(None)
}

fn tiff_app_mag(path: &Path) -> Option<f64> {
    let file = fs::File::open(path).ok()?;
    let mut decoder = tiff::decoder::Decoder::new(std::io::BufReader::new(file)).ok()?;
    let desc = decoder
        .get_tag_ascii_string(tiff::tags::Tag::ImageDescription)
        .ok()?;
    parse_app_mag(&desc)
}

fn parse_app_mag(desc: &str) -> Option<f64> {
    desc.split('|').find_map(|field| {
        let (key, value) = field.split_once('=')?;
        if key.trim().eq_ignore_ascii_case("AppMag") {
            value.trim().parse().ok()
        } else {
            None
        }
    })
}
