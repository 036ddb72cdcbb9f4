//! Slide access and annotation handling.

mod annotations;
mod geometry;
mod raster;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use annotations::{
    load_point_annotations, load_region_annotations, save_point_annotations, save_region_annotations,
    AnnotationSet, PointAnnotation, Polarity, RegionAnnotation, RegionLabel,
};
pub use geometry::{point_in_region, Polygon};
pub use raster::{open_slide, open_slide_with_magnification, sidecar_path, RasterSlide, SlideMetadata};
pub use synthetic::{generate_synthetic_slide, SyntheticSlide, SyntheticSlideSpec, TissueClass};

/// Magnification at which the default patch geometry is defined.
pub const REFERENCE_MAGNIFICATION: f64 = 40.0;

/// Row-major RGB pixels, `height * width * 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBlock {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl PixelBlock {
    pub fn new(width: u32, height: u32) -> Self {
        PixelBlock {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut b = PixelBlock::new(width, height);
        for px in b.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        b
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("pixel block length matches dimensions")
    }

    pub fn from_image(img: &image::RgbImage) -> Self {
        PixelBlock {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().clone(),
        }
    }
}

/// Read-only access to a slide at base magnification.
pub trait SlideSource: Send + Sync {
    fn slide_id(&self) -> &str;
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    fn base_magnification(&self) -> f64;

    /// Returns exactly the `w x h` window with top-left corner `(x, y)`.
    fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<PixelBlock>;

    fn dims(&self) -> SlideDims {
        SlideDims {
            width: self.width(),
            height: self.height(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideDims {
    pub width: u32,
    pub height: u32,
}

impl SlideDims {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

pub(crate) fn check_window(dims: SlideDims, x: u32, y: u32, w: u32, h: u32) -> Result<()> {
    let fits = w > 0
        && h > 0
        && (x as u64 + w as u64) <= dims.width as u64
        && (y as u64 + h as u64) <= dims.height as u64;
    if fits {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            x: x as i64,
            y: y as i64,
            w: w as i64,
            h: h as i64,
            width: dims.width,
            height: dims.height,
        })
    }
}

/// The three renal cell carcinoma subtypes, numbered as in the four-class
/// label space (0 is reserved for normal tissue).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtype {
    #[serde(rename = "ccRCC")]
    Clear,
    #[serde(rename = "pRCC")]
    Papillary,
    #[serde(rename = "chRCC")]
    Chromophobe,
}

impl Subtype {
    pub const ALL: [Subtype; 3] = [Subtype::Clear, Subtype::Papillary, Subtype::Chromophobe];

    /// Index in the four-class label space (1, 2 or 3).
    pub fn class_index(self) -> usize {
        match self {
            Subtype::Clear => 1,
            Subtype::Papillary => 2,
            Subtype::Chromophobe => 3,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Subtype> {
        match i {
            1 => Some(Subtype::Clear),
            2 => Some(Subtype::Papillary),
            3 => Some(Subtype::Chromophobe),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::Clear => "ccRCC",
            Subtype::Papillary => "pRCC",
            Subtype::Chromophobe => "chRCC",
        }
    }

    /// Short tag used in file and directory names.
    pub fn tag(self) -> &'static str {
        match self {
            Subtype::Clear => "cc",
            Subtype::Papillary => "p",
            Subtype::Chromophobe => "ch",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccRCC" | "cc" => Ok(Subtype::Clear),
            "pRCC" | "p" => Ok(Subtype::Papillary),
            "chRCC" | "ch" => Ok(Subtype::Chromophobe),
            other => Err(Error::Config(format!("unknown subtype {other:?}"))),
        }
    }
}

/// Dataset role of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Extension,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Training, Split::Extension, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Extension => "extension",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub diagnosis: Subtype,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions_path: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_checks() {
        let d = SlideDims { width: 100, height: 50 };
        assert!(check_window(d, 0, 0, 100, 50).is_ok());
        assert!(check_window(d, 1, 0, 100, 50).is_err());
        assert!(check_window(d, 0, 0, 0, 10).is_err());
        assert!(check_window(d, 90, 40, 10, 10).is_ok());
        assert!(check_window(d, u32::MAX, 0, 2, 2).is_err());
    }

    #[test]
    fn subtype_indices_round_trip() {
        for s in Subtype::ALL {
            assert_eq!(Subtype::from_class_index(s.class_index()), Some(s));
            assert_eq!(s.name().parse::<Subtype>().unwrap(), s);
        }
        assert_eq!(Subtype::from_class_index(0), None);
    }

    #[test]
    fn subtype_serializes_by_name() {
        assert_eq!(serde_json::to_string(&Subtype::Papillary).unwrap(), "\"pRCC\"");
        assert_eq!(serde_json::to_string(&Split::Extension).unwrap(), "\"extension\"");
    }
}
