//! Patch datasets: point-centred labeled patches, sliding-window unlabeled
//! patches, region-derived labels and split manifests.

mod dataset;
mod filter;
mod manifest;
mod resize;
mod store;

use serde::{Deserialize, Serialize};

use crate::slide_io::{
    AnnotationSet, Polarity, RegionAnnotation, SlideSource, Split, Subtype, REFERENCE_MAGNIFICATION,
};
use crate::{Error, Result};

pub use dataset::{
    build_detection_dataset, build_subtyping_dataset, DatasetConfig, DetectionDataset, SlideInput,
    SubtypingDataset,
};
pub use filter::{background_filter, is_tissue_pixel, tissue_fraction, FilterParams};
pub use manifest::{ManifestMeta, PatchManifest};
pub use resize::resize_patch;
pub use store::{cache_file_name, PatchStore};

/// Label carried by a patch record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatchLabel {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "unlabeled")]
    Unlabeled,
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "ccRCC")]
    Clear,
    #[serde(rename = "pRCC")]
    Papillary,
    #[serde(rename = "chRCC")]
    Chromophobe,
}

impl PatchLabel {
    /// Binary detection class (1 = cancer), if this is a binary label.
    pub fn binary_class(self) -> Option<usize> {
        match self {
            PatchLabel::Positive => Some(1),
            PatchLabel::Negative => Some(0),
            _ => None,
        }
    }

    /// Four-class index (0 = normal), if this is a four-class label.
    pub fn four_class(self) -> Option<usize> {
        match self {
            PatchLabel::Normal => Some(0),
            PatchLabel::Clear => Some(1),
            PatchLabel::Papillary => Some(2),
            PatchLabel::Chromophobe => Some(3),
            _ => None,
        }
    }

    pub fn from_four_class(class: usize) -> Option<PatchLabel> {
        match class {
            0 => Some(PatchLabel::Normal),
            1 => Some(PatchLabel::Clear),
            2 => Some(PatchLabel::Papillary),
            3 => Some(PatchLabel::Chromophobe),
            _ => None,
        }
    }

    pub fn from_subtype(s: Subtype) -> PatchLabel {
        match s {
            Subtype::Clear => PatchLabel::Clear,
            Subtype::Papillary => PatchLabel::Papillary,
            Subtype::Chromophobe => PatchLabel::Chromophobe,
        }
    }
}

/// One extracted patch. Coordinates and `src_size` are in base pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub src_size: u32,
    pub out_size: u32,
    pub label: PatchLabel,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Subtype>,
}

impl PatchRecord {
    /// Window centre in half-pixel units.
    pub fn centre_doubled(&self) -> (i64, i64) {
        (
            2 * self.x as i64 + self.src_size as i64,
            2 * self.y as i64 + self.src_size as i64,
        )
    }

    pub fn window_contains(&self, x: i64, y: i64) -> bool {
        x >= self.x as i64
            && y >= self.y as i64
            && x < self.x as i64 + self.src_size as i64
            && y < self.y as i64 + self.src_size as i64
    }

    pub(crate) fn sort_key(&self) -> (&str, u32, u32, u32, PatchLabel) {
        (&self.slide_id, self.y, self.x, self.src_size, self.label)
    }
}

/// Patch size and resize target, defined at the reference magnification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub src_size: u32,
    pub out_size: u32,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry {
            src_size: 2000,
            out_size: 224,
        }
    }
}

impl PatchGeometry {
    pub fn new(src_size: u32, out_size: u32) -> Result<Self> {
        if src_size == 0 || out_size == 0 || out_size > src_size {
            return Err(Error::Config(format!(
                "invalid patch geometry: src {src_size}, out {out_size}"
            )));
        }
        Ok(PatchGeometry { src_size, out_size })
    }

    /// Window size in base pixels for a slide at `magnification`, keeping the
    /// same physical extent as `src_size` at the reference magnification.
    pub fn window_for(&self, magnification: f64) -> u32 {
        let scaled = (self.src_size as f64 * magnification / REFERENCE_MAGNIFICATION).round();
        (scaled as u32).max(self.out_size).max(1)
    }
}

/// One record per point, centred on it and clamp-shifted into the slide.
pub fn extract_labeled_patches(
    slide: &dyn SlideSource,
    points: &AnnotationSet,
    geometry: PatchGeometry,
    split: Split,
) -> Result<Vec<PatchRecord>> {
    let src = geometry.window_for(slide.base_magnification());
    if slide.width() < src || slide.height() < src {
        return Err(Error::Config(format!(
            "slide {} ({}x{}) is smaller than the {src}px patch window",
            slide.slide_id(),
            slide.width(),
            slide.height()
        )));
    }
    let dims = slide.dims();
    points
        .points
        .iter()
        .map(|p| {
            if !dims.contains(p.x, p.y) {
                return Err(Error::Annotation(format!(
                    "point ({}, {}) outside slide {}",
                    p.x,
                    p.y,
                    slide.slide_id()
                )));
            }
            let half = (src / 2) as i64;
            let x = (p.x - half).clamp(0, (slide.width() - src) as i64) as u32;
            let y = (p.y - half).clamp(0, (slide.height() - src) as i64) as u32;
            Ok(PatchRecord {
                slide_id: slide.slide_id().to_string(),
                x,
                y,
                src_size: src,
                out_size: geometry.out_size,
                label: match p.polarity {
                    Polarity::Positive => PatchLabel::Positive,
                    Polarity::Negative => PatchLabel::Negative,
                },
                split,
                diagnosis: None,
            })
        })
        .collect()
}

/// Top-left corners of the sliding-window grid along one axis.
pub fn grid_positions(extent: u32, window: u32, stride: u32) -> Vec<u32> {
    if extent < window || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - window) / stride).map(|i| i * stride).collect()
}

/// Sliding-window patches that pass the background filter, in row-major
/// order.
pub fn extract_unlabeled_patches(
    slide: &dyn SlideSource,
    geometry: PatchGeometry,
    stride: u32,
    filter: &FilterParams,
    split: Split,
) -> Result<Vec<PatchRecord>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let src = geometry.window_for(slide.base_magnification());
    let stride = geometry.window_for_stride(stride, slide.base_magnification());
    let mut out = Vec::new();
    for &y in &grid_positions(slide.height(), src, stride) {
        for &x in &grid_positions(slide.width(), src, stride) {
            let block = slide.read_region(x, y, src, src)?;
            if background_filter(&block, filter) {
                out.push(PatchRecord {
                    slide_id: slide.slide_id().to_string(),
                    x,
                    y,
                    src_size: src,
                    out_size: geometry.out_size,
                    label: PatchLabel::Unlabeled,
                    split,
                    diagnosis: None,
                });
            }
        }
    }
    Ok(out)
}

impl PatchGeometry {
    fn window_for_stride(&self, stride: u32, magnification: f64) -> u32 {
        let scaled = (stride as f64 * magnification / REFERENCE_MAGNIFICATION).round() as u32;
        scaled.max(1)
    }
}

/// How region annotations turn into patch labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LabelRule {
    /// Positive iff the window centre is inside a region.
    #[default]
    Centre,
    /// Positive iff at least `min_fraction` of a 16x16 sample lattice over
    /// the window is inside a region.
    Overlap { min_fraction: f64 },
}

/// Relabels records as positive/negative from region annotations.
pub fn assign_region_labels(records: &mut [PatchRecord], regions: &RegionAnnotation, rule: LabelRule) {
    for r in records.iter_mut() {
        r.label = if region_hit(r, regions, rule) {
            PatchLabel::Positive
        } else {
            PatchLabel::Negative
        };
    }
}

pub(crate) fn region_hit(r: &PatchRecord, regions: &RegionAnnotation, rule: LabelRule) -> bool {
    match rule {
        LabelRule::Centre => {
            let (cx, cy) = r.centre_doubled();
            regions.polygons.iter().any(|p| p.contains_doubled(cx, cy))
        }
        LabelRule::Overlap { min_fraction } => {
            const N: i64 = 16;
            let mut hits = 0;
            for j in 0..N {
                for i in 0..N {
                    // sample at cell centres, in half-pixel units
                    let px = 2 * r.x as i64 + ((2 * i + 1) * r.src_size as i64) / N;
                    let py = 2 * r.y as i64 + ((2 * j + 1) * r.src_size as i64) / N;
                    if regions.polygons.iter().any(|p| p.contains_doubled(px, py)) {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (N * N) as f64 >= min_fraction
        }
    }
}
