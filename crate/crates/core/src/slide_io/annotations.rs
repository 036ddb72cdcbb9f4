//! Point (Min-Point) and region annotation files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::Polygon;
use super::SlideDims;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: i64,
    pub y: i64,
    #[serde(rename = "label")]
    pub polarity: Polarity,
}

/// Validated point annotations for one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub points: Vec<PointAnnotation>,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>, points: Vec<PointAnnotation>) -> Self {
        AnnotationSet {
            slide_id: slide_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.points.iter().filter(|p| p.polarity == polarity).count()
    }

    /// Checks bounds and removes exact duplicates, returning how many were
    /// dropped.
    pub fn validate(&mut self, dims: Option<SlideDims>) -> Result<usize> {
        if let Some(d) = dims {
            if let Some(p) = self.points.iter().find(|p| !d.contains(p.x, p.y)) {
                return Err(Error::Annotation(format!(
                    "point ({}, {}) outside slide {} of size {}x{}",
                    p.x, p.y, self.slide_id, d.width, d.height
                )));
            }
        }
        let mut seen = BTreeSet::new();
        let before = self.points.len();
        self.points.retain(|p| seen.insert(*p));
        let dropped = before - self.points.len();
        if dropped > 0 {
            log::warn!("slide {}: dropped {dropped} duplicate point annotation(s)", self.slide_id);
        }
        Ok(dropped)
    }
}

/// Loads a point annotation file and validates it against `dims` when given.
pub fn load_point_annotations(path: &Path, dims: Option<SlideDims>) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set: AnnotationSet = serde_json::from_str(&text).map_err(|e| {
        Error::Annotation(format!("{}: {e}", path.display()))
    })?;
    set.validate(dims)?;
    log::debug!(
        "{}: {} positive, {} negative points",
        set.slide_id,
        set.count(Polarity::Positive),
        set.count(Polarity::Negative)
    );
    Ok(set)
}

pub fn save_point_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(set)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Cancerous,
}

/// Complete region annotation for one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub slide_id: String,
    #[serde(rename = "regions")]
    pub polygons: Vec<Polygon>,
    pub label: RegionLabel,
}

impl RegionAnnotation {
    pub fn new(slide_id: impl Into<String>, polygons: Vec<Polygon>) -> Self {
        RegionAnnotation {
            slide_id: slide_id.into(),
            polygons,
            label: RegionLabel::Cancerous,
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        super::point_in_region(x, y, &self.polygons)
    }

    pub fn validate(&self, dims: Option<SlideDims>) -> Result<()> {
        if let Some(d) = dims {
            for (i, poly) in self.polygons.iter().enumerate() {
                let (x0, y0, x1, y1) = poly.bbox();
                if x0 < 0 || y0 < 0 || x1 > d.width as i64 || y1 > d.height as i64 {
                    return Err(Error::Annotation(format!(
                        "region {i} of slide {} exceeds slide bounds {}x{}",
                        self.slide_id, d.width, d.height
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads a region annotation file. Polygons are checked for closure and
/// simplicity during parsing.
pub fn load_region_annotations(path: &Path, dims: Option<SlideDims>) -> Result<RegionAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let regions: RegionAnnotation = serde_json::from_str(&text).map_err(|e| {
        Error::Annotation(format!("{}: {e}", path.display()))
    })?;
    regions.validate(dims)?;
    Ok(regions)
}

pub fn save_region_annotations(regions: &RegionAnnotation, path: &Path) -> Result<()> {
    let text = serde_json::to_string(regions)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
