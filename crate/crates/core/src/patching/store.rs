use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use super::{resize_patch, PatchRecord};
use crate::slide_io::{PixelBlock, SlideSource};
use crate::{Error, Result};

pub fn cache_file_name(r: &PatchRecord) -> String {
    format!("{}_{}_{}_{}.png", r.slide_id, r.x, r.y, r.src_size)
}

/// Reads and resizes patch pixels for manifest records, optionally through
/// an on-disk PNG cache.
#[derive(Clone, Default)]
pub struct PatchStore {
    slides: HashMap<String, Arc<dyn SlideSource>>,
    cache_dir: Option<PathBuf>,
}

impl PatchStore {
    pub fn new() -> Self {
        PatchStore::default()
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn insert(&mut self, slide: Arc<dyn SlideSource>) {
        self.slides.insert(slide.slide_id().to_string(), slide);
    }

    pub fn slide(&self, slide_id: &str) -> Result<&Arc<dyn SlideSource>> {
        self.slides
            .get(slide_id)
            .ok_or_else(|| Error::MissingArtifact(format!("slide {slide_id} is not registered")))
    }

    pub fn load(&self, record: &PatchRecord) -> Result<PixelBlock> {
        let cached = self.cache_dir.as_ref().map(|d| d.join(cache_file_name(record)));
        if let Some(path) = &cached {
            if path.is_file() {
                let img = image::open(path)?.to_rgb8();
                if img.width() == record.out_size && img.height() == record.out_size {
                    return Ok(PixelBlock::from_image(&img));
                }
            }
        }
        let slide = self.slide(&record.slide_id)?;
        let block = slide.read_region(record.x, record.y, record.src_size, record.src_size)?;
        let patch = resize_patch(&block, record.out_size)?;
        if let Some(path) = &cached {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            patch.to_image().save(path)?;
        }
        Ok(patch)
    }

    pub fn load_all(&self, records: &[PatchRecord]) -> Result<Vec<PixelBlock>> {
        records.iter().map(|r| self.load(r)).collect()
    }
}
