//! Split manifests for detection and subtyping experiments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    assign_region_labels, extract_labeled_patches, extract_unlabeled_patches, region_hit, FilterParams,
    LabelRule, ManifestMeta, PatchGeometry, PatchLabel, PatchManifest, PatchRecord,
};
use crate::slide_io::{AnnotationSet, RegionAnnotation, SlideRecord, SlideSource, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub geometry: PatchGeometry,
    /// Sliding-window stride at the reference magnification; defaults to the
    /// patch size.
    #[serde(default)]
    pub stride: Option<u32>,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            geometry: PatchGeometry::default(),
            stride: None,
            filter: FilterParams::default(),
            label_rule: LabelRule::Centre,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn stride(&self) -> u32 {
        self.stride.unwrap_or(self.geometry.src_size)
    }

    fn meta(&self, name: &str) -> ManifestMeta {
        let mut meta = ManifestMeta::new(name, self.stride(), self.filter, self.seed);
        meta.config_hash = crate::config_hash(self);
        meta
    }
}

/// One slide with whatever annotations it carries.
pub struct SlideInput<'a> {
    pub record: &'a SlideRecord,
    pub source: &'a dyn SlideSource,
    pub points: Option<&'a AnnotationSet>,
    pub regions: Option<&'a RegionAnnotation>,
}

/// Manifests for one binary detection experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    /// Point-centred labeled patches plus unlabeled grid patches.
    pub training: PatchManifest,
    /// Unlabeled grid patches from extension slides.
    pub extension: PatchManifest,
    /// Region-labeled grid patches.
    pub validation: PatchManifest,
    pub test: PatchManifest,
    /// Region-labeled grid patches of training and extension slides, used
    /// only by the fully supervised baseline. Empty when any of those slides
    /// lacks region annotations.
    pub supervised: PatchManifest,
}

impl DetectionDataset {
    pub fn manifests(&self) -> [(&'static str, &PatchManifest); 5] {
        [
            ("training", &self.training),
            ("extension", &self.extension),
            ("validation", &self.validation),
            ("test", &self.test),
            ("supervised", &self.supervised),
        ]
    }

    /// Table-style `WSIs(Patches)` summary.
    pub fn summary(&self, name: &str) -> String {
        let labeled = self.training.count_label(PatchLabel::Positive) + self.training.count_label(PatchLabel::Negative);
        let unlabeled = self.training.count_label(PatchLabel::Unlabeled);
        let slides = |m: &PatchManifest| m.slide_ids().len();
        let mut out = String::new();
        let _ = writeln!(out, "{:<20}| {:<22}| {:<16}| {:<16}| {:<16}", "WSIs(Patches)", "Training", "Extension", "Validation", "Test");
        let _ = writeln!(
            out,
            "{:<20}| {:<22}| {:<16}| {:<16}| {:<16}",
            name,
            format!("{} ({},{})", slides(&self.training), labeled, unlabeled),
            format!("{} ({})", slides(&self.extension), self.extension.len()),
            format!("{} ({})", slides(&self.validation), self.validation.len()),
            format!("{} ({})", slides(&self.test), self.test.len()),
        );
        out
    }
}

fn grid(input: &SlideInput<'_>, config: &DatasetConfig) -> Result<Vec<PatchRecord>> {
    let mut recs = extract_unlabeled_patches(
        input.source,
        config.geometry,
        config.stride(),
        &config.filter,
        input.record.split,
    )?;
    for r in &mut recs {
        r.diagnosis = Some(input.record.diagnosis);
    }
    Ok(recs)
}

fn region_labeled(input: &SlideInput<'_>, config: &DatasetConfig) -> Result<Vec<PatchRecord>> {
    let regions = input.regions.ok_or_else(|| {
        Error::Annotation(format!(
            "slide {} in the {} split needs region annotations",
            input.record.slide_id, input.record.split
        ))
    })?;
    let mut recs = grid(input, config)?;
    assign_region_labels(&mut recs, regions, config.label_rule);
    Ok(recs)
}

/// Builds the training/extension/validation/test manifests for one
/// detection task.
pub fn build_detection_dataset(slides: &[SlideInput<'_>], config: &DatasetConfig) -> Result<DetectionDataset> {
    let in_split = |s: Split| slides.iter().filter(move |i| i.record.split == s);
    if in_split(Split::Training).next().is_none() {
        return Err(Error::Empty("detection dataset has no training slides".into()));
    }
    for split in [Split::Extension, Split::Validation, Split::Test] {
        if in_split(split).next().is_none() {
            log::warn!("detection dataset has no {split} slides");
        }
    }

    let mut training = Vec::new();
    for input in in_split(Split::Training) {
        let points = input.points.ok_or_else(|| {
            Error::Annotation(format!("training slide {} has no point annotations", input.record.slide_id))
        })?;
        let mut labeled = extract_labeled_patches(input.source, points, config.geometry, Split::Training)?;
        for r in &mut labeled {
            r.diagnosis = Some(input.record.diagnosis);
        }
        let unlabeled = grid(input, config)?
            .into_iter()
            .filter(|r| !points.points.iter().any(|p| r.window_contains(p.x, p.y)));
        training.extend(labeled);
        training.extend(unlabeled);
    }

    let mut extension = Vec::new();
    for input in in_split(Split::Extension) {
        extension.extend(grid(input, config)?);
    }

    let mut validation = Vec::new();
    for input in in_split(Split::Validation) {
        validation.extend(region_labeled(input, config)?);
    }
    let mut test = Vec::new();
    for input in in_split(Split::Test) {
        test.extend(region_labeled(input, config)?);
    }

    let sup_inputs: Vec<_> = in_split(Split::Training).chain(in_split(Split::Extension)).collect();
    let mut supervised = Vec::new();
    if sup_inputs.iter().all(|i| i.regions.is_some()) {
        for input in sup_inputs {
            supervised.extend(region_labeled(input, config)?);
        }
    } else {
        log::info!("supervised manifest left empty: some training/extension slides lack regions");
    }

    Ok(DetectionDataset {
        training: PatchManifest::new(config.meta("training"), training),
        extension: PatchManifest::new(config.meta("extension"), extension),
        validation: PatchManifest::new(config.meta("validation"), validation),
        test: PatchManifest::new(config.meta("test"), test),
        supervised: PatchManifest::new(config.meta("supervised"), supervised),
    })
}

/// Manifests for the subtype classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtypingDataset {
    /// Grid patches of training and extension slides, labeled later by the
    /// detectors.
    pub training: PatchManifest,
    /// Four-class region-labeled grid patches.
    pub validation: PatchManifest,
    pub test: PatchManifest,
}

fn four_class(input: &SlideInput<'_>, config: &DatasetConfig) -> Result<Vec<PatchRecord>> {
    let regions = input.regions.ok_or_else(|| {
        Error::Annotation(format!("slide {} needs region annotations", input.record.slide_id))
    })?;
    let mut recs = grid(input, config)?;
    for r in &mut recs {
        r.label = if region_hit(r, regions, config.label_rule) {
            PatchLabel::from_subtype(input.record.diagnosis)
        } else {
            PatchLabel::Normal
        };
    }
    Ok(recs)
}

pub fn build_subtyping_dataset(slides: &[SlideInput<'_>], config: &DatasetConfig) -> Result<SubtypingDataset> {
    let mut training = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for input in slides {
        match input.record.split {
            Split::Training | Split::Extension => training.extend(grid(input, config)?),
            Split::Validation => validation.extend(four_class(input, config)?),
            Split::Test => test.extend(four_class(input, config)?),
        }
    }
    if training.is_empty() {
        return Err(Error::Empty("subtyping dataset has no training patches".into()));
    }
    Ok(SubtypingDataset {
        training: PatchManifest::new(config.meta("subtype-training"), training),
        validation: PatchManifest::new(config.meta("subtype-validation"), validation),
        test: PatchManifest::new(config.meta("subtype-test"), test),
    })
}
