//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{Mode, TrainConfig};
use crate::nn::{Architecture, Init, ModelSpec};
use crate::patching::{DatasetConfig, PatchGeometry};
use crate::slide_io::Subtype;
use crate::ssl::SslConfig;
use crate::subtyping::SubtypeConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Experiment directory; stage outputs go to `<out>/<stage>`.
    pub out: PathBuf,
    /// Directory holding `slides.json` and the slide files. Defaults to
    /// `<out>/synth`.
    pub slides: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("exp"),
            slides: None,
        }
    }
}

/// Slides per split for each subtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub training: usize,
    pub extension: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            training: 1,
            extension: 0,
            validation: 0,
            test: 1,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.training + self.extension + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subtypes: Vec<Subtype>,
    pub per_subtype: SplitCounts,
    pub width: u32,
    pub height: u32,
    pub num_regions: usize,
    pub region_radius: [u32; 2],
    pub points_per_class: usize,
    pub texture_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subtypes: Subtype::ALL.to_vec(),
            per_subtype: SplitCounts::default(),
            width: 1024,
            height: 1024,
            num_regions: 2,
            region_radius: [100, 200],
            points_per_class: 5,
            texture_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub width: Option<usize>,
    /// Optional weights file for backbone initialisation.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::SmallCnn,
            width: None,
            pretrained: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HitmapConfig {
    /// Grid stride in base pixels; defaults to the patch size.
    pub stride: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub patching: DatasetConfig,
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub detector: TrainConfig,
    pub subtyper: TrainConfig,
    pub subtype: SubtypeConfig,
    pub hitmap: HitmapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            patching: DatasetConfig::default(),
            model: ModelConfig::default(),
            ssl: SslConfig::default(),
            detector: TrainConfig::default(),
            subtyper: TrainConfig {
                mode: Mode::FullySupervised,
                ..TrainConfig::default()
            },
            subtype: SubtypeConfig::default(),
            hitmap: HitmapConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `text` after applying `key.path=value` overrides; values are
    /// TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
            log::info!("config override: {key} = {raw}");
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Checks every section, before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let g = self.patching.geometry;
        PatchGeometry::new(g.src_size, g.out_size)?;
        if self.patching.stride == Some(0) || self.hitmap.stride == Some(0) {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        let f = &self.patching.filter;
        if !(0.0..=1.0).contains(&f.tissue_fraction_min) {
            return Err(Error::Config("tissue_fraction_min must be in [0, 1]".into()));
        }
        self.ssl.validate()?;
        self.detector.validate()?;
        self.subtyper.validate()?;
        self.subtype.validate()?;
        if matches!(self.model.architecture, Architecture::Resnet34) && g.out_size != 224 {
            return Err(Error::Config(format!("resnet34 needs out_size 224, got {}", g.out_size)));
        }
        if self.model.width == Some(0) {
            return Err(Error::Config("model width must be >= 1".into()));
        }
        let s = &self.synth;
        if s.width == 0 || s.height == 0 {
            return Err(Error::Config("synthetic slide dimensions must be > 0".into()));
        }
        Ok(())
    }

    pub fn slides_dir(&self) -> PathBuf {
        self.paths.slides.clone().unwrap_or_else(|| self.paths.out.join("synth"))
    }

    /// The config without `paths`, which locate data but do not change it.
    pub fn content_view(&self) -> ExperimentConfig {
        ExperimentConfig {
            paths: Paths::default(),
            ..self.clone()
        }
    }

    pub fn hash(&self) -> String {
        crate::config_hash(&self.content_view())
    }

    /// Seed for a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let h = crate::config_hash(&(self.seed, stage));
        u64::from_str_radix(&h[..16], 16).expect("hex prefix")
    }

    pub fn model_spec(&self, num_classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            architecture: self.model.architecture,
            input_size: self.patching.geometry.out_size as usize,
            num_classes,
            width: self.model.width,
            init: self.model.pretrained.clone().map(Init::Pretrained).unwrap_or_default(),
            seed,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad override key '{key}'")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}': '{p}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
