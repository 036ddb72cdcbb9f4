use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FilterParams, PatchLabel, PatchRecord};
use crate::{Error, Result};

/// Dataset-level metadata written as the first line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    pub stride: u32,
    pub filter: FilterParams,
    pub seed: u64,
}

impl ManifestMeta {
    pub fn new(name: impl Into<String>, stride: u32, filter: FilterParams, seed: u64) -> Self {
        ManifestMeta {
            name: name.into(),
            config_hash: String::new(),
            code_version: crate::CODE_VERSION.to_string(),
            stride,
            filter,
            seed,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestMeta,
    count: usize,
}

/// Sorted, duplicate-free list of patch records.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchManifest {
    pub meta: ManifestMeta,
    records: Vec<PatchRecord>,
}

impl PatchManifest {
    /// Sorts by `(slide_id, y, x)` and drops repeated windows, keeping the
    /// first record for each `(slide_id, x, y, src_size)`.
    pub fn new(meta: ManifestMeta, mut records: Vec<PatchRecord>) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let before = records.len();
        records.dedup_by(|b, a| a.slide_id == b.slide_id && a.x == b.x && a.y == b.y && a.src_size == b.src_size);
        if records.len() != before {
            log::warn!("manifest {}: dropped {} duplicate window(s)", meta.name, before - records.len());
        }
        PatchManifest { meta, records }
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PatchRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_label(&self, label: PatchLabel) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn slide_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.slide_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn filter(&self, name: &str, keep: impl Fn(&PatchRecord) -> bool) -> PatchManifest {
        let mut meta = self.meta.clone();
        meta.name = name.to_string();
        PatchManifest {
            meta,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            header: self.meta.clone(),
            count: self.records.len(),
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<PatchManifest> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Empty(format!("manifest {} has no header", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: HeaderLine = serde_json::from_str(&header)?;
        let mut records = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        if records.len() != header.count {
            return Err(Error::Config(format!(
                "manifest {} declares {} records but holds {}",
                path.display(),
                header.count,
                records.len()
            )));
        }
        Ok(PatchManifest::new(header.header, records))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "slide_id,x,y,src_size,out_size,label,split,diagnosis").expect("vec write");
        for r in &self.records {
            let label = serde_json::to_value(r.label)?;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.slide_id,
                r.x,
                r.y,
                r.src_size,
                r.out_size,
                label.as_str().unwrap_or_default(),
                r.split,
                r.diagnosis.map(|d| d.name()).unwrap_or("")
            )
            .expect("vec write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
