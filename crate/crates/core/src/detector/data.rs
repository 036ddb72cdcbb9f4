use crate::nn::{block_to_chw, Tensor};
use crate::patching::{PatchManifest, PatchRecord, PatchStore};
use crate::{Error, Result};

/// Manifest records with their decoded, normalised pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub records: Vec<PatchRecord>,
    pub x: Tensor,
}

impl PatchSet {
    pub fn empty(out_size: usize) -> Self {
        PatchSet {
            records: Vec::new(),
            x: Tensor::zeros(&[0, 3, out_size, out_size]),
        }
    }

    pub fn load(store: &PatchStore, records: &[PatchRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Empty("no records to load".into()));
        };
        let s = first.out_size as usize;
        if let Some(r) = records.iter().find(|r| r.out_size != first.out_size) {
            return Err(Error::Shape(format!("mixed patch sizes {} and {}", first.out_size, r.out_size)));
        }
        let mut data = Vec::with_capacity(records.len() * 3 * s * s);
        for r in records {
            data.extend(block_to_chw(&store.load(r)?));
        }
        Ok(PatchSet {
            records: records.to_vec(),
            x: Tensor::from_vec(&[records.len(), 3, s, s], data)?,
        })
    }

    pub fn from_manifest(store: &PatchStore, manifest: &PatchManifest, out_size: usize) -> Result<Self> {
        if manifest.is_empty() {
            Ok(PatchSet::empty(out_size))
        } else {
            PatchSet::load(store, manifest.records())
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn select(&self, keep: impl Fn(&PatchRecord) -> bool) -> PatchSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.records[i])).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> PatchSet {
        let s = self.x.dim(2);
        let mut data = Vec::with_capacity(idx.len() * self.x.item_len());
        for &i in idx {
            data.extend_from_slice(self.x.item(i));
        }
        PatchSet {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            x: Tensor::from_vec(&[idx.len(), 3, s, s], data).expect("subset shape"),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&[f32]> = idx.iter().map(|&i| self.x.item(i)).collect();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.x.shape()[1..]);
        if items.is_empty() {
            Tensor::zeros(&shape)
        } else {
            Tensor::stack(&items, &shape[1..]).expect("batch shape")
        }
    }

    pub fn out_size(&self) -> usize {
        self.x.dim(2)
    }
}
