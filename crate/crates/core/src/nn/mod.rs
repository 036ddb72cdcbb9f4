//! Minimal CPU convolutional networks with manual backpropagation.

pub mod layers;
pub mod optim;
pub mod tensor;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Layer, Param};
pub use optim::{Adam, ReduceLrOnPlateau};
pub use tensor::Tensor;

use crate::prob::ProbVector;
use crate::slide_io::PixelBlock;
use crate::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 4] = b"MPW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SmallCnn,
    Resnet34,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Random,
    /// Weights file from an earlier run or an external converter. The final
    /// linear layer is re-initialised when its class count differs.
    Pretrained(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_size: usize,
    pub num_classes: usize,
    /// Channel count of the first stage; `None` picks 8 for `small_cnn` and
    /// 64 for `resnet34`.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn small_cnn(num_classes: usize, input_size: usize, seed: u64) -> Self {
        ModelSpec {
            architecture: Architecture::SmallCnn,
            input_size,
            num_classes,
            width: None,
            init: Init::Random,
            seed,
        }
    }

    pub fn resnet34(num_classes: usize, seed: u64) -> Self {
        ModelSpec {
            architecture: Architecture::Resnet34,
            input_size: 224,
            num_classes,
            width: None,
            init: Init::Random,
            seed,
        }
    }

    fn width(&self) -> usize {
        self.width.unwrap_or(match self.architecture {
            Architecture::SmallCnn => 8,
            Architecture::Resnet34 => 64,
        })
    }
}

/// Anything that maps a batch of images to class probabilities.
pub trait ProbModel {
    fn num_classes(&self) -> usize;
    fn input_size(&self) -> usize;
    fn predict_proba(&mut self, x: &Tensor) -> Result<Vec<ProbVector>>;
}

pub struct Network {
    spec: ModelSpec,
    layers: Vec<Box<dyn Layer>>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("layers", &self.layers.len())
            .finish()
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<Network> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be >= 2, got {}", spec.num_classes)));
    }
    if spec.input_size < 8 {
        return Err(Error::Config(format!("input_size {} is too small", spec.input_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.width();
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    match spec.architecture {
        Architecture::SmallCnn => {
            let mut ch = 3;
            for out in [w, 2 * w, 4 * w] {
                layers.push(Box::new(layers::Conv2d::new(ch, out, 3, 1, 1, true, &mut rng)));
                layers.push(Box::new(layers::Relu::default()));
                layers.push(Box::new(layers::MaxPool2d::new(2, 2, 0)));
                ch = out;
            }
            layers.push(Box::new(layers::GlobalAvgPool::default()));
            layers.push(Box::new(layers::Linear::new(ch, spec.num_classes, &mut rng)));
        }
        Architecture::Resnet34 => {
            layers.push(Box::new(layers::Conv2d::new(3, w, 7, 2, 3, false, &mut rng)));
            layers.push(Box::new(layers::BatchNorm2d::new(w)));
            layers.push(Box::new(layers::Relu::default()));
            layers.push(Box::new(layers::MaxPool2d::new(3, 2, 1)));
            let mut ch = w;
            for (stage, blocks) in [3usize, 4, 6, 3].into_iter().enumerate() {
                let out = w << stage;
                for b in 0..blocks {
                    let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                    layers.push(Box::new(layers::BasicBlock::new(ch, out, stride, &mut rng)));
                    ch = out;
                }
            }
            layers.push(Box::new(layers::GlobalAvgPool::default()));
            layers.push(Box::new(layers::Linear::new(ch, spec.num_classes, &mut rng)));
        }
    }
    let mut net = Network {
        spec: spec.clone(),
        layers,
    };
    if let Init::Pretrained(path) = &spec.init {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("pretrained weights {}", path.display())));
        }
        net.load_backbone(path)?;
    }
    Ok(net)
}

impl Network {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Logits `[n, num_classes]` for images `[n, 3, s, s]`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train);
        }
        h
    }

    /// Accumulates parameter gradients given d(loss)/d(logits).
    pub fn backward(&mut self, grad: &Tensor) {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum()
    }

    fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out: Vec<&Vec<f32>> = Vec::new();
        for l in &self.layers {
            out.extend(l.params().into_iter().map(|p| &p.value));
            out.extend(l.buffers());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = Vec::new();
        for l in &mut self.layers {
            let (params, buffers): (Vec<_>, Vec<_>) = {
                // split borrow: params and buffers live in disjoint fields
                let l: &mut dyn Layer = l.as_mut();
                let ptr: *mut dyn Layer = l;
                // SAFETY: params_mut and buffers_mut return references to
                // disjoint fields of the same layer.
                unsafe { ((*ptr).params_mut(), (*ptr).buffers_mut()) }
            };
            out.extend(params.into_iter().map(|p| &mut p.value));
            out.extend(buffers);
        }
        out
    }

    pub fn weights_to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn parse_weights(mut bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
        let bad = |m: &str| Error::Shape(format!("weights file: {m}"));
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let count = u32::from_le_bytes(word) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            bytes.read_exact(&mut word).map_err(|_| bad("truncated tensor header"))?;
            let len = u32::from_le_bytes(word) as usize;
            if bytes.len() < len * 4 {
                return Err(bad("truncated tensor data"));
            }
            let (data, rest) = bytes.split_at(len * 4);
            tensors.push(data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
            bytes = rest;
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(tensors)
    }

    pub fn load_weights_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = Self::parse_weights(bytes)?;
        let mut targets = self.tensors_mut();
        if loaded.len() != targets.len() {
            return Err(Error::Shape(format!(
                "weights file has {} tensors, model expects {}",
                loaded.len(),
                targets.len()
            )));
        }
        for (i, (t, l)) in targets.iter().zip(&loaded).enumerate() {
            if t.len() != l.len() {
                return Err(Error::Shape(format!("tensor {i}: file has {} values, model expects {}", l.len(), t.len())));
            }
        }
        for (t, l) in targets.iter_mut().zip(loaded) {
            **t = l;
        }
        Ok(())
    }

    /// Loads every tensor whose shape matches, in order, stopping at the
    /// first mismatch (typically the classification head).
    fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let loaded = Self::parse_weights(&bytes)?;
        let mut copied = 0;
        for (t, l) in self.tensors_mut().into_iter().zip(loaded) {
            if t.len() != l.len() {
                break;
            }
            *t = l;
            copied += 1;
        }
        log::info!("initialised {copied} tensors from {}", path.display());
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.weights_to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_weights_bytes(&bytes)
    }

    pub fn predict_logits(&mut self, x: &Tensor, batch: usize) -> Tensor {
        let n = x.dim(0);
        let mut data = Vec::with_capacity(n * self.spec.num_classes);
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            data.extend_from_slice(self.forward(&x.slice_batch(start, end), false).data());
            start = end;
        }
        Tensor::from_vec(&[n, self.spec.num_classes], data).expect("logit shape")
    }
}

impl ProbModel for Network {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_size(&self) -> usize {
        self.spec.input_size
    }

    fn predict_proba(&mut self, x: &Tensor) -> Result<Vec<ProbVector>> {
        check_input(x, self.spec.input_size)?;
        let logits = self.predict_logits(x, 64);
        Ok(logits
            .data()
            .chunks_exact(self.spec.num_classes)
            .map(|row| ProbVector::from_logits(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect())
    }
}

pub(crate) fn check_input(x: &Tensor, size: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::Shape(format!("model expects [n, 3, {size}, {size}], got {s:?}")));
    }
    Ok(())
}

/// CHW float image scaled to roughly unit variance.
pub fn block_to_chw(block: &PixelBlock) -> Vec<f32> {
    let hw = block.width as usize * block.height as usize;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in block.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = (px[c] as f32 / 255.0 - 0.5) / 0.25;
        }
    }
    out
}

pub fn blocks_to_tensor(blocks: &[PixelBlock]) -> Result<Tensor> {
    let Some(first) = blocks.first() else {
        return Err(Error::Empty("no patches to batch".into()));
    };
    let (w, h) = (first.width as usize, first.height as usize);
    let items: Vec<Vec<f32>> = blocks.iter().map(block_to_chw).collect();
    let refs: Vec<&[f32]> = items.iter().map(|v| v.as_slice()).collect();
    Tensor::stack(&refs, &[3, h, w])
}
