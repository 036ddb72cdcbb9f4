//! Binary cancer-region detector: training modes, fine-tuning, patch
//! inference and hit-maps.

mod data;
mod hitmap;
pub(crate) mod train;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::PatchSet;
pub use hitmap::{generate_hitmap, Hitmap};
pub use train::EpochRecord;

use crate::nn::{build_model, Init, ModelSpec, Network, ProbModel, Tensor};
use crate::patching::{DetectionDataset, PatchLabel, PatchManifest, PatchRecord, PatchStore};
use crate::prob::ProbVector;
use crate::ssl::{ssl_loss_logits, Phase, SslConfig};
use crate::{Error, Result};
use train::{run_epochs, supervised_epoch, Cycle, SslEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cross-entropy on the point-centred patches only.
    LabeledOnly,
    /// Cross-entropy on region-labeled training and extension patches.
    FullySupervised,
    /// MixMatch on labeled plus unlabeled training patches.
    Ssl,
    /// `Ssl` followed by fine-tuning on the extension set.
    SslFinetune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LabeledOnly => "labeled_only",
            Mode::FullySupervised => "fully_supervised",
            Mode::Ssl => "ssl",
            Mode::SslFinetune => "ssl_finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    /// Learning rate is divided by this on a plateau.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    /// Labeled (or supervised) batch size.
    pub batch_size: usize,
    pub unlabeled_batch_size: usize,
    pub finetune_epochs: usize,
    /// Keep the labeled term while fine-tuning on the extension set.
    pub finetune_keep_labeled: bool,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ssl,
            lr: 0.001,
            plateau_factor: 10.0,
            plateau_patience: 5,
            epochs: 200,
            batch_size: 16,
            unlabeled_batch_size: 16,
            finetune_epochs: 5,
            finetune_keep_labeled: true,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.unlabeled_batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if self.plateau_factor <= 1.0 {
            return bad("plateau_factor must be > 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub config_hash: String,
    /// Training mode or stage tag, e.g. `ssl_finetune`.
    pub phase: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl: Option<SslConfig>,
    pub best_epoch: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Trained weights with the configuration and history that produced them.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Network,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochRecord>,
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";

impl Checkpoint {
    pub(crate) fn new(
        model: Network,
        phase: &str,
        train: &TrainConfig,
        ssl: Option<&SslConfig>,
        best_epoch: usize,
        history: Vec<EpochRecord>,
    ) -> Self {
        let spec = model.spec().clone();
        let config_hash = crate::config_hash(&(&spec, train, ssl, phase));
        Checkpoint {
            meta: CheckpointMeta {
                code_version: crate::CODE_VERSION.to_string(),
                config_hash,
                phase: phase.to_string(),
                model: spec,
                train: train.clone(),
                ssl: ssl.cloned(),
                best_epoch,
                extra: serde_json::Value::Null,
            },
            model,
            history,
        }
    }

    pub fn history_csv(&self) -> String {
        let mut out = format!("# {} config={}\n", self.meta.code_version, self.meta.config_hash);
        out.push_str("epoch,train_loss,val_metric,lr,lambda,val_loss\n");
        for h in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                h.epoch, h.train_loss, h.val_metric, h.lr, h.lambda, h.val_loss
            );
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save_weights(&dir.join(WEIGHTS_FILE))?;
        let cfg = dir.join(CONFIG_FILE);
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.meta)? + "\n").map_err(|e| Error::io(&cfg, e))?;
        let hist = dir.join(HISTORY_FILE);
        std::fs::write(&hist, self.history_csv()).map_err(|e| Error::io(&hist, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let cfg = dir.join(CONFIG_FILE);
        if !cfg.is_file() {
            return Err(Error::MissingArtifact(format!("checkpoint config {}", cfg.display())));
        }
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let spec = ModelSpec {
            init: Init::Random,
            ..meta.model.clone()
        };
        let mut model = build_model(&spec)?;
        model.load_weights(&dir.join(WEIGHTS_FILE))?;
        let history = parse_history(&dir.join(HISTORY_FILE))?;
        Ok(Checkpoint { model, meta, history })
    }
}

fn parse_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::Shape(format!("bad history line {l:?}"));
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                train_loss: num(1)?,
                val_metric: num(2)?,
                lr: num(3)?,
                lambda: num(4)?,
                val_loss: num(5)?,
            })
        })
        .collect()
}

impl ProbModel for Checkpoint {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }
    fn input_size(&self) -> usize {
        self.model.input_size()
    }
    fn predict_proba(&mut self, x: &Tensor) -> Result<Vec<ProbVector>> {
        self.model.predict_proba(x)
    }
}

/// Decoded patches for every split of a detection dataset.
#[derive(Debug, Clone)]
pub struct DetectorInputs {
    /// Point-centred labeled training patches.
    pub labeled: PatchSet,
    /// Unlabeled training patches.
    pub unlabeled: PatchSet,
    pub extension: PatchSet,
    pub supervised: PatchSet,
    pub validation: PatchSet,
}

impl DetectorInputs {
    pub fn load(dataset: &DetectionDataset, store: &PatchStore) -> Result<Self> {
        let out = dataset
            .training
            .records()
            .first()
            .map(|r| r.out_size as usize)
            .ok_or_else(|| Error::Empty("training manifest is empty".into()))?;
        let training = PatchSet::from_manifest(store, &dataset.training, out)?;
        Ok(DetectorInputs {
            labeled: training.select(|r| r.label.binary_class().is_some()),
            unlabeled: training.select(|r| r.label == PatchLabel::Unlabeled),
            extension: PatchSet::from_manifest(store, &dataset.extension, out)?,
            supervised: PatchSet::from_manifest(store, &dataset.supervised, out)?,
            validation: PatchSet::from_manifest(store, &dataset.validation, out)?,
        })
    }

    pub fn out_size(&self) -> usize {
        self.labeled.out_size()
    }
}

fn binary_targets(set: &PatchSet) -> Result<Vec<ProbVector>> {
    set.records
        .iter()
        .map(|r| {
            r.label
                .binary_class()
                .map(|c| ProbVector::one_hot(c, 2))
                .ok_or_else(|| Error::Config(format!("record at ({}, {}) of {} is not pos/neg", r.x, r.y, r.slide_id)))
        })
        .collect()
}

fn logits_to_probs(flat: &[f64], classes: usize) -> Vec<ProbVector> {
    flat.chunks_exact(classes).map(ProbVector::from_logits).collect()
}

/// AUC and mean cross-entropy on a pos/neg labeled set.
fn detection_validation(net: &mut Network, val: &PatchSet, batch: usize) -> Result<Option<(f64, f64)>> {
    if val.is_empty() {
        return Ok(None);
    }
    let targets = binary_targets(val)?;
    let logits = train::to_f64(&net.predict_logits(&val.x, batch));
    let (loss, _, _) = ssl_loss_logits(&logits, &targets, &[], &[], 0.0, 2)?;
    let scores: Vec<f64> = logits_to_probs(&logits, 2).iter().map(|p| p[1]).collect();
    let labels: Vec<bool> = targets.iter().map(|t| t[1] == 1.0).collect();
    let auc = crate::metrics::auc(&scores, &labels).unwrap_or(f64::NAN);
    Ok(Some((auc, loss.labeled)))
}

fn supervised_run(
    net: &mut Network,
    data: &PatchSet,
    validation: &PatchSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<train::RunResult> {
    let targets = binary_targets(data)?;
    let loss = |logits: &[f64], idx: &[usize]| -> Result<(f64, Vec<f64>)> {
        let t: Vec<ProbVector> = idx.iter().map(|&i| targets[i].clone()).collect();
        let (l, g, _) = ssl_loss_logits(logits, &t, &[], &[], 0.0, 2)?;
        Ok((l.total, g))
    };
    let batch = cfg.batch_size;
    let eval = cfg.eval_batch_size;
    run_epochs(
        net,
        cfg,
        cfg.epochs,
        rng,
        |net, opt, epoch, rng| Ok((supervised_epoch(net, opt, data, &loss, batch, epoch, rng)?, 0.0)),
        &mut |net| detection_validation(net, validation, eval),
    )
}

/// Trains a binary detector in `train.mode`.
pub fn train_detector(inputs: &DetectorInputs, spec: &ModelSpec, train: &TrainConfig, ssl: &SslConfig) -> Result<Checkpoint> {
    train.validate()?;
    ssl.validate()?;
    if spec.num_classes != 2 {
        return Err(Error::Config(format!("detector needs num_classes = 2, got {}", spec.num_classes)));
    }
    if spec.input_size != inputs.out_size() {
        return Err(Error::Config(format!(
            "model input {} does not match patch size {}",
            spec.input_size,
            inputs.out_size()
        )));
    }
    let mut net = build_model(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    match train.mode {
        Mode::LabeledOnly | Mode::FullySupervised => {
            let data = if train.mode == Mode::LabeledOnly {
                &inputs.labeled
            } else {
                &inputs.supervised
            };
            if data.is_empty() {
                return Err(Error::Empty(format!("{} training needs a non-empty manifest", train.mode.name())));
            }
            let run = supervised_run(&mut net, data, &inputs.validation, train, &mut rng)?;
            net.load_weights_bytes(&run.best_weights)?;
            Ok(Checkpoint::new(net, train.mode.name(), train, None, run.best_epoch, run.history))
        }
        Mode::Ssl | Mode::SslFinetune => {
            if inputs.labeled.is_empty() {
                return Err(Error::Empty("ssl training needs labeled patches".into()));
            }
            if inputs.unlabeled.is_empty() {
                return Err(Error::Empty("ssl training needs an unlabeled manifest".into()));
            }
            let targets = binary_targets(&inputs.labeled)?;
            let mut epoch = SslEpoch {
                labeled: &inputs.labeled,
                targets: &targets,
                unlabeled: &inputs.unlabeled,
                ssl,
                phase: Phase::Initial,
                batch_l: train.batch_size,
                batch_u: train.unlabeled_batch_size,
                run_steps: 0,
            };
            epoch.run_steps = epoch.steps() * train.epochs;
            let mut cycle = Cycle::new(inputs.labeled.len(), &mut rng);
            let mut global = 0;
            let run = run_epochs(
                &mut net,
                train,
                train.epochs,
                &mut rng,
                |net, opt, e, rng| epoch.run(net, opt, &mut cycle, &mut global, e, rng),
                &mut |net| detection_validation(net, &inputs.validation, train.eval_batch_size),
            )?;
            net.load_weights_bytes(&run.best_weights)?;
            let ckpt = Checkpoint::new(net, Mode::Ssl.name(), train, Some(ssl), run.best_epoch, run.history);
            if train.mode == Mode::SslFinetune {
                finetune_detector(ckpt, inputs, train, ssl)
            } else {
                Ok(ckpt)
            }
        }
    }
}

/// Continues SSL training with unlabeled batches from the extension set
/// and a constant unlabeled weight.
pub fn finetune_detector(checkpoint: Checkpoint, inputs: &DetectorInputs, train: &TrainConfig, ssl: &SslConfig) -> Result<Checkpoint> {
    train.validate()?;
    ssl.validate()?;
    if inputs.extension.is_empty() {
        return Err(Error::Empty("fine-tuning needs a non-empty extension manifest".into()));
    }
    if train.finetune_epochs == 0 {
        return Err(Error::Config("finetune_epochs must be >= 1".into()));
    }
    let Checkpoint { model: mut net, mut history, .. } = checkpoint;
    let empty = PatchSet::empty(inputs.out_size());
    let labeled = if train.finetune_keep_labeled {
        &inputs.labeled
    } else {
        &empty
    };
    let targets = binary_targets(labeled)?;
    // separate stream so fine-tuning does not depend on the initial run length
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5EED_F17E);
    let epoch = SslEpoch {
        labeled,
        targets: &targets,
        unlabeled: &inputs.extension,
        ssl,
        phase: Phase::Finetune,
        batch_l: train.batch_size,
        batch_u: train.unlabeled_batch_size,
        run_steps: 1,
    };
    let mut cycle = Cycle::new(labeled.len(), &mut rng);
    let mut global = 0;
    let offset = history.len();
    let run = run_epochs(
        &mut net,
        train,
        train.finetune_epochs,
        &mut rng,
        |net, opt, e, rng| epoch.run(net, opt, &mut cycle, &mut global, e, rng),
        &mut |net| detection_validation(net, &inputs.validation, train.eval_batch_size),
    )?;
    net.load_weights_bytes(&run.best_weights)?;
    history.extend(run.history.into_iter().map(|mut h| {
        h.epoch += offset;
        h
    }));
    Ok(Checkpoint::new(
        net,
        Mode::SslFinetune.name(),
        train,
        Some(ssl),
        run.best_epoch + offset,
        history,
    ))
}

/// Class probabilities for each record, in manifest order, without
/// augmentation.
pub fn predict_patches(model: &mut dyn ProbModel, store: &PatchStore, records: &[PatchRecord]) -> Result<Vec<ProbVector>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let set = PatchSet::load(store, chunk)?;
        out.extend(model.predict_proba(&set.x)?);
    }
    Ok(out)
}

pub fn predict_manifest(model: &mut dyn ProbModel, store: &PatchStore, manifest: &PatchManifest) -> Result<Vec<ProbVector>> {
    predict_patches(model, store, manifest.records())
}

/// Probabilities for an already decoded set.
pub fn predict_set(model: &mut dyn ProbModel, set: &PatchSet) -> Result<Vec<ProbVector>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    model.predict_proba(&set.x)
}

/// Test-set AUC of a binary model on a region-labeled set.
pub fn evaluate_auc(model: &mut dyn ProbModel, set: &PatchSet) -> Result<f64> {
    let probs = predict_set(model, set)?;
    let targets = binary_targets(set)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels: Vec<bool> = targets.iter().map(|t| t[1] == 1.0).collect();
    crate::metrics::auc(&scores, &labels)
}

#[cfg(test)]
mod tests;
