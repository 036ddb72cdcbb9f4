//! Four-class subtype classification: detector-generated patch labels,
//! hybrid-loss training and slide-level vote aggregation.

mod loss;
mod votes;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{fold_subtype_probs, hybrid_loss, hybrid_loss_logits, hybrid_loss_prob_grad, HybridTarget};
pub use votes::{
    aggregate_votes, evidential_overlay, predict_slide, write_slide_outputs, EvidentialPatch, SlidePrediction,
    SlideVerdict,
};

use crate::detector::train::{run_epochs, supervised_epoch, to_f64};
use crate::detector::{Checkpoint, PatchSet, TrainConfig};
use crate::nn::{build_model, ModelSpec, Network, ProbModel};
use crate::patching::{PatchLabel, PatchManifest, PatchRecord};
use crate::prob::ProbVector;
use crate::slide_io::Subtype;
use crate::ssl::ssl_loss_logits;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubtypeMode {
    /// Slide diagnosis as the label of every patch, three classes.
    #[serde(rename = "ce_3class")]
    Ce3class,
    /// Detector-generated four-class labels with cross-entropy.
    #[serde(rename = "ce_4class")]
    Ce4class,
    /// Four-class labels with the hybrid loss.
    #[serde(rename = "hybrid_4class")]
    Hybrid4class,
}

impl SubtypeMode {
    pub fn name(self) -> &'static str {
        match self {
            SubtypeMode::Ce3class => "ce_3class",
            SubtypeMode::Ce4class => "ce_4class",
            SubtypeMode::Hybrid4class => "hybrid_4class",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            SubtypeMode::Ce3class => 3,
            _ => 4,
        }
    }

    /// Whether class 0 of the model output means "normal".
    pub fn has_normal(self) -> bool {
        self != SubtypeMode::Ce3class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubtypeConfig {
    pub mu: f64,
    pub detector_threshold: f64,
    pub mode: SubtypeMode,
}

impl Default for SubtypeConfig {
    fn default() -> Self {
        SubtypeConfig {
            mu: 5.0,
            detector_threshold: 0.5,
            mode: SubtypeMode::Hybrid4class,
        }
    }
}

impl SubtypeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.detector_threshold > 0.0 && self.detector_threshold < 1.0) {
            return Err(Error::Config(format!("detector_threshold must be in (0, 1), got {}", self.detector_threshold)));
        }
        Ok(())
    }
}

/// Four-class labels produced by the per-subtype detectors, with the
/// detector probability behind each label.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLabels {
    pub records: Vec<PatchRecord>,
    pub cancer_probs: Vec<f64>,
}

impl GeneratedLabels {
    pub fn manifest(&self, meta: crate::patching::ManifestMeta) -> PatchManifest {
        PatchManifest::new(meta, self.records.clone())
    }
}

fn diagnosis_of(r: &PatchRecord) -> Result<Subtype> {
    r.diagnosis
        .ok_or_else(|| Error::Config(format!("patch ({}, {}) of {} has no slide diagnosis", r.x, r.y, r.slide_id)))
}

/// Labels each patch with its slide's subtype if that subtype's detector
/// scores it at or above `threshold`, and normal otherwise.
pub fn generate_subtype_labels(
    detectors: &mut BTreeMap<Subtype, &mut dyn ProbModel>,
    set: &PatchSet,
    threshold: f64,
) -> Result<GeneratedLabels> {
    let mut by_subtype: BTreeMap<Subtype, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        by_subtype.entry(diagnosis_of(r)?).or_default().push(i);
    }
    let mut probs = vec![0.0; set.len()];
    for (subtype, idx) in by_subtype {
        let detector = detectors
            .get_mut(&subtype)
            .ok_or_else(|| Error::MissingArtifact(format!("no detector for {subtype}")))?;
        if detector.num_classes() != 2 {
            return Err(Error::Config(format!("{subtype} detector has {} classes", detector.num_classes())));
        }
        for chunk in idx.chunks(256) {
            let p = detector.predict_proba(&set.batch(chunk))?;
            for (&i, pv) in chunk.iter().zip(p) {
                probs[i] = pv[1];
            }
        }
    }
    let records = set
        .records
        .iter()
        .zip(&probs)
        .map(|(r, &p)| {
            let d = diagnosis_of(r)?;
            Ok(PatchRecord {
                label: if p >= threshold {
                    PatchLabel::from_subtype(d)
                } else {
                    PatchLabel::Normal
                },
                ..r.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(GeneratedLabels {
        records,
        cancer_probs: probs,
    })
}

/// Training target of one patch under `mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Class(usize),
    Hybrid(HybridTarget),
}

fn targets_for(records: &[PatchRecord], mode: SubtypeMode) -> Result<Vec<Target>> {
    records
        .iter()
        .map(|r| {
            let d = diagnosis_of(r)?;
            let y = r.label.four_class().ok_or_else(|| {
                Error::Config(format!("{} training needs four-class labels, found {:?}", mode.name(), r.label))
            });
            Ok(match mode {
                SubtypeMode::Ce3class => Target::Class(d.class_index() - 1),
                SubtypeMode::Ce4class => {
                    let y = y?;
                    HybridTarget::new(y, d.class_index())?;
                    Target::Class(y)
                }
                SubtypeMode::Hybrid4class => Target::Hybrid(HybridTarget::new(y?, d.class_index())?),
            })
        })
        .collect()
}

fn batch_loss(targets: &[Target], idx: &[usize], logits: &[f64], classes: usize, mu: f64) -> Result<(f64, Vec<f64>)> {
    match targets[idx[0]] {
        Target::Hybrid(_) => {
            let t: Vec<HybridTarget> = idx
                .iter()
                .map(|&i| match targets[i] {
                    Target::Hybrid(h) => h,
                    Target::Class(_) => unreachable!("targets share one mode"),
                })
                .collect();
            hybrid_loss_logits(logits, &t, mu, classes)
        }
        Target::Class(_) => {
            let t: Vec<ProbVector> = idx
                .iter()
                .map(|&i| match targets[i] {
                    Target::Class(c) => ProbVector::one_hot(c, classes),
                    Target::Hybrid(_) => unreachable!("targets share one mode"),
                })
                .collect();
            let (l, g, _) = ssl_loss_logits(logits, &t, &[], &[], 0.0, classes)?;
            Ok((l.total, g))
        }
    }
}

/// Predicted class per patch in the model's own label space.
fn label_space_truth(targets: &[Target]) -> Vec<usize> {
    targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => *c,
            Target::Hybrid(h) => h.y,
        })
        .collect()
}

/// Trains the subtype classifier. `train` must carry four-class labels
/// (except in `ce_3class` mode, which only needs diagnoses).
pub fn train_subtyper(
    train: &PatchSet,
    validation: &PatchSet,
    spec: &ModelSpec,
    subtype: &SubtypeConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    subtype.validate()?;
    cfg.validate()?;
    let classes = subtype.mode.num_classes();
    if spec.num_classes != classes {
        return Err(Error::Config(format!(
            "{} needs a {classes}-class model, got {}",
            subtype.mode.name(),
            spec.num_classes
        )));
    }
    if train.is_empty() {
        return Err(Error::Empty("subtype training set is empty".into()));
    }
    let targets = targets_for(&train.records, subtype.mode)?;
    let val_targets = if validation.is_empty() {
        Vec::new()
    } else {
        targets_for(&validation.records, subtype.mode)?
    };
    let mu = subtype.mu;
    let loss = |logits: &[f64], idx: &[usize]| batch_loss(&targets, idx, logits, classes, mu);
    let mut net = build_model(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size;
    let eval = cfg.eval_batch_size;
    let mut validate = |net: &mut Network| -> Result<Option<(f64, f64)>> {
        if validation.is_empty() {
            return Ok(None);
        }
        let logits = to_f64(&net.predict_logits(&validation.x, eval));
        let all: Vec<usize> = (0..validation.len()).collect();
        let (l, _) = batch_loss(&val_targets, &all, &logits, classes, mu)?;
        let preds: Vec<usize> = logits.chunks_exact(classes).map(crate::prob::argmax).collect();
        let f1 = crate::metrics::prf1(&preds, &label_space_truth(&val_targets), classes)?.macro_f1;
        Ok(Some((f1, l)))
    };
    let run = run_epochs(
        &mut net,
        cfg,
        cfg.epochs,
        &mut rng,
        |net, opt, epoch, rng| Ok((supervised_epoch(net, opt, train, &loss, batch, epoch, rng)?, 0.0)),
        &mut validate,
    )?;
    net.load_weights_bytes(&run.best_weights)?;
    let mut ck = Checkpoint::new(net, &format!("subtyper_{}", subtype.mode.name()), cfg, None, run.best_epoch, run.history);
    ck.meta.extra = serde_json::to_value(subtype)?;
    ck.meta.config_hash = crate::config_hash(&(&ck.meta.config_hash, subtype));
    Ok(ck)
}

/// First-step loss for a mode, used to compare objectives on equal inputs.
pub fn initial_loss(train: &PatchSet, spec: &ModelSpec, subtype: &SubtypeConfig, batch: &[usize]) -> Result<f64> {
    let targets = targets_for(&train.records, subtype.mode)?;
    let mut net = build_model(spec)?;
    let logits = to_f64(&net.forward(&train.batch(batch), true));
    let idx: Vec<usize> = batch.to_vec();
    Ok(batch_loss(&targets, &idx, &logits, subtype.mode.num_classes(), subtype.mu)?.0)
}
