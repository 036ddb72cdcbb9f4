//! Epoch loops shared by the detector and the subtype classifier.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::PatchSet;
use super::TrainConfig;
use crate::nn::{Adam, Network, ReduceLrOnPlateau, Tensor};
use crate::prob::ProbVector;
use crate::ssl::{augment_batch, lambda_schedule, mixmatch_with_rng, ssl_loss_logits, Dihedral, Phase, SslConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUC (detector) or macro F1 (subtyper); NaN when undefined.
    pub val_metric: f64,
    pub lr: f64,
    pub lambda: f64,
    pub val_loss: f64,
}

/// Loss and d(loss)/d(logits) for a batch of sample indices.
pub(crate) type BatchLoss<'a> = dyn Fn(&[f64], &[usize]) -> Result<(f64, Vec<f64>)> + 'a;

/// Validation metric and loss, if a validation set exists.
pub(crate) type Validate<'a> = dyn FnMut(&mut Network) -> Result<Option<(f64, f64)>> + 'a;

pub(crate) fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub(crate) fn to_grad(shape: &[usize], g: &[f64]) -> Tensor {
    Tensor::from_vec(shape, g.iter().map(|&v| v as f32).collect()).expect("gradient shape")
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { loss, epoch, step })
    }
}

/// One pass over `data` in shuffled mini-batches with random flips and
/// rotations.
pub(crate) fn supervised_epoch(
    net: &mut Network,
    opt: &mut Adam,
    data: &PatchSet,
    loss: &BatchLoss<'_>,
    batch: usize,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for (step, idx) in order.chunks(batch.max(1)).enumerate() {
        let transforms: Vec<Dihedral> = idx.iter().map(|_| Dihedral::random(rng)).collect();
        let x = augment_batch(&data.batch(idx), &transforms);
        let logits = net.forward(&x, true);
        let (l, g) = loss(&to_f64(&logits), idx)?;
        check_finite(l, epoch, step)?;
        net.zero_grad();
        net.backward(&to_grad(logits.shape(), &g));
        opt.step(&mut net.params_mut());
        total += l;
        steps += 1;
    }
    Ok(total / steps.max(1) as f64)
}

/// Cycles through a shuffled index order, reshuffling on wrap-around.
pub(crate) struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    pub fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycle { order, pos: 0 }
    }

    pub fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub(crate) struct SslEpoch<'a> {
    pub labeled: &'a PatchSet,
    pub targets: &'a [ProbVector],
    pub unlabeled: &'a PatchSet,
    pub ssl: &'a SslConfig,
    pub phase: Phase,
    pub batch_l: usize,
    pub batch_u: usize,
    /// Total steps of the phase, used when the ramp length is unset.
    pub run_steps: usize,
}

impl SslEpoch<'_> {
    pub fn steps(&self) -> usize {
        if self.unlabeled.is_empty() {
            self.labeled.len().div_ceil(self.batch_l.max(1))
        } else {
            self.unlabeled.len().div_ceil(self.batch_u.max(1))
        }
    }

    /// Returns the mean loss and the last weight used.
    pub fn run(
        &self,
        net: &mut Network,
        opt: &mut Adam,
        labeled_cycle: &mut Cycle,
        global_step: &mut usize,
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        let classes = net.spec().num_classes;
        let mut u_order: Vec<usize> = (0..self.unlabeled.len()).collect();
        u_order.shuffle(rng);
        let steps = self.steps();
        let mut total = 0.0;
        let mut lambda = 0.0;
        for step in 0..steps {
            let u_idx: Vec<usize> = u_order.iter().skip(step * self.batch_u).take(self.batch_u).copied().collect();
            let l_idx = labeled_cycle.take(self.batch_l, rng);
            let targets: Vec<ProbVector> = l_idx.iter().map(|&i| self.targets[i].clone()).collect();
            let mb = mixmatch_with_rng(
                &self.labeled.batch(&l_idx),
                &targets,
                &self.unlabeled.batch(&u_idx),
                net,
                self.ssl,
                rng,
            )?;
            lambda = lambda_schedule(*global_step, self.phase, self.ssl, self.run_steps);
            let nl = mb.labeled_p.len();
            let x = Tensor::concat(&mb.labeled_x, &mb.unlabeled_x)?;
            let logits = net.forward(&x, true);
            let flat = to_f64(&logits);
            let (l, gl, gu) =
                ssl_loss_logits(&flat[..nl * classes], &mb.labeled_p, &flat[nl * classes..], &mb.unlabeled_q, lambda, classes)?;
            check_finite(l.total, epoch, step)?;
            let mut g = gl;
            g.extend(gu);
            net.zero_grad();
            net.backward(&to_grad(logits.shape(), &g));
            opt.step(&mut net.params_mut());
            total += l.total;
            *global_step += 1;
        }
        Ok((total / steps.max(1) as f64, lambda))
    }
}

/// Outcome of an epoch loop: the best weights and the full history.
pub(crate) struct RunResult {
    pub best_weights: Vec<u8>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn better(candidate: (f64, f64), best: (f64, f64)) -> bool {
    let metric = |m: f64| if m.is_nan() { f64::NEG_INFINITY } else { m };
    let (cm, bm) = (metric(candidate.0), metric(best.0));
    cm > bm || (cm == bm && candidate.1 < best.1)
}

/// Runs `epochs` epochs, stepping the plateau schedule on validation loss
/// (training loss without a validation set) and keeping the weights of the
/// best validation epoch.
pub(crate) fn run_epochs(
    net: &mut Network,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    mut epoch_fn: impl FnMut(&mut Network, &mut Adam, usize, &mut ChaCha8Rng) -> Result<(f64, f64)>,
    validate: &mut Validate<'_>,
) -> Result<RunResult> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut plateau = ReduceLrOnPlateau::new(1.0 / cfg.plateau_factor, cfg.plateau_patience);
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, f64)> = None;
    let mut best_weights = net.weights_to_bytes();
    let mut best_epoch = 0;
    for epoch in 1..=epochs {
        let lr = opt.lr;
        let (train_loss, lambda) = epoch_fn(net, &mut opt, epoch, rng)?;
        let val = validate(net)?;
        let (val_metric, val_loss) = val.unwrap_or((f64::NAN, f64::NAN));
        log::info!("epoch {epoch}: train {train_loss:.5} val_metric {val_metric:.4} val_loss {val_loss:.5} lr {lr:.2e} lambda {lambda:.3}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            lr,
            lambda,
            val_loss,
        });
        let keep = match (val, best) {
            (None, _) => true,
            (Some(v), None) => {
                best = Some(v);
                true
            }
            (Some(v), Some(b)) if better(v, b) => {
                best = Some(v);
                true
            }
            _ => false,
        };
        if keep {
            best_weights = net.weights_to_bytes();
            best_epoch = epoch;
        }
        let monitored = if val_loss.is_finite() { val_loss } else { train_loss };
        opt.lr = plateau.observe(monitored, opt.lr);
    }
    Ok(RunResult {
        best_weights,
        best_epoch,
        history,
    })
}
