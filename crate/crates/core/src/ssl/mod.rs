//! MixMatch-style semi-supervised training primitives.

mod augment;
mod loss;

pub use augment::{augment, Dihedral};
pub use loss::{ssl_loss, ssl_loss_logits, ssl_loss_prob_grad, SslLoss};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::nn::{ProbModel, Tensor};
use crate::prob::ProbVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Augmentations per unlabeled sample.
    pub k: usize,
    /// Sharpening temperature.
    pub t: f64,
    /// MixUp Beta parameter.
    pub alpha: f64,
    pub lambda_max: f64,
    /// Steps of the linear ramp. `None` ramps over the whole initial run.
    pub ramp_steps: Option<usize>,
    pub finetune_lambda: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig::for_classes(2)
    }
}

impl SslConfig {
    /// Defaults with `lambda_max = 75 * C / 10`.
    pub fn for_classes(classes: usize) -> Self {
        let lambda_max = 75.0 * classes as f64 / 10.0;
        SslConfig {
            k: 2,
            t: 0.5,
            alpha: 0.75,
            lambda_max,
            ramp_steps: None,
            finetune_lambda: lambda_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return bad(format!("K must be >= 1, got {}", self.k));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return bad(format!("T must be in (0, 1], got {}", self.t));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if !(self.finetune_lambda >= 0.0 && self.finetune_lambda.is_finite()) {
            return bad(format!("finetune_lambda must be >= 0, got {}", self.finetune_lambda));
        }
        if self.ramp_steps == Some(0) {
            return bad("ramp_steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Finetune,
}

/// Unlabeled-loss weight at `step`. In the initial phase `ramp_steps`
/// falls back to `run_steps` when unset.
pub fn lambda_schedule(step: usize, phase: Phase, config: &SslConfig, run_steps: usize) -> f64 {
    match phase {
        Phase::Finetune => config.finetune_lambda,
        Phase::Initial => {
            let ramp = config.ramp_steps.unwrap_or(run_steps).max(1);
            config.lambda_max * (step as f64 / ramp as f64).min(1.0)
        }
    }
}

/// `p_i^(1/T) / sum_j p_j^(1/T)`, computed in the log domain.
pub fn sharpen(p: &ProbVector, t: f64) -> Result<ProbVector> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("temperature must be in (0, 1], got {t}")));
    }
    sharpen_slice(p.as_slice(), t).map(ProbVector::from_trusted)
}

fn sharpen_slice(p: &[f64], t: f64) -> Result<Vec<f64>> {
    if p.iter().all(|&v| v <= 0.0) {
        return Err(Error::Probability("cannot sharpen an all-zero vector".into()));
    }
    if t == 1.0 {
        return Ok(p.to_vec());
    }
    let logs: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.ln() / t } else { f64::NEG_INFINITY }).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

fn check_images(x: &Tensor, model: &dyn ProbModel) -> Result<usize> {
    crate::nn::check_input(x, model.input_size())?;
    Ok(x.dim(2))
}

/// Applies one transform per item of a `[n, 3, s, s]` batch.
pub fn augment_batch(x: &Tensor, transforms: &[Dihedral]) -> Tensor {
    let s = x.dim(2);
    let items: Vec<Vec<f32>> = (0..x.dim(0)).map(|i| transforms[i].apply_chw(x.item(i), x.dim(1), s)).collect();
    let refs: Vec<&[f32]> = items.iter().map(|v| v.as_slice()).collect();
    Tensor::stack(&refs, &x.shape()[1..]).expect("same item shape")
}

/// The K augmented copies of an unlabeled batch and their sharpened,
/// averaged guesses. The model is evaluated without gradient tracking.
pub struct Guesses {
    pub augmented: Vec<Tensor>,
    pub targets: Vec<ProbVector>,
}

pub fn guess_labels_with_rng(
    model: &mut dyn ProbModel,
    x: &Tensor,
    k: usize,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Guesses> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let n = x.dim(0);
    let c = model.num_classes();
    let mut sums = vec![0.0f64; n * c];
    let mut augmented = Vec::with_capacity(k);
    for _ in 0..k {
        let transforms: Vec<Dihedral> = (0..n).map(|_| Dihedral::random(rng)).collect();
        let xa = augment_batch(x, &transforms);
        let probs = model.predict_proba(&xa)?;
        if probs.len() != n || probs.iter().any(|p| p.len() != c) {
            return Err(Error::Shape(format!("model returned {} rows for {n} inputs", probs.len())));
        }
        for (i, p) in probs.iter().enumerate() {
            for (j, v) in p.as_slice().iter().enumerate() {
                sums[i * c + j] += v;
            }
        }
        augmented.push(xa);
    }
    let targets = sums
        .chunks_exact(c)
        .map(|row| {
            let mean: Vec<f64> = row.iter().map(|v| v / k as f64).collect();
            sharpen_slice(&mean, t).map(ProbVector::from_trusted)
        })
        .collect::<Result<_>>()?;
    Ok(Guesses { augmented, targets })
}

/// Guessed label for a single `[3, s, s]` patch.
pub fn guess_label(model: &mut dyn ProbModel, patch: &Tensor, k: usize, t: f64, seed: u64) -> Result<ProbVector> {
    let x = if patch.shape().len() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(patch.shape());
        Tensor::from_vec(&shape, patch.data().to_vec())?
    } else {
        patch.clone()
    };
    check_images(&x, model)?;
    if x.dim(0) != 1 {
        return Err(Error::Shape(format!("guess_label takes one patch, got {}", x.dim(0))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(guess_labels_with_rng(model, &x, k, t, &mut rng)?.targets.remove(0))
}

/// Draws `max(l, 1 - l)` with `l ~ Beta(alpha, alpha)`.
pub fn sample_mix_coefficient<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// Convex combination with a given coefficient.
pub fn mixup_with(lam: f64, x1: &[f32], p1: &ProbVector, x2: &[f32], p2: &ProbVector) -> Result<(Vec<f32>, ProbVector)> {
    if x1.len() != x2.len() || p1.len() != p2.len() {
        return Err(Error::Shape(format!(
            "mixup of inputs {} vs {} and targets {} vs {}",
            x1.len(),
            x2.len(),
            p1.len(),
            p2.len()
        )));
    }
    let l32 = lam as f32;
    let x = x1.iter().zip(x2).map(|(a, b)| l32 * a + (1.0 - l32) * b).collect();
    let p = p1.as_slice().iter().zip(p2.as_slice()).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
    Ok((x, ProbVector::from_trusted(p)))
}

pub fn mixup(
    x1: &[f32],
    p1: &ProbVector,
    x2: &[f32],
    p2: &ProbVector,
    alpha: f64,
    seed: u64,
) -> Result<(Vec<f32>, ProbVector, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam = sample_mix_coefficient(alpha, &mut rng)?;
    let (x, p) = mixup_with(lam, x1, p1, x2, p2)?;
    Ok((x, p, lam))
}

/// Mixed labeled set and mixed unlabeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub labeled_x: Tensor,
    pub labeled_p: Vec<ProbVector>,
    pub unlabeled_x: Tensor,
    pub unlabeled_q: Vec<ProbVector>,
    /// Mixing coefficient of each output, labeled first.
    pub coefficients: Vec<f64>,
}

pub fn mixmatch(
    labeled: &Tensor,
    targets: &[ProbVector],
    unlabeled: &Tensor,
    model: &mut dyn ProbModel,
    config: &SslConfig,
    seed: u64,
) -> Result<MixedBatch> {
    if targets.is_empty() {
        return Err(Error::Empty("mixmatch needs a non-empty labeled batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mixmatch_with_rng(labeled, targets, unlabeled, model, config, &mut rng)
}

/// As [`mixmatch`] but also accepts an empty labeled batch, in which case
/// unlabeled samples are mixed among themselves.
pub fn mixmatch_with_rng(
    labeled: &Tensor,
    targets: &[ProbVector],
    unlabeled: &Tensor,
    model: &mut dyn ProbModel,
    config: &SslConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    config.validate()?;
    let nl = targets.len();
    let nu = unlabeled.dim(0);
    if labeled.dim(0) != nl {
        return Err(Error::Shape(format!("{} labeled inputs but {nl} targets", labeled.dim(0))));
    }
    if nl + nu == 0 {
        return Err(Error::Empty("mixmatch called with no samples".into()));
    }
    let c = model.num_classes();
    if let Some(t) = targets.iter().find(|t| t.len() != c) {
        return Err(Error::Shape(format!("target of length {} for a {c}-class model", t.len())));
    }
    if nl > 0 {
        check_images(labeled, model)?;
    }
    if nu > 0 {
        check_images(unlabeled, model)?;
    }

    let lt: Vec<Dihedral> = (0..nl).map(|_| Dihedral::random(rng)).collect();
    let xl = if nl > 0 { augment_batch(labeled, &lt) } else { labeled.clone() };

    let (xu, qu) = if nu > 0 {
        let g = guess_labels_with_rng(model, unlabeled, config.k, config.t, rng)?;
        let mut xu = g.augmented[0].clone();
        for a in &g.augmented[1..] {
            xu = Tensor::concat(&xu, a)?;
        }
        // each augmented copy shares the guess of its source sample
        let qu: Vec<ProbVector> = (0..config.k).flat_map(|_| g.targets.iter().cloned()).collect();
        (xu, qu)
    } else {
        (unlabeled.clone(), Vec::new())
    };

    let all_x = if nl == 0 {
        xu.clone()
    } else if nu == 0 {
        xl.clone()
    } else {
        Tensor::concat(&xl, &xu)?
    };
    let all_p: Vec<&ProbVector> = targets.iter().chain(&qu).collect();
    let mut order: Vec<usize> = (0..all_p.len()).collect();
    order.shuffle(rng);

    let mut coefficients = Vec::with_capacity(order.len());
    let mut mix = |src_x: &Tensor, src_p: &[ProbVector], offset: usize| -> Result<(Tensor, Vec<ProbVector>)> {
        let mut xs = Vec::with_capacity(src_p.len());
        let mut ps = Vec::with_capacity(src_p.len());
        for i in 0..src_p.len() {
            let w = order[offset + i];
            let lam = sample_mix_coefficient(config.alpha, rng)?;
            let (x, p) = mixup_with(lam, src_x.item(i), &src_p[i], all_x.item(w), all_p[w])?;
            coefficients.push(lam);
            xs.push(x);
            ps.push(p);
        }
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&all_x.shape()[1..]);
        let t = if refs.is_empty() { Tensor::zeros(&shape) } else { Tensor::stack(&refs, &shape[1..])? };
        Ok((t, ps))
    };
    let (labeled_x, labeled_p) = mix(&xl, targets, 0)?;
    let (unlabeled_x, unlabeled_q) = mix(&xu, &qu, nl)?;
    Ok(MixedBatch {
        labeled_x,
        labeled_p,
        unlabeled_x,
        unlabeled_q,
        coefficients,
    })
}
