//! Four-class cross-entropy plus a weighted cross-entropy on the folded
//! subtype distribution.

use serde::{Deserialize, Serialize};

use crate::prob::{log_softmax, ProbVector, LOG_FLOOR};
use crate::slide_io::Subtype;
use crate::{Error, Result};

/// Patch label `y` (0 = normal, otherwise a subtype index) and the slide
/// diagnosis `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridTarget {
    pub y: usize,
    pub z: usize,
}

impl HybridTarget {
    pub fn new(y: usize, z: usize) -> Result<Self> {
        if z == 0 {
            return Err(Error::Config("subtype label z must be >= 1".into()));
        }
        if y != 0 && y != z {
            return Err(Error::Config(format!("cancer label y = {y} disagrees with diagnosis z = {z}")));
        }
        Ok(HybridTarget { y, z })
    }

    pub fn from_subtype(cancer: bool, diagnosis: Subtype) -> Self {
        let z = diagnosis.class_index();
        HybridTarget {
            y: if cancer { z } else { 0 },
            z,
        }
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.z == 0 || self.z >= classes || self.y >= classes || (self.y != 0 && self.y != self.z) {
            return Err(Error::Config(format!("invalid target {self:?} for {classes} classes")));
        }
        Ok(())
    }
}

/// Subtype distribution with the normal mass moved onto subtype `z`:
/// `s_i = p_i` for `i != z` and `s_z = p_z + p_0`.
pub fn fold_subtype_probs(p: &ProbVector, z: usize) -> Result<ProbVector> {
    let v = p.as_slice();
    if z == 0 || z >= v.len() {
        return Err(Error::Config(format!("subtype index {z} outside 1..{}", v.len() - 1)));
    }
    let mut s = v[1..].to_vec();
    s[z - 1] += v[0];
    Ok(ProbVector::from_trusted(s))
}

fn validate_batch(preds: usize, targets: &[HybridTarget], classes: usize) -> Result<()> {
    if preds != targets.len() {
        return Err(Error::Shape(format!("{preds} predictions vs {} targets", targets.len())));
    }
    if targets.is_empty() {
        return Err(Error::Empty("hybrid loss on an empty batch".into()));
    }
    targets.iter().try_for_each(|t| t.check(classes))
}

fn floored_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// Mean of `H(p, p_pred) + mu * H(s, s_pred)` with one-hot `p` and `s`.
pub fn hybrid_loss(preds: &[ProbVector], targets: &[HybridTarget], mu: f64) -> Result<f64> {
    let classes = preds.first().map_or(0, |p| p.len());
    validate_batch(preds.len(), targets, classes)?;
    if let Some(p) = preds.iter().find(|p| p.len() != classes) {
        return Err(Error::Shape(format!("mixed class counts {} and {classes}", p.len())));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let v = p.as_slice();
        let four = -floored_ln(v[t.y]);
        let sub = if mu == 0.0 { 0.0 } else { -floored_ln(v[0] + v[t.z]) };
        total += four + mu * sub;
    }
    Ok(total / preds.len() as f64)
}

/// Gradient of [`hybrid_loss`] with respect to the probabilities,
/// row-major. The log floor is treated as a constant.
pub fn hybrid_loss_prob_grad(preds: &[ProbVector], targets: &[HybridTarget], mu: f64) -> Result<Vec<f64>> {
    hybrid_loss(preds, targets, mu)?;
    let n = preds.len() as f64;
    let classes = preds[0].len();
    let mut g = vec![0.0; preds.len() * classes];
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        let v = p.as_slice();
        let row = &mut g[i * classes..(i + 1) * classes];
        if v[t.y] > LOG_FLOOR {
            row[t.y] -= 1.0 / (v[t.y] * n);
        }
        let s = v[0] + v[t.z];
        if mu != 0.0 && s > LOG_FLOOR {
            row[0] -= mu / (s * n);
            row[t.z] -= mu / (s * n);
        }
    }
    Ok(g)
}

/// Loss and gradient with respect to logits `[n, C]`.
pub fn hybrid_loss_logits(logits: &[f64], targets: &[HybridTarget], mu: f64, classes: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() * classes {
        return Err(Error::Shape(format!("{} logits for {} targets of {classes} classes", logits.len(), targets.len())));
    }
    validate_batch(targets.len(), targets, classes)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, t), g) in logits.chunks_exact(classes).zip(targets).zip(grad.chunks_exact_mut(classes)) {
        let ls = log_softmax(row);
        let p: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
        // log(p_0 + p_z) without underflow
        let m = ls[0].max(ls[t.z]);
        let log_s = m + ((ls[0] - m).exp() + (ls[t.z] - m).exp()).ln();
        loss += -ls[t.y] - mu * log_s;
        let share0 = (ls[0] - log_s).exp();
        let share_z = (ls[t.z] - log_s).exp();
        for j in 0..classes {
            let onehot = (j == t.y) as u8 as f64;
            let fold = if j == 0 {
                share0
            } else if j == t.z {
                share_z
            } else {
                0.0
            };
            g[j] = ((p[j] - onehot) + mu * (p[j] - fold)) / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::cross_entropy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn t(y: usize, z: usize) -> HybridTarget {
        HybridTarget::new(y, z).unwrap()
    }

    #[test]
    fn folding_examples() {
        let s = fold_subtype_probs(&pv(&[0.4, 0.3, 0.2, 0.1]), 1).unwrap();
        for (a, b) in s.as_slice().iter().zip([0.7, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fold_subtype_probs(&pv(&[1.0, 0.0, 0.0, 0.0]), 2).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(fold_subtype_probs(&ProbVector::uniform(4), 3).unwrap().as_slice(), &[0.25, 0.25, 0.5]);
        assert!(fold_subtype_probs(&ProbVector::uniform(4), 0).is_err());
        assert!(fold_subtype_probs(&ProbVector::uniform(4), 4).is_err());
    }

    #[test]
    fn hand_computed_values() {
        let l = hybrid_loss(&[ProbVector::uniform(4)], &[t(1, 1)], 5.0).unwrap();
        assert!((l - 4.85203).abs() < 1e-5, "{l}");
        let cross = hybrid_loss(&[pv(&[0.1, 0.1, 0.7, 0.1])], &[t(1, 1)], 5.0).unwrap();
        let normal = hybrid_loss(&[pv(&[0.7, 0.1, 0.1, 0.1])], &[t(1, 1)], 5.0).unwrap();
        assert!((cross - 10.34976).abs() < 1e-4, "{cross}");
        assert!((normal - 3.41830).abs() < 1e-4, "{normal}");
        assert!(cross > normal);
    }

    #[test]
    fn zero_mu_is_cross_entropy() {
        let preds = [pv(&[0.1, 0.2, 0.3, 0.4]), pv(&[0.6, 0.2, 0.1, 0.1])];
        let targets = [t(3, 3), t(0, 2)];
        let ce = (cross_entropy(&[0.0, 0.0, 0.0, 1.0], preds[0].as_slice())
            + cross_entropy(&[1.0, 0.0, 0.0, 0.0], preds[1].as_slice()))
            / 2.0;
        assert!((hybrid_loss(&preds, &targets, 0.0).unwrap() - ce).abs() <= 1e-12);
    }

    #[test]
    fn invalid_targets_rejected() {
        assert!(HybridTarget::new(2, 1).is_err());
        assert!(HybridTarget::new(0, 0).is_err());
        assert!(hybrid_loss(&[ProbVector::uniform(4)], &[], 1.0).is_err());
        assert!(hybrid_loss(&[ProbVector::uniform(4)], &[HybridTarget { y: 0, z: 4 }], 1.0).is_err());
    }

    #[test]
    fn logits_agree_with_probabilities() {
        let logits = [0.3, -1.2, 2.0, 0.5, 1.0, 1.0, -0.5, 0.0];
        let targets = [t(2, 2), t(0, 3)];
        let probs: Vec<_> = logits.chunks(4).map(ProbVector::from_logits).collect();
        let (a, _) = hybrid_loss_logits(&logits, &targets, 5.0, 4).unwrap();
        let b = hybrid_loss(&probs, &targets, 5.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = rng.random_range(1..5);
            let targets: Vec<_> = (0..n)
                .map(|_| {
                    let z = rng.random_range(1..4);
                    t(if rng.random_bool(0.5) { z } else { 0 }, z)
                })
                .collect();
            let logits: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu = rng.random_range(0.0..10.0);
            let (_, g) = hybrid_loss_logits(&logits, &targets, mu, 4).unwrap();
            let h = 1e-6;
            for i in 0..logits.len() {
                let (mut p, mut m) = (logits.clone(), logits.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (hybrid_loss_logits(&p, &targets, mu, 4).unwrap().0 - hybrid_loss_logits(&m, &targets, mu, 4).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn folding_conserves_mass(raw in proptest::collection::vec(0.0f64..1.0, 4), z in 1usize..4) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-3);
            let s: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            let f = fold_subtype_probs(&p, z).unwrap();
            prop_assert!(ProbVector::new(f.as_slice().to_vec()).is_ok());
            prop_assert!((f.as_slice().iter().sum::<f64>() - p.as_slice().iter().sum::<f64>()).abs() < 1e-6);
        }

        #[test]
        fn monotone_in_mu(raw in proptest::collection::vec(0.01f64..1.0, 4), z in 1usize..4, mu in 0.0f64..10.0, dmu in 0.0f64..10.0) {
            let s: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            let a = hybrid_loss(std::slice::from_ref(&p), &[t(z, z)], mu).unwrap();
            let b = hybrid_loss(&[p], &[t(z, z)], mu + dmu).unwrap();
            prop_assert!(b >= a);
        }
    }
}
