//! Combined labeled cross-entropy + weighted squared-error objective.

use crate::prob::{cross_entropy, log_softmax, softmax, ProbVector, LOG_FLOOR};
use crate::{Error, Result};

/// Value of the combined objective and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslLoss {
    pub total: f64,
    /// Mean cross-entropy over the mixed labeled set.
    pub labeled: f64,
    /// Unweighted `(1/(C|U|)) sum ||q - q_pred||^2`.
    pub unlabeled: f64,
}

fn check_pairs(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

fn squared_error(q: &[f64], q_pred: &[f64]) -> f64 {
    q.iter().zip(q_pred).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Combined loss on probability predictions.
pub fn ssl_loss(
    pred_l: &[ProbVector],
    targets_l: &[ProbVector],
    pred_u: &[ProbVector],
    targets_u: &[ProbVector],
    lambda: f64,
    classes: usize,
) -> Result<SslLoss> {
    if pred_l.is_empty() {
        return Err(Error::Empty("ssl loss needs at least one labeled sample".into()));
    }
    check_pairs(pred_l.len(), targets_l.len(), "labeled")?;
    check_pairs(pred_u.len(), targets_u.len(), "unlabeled")?;
    let all = pred_l.iter().chain(targets_l).chain(pred_u).chain(targets_u);
    if let Some(bad) = all.clone().find(|p| p.len() != classes) {
        return Err(Error::Shape(format!("vector of length {} with C = {classes}", bad.len())));
    }
    let labeled = pred_l
        .iter()
        .zip(targets_l)
        .map(|(p, t)| cross_entropy(t.as_slice(), p.as_slice()))
        .sum::<f64>()
        / pred_l.len() as f64;
    let unlabeled = if pred_u.is_empty() {
        0.0
    } else {
        pred_u
            .iter()
            .zip(targets_u)
            .map(|(p, q)| squared_error(q.as_slice(), p.as_slice()))
            .sum::<f64>()
            / (classes * pred_u.len()) as f64
    };
    Ok(SslLoss {
        total: labeled + lambda * unlabeled,
        labeled,
        unlabeled,
    })
}

/// Gradient of [`ssl_loss`] with respect to the probability predictions,
/// flattened row-major. The log floor is treated as a constant.
pub fn ssl_loss_prob_grad(
    pred_l: &[ProbVector],
    targets_l: &[ProbVector],
    pred_u: &[ProbVector],
    targets_u: &[ProbVector],
    lambda: f64,
    classes: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ssl_loss(pred_l, targets_l, pred_u, targets_u, lambda, classes)?;
    let nl = pred_l.len() as f64;
    let gl = pred_l
        .iter()
        .zip(targets_l)
        .flat_map(|(p, t)| {
            p.as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&pp, &tt)| if pp > LOG_FLOOR { -tt / pp / nl } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    let scale = 2.0 * lambda / (classes * pred_u.len().max(1)) as f64;
    let gu = pred_u
        .iter()
        .zip(targets_u)
        .flat_map(|(p, q)| {
            p.as_slice()
                .iter()
                .zip(q.as_slice())
                .map(|(a, b)| scale * (a - b))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((gl, gu))
}

/// Combined loss on raw logits with gradients for both logit blocks.
///
/// `logits_l` is `[|L|, C]` and `logits_u` is `[|U|, C]`, row-major.
pub fn ssl_loss_logits(
    logits_l: &[f64],
    targets_l: &[ProbVector],
    logits_u: &[f64],
    targets_u: &[ProbVector],
    lambda: f64,
    classes: usize,
) -> Result<(SslLoss, Vec<f64>, Vec<f64>)> {
    if targets_l.is_empty() && logits_l.is_empty() && targets_u.is_empty() {
        return Err(Error::Empty("ssl loss needs at least one sample".into()));
    }
    check_pairs(logits_l.len(), targets_l.len() * classes, "labeled logits")?;
    check_pairs(logits_u.len(), targets_u.len() * classes, "unlabeled logits")?;

    let nl = targets_l.len().max(1) as f64;
    let mut labeled = 0.0;
    let mut grad_l = vec![0.0; logits_l.len()];
    for ((row, t), g) in logits_l.chunks_exact(classes).zip(targets_l).zip(grad_l.chunks_exact_mut(classes)) {
        let ls = log_softmax(row);
        let t = t.as_slice();
        labeled -= t.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
        let t_sum: f64 = t.iter().sum();
        for j in 0..classes {
            g[j] = (ls[j].exp() * t_sum - t[j]) / nl;
        }
    }
    labeled /= nl;

    let nu = targets_u.len();
    let mut unlabeled = 0.0;
    let mut grad_u = vec![0.0; logits_u.len()];
    if nu > 0 {
        let norm = (classes * nu) as f64;
        for ((row, q), g) in logits_u.chunks_exact(classes).zip(targets_u).zip(grad_u.chunks_exact_mut(classes)) {
            let p = softmax(row);
            let q = q.as_slice();
            unlabeled += squared_error(q, &p);
            // d/dp, then through the softmax Jacobian
            let gp: Vec<f64> = p.iter().zip(q).map(|(a, b)| 2.0 * (a - b) * lambda / norm).collect();
            let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
            for j in 0..classes {
                g[j] = p[j] * (gp[j] - dot);
            }
        }
        unlabeled /= norm;
    }
    Ok((
        SslLoss {
            total: labeled + lambda * unlabeled,
            labeled,
            unlabeled,
        },
        grad_l,
        grad_u,
    ))
}
