//! Exact identities, hand values, gradients, oracles and sampling bounds.

use minpoint::metrics::auc;
use minpoint::prob::{cross_entropy, softmax, ProbVector};
use minpoint::slide_io::Polygon;
use minpoint::ssl::{sample_mix_coefficient, sharpen, ssl_loss, ssl_loss_logits};
use minpoint::subtyping::{aggregate_votes, fold_subtype_probs, hybrid_loss, hybrid_loss_logits, HybridTarget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::report;

fn random_simplex(rng: &mut impl Rng, n: usize) -> ProbVector {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

fn random_target(rng: &mut impl Rng) -> HybridTarget {
    let z = rng.random_range(1..4);
    let y = if rng.random_bool(0.5) { 0 } else { z };
    HybridTarget::new(y, z).unwrap()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

#[test]
fn a1_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_h = 0.0f64;
    let mut worst_s = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let preds: Vec<ProbVector> = (0..n).map(|_| random_simplex(&mut rng, 4)).collect();
        let targets: Vec<HybridTarget> = (0..n).map(|_| random_target(&mut rng)).collect();
        let h = hybrid_loss(&preds, &targets, 0.0).unwrap();
        let ce: f64 = preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| cross_entropy(ProbVector::one_hot(t.y, 4).as_slice(), p.as_slice()))
            .sum::<f64>()
            / n as f64;
        worst_h = worst_h.max((h - ce).abs());

        let c = rng.random_range(2..5);
        let pl: Vec<ProbVector> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let tl: Vec<ProbVector> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let pu: Vec<ProbVector> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let tu: Vec<ProbVector> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let s = ssl_loss(&pl, &tl, &pu, &tu, 0.0, c).unwrap();
        let lce: f64 = pl.iter().zip(&tl).map(|(p, t)| cross_entropy(t.as_slice(), p.as_slice())).sum::<f64>() / n as f64;
        worst_s = worst_s.max((s.total - lce).abs());
    }
    let pass = worst_h <= 1e-12 && worst_s <= 1e-12;
    report(1, "loss identities", pass, &format!("max |hybrid(mu=0)-CE| {worst_h:.2e}, max |ssl(lambda=0)-CE| {worst_s:.2e}"));
    assert!(pass);
}

#[test]
fn a2_folding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut worst_mass = 0.0f64;
    let mut worst_inv = 0.0f64;
    for _ in 0..10_000 {
        let p = random_simplex(&mut rng, 4);
        let z = rng.random_range(1..4);
        let s = fold_subtype_probs(&p, z).unwrap();
        ok &= s.len() == 3 && s.as_slice().iter().all(|v| (0.0..=1.0).contains(v));
        let sum_s: f64 = s.as_slice().iter().sum();
        let sum_p: f64 = p.as_slice().iter().sum();
        worst_mass = worst_mass.max((sum_s - sum_p).abs());

        // move a random share of mass between normal and the true subtype
        let v = p.as_slice();
        let total = v[0] + v[z];
        let share = rng.random_range(0.0..=1.0);
        let mut moved = v.to_vec();
        moved[0] = share * total;
        moved[z] = total - moved[0];
        let q = ProbVector::new(moved).unwrap();
        let h = |x: &ProbVector| cross_entropy(ProbVector::one_hot(z - 1, 3).as_slice(), fold_subtype_probs(x, z).unwrap().as_slice());
        worst_inv = worst_inv.max((h(&p) - h(&q)).abs());
    }
    let pass = ok && worst_mass <= 1e-6 && worst_inv <= 1e-9;
    report(2, "folding", pass, &format!("simplex ok {ok}, max mass error {worst_mass:.2e}, max invariance error {worst_inv:.2e}"));
    assert!(pass);
}

#[test]
fn a3_hand_values() {
    let pv = |v: &[f64]| ProbVector::new(v.to_vec()).unwrap();
    let t = HybridTarget::new(1, 1).unwrap();
    let uniform = hybrid_loss(&[ProbVector::uniform(4)], &[t], 5.0).unwrap();
    let ssl = ssl_loss(&[pv(&[0.8, 0.2])], &[pv(&[1.0, 0.0])], &[pv(&[0.5, 0.5])], &[pv(&[0.6, 0.4])], 1.0, 2)
        .unwrap()
        .total;
    let cross = hybrid_loss(&[pv(&[0.1, 0.1, 0.7, 0.1])], &[t], 5.0).unwrap();
    let normal = hybrid_loss(&[pv(&[0.7, 0.1, 0.1, 0.1])], &[t], 5.0).unwrap();
    let pass = (uniform - 4.85203).abs() <= 1e-5
        && (ssl - 0.23314).abs() <= 1e-5
        && (cross - 10.34976).abs() <= 1e-4
        && (normal - 3.41830).abs() <= 1e-4
        && cross > normal;
    report(
        3,
        "hand-derived values",
        pass,
        &format!("hybrid {uniform:.5}, ssl {ssl:.5}, cross-subtype {cross:.5} vs predicted-normal {normal:.5}"),
    );
    assert!(pass);
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn a4_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_h = 0.0f64;
    let mut worst_s = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let logits: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<HybridTarget> = (0..n).map(|_| random_target(&mut rng)).collect();
        let mu = rng.random_range(0.0..8.0);
        let (_, g) = hybrid_loss_logits(&logits, &targets, mu, 4).unwrap();
        let fd = numeric_grad(|x| hybrid_loss_logits(x, &targets, mu, 4).unwrap().0, &logits);
        worst_h = worst_h.max(rel_error(&g, &fd));

        let c = rng.random_range(2..5);
        let nl = rng.random_range(1..5);
        let nu = rng.random_range(1..5);
        let ll: Vec<f64> = (0..nl * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lu: Vec<f64> = (0..nu * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tl: Vec<ProbVector> = (0..nl).map(|_| random_simplex(&mut rng, c)).collect();
        let tu: Vec<ProbVector> = (0..nu).map(|_| random_simplex(&mut rng, c)).collect();
        let lambda = rng.random_range(0.0..30.0);
        let (_, gl, gu) = ssl_loss_logits(&ll, &tl, &lu, &tu, lambda, c).unwrap();
        let joined: Vec<f64> = ll.iter().chain(&lu).copied().collect();
        let fd = numeric_grad(
            |x| {
                let (a, b) = x.split_at(nl * c);
                ssl_loss_logits(a, &tl, b, &tu, lambda, c).unwrap().0.total
            },
            &joined,
        );
        let g: Vec<f64> = gl.iter().chain(&gu).copied().collect();
        worst_s = worst_s.max(rel_error(&g, &fd));
    }
    let pass = worst_h <= 1e-4 && worst_s <= 1e-4;
    report(4, "gradient checks", pass, &format!("max relative error hybrid {worst_h:.2e}, ssl {worst_s:.2e}"));
    assert!(pass);
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Counting oracle for the slide vote.
fn vote_oracle(probs: &[ProbVector], has_normal: bool) -> (usize, bool) {
    let off = has_normal as usize;
    let c = probs[0].len();
    let mut counts = vec![0usize; c];
    let mut mass = vec![0.0f64; c];
    for p in probs {
        let v = p.as_slice();
        let top = (0..c).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        counts[top] += 1;
        for i in 0..c {
            mass[i] += v[i];
        }
    }
    let best = (off..c).map(|i| counts[i]).max().unwrap();
    let pool: Vec<usize> = if best == 0 { (off..c).collect() } else { (off..c).filter(|&i| counts[i] == best).collect() };
    let win = pool.iter().copied().fold(pool[0], |b, i| if mass[i] > mass[b] { i } else { b });
    (win - off + 1, best == 0)
}

fn on_segment(a: [i64; 2], b: [i64; 2], p: [i64; 2]) -> bool {
    let cross = (b[0] - a[0]) as i128 * (p[1] - a[1]) as i128 - (b[1] - a[1]) as i128 * (p[0] - a[0]) as i128;
    cross == 0 && p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Even-odd ray casting to +x with boundary points counted inside.
fn ray_cast(v: &[[i64; 2]], p: [i64; 2]) -> bool {
    let n = v.len();
    if (0..n).any(|i| on_segment(v[i], v[(i + 1) % n], p)) {
        return true;
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            // x of the crossing compared exactly: p.x < a.x + (p.y-a.y)(b.x-a.x)/(b.y-a.y)
            let num = (p[1] - a[1]) as i128 * (b[0] - a[0]) as i128;
            let den = (b[1] - a[1]) as i128;
            let lhs = (p[0] - a[0]) as i128 * den;
            let crosses = if den > 0 { lhs < num } else { lhs > num };
            if crosses {
                inside = !inside;
            }
        }
    }
    inside
}

fn random_star_polygon(rng: &mut impl Rng) -> Polygon {
    loop {
        let n = rng.random_range(3..12);
        let (cx, cy) = (rng.random_range(-50..50), rng.random_range(-50..50));
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts: Vec<[i64; 2]> = angles
            .iter()
            .map(|a| {
                let r = rng.random_range(3.0..40.0);
                [cx + (r * a.cos()).round() as i64, cy + (r * a.sin()).round() as i64]
            })
            .collect();
        if let Ok(p) = Polygon::new(verts) {
            return p;
        }
    }
}

#[test]
fn a5_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_auc = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        worst_auc = worst_auc.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
    }

    let mut vote_mismatch = 0;
    for trial in 0..1000 {
        let has_normal = trial % 2 == 0;
        let c = 3 + has_normal as usize;
        let n = rng.random_range(1..15);
        let probs: Vec<ProbVector> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(1..5) as f64).collect();
                let s: f64 = raw.iter().sum();
                ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let got = aggregate_votes("s", &probs, has_normal).unwrap();
        let (want, fallback) = vote_oracle(&probs, has_normal);
        if got.subtype.class_index() != want || got.fallback != fallback {
            vote_mismatch += 1;
        }
    }

    let mut pip_mismatch = 0;
    for _ in 0..10_000 {
        let poly = random_star_polygon(&mut rng);
        let (x0, y0, x1, y1) = poly.bbox();
        let p = [rng.random_range(x0 - 3..=x1 + 3), rng.random_range(y0 - 3..=y1 + 3)];
        if poly.contains(p[0], p[1]) != ray_cast(poly.vertices(), p) {
            pip_mismatch += 1;
        }
    }
    let pass = worst_auc <= 1e-9 && vote_mismatch == 0 && pip_mismatch == 0;
    report(
        5,
        "oracle equivalence",
        pass,
        &format!("max AUC error {worst_auc:.2e}, vote mismatches {vote_mismatch}/1000, point-in-polygon mismatches {pip_mismatch}/10000"),
    );
    assert!(pass);
}

#[test]
fn a6_sharpen_and_mixup() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut increases = 0;
    let mut identity_ok = true;
    for _ in 0..10_000 {
        let c = rng.random_range(2..8);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p = ProbVector::new(softmax(&logits)).unwrap();
        let t = rng.random_range(0.05..1.0);
        let s = sharpen(&p, t).unwrap();
        if entropy(s.as_slice()) > entropy(p.as_slice()) + 1e-12 {
            increases += 1;
        }
        identity_ok &= sharpen(&p, 1.0).unwrap().as_slice() == p.as_slice();
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..10_000 {
        let alpha = [0.75, 0.2, 1.0, 4.0][i % 4];
        let l = sample_mix_coefficient(alpha, &mut rng).unwrap();
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let pass = increases == 0 && identity_ok && lo >= 0.5 && hi <= 1.0;
    report(
        6,
        "sharpening and mixup",
        pass,
        &format!("entropy increases {increases}/10000, T=1 identity {identity_ok}, coefficients in [{lo:.4}, {hi:.4}]"),
    );
    assert!(pass);
}
