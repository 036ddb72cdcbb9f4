//! Browser demo: label sharpening and MixUp, hybrid-loss folding, and a
//! synthetic slide renderer, exported through wasm-bindgen.

use minpoint::prob::ProbVector;
use minpoint::slide_io::{generate_synthetic_slide, Polarity, Subtype, SyntheticSlideSpec};
use minpoint::ssl::{mixup_with, sample_mix_coefficient, sharpen};
use minpoint::subtyping::{fold_subtype_probs, hybrid_loss, HybridTarget};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn normalise(raw: &[f64]) -> Result<ProbVector, String> {
    let s: f64 = raw.iter().sum();
    if raw.is_empty() || raw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || s <= 0.0 {
        return Err("weights must be non-negative with a positive sum".into());
    }
    ProbVector::new(raw.iter().map(|v| v / s).collect()).map_err(|e| e.to_string())
}

pub fn sharpen_weights(weights: &[f64], t: f64) -> Result<Vec<f64>, String> {
    let p = normalise(weights)?;
    Ok(sharpen(&p, t).map_err(|e| e.to_string())?.into_inner())
}

/// Returns `[lambda, mixed...]`.
pub fn mixup_weights(a: &[f64], b: &[f64], alpha: f64, seed: u64) -> Result<Vec<f64>, String> {
    let (pa, pb) = (normalise(a)?, normalise(b)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam = sample_mix_coefficient(alpha, &mut rng).map_err(|e| e.to_string())?;
    let (_, mixed) = mixup_with(lam, &[], &pa, &[], &pb).map_err(|e| e.to_string())?;
    let mut out = vec![lam];
    out.extend(mixed.into_inner());
    Ok(out)
}

/// Returns `[s_cc, s_p, s_ch, loss]` for four-class weights, patch label
/// `y` and slide subtype `z`.
pub fn fold_and_loss(weights: &[f64], y: usize, z: usize, mu: f64) -> Result<Vec<f64>, String> {
    let p = normalise(weights)?;
    if p.len() != 4 {
        return Err("need four class weights (normal, ccRCC, pRCC, chRCC)".into());
    }
    let target = HybridTarget::new(y, z).map_err(|e| e.to_string())?;
    let s = fold_subtype_probs(&p, z).map_err(|e| e.to_string())?;
    let loss = hybrid_loss(&[p], &[target], mu).map_err(|e| e.to_string())?;
    let mut out = s.into_inner();
    out.push(loss);
    Ok(out)
}

/// RGBA pixels of a square synthetic slide, with region outlines tinted
/// and annotation points marked when `marks` is set.
pub fn render_rgba(size: u32, subtype: &str, seed: u64, marks: bool) -> Result<Vec<u8>, String> {
    if !(64..=1024).contains(&size) {
        return Err("size must be between 64 and 1024".into());
    }
    let subtype: Subtype = subtype.parse().map_err(|e: minpoint::Error| e.to_string())?;
    let mut spec = SyntheticSlideSpec::new("demo", size, size, subtype, seed);
    spec.num_regions = 2;
    spec.region_radius = [size / 10, size / 5];
    spec.texture_scale = size as f64 / 1024.0;
    let slide = generate_synthetic_slide(&spec).map_err(|e| e.to_string())?;
    let img = slide.render();
    let mut out = Vec::with_capacity(img.as_raw().len() / 3 * 4);
    for (i, px) in img.as_raw().chunks_exact(3).enumerate() {
        let (x, y) = ((i as u32 % size) as i64, (i as u32 / size) as i64);
        let edge = marks
            && slide.in_cancer(x, y)
            && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| !slide.in_cancer(x + dx, y + dy));
        if edge {
            out.extend_from_slice(&[20, 160, 60, 255]);
        } else {
            out.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
    }
    if marks {
        for p in &slide.suggested_points().points {
            let colour = match p.polarity {
                Polarity::Positive => [230, 30, 30, 255],
                Polarity::Negative => [30, 60, 230, 255],
            };
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    let (x, y) = (p.x + dx, p.y + dy);
                    if dx * dx + dy * dy <= 9 && x >= 0 && y >= 0 && x < size as i64 && y < size as i64 {
                        let i = (y as usize * size as usize + x as usize) * 4;
                        out[i..i + 4].copy_from_slice(&colour);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn sharpen_probs(weights: Vec<f64>, t: f64) -> Result<Vec<f64>, JsError> {
    sharpen_weights(&weights, t).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mixup_probs(a: Vec<f64>, b: Vec<f64>, alpha: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    mixup_weights(&a, &b, alpha, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn hybrid_fold(weights: Vec<f64>, y: usize, z: usize, mu: f64) -> Result<Vec<f64>, JsError> {
    fold_and_loss(&weights, y, z, mu).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn render_slide(size: u32, subtype: &str, seed: u32, marks: bool) -> Result<Vec<u8>, JsError> {
    render_rgba(size, subtype, seed as u64, marks).map_err(|e| JsError::new(&e))
}
