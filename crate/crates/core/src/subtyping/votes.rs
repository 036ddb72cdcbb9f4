//! Slide-level decisions from patch predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::predict_patches;
use crate::nn::ProbModel;
use crate::patching::{PatchRecord, PatchStore};
use crate::prob::ProbVector;
use crate::slide_io::Subtype;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    /// Argmax class per patch in the model's label space.
    pub patch_classes: Vec<usize>,
    pub patch_probs: Vec<ProbVector>,
    /// Votes per model class, normal included when present.
    pub votes: Vec<usize>,
    pub has_normal: bool,
    pub subtype: Subtype,
    /// More than one subtype shared the top vote count.
    pub tie: bool,
    /// Every patch was predicted normal.
    pub fallback: bool,
}

impl SlidePrediction {
    pub fn verdict(&self) -> SlideVerdict {
        let mut votes = BTreeMap::new();
        let offset = self.has_normal as usize;
        if self.has_normal {
            votes.insert("normal".to_string(), self.votes[0]);
        }
        for s in Subtype::ALL {
            votes.insert(s.name().to_string(), self.votes[s.class_index() - 1 + offset]);
        }
        SlideVerdict {
            slide_id: self.slide_id.clone(),
            subtype: self.subtype,
            votes,
            fallback: self.fallback,
            tie: self.tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideVerdict {
    pub slide_id: String,
    pub subtype: Subtype,
    pub votes: BTreeMap<String, usize>,
    pub fallback: bool,
    pub tie: bool,
}

/// Majority vote over non-normal patch predictions. Ties go to the larger
/// summed probability, then to the fixed subtype order; a slide with only
/// normal votes takes the subtype with the highest mean probability.
pub fn aggregate_votes(slide_id: &str, probs: &[ProbVector], has_normal: bool) -> Result<SlidePrediction> {
    let Some(first) = probs.first() else {
        return Err(Error::Empty(format!("no patch predictions for slide {slide_id}")));
    };
    let classes = first.len();
    let offset = has_normal as usize;
    if classes != Subtype::ALL.len() + offset {
        return Err(Error::Shape(format!("{classes}-class predictions (normal class: {has_normal})")));
    }
    if probs.iter().any(|p| p.len() != classes) {
        return Err(Error::Shape("mixed class counts in one slide".into()));
    }
    let patch_classes: Vec<usize> = probs.iter().map(|p| p.argmax()).collect();
    let mut votes = vec![0usize; classes];
    for &c in &patch_classes {
        votes[c] += 1;
    }
    let mut sums = vec![0.0f64; classes];
    for p in probs {
        for (s, v) in sums.iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    let subtype_classes: Vec<usize> = (offset..classes).collect();
    let top = subtype_classes.iter().map(|&c| votes[c]).max().unwrap_or(0);
    let (winner, tie, fallback) = if top == 0 {
        // sums and means rank identically
        (pick_max(&subtype_classes, &sums), false, true)
    } else {
        let tied: Vec<usize> = subtype_classes.iter().copied().filter(|&c| votes[c] == top).collect();
        (pick_max(&tied, &sums), tied.len() > 1, false)
    };
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        patch_classes,
        patch_probs: probs.to_vec(),
        votes,
        has_normal,
        subtype: Subtype::from_class_index(winner + 1 - offset).expect("subtype class"),
        tie,
        fallback,
    })
}

/// Candidate with the largest score; earlier candidates win exact ties.
fn pick_max(candidates: &[usize], score: &[f64]) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if score[c] > score[best] {
            best = c;
        }
    }
    best
}

/// One patch of the evidential map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidentialPatch {
    pub x: u32,
    pub y: u32,
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Runs the model over one slide's patches and aggregates the votes.
pub fn predict_slide(
    model: &mut dyn ProbModel,
    store: &PatchStore,
    records: &[PatchRecord],
    has_normal: bool,
) -> Result<(SlidePrediction, Vec<EvidentialPatch>)> {
    let Some(first) = records.first() else {
        return Err(Error::Empty("slide has no tissue patches".into()));
    };
    if let Some(r) = records.iter().find(|r| r.slide_id != first.slide_id) {
        return Err(Error::Config(format!("records from slides {} and {}", first.slide_id, r.slide_id)));
    }
    let probs = predict_patches(model, store, records)?;
    let pred = aggregate_votes(&first.slide_id, &probs, has_normal)?;
    let evidence = records
        .iter()
        .zip(&pred.patch_classes)
        .zip(&probs)
        .map(|((r, &class), p)| EvidentialPatch {
            x: r.x,
            y: r.y,
            class,
            probs: p.as_slice().to_vec(),
        })
        .collect();
    Ok((pred, evidence))
}

const CLASS_COLOURS: [[u8; 3]; 4] = [[235, 235, 235], [220, 60, 60], [60, 160, 60], [60, 90, 220]];

/// One pixel per `cell` base pixels; each patch window is painted in its
/// predicted class colour (light grey for normal, grey for no patch).
pub fn evidential_overlay(
    evidence: &[EvidentialPatch],
    window: u32,
    width: u32,
    height: u32,
    cell: u32,
    has_normal: bool,
) -> image::RgbImage {
    let cell = cell.max(1);
    let (w, h) = (width.div_ceil(cell).max(1), height.div_ceil(cell).max(1));
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([128, 128, 128]));
    let offset = (!has_normal) as usize;
    for e in evidence {
        let colour = CLASS_COLOURS[(e.class + offset).min(3)];
        for py in e.y / cell..((e.y + window).div_ceil(cell)).min(h) {
            for px in e.x / cell..((e.x + window).div_ceil(cell)).min(w) {
                img.put_pixel(px, py, image::Rgb(colour));
            }
        }
    }
    img
}

/// Writes `<slide>.evidence.jsonl`, `<slide>.verdict.json` and
/// `<slide>.overlay.png` into `dir`.
pub fn write_slide_outputs(
    dir: &Path,
    pred: &SlidePrediction,
    evidence: &[EvidentialPatch],
    overlay: &image::RgbImage,
    header: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut jsonl = serde_json::to_string(&serde_json::json!({ "header": header }))?;
    jsonl.push('\n');
    for e in evidence {
        let _ = writeln!(jsonl, "{}", serde_json::to_string(e)?);
    }
    let p = dir.join(format!("{}.evidence.jsonl", pred.slide_id));
    std::fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))?;
    let mut verdict = serde_json::to_value(pred.verdict())?;
    verdict["header"] = header.clone();
    let p = dir.join(format!("{}.verdict.json", pred.slide_id));
    std::fs::write(&p, serde_json::to_string_pretty(&verdict)? + "\n").map_err(|e| Error::io(&p, e))?;
    overlay.save(dir.join(format!("{}.overlay.png", pred.slide_id)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn peaked(class: usize, strength: f64) -> ProbVector {
        let mut v = vec![(1.0 - strength) / 3.0; 4];
        v[class] = strength;
        ProbVector::new(v).unwrap()
    }

    #[test]
    fn normals_are_ignored() {
        let classes = [1, 1, 2, 0, 0, 1, 3];
        let probs: Vec<_> = classes.iter().map(|&c| peaked(c, 0.7)).collect();
        let p = aggregate_votes("s", &probs, true).unwrap();
        assert_eq!(p.subtype, Subtype::Clear);
        assert_eq!(p.votes, vec![2, 3, 1, 1]);
        assert!(!p.tie && !p.fallback);
    }

    #[test]
    fn tie_broken_by_summed_probability() {
        // one cc vote and one p vote; cc mass 0.8 + 0.4, p mass 0.1 + 0.5
        let a = ProbVector::new(vec![0.0, 0.8, 0.1, 0.1]).unwrap();
        let b = ProbVector::new(vec![0.0, 0.4, 0.5, 0.1]).unwrap();
        let p = aggregate_votes("s", &[a, b], true).unwrap();
        assert!(p.tie);
        assert_eq!(p.subtype, Subtype::Clear);

        let a = ProbVector::new(vec![0.0, 0.5, 0.4, 0.1]).unwrap();
        let b = ProbVector::new(vec![0.0, 0.1, 0.8, 0.1]).unwrap();
        assert_eq!(aggregate_votes("s", &[a, b], true).unwrap().subtype, Subtype::Papillary);
    }

    #[test]
    fn exact_tie_uses_subtype_order() {
        let a = ProbVector::new(vec![0.0, 0.0, 0.6, 0.4]).unwrap();
        let b = ProbVector::new(vec![0.0, 0.0, 0.4, 0.6]).unwrap();
        let p = aggregate_votes("s", &[a, b], true).unwrap();
        assert!(p.tie);
        assert_eq!(p.subtype, Subtype::Papillary);
    }

    #[test]
    fn all_normal_falls_back_to_mean_probability() {
        let probs = vec![
            ProbVector::new(vec![0.7, 0.05, 0.05, 0.2]).unwrap(),
            ProbVector::new(vec![0.6, 0.1, 0.2, 0.1]).unwrap(),
        ];
        let p = aggregate_votes("s", &probs, true).unwrap();
        assert!(p.fallback);
        assert_eq!(p.subtype, Subtype::Chromophobe);
        assert_eq!(p.votes.iter().sum::<usize>(), 2);
    }

    #[test]
    fn three_class_layout() {
        let probs = vec![ProbVector::new(vec![0.1, 0.2, 0.7]).unwrap(); 3];
        let p = aggregate_votes("s", &probs, false).unwrap();
        assert_eq!(p.subtype, Subtype::Chromophobe);
        assert_eq!(p.verdict().votes["chRCC"], 3);
        assert!(!p.verdict().votes.contains_key("normal"));
    }

    #[test]
    fn empty_is_error() {
        assert!(aggregate_votes("s", &[], true).is_err());
        assert!(aggregate_votes("s", &[ProbVector::uniform(3)], true).is_err());
    }

    /// Independent recount: counts by scanning classes in order.
    fn oracle(probs: &[ProbVector]) -> (Subtype, bool, bool) {
        let mut counts = [0usize; 4];
        let mut sums = [0.0f64; 4];
        for p in probs {
            let v = p.as_slice();
            let mut arg = 0;
            for c in 1..4 {
                if v[c] > v[arg] {
                    arg = c;
                }
            }
            counts[arg] += 1;
            for c in 0..4 {
                sums[c] += v[c];
            }
        }
        let best = *counts[1..].iter().max().unwrap();
        let (cands, fallback): (Vec<usize>, bool) =
            if best == 0 { ((1..4).collect(), true) } else { ((1..4).filter(|&c| counts[c] == best).collect(), false) };
        let mut win = cands[0];
        for &c in &cands {
            if sums[c] > sums[win] {
                win = c;
            }
        }
        (Subtype::from_class_index(win).unwrap(), !fallback && cands.len() > 1, fallback)
    }

    #[test]
    fn matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            let probs: Vec<ProbVector> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(1..6) as f64).collect();
                    let s: f64 = raw.iter().sum();
                    ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
                })
                .collect();
            let p = aggregate_votes("s", &probs, true).unwrap();
            assert_eq!((p.subtype, p.tie, p.fallback), oracle(&probs));
            assert_eq!(p.votes.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn overlay_dimensions() {
        let ev = vec![EvidentialPatch {
            x: 0,
            y: 0,
            class: 2,
            probs: vec![0.0, 0.0, 1.0, 0.0],
        }];
        let img = evidential_overlay(&ev, 64, 256, 128, 16, true);
        assert_eq!(img.dimensions(), (16, 8));
        assert_eq!(img.get_pixel(0, 0).0, CLASS_COLOURS[2]);
        assert_eq!(img.get_pixel(10, 5).0, [128, 128, 128]);
    }
}
