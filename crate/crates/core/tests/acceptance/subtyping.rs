//! Scaled subtyping comparison: ce_3class, ce_4class and hybrid_4class on
//! synthetic three-subtype slides, with detector-generated labels.

use std::collections::BTreeMap;
use std::time::Instant;

use minpoint::detector::{finetune_detector, train_detector, Checkpoint, DetectorInputs, Mode, PatchSet, TrainConfig};
use minpoint::nn::{ModelSpec, ProbModel};
use minpoint::patching::{build_detection_dataset, build_subtyping_dataset, PatchRecord};
use minpoint::slide_io::{Split, Subtype};
use minpoint::ssl::SslConfig;
use minpoint::subtyping::{generate_subtype_labels, predict_slide, train_subtyper, SubtypeConfig, SubtypeMode};

use crate::common::{note, report};
use crate::detection::{dataset_config, inputs, slide, store, OUT};

const SIZE: u32 = 1536;
const SUBTYPES: [Subtype; 3] = [Subtype::Clear, Subtype::Papillary, Subtype::Chromophobe];
const MODES: [SubtypeMode; 3] = [SubtypeMode::Ce3class, SubtypeMode::Ce4class, SubtypeMode::Hybrid4class];

fn detector_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 15,
        finetune_epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Slide verdicts, and subtype-to-other-subtype patch errors when the
/// model has a normal class.
fn score(
    ck: &mut Checkpoint,
    store: &minpoint::patching::PatchStore,
    test: &[PatchRecord],
    truth: &BTreeMap<String, Subtype>,
    has_normal: bool,
) -> (f64, usize) {
    let mut ids: Vec<&str> = test.iter().map(|r| r.slide_id.as_str()).collect();
    ids.dedup();
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let mut cross = 0;
    for id in ids {
        let recs: Vec<PatchRecord> = test.iter().filter(|r| r.slide_id == id).cloned().collect();
        let (pred, _) = predict_slide(ck, store, &recs, has_normal).unwrap();
        preds.push(pred.subtype.class_index() - 1);
        labels.push(truth[id].class_index() - 1);
        if has_normal {
            for (r, &c) in recs.iter().zip(&pred.patch_classes) {
                let y = r.label.four_class().unwrap();
                if y > 0 && c > 0 && c != y {
                    cross += 1;
                }
            }
        }
    }
    let f1 = minpoint::metrics::prf1(&preds, &labels, 3).unwrap().macro_f1;
    (f1, cross)
}

#[test]
fn a8_subtyping_ordering() {
    let start = Instant::now();
    let layout = [(Split::Training, 2), (Split::Extension, 2), (Split::Validation, 1), (Split::Test, 3)];
    let mut slides = Vec::new();
    for (si, s) in SUBTYPES.iter().enumerate() {
        for (split, n) in layout {
            for k in 0..n {
                let seed = 8000 + 100 * si as u64 + slides.len() as u64;
                slides.push(slide(&format!("{}_{}_{k}", s.tag(), split.name()), SIZE, *s, split, seed));
            }
        }
    }
    let all_store = store(&slides);
    let cfg = dataset_config();
    let ssl = SslConfig::for_classes(2);

    let mut detectors = BTreeMap::new();
    for s in SUBTYPES {
        let own: Vec<_> = slides.iter().filter(|(r, _)| r.diagnosis == s).cloned().collect();
        let ds = build_detection_dataset(&inputs(&own), &cfg).unwrap();
        let data = DetectorInputs::load(&ds, &all_store).unwrap();
        let spec = ModelSpec::small_cnn(2, OUT as usize, 11);
        let wof = train_detector(&data, &spec, &detector_config(Mode::Ssl), &ssl).unwrap();
        let ft = finetune_detector(wof, &data, &detector_config(Mode::SslFinetune), &ssl).unwrap();
        detectors.insert(s, ft);
    }
    note(&format!("detectors trained ({:.0}s)", start.elapsed().as_secs_f64()));

    let sub = build_subtyping_dataset(&inputs(&slides), &cfg).unwrap();
    let diag_train = PatchSet::from_manifest(&all_store, &sub.training, OUT as usize).unwrap();
    let validation = PatchSet::from_manifest(&all_store, &sub.validation, OUT as usize).unwrap();
    let threshold = SubtypeConfig::default().detector_threshold;
    let mut refs: BTreeMap<Subtype, &mut dyn ProbModel> =
        detectors.iter_mut().map(|(s, c)| (*s, c as &mut dyn ProbModel)).collect();
    let generated = generate_subtype_labels(&mut refs, &diag_train, threshold).unwrap();
    let label_train = PatchSet {
        records: generated.records.clone(),
        ..diag_train.clone()
    };
    let agree = generated
        .records
        .iter()
        .filter(|r| {
            let (x, y) = (r.x as i64 + cfg.geometry.src_size as i64 / 2, r.y as i64 + cfg.geometry.src_size as i64 / 2);
            let truth = slides.iter().find(|(rec, _)| rec.slide_id == r.slide_id).unwrap().1.in_cancer(x, y);
            truth == (r.label.four_class().unwrap() > 0)
        })
        .count();
    note(&format!(
        "subtype patches: training {} (generated labels agree with regions at centre on {agree}), validation {} test {}",
        label_train.len(),
        validation.len(),
        sub.test.len()
    ));

    let truth: BTreeMap<String, Subtype> = slides.iter().map(|(r, _)| (r.slide_id.clone(), r.diagnosis)).collect();
    let seeds = [0u64, 1, 2];
    let mut f1 = [0.0f64; 3];
    let mut cross = [0usize; 3];
    for &seed in &seeds {
        let mut line = format!("seed {seed}:");
        for (m, mode) in MODES.iter().enumerate() {
            let subtype = SubtypeConfig {
                mode: *mode,
                ..SubtypeConfig::default()
            };
            let train = TrainConfig {
                mode: Mode::FullySupervised,
                epochs: 15,
                seed,
                ..TrainConfig::default()
            };
            let spec = ModelSpec::small_cnn(mode.num_classes(), OUT as usize, seed);
            let set = if *mode == SubtypeMode::Ce3class { &diag_train } else { &label_train };
            let mut ck = train_subtyper(set, &validation, &spec, &subtype, &train).unwrap();
            let (f, c) = score(&mut ck, &all_store, sub.test.records(), &truth, mode.has_normal());
            f1[m] += f / seeds.len() as f64;
            cross[m] += c;
            line += &format!(" {} f1 {f:.3} cross {c};", mode.name());
        }
        note(&format!("{line} ({:.0}s)", start.elapsed().as_secs_f64()));
    }
    let [ce3, ce4, hb] = f1;
    let pass = hb >= ce4 - 0.02 && ce4 >= ce3 - 0.02 && cross[2] <= cross[1];
    report(
        8,
        "scaled subtyping F1 ordering and cross-subtype confusion",
        pass,
        &format!(
            "mean WSI macro F1 ce_3class {ce3:.4}, ce_4class {ce4:.4}, hybrid_4class {hb:.4}; cross-subtype patches ce_4class {}, hybrid_4class {}; {:.0}s",
            cross[1],
            cross[2],
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
