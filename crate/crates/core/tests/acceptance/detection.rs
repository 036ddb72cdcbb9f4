//! Scaled detection comparison on synthetic slides: labeled-only, SSL
//! without fine-tuning, SSL with fine-tuning and fully supervised.

use std::time::Instant;

use minpoint::detector::{evaluate_auc, finetune_detector, train_detector, DetectorInputs, Mode, PatchSet, TrainConfig};
use minpoint::nn::ModelSpec;
use minpoint::patching::{build_detection_dataset, DatasetConfig, PatchGeometry, PatchStore, SlideInput};
use minpoint::slide_io::{generate_synthetic_slide, SlideRecord, Split, Subtype, SyntheticSlide, SyntheticSlideSpec};
use minpoint::ssl::SslConfig;

use crate::common::{note, report};

pub const SRC: u32 = 128;
pub const OUT: u32 = 32;

pub fn slide(id: &str, size: u32, subtype: Subtype, split: Split, seed: u64) -> (SlideRecord, SyntheticSlide) {
    let mut spec = SyntheticSlideSpec::new(id, size, size, subtype, seed);
    spec.num_regions = 3;
    spec.region_radius = [size / 10, size / 5];
    spec.points_per_class = 5;
    let record = SlideRecord {
        slide_id: id.to_string(),
        diagnosis: subtype,
        split,
        points_path: None,
        regions_path: None,
    };
    (record, generate_synthetic_slide(&spec).unwrap())
}

pub fn inputs<'a>(slides: &'a [(SlideRecord, SyntheticSlide)]) -> Vec<SlideInput<'a>> {
    slides
        .iter()
        .map(|(r, s)| SlideInput {
            record: r,
            source: s,
            points: Some(s.suggested_points()),
            regions: Some(s.regions()),
        })
        .collect()
}

pub fn store(slides: &[(SlideRecord, SyntheticSlide)]) -> PatchStore {
    let mut store = PatchStore::new();
    for (_, s) in slides {
        store.insert(std::sync::Arc::new(s.clone()));
    }
    store
}

pub fn dataset_config() -> DatasetConfig {
    DatasetConfig {
        geometry: PatchGeometry::new(SRC, OUT).unwrap(),
        ..DatasetConfig::default()
    }
}

fn train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 30,
        finetune_epochs: 5,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn a7_detection_ordering() {
    let start = Instant::now();
    let layout = [
        (Split::Training, 2),
        (Split::Extension, 5),
        (Split::Validation, 2),
        (Split::Test, 3),
    ];
    let mut slides = Vec::new();
    for (split, n) in layout {
        for k in 0..n {
            let i = slides.len() as u64;
            slides.push(slide(&format!("{}_{k}", split.name()), 2048, Subtype::Clear, split, 7000 + i));
        }
    }
    let ds = build_detection_dataset(&inputs(&slides), &dataset_config()).unwrap();
    let store = store(&slides);
    let data = DetectorInputs::load(&ds, &store).unwrap();
    let test = PatchSet::from_manifest(&store, &ds.test, OUT as usize).unwrap();
    note(&format!(
        "patches: labeled {} unlabeled {} extension {} supervised {} validation {} test {} ({:.0}s)",
        data.labeled.len(),
        data.unlabeled.len(),
        data.extension.len(),
        data.supervised.len(),
        data.validation.len(),
        test.len(),
        start.elapsed().as_secs_f64()
    ));

    let ssl = SslConfig::for_classes(2);
    let seeds = [0u64, 1, 2];
    let mut sums = [0.0f64; 4];
    for &seed in &seeds {
        let spec = ModelSpec::small_cnn(2, OUT as usize, seed);
        let auc = |ck: &mut minpoint::detector::Checkpoint| evaluate_auc(ck, &test).unwrap();
        let mut lo = train_detector(&data, &spec, &train_config(Mode::LabeledOnly, seed), &ssl).unwrap();
        let mut wof = train_detector(&data, &spec, &train_config(Mode::Ssl, seed), &ssl).unwrap();
        let a_lo = auc(&mut lo);
        let a_wof = auc(&mut wof);
        let mut ft = finetune_detector(wof, &data, &train_config(Mode::SslFinetune, seed), &ssl).unwrap();
        let a_ft = auc(&mut ft);
        let mut fs = train_detector(&data, &spec, &train_config(Mode::FullySupervised, seed), &ssl).unwrap();
        let a_fs = auc(&mut fs);
        note(&format!(
            "seed {seed}: labeled-only {a_lo:.4} ssl-wof {a_wof:.4} ssl+finetune {a_ft:.4} fully-supervised {a_fs:.4} ({:.0}s)",
            start.elapsed().as_secs_f64()
        ));
        for (s, a) in sums.iter_mut().zip([a_lo, a_wof, a_ft, a_fs]) {
            *s += a;
        }
    }
    let [lo, wof, ft, fs] = sums.map(|s| s / seeds.len() as f64);
    let pass = ft - wof >= -0.01 && wof - lo >= -0.01 && (ft - fs).abs() <= 0.10;
    report(
        7,
        "scaled detection AUC ordering",
        pass,
        &format!(
            "mean test AUC labeled-only {lo:.4}, ssl-wof {wof:.4}, ssl+finetune {ft:.4}, fully-supervised {fs:.4}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
