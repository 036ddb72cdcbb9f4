use std::sync::Arc;

use super::*;
use crate::nn::ModelSpec;
use crate::patching::{build_detection_dataset, DatasetConfig, FilterParams, PatchGeometry, SlideInput};
use crate::slide_io::{generate_synthetic_slide, SlideRecord, SlideSource, Split, Subtype, SyntheticSlideSpec};

struct Fixture {
    dataset: DetectionDataset,
    store: PatchStore,
    slides: Vec<Arc<crate::slide_io::SyntheticSlide>>,
}

fn fixture() -> Fixture {
    let splits = [Split::Training, Split::Training, Split::Extension, Split::Validation];
    let mut records = Vec::new();
    let mut slides = Vec::new();
    for (i, split) in splits.iter().enumerate() {
        let mut spec = SyntheticSlideSpec::new(format!("d{i}"), 384, 384, Subtype::Papillary, 40 + i as u64);
        spec.num_regions = 2;
        spec.region_radius = [50, 90];
        slides.push(Arc::new(generate_synthetic_slide(&spec).unwrap()));
        records.push(SlideRecord {
            slide_id: format!("d{i}"),
            diagnosis: Subtype::Papillary,
            split: *split,
            points_path: None,
            regions_path: None,
        });
    }
    let inputs: Vec<SlideInput<'_>> = records
        .iter()
        .zip(&slides)
        .map(|(r, s)| SlideInput {
            record: r,
            source: s.as_ref(),
            points: Some(s.suggested_points()),
            regions: Some(s.regions()),
        })
        .collect();
    let cfg = DatasetConfig {
        geometry: PatchGeometry::new(32, 16).unwrap(),
        ..Default::default()
    };
    let dataset = build_detection_dataset(&inputs, &cfg).unwrap();
    let mut store = PatchStore::new();
    for s in &slides {
        store.insert(s.clone());
    }
    Fixture { dataset, store, slides }
}

fn train_cfg(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 8,
        unlabeled_batch_size: 16,
        seed: 3,
        ..Default::default()
    }
}

fn spec() -> ModelSpec {
    ModelSpec::small_cnn(2, 16, 11)
}

#[test]
fn labeled_only_without_labels_is_error() {
    let f = fixture();
    let mut inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    inputs.labeled = PatchSet::empty(16);
    let err = train_detector(&inputs, &spec(), &train_cfg(Mode::LabeledOnly, 1), &SslConfig::default());
    assert!(matches!(err, Err(Error::Empty(_))));
}

#[test]
fn ssl_without_unlabeled_is_error() {
    let f = fixture();
    let mut inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    inputs.unlabeled = PatchSet::empty(16);
    assert!(train_detector(&inputs, &spec(), &train_cfg(Mode::Ssl, 1), &SslConfig::default()).is_err());
}

#[test]
fn ssl_smoke_run_reduces_loss_and_is_reproducible() {
    let f = fixture();
    let inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    let cfg = train_cfg(Mode::Ssl, 5);
    let a = train_detector(&inputs, &spec(), &cfg, &SslConfig::default()).unwrap();
    let h = &a.history;
    assert_eq!(h.len(), 5);
    assert!(h[4].train_loss < h[0].train_loss, "{h:?}");
    let b = train_detector(&inputs, &spec(), &cfg, &SslConfig::default()).unwrap();
    assert_eq!(a.history[0].train_loss, b.history[0].train_loss);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.weights_to_bytes(), b.model.weights_to_bytes());
}

#[test]
fn first_ssl_step_has_zero_unlabeled_weight() {
    let f = fixture();
    let inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    let mut cfg = train_cfg(Mode::Ssl, 1);
    // one step per epoch
    cfg.unlabeled_batch_size = inputs.unlabeled.len();
    let ck = train_detector(&inputs, &spec(), &cfg, &SslConfig::default()).unwrap();
    assert_eq!(ck.history[0].lambda, 0.0);
}

#[test]
fn finetune_with_no_signal_leaves_weights() {
    let f = fixture();
    let inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    let base = Checkpoint::new(build_model(&spec()).unwrap(), "ssl", &train_cfg(Mode::Ssl, 1), None, 0, Vec::new());
    let before = base.model.weights_to_bytes();
    let mut cfg = train_cfg(Mode::SslFinetune, 1);
    cfg.finetune_keep_labeled = false;
    cfg.finetune_epochs = 2;
    let ssl = SslConfig {
        finetune_lambda: 0.0,
        ..Default::default()
    };
    let tuned = finetune_detector(base, &inputs, &cfg, &ssl).unwrap();
    assert_eq!(tuned.model.weights_to_bytes(), before);
    assert_eq!(tuned.meta.phase, "ssl_finetune");
    assert_eq!(tuned.history.len(), 2);
}

#[test]
fn finetune_defaults_to_five_epochs_and_needs_extension() {
    assert_eq!(TrainConfig::default().finetune_epochs, 5);
    let f = fixture();
    let mut inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    inputs.extension = PatchSet::empty(16);
    let base = Checkpoint::new(build_model(&spec()).unwrap(), "ssl", &train_cfg(Mode::Ssl, 1), None, 0, Vec::new());
    assert!(finetune_detector(base, &inputs, &train_cfg(Mode::SslFinetune, 1), &SslConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let f = fixture();
    let inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    let mut ck = train_detector(&inputs, &spec(), &train_cfg(Mode::LabeledOnly, 2), &SslConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let mut loaded = Checkpoint::load(dir.path()).unwrap();
    let records: Vec<_> = f.dataset.training.records().iter().take(100).cloned().collect();
    let a = predict_patches(&mut ck, &f.store, &records).unwrap();
    let b = predict_patches(&mut loaded, &f.store, &records).unwrap();
    assert_eq!(a, b);
    assert_eq!(loaded.history, ck.history);
    assert_eq!(loaded.meta, ck.meta);
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
}

#[test]
fn predictions_are_ordered_simplex_rows() {
    let f = fixture();
    let mut net = build_model(&spec()).unwrap();
    let mut records: Vec<_> = f.dataset.validation.records().iter().take(5).cloned().collect();
    records.push(records[0].clone());
    let p = predict_patches(&mut net, &f.store, &records).unwrap();
    assert_eq!(p.len(), 6);
    assert_eq!(p[0], p[5]);
    for row in &p {
        assert!((row.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

struct FixedLogits(Vec<f64>);

impl ProbModel for FixedLogits {
    fn num_classes(&self) -> usize {
        self.0.len()
    }
    fn input_size(&self) -> usize {
        16
    }
    fn predict_proba(&mut self, x: &Tensor) -> Result<Vec<ProbVector>> {
        Ok((0..x.dim(0)).map(|_| ProbVector::from_logits(&self.0)).collect())
    }
}

#[test]
fn stub_model_gives_analytic_softmax() {
    let f = fixture();
    let mut m = FixedLogits(vec![0.0, 2.0_f64.ln()]);
    let p = predict_patches(&mut m, &f.store, &f.dataset.validation.records()[..2]).unwrap();
    assert!((p[0][1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn hitmap_dimensions_and_background() {
    let f = fixture();
    let mut m = FixedLogits(vec![0.0, 0.0]);
    let geometry = PatchGeometry::new(32, 16).unwrap();
    let hm = generate_hitmap(f.slides[0].as_ref(), &mut m, geometry, 48, &FilterParams::default()).unwrap();
    assert_eq!((hm.rows, hm.cols), (384 / 48, 384 / 48));
    assert!(hm.values.contains(&0.5));
    assert_eq!(hm.overlay().dimensions(), (8 * 8, 8 * 8));

    let mut white = SyntheticSlideSpec::new("white", 128, 96, Subtype::Clear, 0);
    white.tissue_fraction = 0.0;
    white.num_regions = 0;
    let white = generate_synthetic_slide(&white).unwrap();
    let hm = generate_hitmap(&white, &mut m, geometry, 32, &FilterParams::default()).unwrap();
    assert_eq!((hm.rows, hm.cols), (3, 4));
    assert!(hm.values.iter().all(|v| v.is_nan()));
    assert!(hm.to_csv(None).starts_with("NaN,NaN,NaN,NaN\n"));
}

#[test]
fn non_finite_loss_aborts() {
    let f = fixture();
    let mut inputs = DetectorInputs::load(&f.dataset, &f.store).unwrap();
    inputs.labeled.x.data_mut()[0] = f32::NAN;
    let r = train_detector(&inputs, &spec(), &train_cfg(Mode::LabeledOnly, 1), &SslConfig::default());
    assert!(matches!(r, Err(Error::NonFiniteLoss { .. })), "{r:?}");
}

#[test]
fn slide_source_trait_object_is_usable() {
    let f = fixture();
    let s: &dyn SlideSource = f.slides[1].as_ref();
    assert_eq!(s.width(), 384);
}
