//! One function per CLI command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::exp::Experiment;
use crate::detector::{
    finetune_detector, generate_hitmap, predict_manifest, train_detector, Checkpoint, DetectorInputs, Mode, PatchSet,
};
use crate::metrics::{write_report, EvalBlock, EvalReport};
use crate::nn::ProbModel;
use crate::patching::{
    build_detection_dataset, build_subtyping_dataset, DetectionDataset, ManifestMeta, PatchLabel, PatchManifest,
    PatchRecord, PatchStore, SlideInput,
};
use crate::slide_io::{
    generate_synthetic_slide, load_point_annotations, load_region_annotations, open_slide, save_point_annotations,
    save_region_annotations, sidecar_path, AnnotationSet, RegionAnnotation, SlideMetadata, SlideRecord, SlideSource,
    Split, Subtype, SyntheticSlideSpec,
};
use crate::subtyping::{
    evidential_overlay, generate_subtype_labels, predict_slide, train_subtyper, write_slide_outputs, SlideVerdict,
    SubtypeMode,
};
use crate::{Error, Result};

pub const REGISTRY: &str = "slides.json";
const DETECTION_SETS: [&str; 5] = ["training", "extension", "validation", "test", "supervised"];

/// Everything a command needs: the validated config, the locked experiment
/// directory and the overwrite flag.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub exp: Experiment,
    pub force: bool,
    hash: String,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Context> {
        cfg.validate()?;
        let exp = Experiment::open(&cfg.paths.out)?;
        let hash = cfg.hash();
        Ok(Context { cfg, exp, force, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn header(&self) -> String {
        format!("{} config={}", crate::CODE_VERSION, self.hash)
    }

    fn header_json(&self) -> serde_json::Value {
        serde_json::json!({ "code_version": crate::CODE_VERSION, "config_hash": self.hash })
    }

    /// Starts a stage: clears its directory and records the effective config.
    fn begin(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.exp.begin_stage(stage, self.force)?;
        write(&dir.join("config.toml"), &self.cfg.content_view().to_toml())?;
        Ok(dir)
    }

    fn finish(&self, stage: &str, log: &StageLog, upstream: &[&str]) -> Result<()> {
        let dir = self.exp.stage_dir(stage);
        write(&dir.join("log.txt"), &format!("# {}\n{}", self.header(), log.0))?;
        self.exp.finish_stage(stage, &self.hash, self.cfg.seed, upstream)?;
        Ok(())
    }

    /// Stage whose checkpoints feed the hit-maps and subtype labels.
    fn detector_stage(&self) -> &'static str {
        if self.cfg.detector.mode == Mode::SslFinetune {
            "finetune"
        } else {
            "detector"
        }
    }

    /// The slide directory is a stage of this experiment when it was made by
    /// `synth` here.
    fn slides_upstream(&self) -> Vec<&'static str> {
        if self.cfg.slides_dir() == self.exp.stage_dir("synth") {
            vec!["synth"]
        } else {
            Vec::new()
        }
    }
}

/// Deterministic per-stage log written next to the outputs.
#[derive(Default)]
struct StageLog(String);

impl StageLog {
    fn line(&mut self, msg: impl AsRef<str>) {
        log::info!("{}", msg.as_ref());
        self.0.push_str(msg.as_ref());
        self.0.push('\n');
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_manifest(path: &Path) -> Result<PatchManifest> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    PatchManifest::read_jsonl(path)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRegistry {
    pub code_version: String,
    pub config_hash: String,
    pub slides: Vec<SlideRecord>,
}

/// Slides of an experiment with their annotations, loaded into memory.
pub struct Slides {
    pub records: Vec<SlideRecord>,
    pub sources: BTreeMap<String, Arc<dyn SlideSource>>,
    pub points: BTreeMap<String, AnnotationSet>,
    pub regions: BTreeMap<String, RegionAnnotation>,
}

impl Slides {
    pub fn load(dir: &Path) -> Result<Slides> {
        let registry: SlideRegistry = read_json(&dir.join(REGISTRY))?;
        let mut sources = BTreeMap::new();
        let mut points = BTreeMap::new();
        let mut regions = BTreeMap::new();
        for r in &registry.slides {
            let path = ["png", "tif", "tiff"]
                .iter()
                .map(|ext| dir.join(format!("{}.{ext}", r.slide_id)))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::SlideNotFound(dir.join(format!("{}.png", r.slide_id))))?;
            let slide = open_slide(&path)?;
            let dims = Some(slide.dims());
            let annotation = |rel: &str| {
                let p = dir.join(rel);
                if p.is_file() {
                    Ok(p)
                } else {
                    Err(Error::MissingArtifact(format!("annotation file {}", p.display())))
                }
            };
            if let Some(rel) = &r.points_path {
                points.insert(r.slide_id.clone(), load_point_annotations(&annotation(rel)?, dims)?);
            }
            if let Some(rel) = &r.regions_path {
                regions.insert(r.slide_id.clone(), load_region_annotations(&annotation(rel)?, dims)?);
            }
            sources.insert(r.slide_id.clone(), Arc::new(slide) as Arc<dyn SlideSource>);
        }
        Ok(Slides {
            records: registry.slides,
            sources,
            points,
            regions,
        })
    }

    pub fn store(&self) -> PatchStore {
        let mut store = PatchStore::new();
        for s in self.sources.values() {
            store.insert(s.clone());
        }
        store
    }

    fn inputs(&self, keep: impl Fn(&SlideRecord) -> bool) -> Vec<SlideInput<'_>> {
        self.records
            .iter()
            .filter(|r| keep(r))
            .map(|r| SlideInput {
                record: r,
                source: self.sources[&r.slide_id].as_ref(),
                points: self.points.get(&r.slide_id),
                regions: self.regions.get(&r.slide_id),
            })
            .collect()
    }

    pub fn diagnosis(&self, slide_id: &str) -> Option<Subtype> {
        self.records.iter().find(|r| r.slide_id == slide_id).map(|r| r.diagnosis)
    }

    /// Subtypes with at least one training slide, in label order.
    pub fn detection_subtypes(&self) -> Vec<Subtype> {
        Subtype::ALL
            .into_iter()
            .filter(|s| self.records.iter().any(|r| r.diagnosis == *s && r.split == Split::Training))
            .collect()
    }
}

fn mix_seed(base: u64, i: u64) -> u64 {
    let h = crate::config_hash(&(base, i));
    u64::from_str_radix(&h[..16], 16).expect("hex prefix")
}

/// Generates the synthetic slides, ground-truth regions and suggested point
/// annotations.
pub fn cmd_synth(ctx: &Context) -> Result<()> {
    let s = &ctx.cfg.synth;
    let count = s.subtypes.len() * s.per_subtype.total();
    if count == 0 {
        return Err(Error::Config("synthetic dataset spec has no slides".into()));
    }
    let dir = ctx.begin("synth")?;
    let mut log = StageLog::default();
    let base = ctx.cfg.stage_seed("synth");
    let mut records = Vec::new();
    let splits = [
        (Split::Training, s.per_subtype.training),
        (Split::Extension, s.per_subtype.extension),
        (Split::Validation, s.per_subtype.validation),
        (Split::Test, s.per_subtype.test),
    ];
    for &subtype in &s.subtypes {
        for (split, n) in splits {
            for k in 0..n {
                let id = format!("{}_{}_{k:02}", subtype.tag(), split.name());
                let mut spec = SyntheticSlideSpec::new(&id, s.width, s.height, subtype, mix_seed(base, records.len() as u64));
                spec.num_regions = s.num_regions;
                spec.region_radius = s.region_radius;
                spec.points_per_class = s.points_per_class;
                spec.texture_scale = s.texture_scale;
                let slide = generate_synthetic_slide(&spec)?;
                let png = dir.join(format!("{id}.png"));
                slide.render().save(&png)?;
                write_json(&sidecar_path(&png), &SlideMetadata { base_magnification: spec.base_magnification })?;
                write_json(&dir.join(format!("{id}.spec.json")), &spec)?;
                save_point_annotations(slide.suggested_points(), &dir.join(format!("{id}.points.json")))?;
                save_region_annotations(slide.regions(), &dir.join(format!("{id}.regions.json")))?;
                log.line(format!(
                    "{id}: {subtype} {split} {}x{} regions={} points={}",
                    s.width,
                    s.height,
                    slide.regions().polygons.len(),
                    slide.suggested_points().len()
                ));
                records.push(SlideRecord {
                    slide_id: id.clone(),
                    diagnosis: subtype,
                    split,
                    points_path: Some(format!("{id}.points.json")),
                    regions_path: Some(format!("{id}.regions.json")),
                });
            }
        }
    }
    write_json(
        &dir.join(REGISTRY),
        &SlideRegistry {
            code_version: crate::CODE_VERSION.into(),
            config_hash: ctx.hash.clone(),
            slides: records,
        },
    )?;
    log.line(format!("{count} slides written"));
    ctx.finish("synth", &log, &[])
}

fn detection_dir(tag: &str) -> String {
    format!("detect_{tag}")
}

/// Builds detection manifests per subtype and the subtype-classifier
/// manifests, and prints the split summary.
pub fn cmd_patch(ctx: &Context) -> Result<String> {
    let upstream = ctx.slides_upstream();
    for u in &upstream {
        ctx.exp.require(u)?;
    }
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let dir = ctx.begin("patch")?;
    let mut log = StageLog::default();
    let mut summary = String::new();
    let mut cfg = ctx.cfg.patching.clone();
    cfg.seed = ctx.cfg.seed;
    for subtype in slides.detection_subtypes() {
        let ds = build_detection_dataset(&slides.inputs(|r| r.diagnosis == subtype), &cfg)?;
        let sub = dir.join(detection_dir(subtype.tag()));
        for (name, m) in ds.manifests() {
            write(&sub.join(format!("{name}.jsonl")), &m.to_jsonl())?;
        }
        let table = ds.summary(&format!("{} Detection", subtype.name()));
        // one header row is enough for the combined table
        if summary.is_empty() {
            summary.push_str(&table);
        } else {
            summary.push_str(table.lines().nth(1).unwrap_or_default());
            summary.push('\n');
        }
    }
    let st = build_subtyping_dataset(&slides.inputs(|_| true), &cfg)?;
    for (name, m) in [("training", &st.training), ("validation", &st.validation), ("test", &st.test)] {
        write(&dir.join("subtype").join(format!("{name}.jsonl")), &m.to_jsonl())?;
    }
    let _ = writeln!(
        summary,
        "{:<20}| {:<22}| {:<16}| {:<16}| {:<16}",
        "Subtyping",
        format!("{} ({})", st.training.slide_ids().len(), st.training.len()),
        "-",
        format!("{} ({})", st.validation.slide_ids().len(), st.validation.len()),
        format!("{} ({})", st.test.slide_ids().len(), st.test.len()),
    );
    write(&dir.join("summary.txt"), &format!("# {}\n{summary}", ctx.header()))?;
    for line in summary.lines() {
        log.line(line);
    }
    ctx.finish("patch", &log, &upstream)?;
    Ok(summary)
}

fn detection_dataset(ctx: &Context, tag: &str) -> Result<DetectionDataset> {
    let dir = ctx.exp.stage_dir("patch").join(detection_dir(tag));
    let m = |name: &str| read_manifest(&dir.join(format!("{name}.jsonl")));
    Ok(DetectionDataset {
        training: m(DETECTION_SETS[0])?,
        extension: m(DETECTION_SETS[1])?,
        validation: m(DETECTION_SETS[2])?,
        test: m(DETECTION_SETS[3])?,
        supervised: m(DETECTION_SETS[4])?,
    })
}

fn detector_train_config(ctx: &Context, tag: &str) -> crate::detector::TrainConfig {
    let mut train = ctx.cfg.detector.clone();
    train.seed = ctx.cfg.stage_seed(&format!("detector/{tag}"));
    train
}

/// Trains one binary detector per subtype with the configured mode. For
/// `ssl_finetune` this is the initial SSL phase; `finetune` completes it.
pub fn cmd_train_detector(ctx: &Context) -> Result<()> {
    ctx.exp.require("patch")?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let store = slides.store();
    let dir = ctx.begin("detector")?;
    let mut log = StageLog::default();
    for subtype in slides.detection_subtypes() {
        let tag = subtype.tag();
        let inputs = DetectorInputs::load(&detection_dataset(ctx, tag)?, &store)?;
        let mut train = detector_train_config(ctx, tag);
        if train.mode == Mode::SslFinetune {
            train.mode = Mode::Ssl;
        }
        let spec = ctx.cfg.model_spec(2, train.seed);
        log.line(format!(
            "{tag}: mode {} labeled {} unlabeled {} supervised {} validation {}",
            train.mode.name(),
            inputs.labeled.len(),
            inputs.unlabeled.len(),
            inputs.supervised.len(),
            inputs.validation.len()
        ));
        let ck = train_detector(&inputs, &spec, &train, &ctx.cfg.ssl)?;
        log.line(format!("{tag}: best epoch {} of {}", ck.meta.best_epoch, ck.history.len()));
        ck.save(&dir.join(tag))?;
    }
    ctx.finish("detector", &log, &["patch"])
}

/// Fine-tunes each SSL detector on its extension set.
pub fn cmd_finetune(ctx: &Context) -> Result<()> {
    ctx.exp.require("detector")?;
    ctx.exp.require("patch")?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let store = slides.store();
    let dir = ctx.begin("finetune")?;
    let mut log = StageLog::default();
    for subtype in slides.detection_subtypes() {
        let tag = subtype.tag();
        let ck = load_checkpoint(&ctx.exp.stage_dir("detector").join(tag))?;
        if ck.meta.phase != Mode::Ssl.name() {
            return Err(Error::Config(format!(
                "{tag} detector was trained in phase '{}'; fine-tuning needs an ssl checkpoint",
                ck.meta.phase
            )));
        }
        let inputs = DetectorInputs::load(&detection_dataset(ctx, tag)?, &store)?;
        let train = detector_train_config(ctx, tag);
        let ck = finetune_detector(ck, &inputs, &train, &ctx.cfg.ssl)?;
        log.line(format!("{tag}: extension {} best epoch {}", inputs.extension.len(), ck.meta.best_epoch));
        ck.save(&dir.join(tag))?;
    }
    ctx.finish("finetune", &log, &["detector", "patch"])
}

fn load_detectors(ctx: &Context, slides: &Slides) -> Result<BTreeMap<Subtype, Checkpoint>> {
    let stage = ctx.detector_stage();
    let mut out = BTreeMap::new();
    for s in slides.detection_subtypes() {
        out.insert(s, load_checkpoint(&ctx.exp.stage_dir(stage).join(s.tag()))?);
    }
    Ok(out)
}

/// Hit-maps for validation and test slides, scored by their subtype's
/// detector.
pub fn cmd_hitmap(ctx: &Context) -> Result<()> {
    let stage = ctx.detector_stage();
    ctx.exp.require(stage)?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let mut detectors = load_detectors(ctx, &slides)?;
    let dir = ctx.begin("hitmap")?;
    let mut log = StageLog::default();
    let geometry = ctx.cfg.patching.geometry;
    let stride = ctx.cfg.hitmap.stride.unwrap_or(geometry.src_size);
    for r in slides.records.iter().filter(|r| matches!(r.split, Split::Validation | Split::Test)) {
        let Some(model) = detectors.get_mut(&r.diagnosis) else {
            log.line(format!("{}: no {} detector, skipped", r.slide_id, r.diagnosis));
            continue;
        };
        let map = generate_hitmap(
            slides.sources[&r.slide_id].as_ref(),
            model,
            geometry,
            stride,
            &ctx.cfg.patching.filter,
        )?;
        map.write_csv(&dir.join(format!("{}.csv", r.slide_id)), Some(&ctx.header()))?;
        map.overlay().save(dir.join(format!("{}.png", r.slide_id)))?;
        log.line(format!("{}: {}x{} cells", r.slide_id, map.rows, map.cols));
    }
    ctx.finish("hitmap", &log, &[stage])
}

/// Labels the subtype training patches with the per-subtype detectors.
pub fn cmd_gen_labels(ctx: &Context) -> Result<()> {
    let stage = ctx.detector_stage();
    ctx.exp.require(stage)?;
    ctx.exp.require("patch")?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let store = slides.store();
    let manifest = read_manifest(&ctx.exp.stage_dir("patch").join("subtype/training.jsonl"))?;
    let mut detectors = load_detectors(ctx, &slides)?;
    let mut refs: BTreeMap<Subtype, &mut dyn ProbModel> =
        detectors.iter_mut().map(|(s, c)| (*s, c as &mut dyn ProbModel)).collect();
    let dir = ctx.begin("labels")?;
    let mut log = StageLog::default();
    let mut records = Vec::new();
    let mut probs = Vec::new();
    // per slide keeps memory bounded on large sets
    for id in manifest.slide_ids() {
        let recs: Vec<PatchRecord> = manifest.records().iter().filter(|r| r.slide_id == id).cloned().collect();
        let set = PatchSet::load(&store, &recs)?;
        let g = generate_subtype_labels(&mut refs, &set, ctx.cfg.subtype.detector_threshold)?;
        records.extend(g.records);
        probs.extend(g.cancer_probs);
    }
    let mut meta: ManifestMeta = manifest.meta.clone();
    meta.name = "subtype-labels".into();
    let out = PatchManifest::new(meta, records.clone());
    write(&dir.join("training.jsonl"), &out.to_jsonl())?;
    let mut csv = format!("# {}\nslide_id,x,y,label,cancer_prob\n", ctx.header());
    for (r, p) in records.iter().zip(&probs) {
        let label = serde_json::to_value(r.label)?;
        let _ = writeln!(csv, "{},{},{},{},{p}", r.slide_id, r.x, r.y, label.as_str().unwrap_or_default());
    }
    write(&dir.join("cancer_probs.csv"), &csv)?;
    let counts: Vec<String> = [PatchLabel::Normal, PatchLabel::Clear, PatchLabel::Papillary, PatchLabel::Chromophobe]
        .iter()
        .map(|l| format!("{}={}", serde_json::to_value(l).unwrap().as_str().unwrap_or_default(), out.count_label(*l)))
        .collect();
    log.line(format!("{} patches: {}", out.len(), counts.join(" ")));
    ctx.finish("labels", &log, &[stage, "patch"])
}

/// Trains the subtype classifier. `ce_3class` uses slide diagnoses only;
/// the four-class modes use the generated labels.
pub fn cmd_train_subtyper(ctx: &Context) -> Result<()> {
    let mode = ctx.cfg.subtype.mode;
    let upstream: Vec<&str> = if mode == SubtypeMode::Ce3class { vec!["patch"] } else { vec!["labels", "patch"] };
    for u in &upstream {
        ctx.exp.require(u)?;
    }
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let store = slides.store();
    let train_path = if mode == SubtypeMode::Ce3class {
        ctx.exp.stage_dir("patch").join("subtype/training.jsonl")
    } else {
        ctx.exp.stage_dir("labels").join("training.jsonl")
    };
    let out = ctx.cfg.patching.geometry.out_size as usize;
    let train_set = PatchSet::from_manifest(&store, &read_manifest(&train_path)?, out)?;
    let val_manifest = read_manifest(&ctx.exp.stage_dir("patch").join("subtype/validation.jsonl"))?;
    let val_set = PatchSet::from_manifest(&store, &val_manifest, out)?;
    let dir = ctx.begin("subtyper")?;
    let mut log = StageLog::default();
    let mut train = ctx.cfg.subtyper.clone();
    train.seed = ctx.cfg.stage_seed("subtyper");
    let spec = ctx.cfg.model_spec(mode.num_classes(), train.seed);
    log.line(format!("{}: train {} validation {}", mode.name(), train_set.len(), val_set.len()));
    let ck = train_subtyper(&train_set, &val_set, &spec, &ctx.cfg.subtype, &train)?;
    log.line(format!("best epoch {} of {}", ck.meta.best_epoch, ck.history.len()));
    ck.save(&dir)?;
    ctx.finish("subtyper", &log, &upstream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePredictions {
    pub code_version: String,
    pub config_hash: String,
    pub mode: SubtypeMode,
    pub slides: Vec<SlideVerdict>,
}

/// Predicts every test slide and writes its verdict, evidential map and
/// overlay.
pub fn cmd_predict_slides(ctx: &Context) -> Result<()> {
    ctx.exp.require("subtyper")?;
    ctx.exp.require("patch")?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let store = slides.store();
    let mut ck = load_checkpoint(&ctx.exp.stage_dir("subtyper"))?;
    let mode: SubtypeMode = serde_json::from_value(ck.meta.extra["mode"].clone())?;
    let test = read_manifest(&ctx.exp.stage_dir("patch").join("subtype/test.jsonl"))?;
    let dir = ctx.begin("predict")?;
    let mut log = StageLog::default();
    let window = ctx.cfg.patching.geometry.src_size;
    let mut verdicts = Vec::new();
    for id in test.slide_ids() {
        let recs: Vec<PatchRecord> = test.records().iter().filter(|r| r.slide_id == id).cloned().collect();
        let (pred, evidence) = predict_slide(&mut ck, &store, &recs, mode.has_normal())?;
        let src = &slides.sources[id];
        let overlay = evidential_overlay(&evidence, window, src.width(), src.height(), (window / 4).max(1), mode.has_normal());
        write_slide_outputs(&dir, &pred, &evidence, &overlay, &ctx.header_json())?;
        log.line(format!(
            "{id}: {} votes {:?}{}{}",
            pred.subtype,
            pred.votes,
            if pred.tie { " (tie)" } else { "" },
            if pred.fallback { " (all normal)" } else { "" }
        ));
        verdicts.push(pred.verdict());
    }
    write_json(
        &dir.join("predictions.json"),
        &SlidePredictions {
            code_version: crate::CODE_VERSION.into(),
            config_hash: ctx.hash.clone(),
            mode,
            slides: verdicts,
        },
    )?;
    ctx.finish("predict", &log, &["subtyper", "patch"])
}

const SUBTYPE_NAMES: [&str; 3] = ["ccRCC", "pRCC", "chRCC"];
const FOUR_CLASS_NAMES: [&str; 4] = ["normal", "ccRCC", "pRCC", "chRCC"];

/// WSI-wise three-class metrics of slide verdicts against diagnoses.
pub fn evaluate_slides(verdicts: &[SlideVerdict], truth: &BTreeMap<String, Subtype>) -> Result<EvalBlock> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for v in verdicts {
        let t = truth
            .get(&v.slide_id)
            .ok_or_else(|| Error::MissingArtifact(format!("no diagnosis for slide {}", v.slide_id)))?;
        preds.push(v.subtype.class_index() - 1);
        labels.push(t.class_index() - 1);
    }
    EvalBlock::new(&SUBTYPE_NAMES, &preds, &labels)
}

#[derive(Deserialize)]
struct EvidenceLine {
    x: u32,
    y: u32,
    class: usize,
}

fn read_evidence(path: &Path) -> Result<Vec<EvidenceLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // first line is the header
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Slide-level and patch-level subtype metrics, plus per-subtype detection
/// AUC on the test manifests when detectors exist.
pub fn cmd_evaluate(ctx: &Context) -> Result<EvalReport> {
    ctx.exp.require("predict")?;
    ctx.exp.require("patch")?;
    let slides = Slides::load(&ctx.cfg.slides_dir())?;
    let preds: SlidePredictions = read_json(&ctx.exp.stage_dir("predict").join("predictions.json"))?;
    let truth: BTreeMap<String, Subtype> = slides.records.iter().map(|r| (r.slide_id.clone(), r.diagnosis)).collect();
    let mut report = EvalReport::new(format!("subtyping_{}", preds.mode.name()), ctx.hash.clone())
        .with_block("wsi", evaluate_slides(&preds.slides, &truth)?);

    let test = read_manifest(&ctx.exp.stage_dir("patch").join("subtype/test.jsonl"))?;
    let label_of: BTreeMap<(&str, u32, u32), PatchLabel> =
        test.records().iter().map(|r| ((r.slide_id.as_str(), r.x, r.y), r.label)).collect();
    let has_normal = preds.mode.has_normal();
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for v in &preds.slides {
        let path = ctx.exp.stage_dir("predict").join(format!("{}.evidence.jsonl", v.slide_id));
        for e in read_evidence(&path)? {
            let label = label_of
                .get(&(v.slide_id.as_str(), e.x, e.y))
                .and_then(|l| l.four_class())
                .ok_or_else(|| Error::MissingArtifact(format!("no label for patch ({}, {}) of {}", e.x, e.y, v.slide_id)))?;
            if has_normal {
                p.push(e.class);
                t.push(label);
            } else if label > 0 {
                // three-class models are scored on cancer patches only
                p.push(e.class);
                t.push(label - 1);
            }
        }
    }
    if !t.is_empty() {
        let names: &[&str] = if has_normal { &FOUR_CLASS_NAMES } else { &SUBTYPE_NAMES };
        report = report.with_block("patch", EvalBlock::new(names, &p, &t)?);
    }

    let mut upstream = vec!["predict", "patch"];
    let stage = ctx.detector_stage();
    if ctx.exp.has_stage(stage) {
        ctx.exp.require(stage)?;
        upstream.push(stage);
        let store = slides.store();
        for (s, mut ck) in load_detectors(ctx, &slides)? {
            let m = detection_dataset(ctx, s.tag())?.test;
            if m.is_empty() {
                continue;
            }
            let scores: Vec<f64> = predict_manifest(&mut ck, &store, &m)?.iter().map(|p| p[1]).collect();
            let labels: Vec<bool> = m.records().iter().map(|r| r.label == PatchLabel::Positive).collect();
            if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
                log::warn!("{} detection test set has a single class; AUC skipped", s.tag());
                continue;
            }
            report = report.with_block(format!("detect_{}", s.tag()), EvalBlock::binary(&scores, &labels)?);
        }
    }

    let dir = ctx.begin("evaluate")?;
    let mut log = StageLog::default();
    write_report(&report, &dir)?;
    for (name, b) in &report.blocks {
        let auc = b.auc.map(|a| format!(" auc {a:.4}")).unwrap_or_default();
        log.line(format!(
            "{name}: n={} macro_f1 {:.4} weighted_f1 {:.4} accuracy {:.4}{auc}",
            b.samples, b.metrics.macro_f1, b.metrics.weighted_f1, b.metrics.accuracy
        ));
    }
    ctx.finish("evaluate", &log, &upstream)?;
    Ok(report)
}
