//! Runs the command-line pipeline twice with one seed and compares every
//! artifact byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use crate::common::{note, report};

const CONFIG: &str = r#"
seed = 21

[synth]
width = 512
height = 512
num_regions = 2
region_radius = [50, 100]

[synth.per_subtype]
training = 1
extension = 1
validation = 1
test = 1

[patching.geometry]
src_size = 64
out_size = 16

[detector]
mode = "ssl_finetune"
epochs = 2
finetune_epochs = 1
batch_size = 8
unlabeled_batch_size = 16

[subtyper]
epochs = 2
batch_size = 16

[subtype]
mode = "hybrid_4class"
"#;

const STAGES: [&str; 9] = [
    "synth",
    "patch",
    "train-detector",
    "finetune",
    "hitmap",
    "gen-labels",
    "train-subtyper",
    "predict-slides",
    "evaluate",
];

fn run_pipeline(root: &Path) {
    std::fs::write(root.join("exp.toml"), CONFIG).unwrap();
    for stage in STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_minpoint"))
            .arg(stage)
            .arg("--config")
            .arg(root.join("exp.toml"))
            .arg("--out")
            .arg(root.join("exp"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn a9_pipeline_reproducible() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path());
    run_pipeline(b.path());
    let fa = files(&a.path().join("exp"));
    let fb = files(&b.path().join("exp"));
    let mut differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    differing.dedup();
    let count = |pred: &dyn Fn(&Path) -> bool| fa.keys().filter(|k| pred(k)).count();
    let manifests = count(&|p| p.ends_with("MANIFEST.json"));
    let weights = count(&|p| p.extension().is_some_and(|e| e == "bin"));
    note(&format!(
        "{} files compared: {manifests} stage manifests, {weights} weight files",
        fa.len()
    ));
    let pass = differing.is_empty() && manifests == STAGES.len();
    report(
        9,
        "pipeline reproducibility",
        pass,
        &if differing.is_empty() {
            format!("all {} artifacts identical across two runs; {:.0}s", fa.len(), start.elapsed().as_secs_f64())
        } else {
            format!("{} differing files, e.g. {:?}", differing.len(), &differing[..differing.len().min(5)])
        },
    );
    assert!(pass);
}
